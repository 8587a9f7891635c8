"""Torus and box geometry, block coarse graining and the space-time lattice.

Conventions used throughout the package:

* ``TorusGeom(d, N)`` is the periodic cube of side ``2N``; a site is stored by
  its coordinate modulo ``2N`` and displayed in ``(-N, N]^d``.
* ``BoxGeom(d, N)`` is ``[-N, N]^d`` (side ``2N + 1``) with free, plus or minus
  boundary condition.
* Every geometry exposes ``n_sites`` and a neighbour table ``nbr`` of shape
  ``(n_sites, max_degree)`` padded with ``-1``.  Repeated entries encode
  parallel edges.  The kernels only ever see this table.
"""
from dataclasses import dataclass, field
from functools import cached_property
import itertools
import math

import numpy as np


def default_eps(d):
    """Time-to-space ratio of the space-time boxes, ``exp(-2 - log(2d))``."""
    return math.exp(-2.0 - math.log(2 * d))


def _as_index_array(sites, n):
    arr = np.unique(np.asarray(list(sites) if not isinstance(sites, np.ndarray) else sites,
                               dtype=np.int64))
    if arr.size and (arr[0] < 0 or arr[-1] >= n):
        raise ValueError("site index out of range")
    return arr


class TorusGeom:
    """Periodic hypercubic lattice of side ``2N`` in dimension ``d``."""

    def __init__(self, d, N):
        if d < 1 or N < 1:
            raise ValueError(f"torus needs d >= 1 and N >= 1, got d={d}, N={N}")
        self.d = int(d)
        self.N = int(N)
        self.side = 2 * self.N
        self.shape = (self.side,) * self.d
        self.n_sites = self.side ** self.d

    def __repr__(self):
        return f"TorusGeom(d={self.d}, N={self.N})"

    def __eq__(self, other):
        return isinstance(other, TorusGeom) and (self.d, self.N) == (other.d, other.N)

    def __hash__(self):
        return hash(("torus", self.d, self.N))

    def index(self, coords):
        c = np.mod(np.asarray(coords, dtype=np.int64), self.side)
        return np.ravel_multi_index(tuple(np.moveaxis(c, -1, 0)), self.shape)

    def coords(self, idx):
        """Coordinates in ``(-N, N]^d``; shape ``(..., d)``."""
        c = np.stack(np.unravel_index(np.asarray(idx, dtype=np.int64), self.shape), axis=-1)
        return np.where(c > self.N, c - self.side, c)

    @cached_property
    def nbr(self):
        # column order: +e_0, -e_0, +e_1, -e_1, ...
        c = np.stack(np.unravel_index(np.arange(self.n_sites), self.shape), axis=-1)
        cols = []
        for k in range(self.d):
            for s in (1, -1):
                shifted = c.copy()
                shifted[:, k] = (shifted[:, k] + s) % self.side
                cols.append(np.ravel_multi_index(tuple(shifted.T), self.shape))
        return np.ascontiguousarray(np.stack(cols, axis=1).astype(np.int64))

    @cached_property
    def bonds(self):
        """Nearest-neighbour bonds ``(i, i + e_k)``; doubled when the side is 2."""
        return np.ascontiguousarray(
            np.concatenate([np.stack([np.arange(self.n_sites), self.nbr[:, 2 * k]], axis=1)
                            for k in range(self.d)]).astype(np.int64))

    def box(self, center, radius):
        """Sites of ``B_radius(center)`` (``center`` a site index), deduplicated."""
        c0 = self.coords(center)
        offs = np.array(list(itertools.product(range(-radius, radius + 1), repeat=self.d)),
                        dtype=np.int64).reshape(-1, self.d)
        return np.unique(self.index(c0 + offs))

    def translate(self, sites, shift):
        return self.index(self.coords(np.asarray(sites)) + np.asarray(shift))

    def linf_dist(self, i, j):
        delta = np.abs(np.mod(self.coords(i) - self.coords(j), self.side))
        return np.max(np.minimum(delta, self.side - delta), axis=-1)


def make_torus(d, N):
    return TorusGeom(d, N)


class BoxGeom:
    """The box ``Lambda_N = [-N, N]^d`` with a boundary condition tag.

    ``bc`` is ``"free"``, ``"plus"`` or ``"minus"``.  Only the free bonds live in
    ``nbr``; the boundary enters the dynamics through :meth:`field`.
    """

    def __init__(self, d, N, bc="free"):
        if d < 1 or N < 0:
            raise ValueError(f"box needs d >= 1 and N >= 0, got d={d}, N={N}")
        if bc not in ("free", "plus", "minus"):
            raise ValueError(f"unknown boundary condition {bc!r}")
        self.d = int(d)
        self.N = int(N)
        self.bc = bc
        self.side = 2 * self.N + 1
        self.shape = (self.side,) * self.d
        self.n_sites = self.side ** self.d

    def __repr__(self):
        return f"BoxGeom(d={self.d}, N={self.N}, bc={self.bc!r})"

    def index(self, coords):
        c = np.asarray(coords, dtype=np.int64) + self.N
        if np.any((c < 0) | (c >= self.side)):
            raise ValueError("coordinates outside the box")
        return np.ravel_multi_index(tuple(np.moveaxis(c, -1, 0)), self.shape)

    def coords(self, idx):
        return np.stack(np.unravel_index(np.asarray(idx, dtype=np.int64), self.shape),
                        axis=-1) - self.N

    @property
    def origin(self):
        return int(self.index(np.zeros(self.d, dtype=np.int64)))

    @cached_property
    def _moves(self):
        c = self.coords(np.arange(self.n_sites))
        nb = np.full((self.n_sites, 2 * self.d), -1, dtype=np.int64)
        out = np.zeros(self.n_sites, dtype=np.int64)
        ext = []
        for k in range(self.d):
            for col, s in enumerate((1, -1)):
                shifted = c.copy()
                shifted[:, k] += s
                inside = np.abs(shifted[:, k]) <= self.N
                nb[inside, 2 * k + col] = self.index(shifted[inside])
                out += ~inside
                ext.extend((int(i), tuple(int(x) for x in shifted[i]))
                           for i in np.flatnonzero(~inside))
        return nb, out, ext

    @property
    def nbr(self):
        return self._moves[0]

    @property
    def n_outside(self):
        """Number of neighbours in ``Z^d`` outside the box, per site."""
        return self._moves[1]

    @cached_property
    def bonds(self):
        nb = self.nbr
        b = [(i, int(nb[i, 2 * k])) for k in range(self.d) for i in range(self.n_sites)
             if nb[i, 2 * k] >= 0]
        return np.array(b, dtype=np.int64).reshape(-1, 2)

    @cached_property
    def interior_boundary(self):
        return frozenset(np.flatnonzero(self.n_outside > 0).tolist())

    @cached_property
    def exterior_boundary(self):
        """Coordinates (tuples) of sites of ``Z^d`` outside the box adjacent to it."""
        return frozenset(c for _, c in self._moves[2])

    @cached_property
    def edge_boundary(self):
        """Pairs ``(inside index, outside coordinate)``."""
        return tuple(self._moves[2])

    def field(self, beta, h):
        """Per-site effective field with the boundary spins folded in."""
        s = {"free": 0.0, "plus": 1.0, "minus": -1.0}[self.bc]
        return h + beta * s * self.n_outside.astype(np.float64)


class GraphGeom:
    """A finite (multi)graph given by an edge list, for the kernels."""

    def __init__(self, n_sites, edges):
        self.n_sites = int(n_sites)
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= self.n_sites or np.any(e[:, 0] == e[:, 1])):
            raise ValueError("bad edge list")
        self.bonds = e
        deg = np.bincount(e.ravel(), minlength=self.n_sites) if e.size else np.zeros(self.n_sites, int)
        nb = np.full((self.n_sites, max(int(deg.max(initial=0)), 1)), -1, dtype=np.int64)
        fill = np.zeros(self.n_sites, dtype=np.int64)
        for a, b in e:
            nb[a, fill[a]] = b
            fill[a] += 1
            nb[b, fill[b]] = a
            fill[b] += 1
        self.nbr = nb

    def __repr__(self):
        return f"GraphGeom(n_sites={self.n_sites}, n_edges={len(self.bonds)})"


class CoarseLattice:
    """Blocks ``B_L(v)`` for centres ``v`` in ``((2L+1)Z)^d`` on a torus."""

    def __init__(self, geom, L):
        if L < 0:
            raise ValueError("block half-side must be >= 0")
        width = 2 * L + 1
        if geom.side % width:
            raise ValueError(f"torus side {geom.side} is not divisible by 2L+1={width}")
        self.geom = geom
        self.L = int(L)
        self.width = width
        self.m = geom.side // width
        self.d = geom.d
        self.shape = (self.m,) * self.d
        self.n_blocks = self.m ** self.d

    def __repr__(self):
        return f"CoarseLattice({self.geom!r}, L={self.L})"

    @cached_property
    def block_of(self):
        raw = np.stack(np.unravel_index(np.arange(self.geom.n_sites), self.geom.shape), axis=-1)
        j = ((raw + self.L) // self.width) % self.m
        return np.ravel_multi_index(tuple(j.T), self.shape).astype(np.int64)

    def block_coords(self, b):
        return np.stack(np.unravel_index(np.asarray(b, dtype=np.int64), self.shape), axis=-1)

    def block_index(self, jc):
        return np.ravel_multi_index(tuple(np.moveaxis(np.mod(np.asarray(jc), self.m), -1, 0)),
                                    self.shape)

    def center(self, b):
        """Site index of the centre of block ``b``."""
        return int(self.geom.index(self.block_coords(b) * self.width))

    @cached_property
    def members(self):
        order = np.argsort(self.block_of, kind="stable")
        return order.reshape(self.n_blocks, -1)

    def block_sites(self, b):
        return self.members[b]

    def expand(self, blocks):
        """A coarse set seen as a subset of the torus."""
        blocks = list(blocks)
        if not blocks:
            return np.zeros(0, dtype=np.int64)
        return np.sort(self.members[np.asarray(blocks, dtype=np.int64)].ravel())

    def box_around(self, b, radius):
        return self.geom.box(self.center(b), radius)

    def _offsets_to(self, norm):
        offs = [o for o in itertools.product((-1, 0, 1), repeat=self.d) if any(o)]
        if norm == "l1":
            offs = [o for o in offs if sum(map(abs, o)) == 1]
        return np.array(offs, dtype=np.int64)

    def neighbours(self, b, norm="linf"):
        """Coarse neighbours; ``linf`` is ``||v-w||_inf = 2L+1``, ``l1`` face-adjacent."""
        jc = self.block_coords(b)
        out = {int(self.block_index(jc + o)) for o in self._offsets_to(norm)}
        out.discard(int(b))
        return sorted(out)

    @cached_property
    def face_edges(self):
        """Unordered face-adjacent block pairs (the coarse graph of the energy split)."""
        es = set()
        for b in range(self.n_blocks):
            for c in self.neighbours(b, "l1"):
                es.add((min(b, c), max(b, c)))
        return sorted(es)


def coarsen(coarse, sites):
    """``[Delta]_L``: blocks meeting ``sites``."""
    arr = _as_index_array(sites, coarse.geom.n_sites)
    return frozenset(np.unique(coarse.block_of[arr]).tolist())


def is_connected(nbr, sites):
    """Connectivity of a site set in the graph given by a neighbour table."""
    sites = set(int(s) for s in sites)
    if len(sites) <= 1:
        return True
    start = next(iter(sites))
    seen = {start}
    stack = [start]
    while stack:
        x = stack.pop()
        for y in nbr[x]:
            y = int(y)
            if y >= 0 and y in sites and y not in seen:
                seen.add(y)
                stack.append(y)
    return len(seen) == len(sites)


@dataclass
class SpaceTimeGraph:
    """The half-lattice ``Gamma`` of space-time boxes, truncated at ``horizon`` layers.

    Vertex ``k * n_blocks + b`` is the box ``B_L(centre b) x [k eps L, (k+1) eps L]``
    (times are ages, counted backwards from 0).
    """

    coarse: CoarseLattice
    horizon: int
    eps: float = None
    _adj: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.coarse.L < 1:
            raise ValueError("space-time boxes need L >= 1")
        if self.eps is None:
            self.eps = default_eps(self.coarse.d)
        self.n_blocks = self.coarse.n_blocks
        self.n_vertices = self.n_blocks * self.horizon
        self.dt = self.eps * self.coarse.L
        self._adj = self._build()

    def vertex(self, b, k):
        return k * self.n_blocks + b

    def split(self, z):
        return z % self.n_blocks, z // self.n_blocks

    def layer_age(self, k):
        return k * self.dt

    def _build(self):
        c = self.coarse
        width, side = c.width, c.geom.side
        centres = c.block_coords(np.arange(self.n_blocks)) * width

        def spatial_linf(a, b):
            delta = np.abs(np.mod(centres[a] - centres[b], side))
            return int(np.max(np.minimum(delta, side - delta)))

        adj = [set() for _ in range(self.n_vertices)]
        near = [[b2 for b2 in range(self.n_blocks) if spatial_linf(b1, b2) == width]
                for b1 in range(self.n_blocks)]
        for k in range(self.horizon):
            for b in range(self.n_blocks):
                z = self.vertex(b, k)
                # same layer, spatial neighbour
                adj[z].update(self.vertex(b2, k) for b2 in near[b])
                for k2 in (k - 1, k + 1):
                    if 0 <= k2 < self.horizon:
                        # diagonal and vertical
                        adj[z].update(self.vertex(b2, k2) for b2 in near[b])
                        adj[z].add(self.vertex(b, k2))
                adj[z].discard(z)
        return [sorted(a) for a in adj]

    def neighbours(self, z):
        return self._adj[z]

    def degree(self, z):
        return len(self._adj[z])

    @property
    def max_degree_bound(self):
        return 3 ** (self.coarse.d + 1) - 1

    def adjacency_table(self):
        deg = max(len(a) for a in self._adj)
        t = np.full((self.n_vertices, deg), -1, dtype=np.int64)
        for z, a in enumerate(self._adj):
            t[z, :len(a)] = a
        return t

    def dist_le(self, z, radius):
        """Vertices within ``d_Gamma``-distance ``radius`` of ``z``."""
        seen = {z}
        front = [z]
        for _ in range(radius):
            nxt = []
            for x in front:
                for y in self._adj[x]:
                    if y not in seen:
                        seen.add(y)
                        nxt.append(y)
            front = nxt
        return seen


def gamma_graph(coarse, horizon, eps=None):
    return SpaceTimeGraph(coarse, horizon, eps)
