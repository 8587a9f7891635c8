"""Random-cluster representation of the Ising model with a field.

``P_G(omega)`` is proportional to ``(e^{2 beta} - 1)^{|omega|}`` times, for each
cluster ``C``, ``e^{h|C|} + e^{-h|C|}``.  Colouring each cluster ``+1`` with
probability ``e^{h|C|} / (e^{h|C|} + e^{-h|C|})`` gives the Ising measure.
Boundary conditions use an extra vertex ``d`` joined to the box.

Everything here is either exact enumeration on small graphs or Monte Carlo
that routes through exact spin samples followed by Edwards-Sokal edges.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from ._accel import njit
from .glauber import ModelParams
from .infoperc import cftp_batch
from .lattice import BoxGeom, GraphGeom
from .oracle import ENUM_CAP, chain_magnetization, enumerate_ising, ising_distribution
from .stats import binomial_se, linear_fit

FK_EDGE_CAP = 20


class InvariantViolation(RuntimeError):
    """A property that must hold exactly was found to fail."""


# ---------------------------------------------------------------- graphs

@dataclass
class FkGraph:
    """Finite graph; ``boundary`` is the index of the extra vertex (or ``None``).

    Parallel edges are only allowed at the boundary vertex: a box site with
    several exterior neighbours gets one boundary edge per exterior
    neighbour, so pinning the boundary spin reproduces the boundary condition.
    """

    n: int
    edges: np.ndarray
    boundary: int = None
    coords: np.ndarray = field(default=None, repr=False)
    origin: int = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        e = self.edges
        if e.size and (e.min() < 0 or e.max() >= self.n):
            raise ValueError("edge endpoint out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise ValueError("self-loops are not allowed")
        seen = set()
        for a, b in e:
            k = (min(a, b), max(a, b))
            if k in seen and self.boundary not in k:
                raise ValueError(f"parallel edge {k} away from the boundary vertex")
            seen.add(k)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def boundary_edges(self):
        if self.boundary is None:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero((self.edges == self.boundary).any(axis=1))

    @classmethod
    def from_sites(cls, sites, with_boundary=True):
        """Subgraph of ``Z^d`` on ``sites`` (coordinate tuples), optionally with ``d``."""
        sites = [tuple(int(x) for x in s) for s in sites]
        idx = {s: i for i, s in enumerate(sites)}
        if len(idx) != len(sites):
            raise ValueError("duplicate sites")
        d = len(sites[0])
        edges = []
        outside = []
        for s, i in idx.items():
            for k in range(d):
                for step in (1, -1):
                    t = list(s)
                    t[k] += step
                    j = idx.get(tuple(t))
                    if j is None:
                        outside.append(i)
                    elif step == 1:
                        edges.append((i, j))
        n = len(sites)
        bnd = None
        if with_boundary:
            bnd = n
            edges.extend((i, bnd) for i in outside)
            n += 1
        zero = tuple([0] * d)
        return cls(n, edges, bnd, np.array(sites), idx.get(zero))

    @classmethod
    def from_box(cls, d, N, with_boundary=True):
        g = BoxGeom(d, N)
        return cls.from_sites([tuple(c) for c in g.coords(np.arange(g.n_sites))], with_boundary)

    @classmethod
    def from_edge_list(cls, path):
        """Whitespace separated ``u v`` lines; ``# boundary k`` marks the boundary vertex."""
        edges, bnd, n = [], None, 0
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    parts = line[1:].split()
                    if len(parts) == 2 and parts[0] == "boundary":
                        bnd = int(parts[1])
                    continue
                a, b = (int(x) for x in line.split()[:2])
                edges.append((a, b))
                n = max(n, a + 1, b + 1)
        if bnd is not None:
            n = max(n, bnd + 1)
        return cls(n, edges, bnd)

    def without_boundary(self):
        if self.boundary is None:
            return self
        keep = np.ones(self.n_edges, dtype=bool)
        keep[self.boundary_edges] = False
        if self.boundary != self.n - 1:
            raise ValueError("boundary vertex must be the last one")
        return FkGraph(self.n - 1, self.edges[keep], None, self.coords, self.origin)

    def induced(self, vertices):
        vs = sorted(int(v) for v in vertices)
        pos = {v: i for i, v in enumerate(vs)}
        keep = [k for k, (a, b) in enumerate(self.edges) if a in pos and b in pos]
        e = [(pos[a], pos[b]) for a, b in self.edges[keep]]
        bnd = pos.get(self.boundary) if self.boundary is not None else None
        return FkGraph(len(vs), e, bnd), np.array(keep, dtype=np.int64)

    def boundary_field(self, params, value):
        """Field on the non-boundary vertices once the boundary spin is pinned to ``value``."""
        if self.boundary is None:
            raise ValueError("graph has no boundary vertex")
        hv = np.full(self.n - 1, float(params.h))
        for k in self.boundary_edges:
            a, b = self.edges[k]
            hv[a if b == self.boundary else b] += params.beta * value
        return hv


# ---------------------------------------------------------------- clusters

@njit
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@njit
def _labels_one(n, edges, omega, out):
    parent = np.arange(n)
    for k in range(edges.shape[0]):
        if omega[k]:
            a = _find(parent, edges[k, 0])
            b = _find(parent, edges[k, 1])
            if a != b:
                if a < b:
                    parent[b] = a
                else:
                    parent[a] = b
    for v in range(n):
        out[v] = _find(parent, v)


@njit
def _labels_batch(n, edges, omega):
    R = omega.shape[0]
    out = np.empty((R, n), dtype=np.int64)
    for r in range(R):
        _labels_one(n, edges, omega[r], out[r])
    return out


def cluster_labels(graph, omega):
    """Cluster label (smallest vertex of the cluster) per vertex; batches allowed."""
    om = np.asarray(omega, dtype=np.bool_)
    single = om.ndim == 1
    lab = _labels_batch(graph.n, graph.edges, np.ascontiguousarray(np.atleast_2d(om)))
    return lab[0] if single else lab


def _omega_bits(omega, E):
    if isinstance(omega, (int, np.integer)):
        return ((int(omega) >> np.arange(E)) & 1).astype(bool)
    om = np.zeros(E, dtype=bool)
    arr = np.asarray(omega)
    if arr.dtype == bool:
        if arr.shape != (E,):
            raise ValueError("omega mask has the wrong length")
        return arr
    om[arr.astype(np.int64)] = True
    return om


def _log_cluster(h, size):
    # log(e^{h s} + e^{-h s}) without overflow
    x = abs(h) * size
    return x + math.log1p(math.exp(-2 * x))


def fk_log_weight(graph, omega, params):
    """Log of the unnormalized weight; ``-inf`` for nonempty ``omega`` at ``beta = 0``."""
    om = _omega_bits(omega, graph.n_edges)
    k = int(om.sum())
    if k and params.beta == 0:
        return -math.inf
    lab = cluster_labels(graph, om)
    sizes = np.bincount(lab, minlength=graph.n)
    sizes = sizes[sizes > 0]
    lw = k * math.log(math.expm1(2 * params.beta)) if k else 0.0
    return lw + sum(_log_cluster(params.h, s) for s in sizes)


def fk_weight(graph, omega, params):
    return math.exp(fk_log_weight(graph, omega, params))


# ---------------------------------------------------------------- enumeration

@njit
def _fk_table(n, edges, lbeta, h):
    E = edges.shape[0]
    M = np.int64(1) << E
    logw = np.empty(M)
    labels = np.empty((M, n), dtype=np.int16)
    om = np.zeros(E, dtype=np.bool_)
    lab = np.empty(n, dtype=np.int64)
    sizes = np.zeros(n, dtype=np.int64)
    for w in range(M):
        k = 0
        for e in range(E):
            om[e] = (w >> e) & 1
            k += om[e]
        _labels_one(n, edges, om, lab)
        sizes[:] = 0
        for v in range(n):
            sizes[lab[v]] += 1
            labels[w, v] = lab[v]
        s = k * lbeta if k > 0 else 0.0
        for v in range(n):
            if sizes[v] > 0:
                x = abs(h) * sizes[v]
                s += x + math.log1p(math.exp(-2 * x))
        logw[w] = s
    return logw, labels


@njit
def _colour_marginal(n, probs, labels, h):
    out = np.zeros(np.int64(1) << n)
    roots = np.empty(n, dtype=np.int64)
    size = np.zeros(n, dtype=np.int64)
    for w in range(probs.shape[0]):
        p = probs[w]
        if p == 0:
            continue
        size[:] = 0
        for v in range(n):
            size[labels[w, v]] += 1
        k = 0
        for v in range(n):
            if size[v] > 0:
                roots[k] = v
                k += 1
        for c in range(np.int64(1) << k):
            q = p
            state = np.int64(0)
            for j in range(k):
                s = size[roots[j]]
                plus = 1.0 / (1.0 + math.exp(-2 * h * s))
                if (c >> j) & 1:
                    q *= 1.0 - plus
                    for v in range(n):
                        if labels[w, v] == roots[j]:
                            state |= np.int64(1) << v
                else:
                    q *= plus
            out[state] += q
    return out


@dataclass
class FkDistribution:
    """Exact law of ``omega`` on a small graph (``omega`` indexed by edge bitmask)."""

    graph: FkGraph
    params: ModelParams
    log_weights: np.ndarray
    probs: np.ndarray
    labels: np.ndarray

    def cluster_size(self, v):
        lab = self.labels
        return (lab == lab[:, [v]]).sum(axis=1)

    def connected(self, u, v):
        return self.labels[:, u] == self.labels[:, v]

    def n_open(self):
        E = self.graph.n_edges
        w = np.arange(len(self.probs), dtype=np.int64)
        return ((w[:, None] >> np.arange(E)) & 1).sum(axis=1)

    def edge_open(self, e):
        return (np.arange(len(self.probs), dtype=np.int64) >> e) & 1 == 1

    def expect(self, f_values):
        return float(self.probs @ np.asarray(f_values, dtype=np.float64))

    def spin_marginal(self):
        """Law of the coloured spins over ``2^n`` states (bit set means ``-1``)."""
        return _colour_marginal(self.graph.n, self.probs, self.labels, float(self.params.h))

    def plus_prob(self, v):
        """``P(sigma_v = +1 | omega)`` for every ``omega``."""
        s = self.cluster_size(v)
        return 1.0 / (1.0 + np.exp(-2 * self.params.h * s))

    def boundary_minus_weight(self):
        """``p(omega) = P(sigma_d = -1 | omega) = (e^{2h|C_d|} + 1)^{-1}``."""
        b = self.graph.boundary
        if b is None:
            raise ValueError("graph has no boundary vertex")
        return 1.0 - self.plus_prob(b)


def enumerate_fk(graph, params, cap=FK_EDGE_CAP):
    """Exact random-cluster law by listing all ``2^|E|`` edge sets."""
    if graph.n_edges > cap:
        raise ValueError(f"FK enumeration capped at {cap} edges")
    if graph.n > 30:
        raise ValueError("FK enumeration limited to 30 vertices")
    lb = math.log(math.expm1(2 * params.beta)) if params.beta > 0 else -math.inf
    logw, labels = _fk_table(graph.n, graph.edges, lb, float(params.h))
    if params.beta == 0:
        logw = np.where(np.arange(len(logw)) == 0, logw, -np.inf)
    m = logw.max()
    p = np.exp(logw - m)
    p /= p.sum()
    return FkDistribution(graph, params, logw, p, labels)


def fixture_graphs():
    """Named small graphs (at most 20 edges) used for exact FK checks."""
    out = {
        "single": FkGraph(1, []),
        "edge": FkGraph(2, [(0, 1)]),
        "triangle": FkGraph(3, [(0, 1), (1, 2), (0, 2)]),
        "path4": FkGraph(4, [(0, 1), (1, 2), (2, 3)]),
        "star5": FkGraph(5, [(0, k) for k in range(1, 5)]),
        "cycle6": FkGraph(6, [(k, (k + 1) % 6) for k in range(6)]),
        "k4": FkGraph(4, [(a, b) for a in range(4) for b in range(a + 1, 4)]),
        "grid2x2": FkGraph.from_sites([(0, 0), (0, 1), (1, 0), (1, 1)], with_boundary=False),
        "grid2x3": FkGraph.from_sites([(x, y) for x in range(2) for y in range(3)],
                                      with_boundary=False),
        "grid3x3": FkGraph.from_box(2, 1, with_boundary=False),
        "petersen": FkGraph(10, [(k, (k + 1) % 5) for k in range(5)]
                            + [(k, k + 5) for k in range(5)]
                            + [(5 + k, 5 + (k + 2) % 5) for k in range(5)]),
        "chain_bdry": FkGraph.from_box(1, 3, with_boundary=True),
        "grid2x2_bdry": FkGraph.from_sites([(0, 0), (0, 1), (1, 0), (1, 1)]),
        "grid2x3_bdry": FkGraph.from_sites([(x, y) for x in range(2) for y in range(3)]),
    }
    for name, g in out.items():
        if g.n_edges > FK_EDGE_CAP:
            raise AssertionError(f"fixture {name} exceeds the edge cap")
    return out


def ising_on_graph(graph, params):
    """Exact Ising law on the graph (all vertices free, parallel edges counted)."""
    return ising_distribution(graph.n, graph.edges, np.full(graph.n, float(params.h)),
                              params.beta)


def edwards_sokal_exact(graph, params):
    """Exact law of ``omega`` from an exact spin sample followed by Edwards-Sokal edges."""
    mu = ising_on_graph(graph, params)
    n, E = graph.n, graph.n_edges
    states = np.arange(1 << n, dtype=np.int64)
    spins = 1 - 2 * ((states[:, None] >> np.arange(n)) & 1)
    eq = spins[:, graph.edges[:, 0]] == spins[:, graph.edges[:, 1]]
    p = -math.expm1(-2 * params.beta)
    out = np.zeros(1 << E)
    for w in range(1 << E):
        om = (w >> np.arange(E)) & 1 == 1
        ok = np.all(eq | ~om, axis=1)
        f = np.where(om, p, np.where(eq, 1 - p, 1.0)).prod(axis=1)
        out[w] = mu[ok] @ f[ok]
    return out


# ---------------------------------------------------------------- sampling

@dataclass
class FkState:
    graph: FkGraph
    omega: np.ndarray
    labels: np.ndarray
    colours: np.ndarray = None

    def clusters(self):
        out = {}
        for v, l in enumerate(self.labels):
            out.setdefault(int(l), []).append(v)
        return list(out.values())

    def cluster_of(self, v):
        return np.flatnonzero(self.labels == self.labels[v])


def edwards_sokal_sample(graph, sigma, params, seed):
    """Open each edge with equal end spins independently with probability ``1 - e^{-2 beta}``.

    ``sigma`` may be one configuration or a ``(R, n)`` batch; a batch returns
    ``(omega, labels)`` arrays instead of an :class:`FkState`.
    """
    rng = np.random.default_rng(seed)
    s = np.atleast_2d(np.asarray(sigma, dtype=np.int64))
    if s.shape[1] != graph.n:
        raise ValueError("spin configuration does not match the graph")
    eq = s[:, graph.edges[:, 0]] == s[:, graph.edges[:, 1]]
    u = rng.random(eq.shape)
    omega = eq & (u < -math.expm1(-2 * params.beta))
    lab = _labels_batch(graph.n, graph.edges, np.ascontiguousarray(omega))
    if np.asarray(sigma).ndim == 1:
        return FkState(graph, omega[0], lab[0], s[0].copy())
    return omega, lab


def recolour(state, params, seed):
    """Fresh colours for every cluster by the field-tilted coin."""
    rng = np.random.default_rng(seed)
    lab = state.labels
    size = np.bincount(lab, minlength=state.graph.n)
    plus = 1.0 / (1.0 + np.exp(-2 * params.h * size))
    col = np.where(rng.random(state.graph.n) < plus, 1, -1)
    return FkState(state.graph, state.omega, lab, col[lab])


# ---------------------------------------------------------------- exact properties

@dataclass
class FiniteEnergy:
    lowest: float
    highest: float
    lower_bound: float
    upper_bound: float

    @property
    def holds(self):
        tol = 1e-12
        return self.lowest >= self.lower_bound - tol and self.highest <= self.upper_bound + tol


def finite_energy(graph, params):
    """Extremes over edges and outside configurations of the conditional open probability."""
    dist = enumerate_fk(graph, params)
    lw = dist.log_weights
    w = np.arange(len(lw), dtype=np.int64)
    lo, hi = 1.0, 0.0
    for e in range(graph.n_edges):
        closed = w[(w >> e) & 1 == 0]
        d = lw[closed | (1 << e)] - lw[closed]
        p = 1.0 / (1.0 + np.exp(-d))
        lo, hi = min(lo, p.min()), max(hi, p.max())
    e2 = math.exp(2 * params.beta)
    return FiniteEnergy(float(lo), float(hi), (e2 - 1) / (e2 + 1), -math.expm1(-2 * params.beta))


def decoupling_check(graph, V1, params, f, g):
    """``E[f g | cut closed]`` versus ``E_{G1}[f] E_{G2}[g]``.

    ``f`` (resp. ``g``) receives the open-edge mask of the graph induced on
    ``V1`` (resp. its complement), edges in the order they appear in ``graph``.
    """
    V1 = sorted(set(int(v) for v in V1))
    V2 = sorted(set(range(graph.n)) - set(V1))
    g1, k1 = graph.induced(V1)
    g2, k2 = graph.induced(V2)
    cut = np.setdiff1d(np.arange(graph.n_edges), np.concatenate([k1, k2]))
    full = enumerate_fk(graph, params)
    w = np.arange(len(full.probs), dtype=np.int64)
    bits = ((w[:, None] >> np.arange(graph.n_edges)) & 1).astype(bool)
    closed = ~bits[:, cut].any(axis=1) if cut.size else np.ones(len(w), bool)
    fv = np.array([f(b[k1]) for b in bits[closed]])
    gv = np.array([g(b[k2]) for b in bits[closed]])
    pc = full.probs[closed] / full.probs[closed].sum()
    lhs = float(pc @ (fv * gv))
    d1 = enumerate_fk(g1, params)
    d2 = enumerate_fk(g2, params)
    b1 = ((np.arange(len(d1.probs))[:, None] >> np.arange(g1.n_edges)) & 1).astype(bool)
    b2 = ((np.arange(len(d2.probs))[:, None] >> np.arange(g2.n_edges)) & 1).astype(bool)
    rhs = float(d1.probs @ np.array([f(b) for b in b1])) * \
        float(d2.probs @ np.array([g(b) for b in b2]))
    return lhs, rhs


def random_increasing(E, rng):
    """Random non-decreasing function of an ``E``-edge mask, tabulated over ``2^E``."""
    w = np.arange(1 << E, dtype=np.int64)
    bits = ((w[:, None] >> np.arange(E)) & 1).astype(np.float64)
    a = rng.exponential(size=E) * (rng.random(E) < 0.6)
    val = bits @ a
    for _ in range(int(rng.integers(0, 3))):
        # indicator of an up-set generated by a random small edge set
        S = rng.choice(E, size=min(E, int(rng.integers(1, 4))), replace=False)
        val += rng.exponential() * bits[:, S].all(axis=1)
    i, j = rng.choice(E, size=2, replace=E < 2)
    val += rng.exponential() * bits[:, i] * bits[:, j]
    return val


def fkg_check(graph, params, n_pairs, seed):
    """Smallest ``E[fg] - E[f]E[g]`` over random non-decreasing pairs."""
    if graph.n_edges > 12:
        raise ValueError("FKG check limited to 12 edges")
    rng = np.random.default_rng(seed)
    dist = enumerate_fk(graph, params)
    p = dist.probs
    worst = math.inf
    for _ in range(n_pairs):
        f = random_increasing(graph.n_edges, rng)
        g = random_increasing(graph.n_edges, rng)
        worst = min(worst, float(p @ (f * g) - (p @ f) * (p @ g)))
    return worst


@dataclass
class MinusDecomposition:
    direct: float
    not_connected_plus: float
    not_connected_minus: float
    connected: float
    reweighted: float

    @property
    def three_term(self):
        return self.not_connected_plus - self.not_connected_minus - self.connected


def minus_decomposition(graph, params, site=None):
    """The minus-boundary magnetization split by whether ``site`` connects to the boundary."""
    b = graph.boundary
    if b is None:
        raise ValueError("needs a graph with a boundary vertex")
    v = graph.origin if site is None else site
    dist = enumerate_fk(graph, params)
    p = dist.boundary_minus_weight()
    joint = dist.probs * p
    Z = joint.sum()
    conn = dist.connected(v, b)
    pv = dist.plus_prob(v)
    t1 = float(joint[~conn] @ pv[~conn] / Z)
    t2 = float(joint[~conn] @ (1 - pv[~conn]) / Z)
    t3 = float(joint[conn].sum() / Z)
    tanh = np.tanh(params.h * dist.cluster_size(v))
    rew = float((dist.probs @ (np.where(conn, 0.0, tanh) * p) - dist.probs @ (conn * p))
                / (dist.probs @ p))
    inner = graph.without_boundary()
    hv = graph.boundary_field(params, -1.0)
    mu = ising_distribution(inner.n, inner.edges, hv, params.beta)
    spins = 1 - 2 * ((np.arange(1 << inner.n)[:, None] >> v) & 1)
    direct = float(mu @ spins[:, 0])
    return MinusDecomposition(direct, t1, t2, t3, rew)


# ---------------------------------------------------------------- magnetization with boundary

class _FieldGraph:
    """Geometry adaptor: graph bonds plus an explicit per-site field."""

    def __init__(self, n, edges, hv):
        g = GraphGeom(n, edges)
        self.n_sites = n
        self.nbr = g.nbr
        self.bonds = g.bonds
        self._hv = hv

    def field(self, beta, h):
        return self._hv


def magnetization_bc(N, params, bc="free", d=1, method="auto"):
    """Exact ``<sigma_0>`` on ``[-N, N]^d`` with boundary condition ``bc``.

    ``method="enumeration"`` pins the boundary vertex of the augmented graph
    (or deletes it for ``free``) and sums over all spins; ``"transfer"`` is the
    one-dimensional transfer matrix.  ``"auto"`` picks transfer in ``d = 1``.
    """
    if bc not in ("plus", "minus", "free"):
        raise ValueError(f"unknown boundary condition {bc!r}")
    if method == "auto":
        method = "transfer" if d == 1 else "enumeration"
    if method == "transfer":
        if d != 1:
            raise ValueError("transfer matrix only in d = 1")
        return chain_magnetization(N, params, bc).value
    if (2 * N + 1) ** d > ENUM_CAP:
        raise ValueError(f"enumeration capped at {ENUM_CAP} sites")
    g = FkGraph.from_box(d, N, with_boundary=True)
    inner = g.without_boundary()
    if bc == "free":
        hv = np.full(inner.n, float(params.h))
    else:
        hv = g.boundary_field(params, 1.0 if bc == "plus" else -1.0)
    e = enumerate_ising(_FieldGraph(inner.n, inner.edges, hv), params)
    return float(e.magnetization[g.origin])


@dataclass
class RelaxTable:
    N: np.ndarray
    plus: np.ndarray
    free: np.ndarray
    minus: np.ndarray
    se: np.ndarray
    exact: np.ndarray
    rate: float = math.nan
    rate_se: float = math.nan
    ci: tuple = (math.nan, math.nan)

    @property
    def gap_plus_free(self):
        return self.plus - self.free

    @property
    def gap_free_minus(self):
        return self.free - self.minus

    @property
    def gap(self):
        return self.plus - self.minus

    def rows(self):
        return [{"N": int(n), "plus": float(p), "free": float(f), "minus": float(m),
                 "gap_plus_free": float(p - f), "gap_free_minus": float(f - m),
                 "gap_plus_minus": float(p - m), "se": float(s), "exact": bool(x)}
                for n, p, f, m, s, x in zip(self.N, self.plus, self.free, self.minus,
                                            self.se, self.exact)]


def _mc_magnetization(d, N, params, bc, replicas, seed, t_max):
    g = BoxGeom(d, N, bc)
    res = cftp_batch(g, params, [g.origin], 0.0, t_max, seed, replicas)
    if not res.coupled.all():
        raise InvariantViolation("coupling not reached within t_max")
    x = res.samples[:, 0].astype(np.float64)
    return float(x.mean()), float(x.std() / math.sqrt(len(x)))


def relax_gap(Ns, params, d=1, mc_Ns=(), replicas=20000, seed=0, t_max=400.0, level=0.95,
              tol=1e-12):
    """``<sigma_0>^+``, ``<sigma_0>^0`` and ``<sigma_0>^-`` over a grid of ``N`` with a decay fit.

    Exact rows use the transfer matrix (``d = 1``) or enumeration; ``mc_Ns``
    adds perfect-sampling rows with standard errors.  A violated boundary
    ordering on an exact row raises :class:`InvariantViolation`.
    """
    if params.h < 0:
        raise ValueError("relaxation experiment needs h >= 0")
    rows = []
    for N in Ns:
        vals = [magnetization_bc(N, params, bc, d) for bc in ("plus", "free", "minus")]
        rows.append((N, *vals, 0.0, True))
    for k, N in enumerate(mc_Ns):
        est = [_mc_magnetization(d, N, params, bc, replicas, seed + 7 * k + j, t_max)
               for j, bc in enumerate(("plus", "free", "minus"))]
        rows.append((N, est[0][0], est[1][0], est[2][0],
                     math.sqrt(sum(e[1] ** 2 for e in est)), False))
    arr = list(zip(*rows)) if rows else [[]] * 6
    tab = RelaxTable(np.array(arr[0], dtype=np.int64), np.array(arr[1]), np.array(arr[2]),
                     np.array(arr[3]), np.array(arr[4]), np.array(arr[5], dtype=bool))
    ex = tab.exact
    if np.any(tab.gap_plus_free[ex] < -tol) or np.any(tab.gap_free_minus[ex] < -tol):
        raise InvariantViolation("boundary ordering minus <= free <= plus violated")
    if params.h > 0 and np.any(tab.free[ex] < -tol):
        raise InvariantViolation("free magnetization negative at positive field")
    if params.h > 0:
        use = ex & (tab.gap > 1e-13)
        if use.sum() >= 3:
            fit = linear_fit(tab.N[use], np.log(tab.gap[use]), level)
            tab.rate, tab.rate_se = -fit.slope, fit.slope_se
            tab.ci = (-fit.ci[1], -fit.ci[0])
    return tab


# ---------------------------------------------------------------- crossing probability

@dataclass
class CrossingEstimate:
    N: int
    K: int
    value: float
    se: float
    method: str
    n_used: int
    n_total: int
    collapsed: bool = False


def _inner_mask(graph, r):
    inner = np.zeros(graph.n, dtype=bool)
    c = graph.coords
    inner[: len(c)] = np.abs(c).max(axis=1) <= r
    return inner


def _crossing_events(graph, labels, r):
    b = graph.boundary
    inner = _inner_mask(graph, r)
    return ((labels == labels[:, [b]]) & inner[None, :]).any(axis=1)


def crossing_prob(N, K, params, replicas, seed, d=2, method="direct", t_max=400.0):
    """``P(d <-> Lambda_{N/K} | sigma_d = -1)`` on the augmented box graph.

    ``direct`` draws exact minus-boundary spins and adds Edwards-Sokal edges
    (boundary edges open when the inside spin is ``-1``).  ``rejection`` and
    ``reweight`` both start from exact unconditioned samples on the augmented
    graph: the first keeps samples with ``sigma_d = -1``, the second weights
    every sample by ``p(omega) = (e^{2h|C_d|} + 1)^{-1}``.
    """
    if N % K:
        raise ValueError("K must divide N")
    if params.h <= 0:
        raise ValueError("crossing experiment needs h > 0")
    r = N // K
    g = FkGraph.from_box(d, N, with_boundary=True)
    b = g.boundary
    if method == "direct":
        box = BoxGeom(d, N, "minus")
        res = cftp_batch(box, params, np.arange(box.n_sites), 0.0, t_max, seed, replicas)
        ok = res.coupled
        s = np.concatenate([res.samples[ok].astype(np.int64),
                            -np.ones((ok.sum(), 1), dtype=np.int64)], axis=1)
        _, lab = edwards_sokal_sample(g, s, params, seed + 1)
        hit = _crossing_events(g, lab, r).astype(np.float64)
        n = len(hit)
        p = float(hit.mean()) if n else math.nan
        return CrossingEstimate(N, K, p, float(binomial_se(p, n)), method, n, replicas)
    if method not in ("rejection", "reweight"):
        raise ValueError(f"unknown method {method!r}")
    rej, rew = crossing_pair(N, K, params, replicas, seed, d, t_max)
    return rej if method == "rejection" else rew


def crossing_pair(N, K, params, replicas, seed, d=2, t_max=400.0):
    """Rejection and reweighting estimates from one set of unconditioned samples."""
    if N % K:
        raise ValueError("K must divide N")
    r = N // K
    g = FkGraph.from_box(d, N, with_boundary=True)
    b = g.boundary
    gg = GraphGeom(g.n, g.edges)
    res = cftp_batch(gg, params, np.arange(g.n), 0.0, t_max, seed, replicas)
    ok = res.coupled
    s = res.samples[ok].astype(np.int64)
    _, lab = edwards_sokal_sample(g, s, params, seed + 1)
    hit = _crossing_events(g, lab, r).astype(np.float64)
    keep = s[:, b] == -1
    n = int(keep.sum())
    if n < 10:
        rej = CrossingEstimate(N, K, math.nan, math.nan, "rejection", n, replicas, True)
    else:
        p = float(hit[keep].mean())
        rej = CrossingEstimate(N, K, p, float(binomial_se(p, n)), "rejection", n, replicas)
    size = (lab == lab[:, [b]]).sum(axis=1)
    w = 1.0 / (np.exp(2 * params.h * size) + 1.0)
    m = len(w)
    est = float((w * hit).sum() / w.sum())
    # delta method for a ratio of means
    se = float(np.std(w * hit - est * w) / math.sqrt(m) / w.mean())
    return rej, CrossingEstimate(N, K, est, se, "reweight", m, replicas)


def disjoint_crossing_paths(state, r_to):
    """Maximum number of edge-disjoint open paths from the boundary vertex to ``Lambda_{r_to}``.

    Diagnostic only (max-flow on the open subgraph).
    """
    import networkx as nx

    g = state.graph
    G = nx.Graph()
    for k in np.flatnonzero(state.omega):
        a, b = (int(x) for x in g.edges[k])
        if G.has_edge(a, b):
            G[a][b]["capacity"] += 1
        else:
            G.add_edge(a, b, capacity=1)
    sink = "sink"
    inner = np.flatnonzero(_inner_mask(g, r_to))
    for v in inner:
        if v in G:
            G.add_edge(int(v), sink, capacity=g.n_edges)
    if g.boundary not in G or sink not in G:
        return 0
    return int(nx.maximum_flow_value(G, g.boundary, sink))
