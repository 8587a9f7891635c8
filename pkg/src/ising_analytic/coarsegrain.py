"""Good and bad space-time boxes, the induced percolation on Gamma, cluster tails.

A box ``(w, t')`` at scale ``l`` is good when, for every ``v`` in ``B_l(w)`` and
every age ``t`` in ``[t', t' + eps l]``, the killed update set ``K(v, t)`` stays
inside ``B_{3l/2}(w)`` and the coupling time ``tau_v(t)`` is at most
``t' + 3/2 eps l``.

Both quantities only change at update events of ``v``, so it is enough to
test ``t = t'``, ``t = t' + eps l`` and every event age of ``v`` in between.
Moreover they are computed from the events inside
``B_{3l/2}(w) x [t', t' + 3/2 eps l]`` alone, with sites outside the region
pinned at the extremal values: by monotonicity the pinned chains bracket the
true ones, and the pinned coupling time coincides with the true one whenever
the killed update set stays inside the region.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from ._accel import njit
from ._rng import replica_key
from .glauber import _gen_epochs, _run_pair, site_field, sample_updates
from .infoperc import _cftp_one, sup_empty, upd
from .lattice import SpaceTimeGraph, coarsen, default_eps
from . import stats


# ---------------------------------------------------------------- local kernels

@njit
def _local_agree(ages, sites, marks, nbr, beta, hvec, E, s, q, reg, v, top, bot):
    """Pinned extremal pair over region events ``E[s:q]``; agreement at ``v``."""
    for x in reg:
        top[x] = 1
        bot[x] = -1
    for p in range(q - 1, s - 1, -1):
        i = E[p]
        x = sites[i]
        u = marks[i]
        a_t = 0
        a_b = 0
        for k in range(nbr.shape[1]):
            y = nbr[x, k]
            if y >= 0:
                a_t += int(top[y])
                a_b += int(bot[y])
        top[x] = 1 if u < 1.0 / (1.0 + math.exp(-2.0 * beta * a_t - 2.0 * hvec[x])) else -1
        bot[x] = 1 if u < 1.0 / (1.0 + math.exp(-2.0 * beta * a_b - 2.0 * hvec[x])) else -1
    return top[v] == bot[v]


@njit
def _local_upd_inside(sites, nbr, E, s, q, v, inreg, live, reg):
    for x in reg:
        live[x] = False
    live[v] = True
    for p in range(s, q):
        x = sites[E[p]]
        if live[x]:
            live[x] = False
            for k in range(nbr.shape[1]):
                y = nbr[x, k]
                if y >= 0:
                    if not inreg[y]:
                        return False
                    live[y] = True
    return True


@njit
def _box_good(ages, sites, marks, nbr, beta, hvec, inreg, reg, core, t0, span, cap,
              top, bot, live, ebuf):
    lo = np.searchsorted(ages, t0, side="left")
    hi = np.searchsorted(ages, cap, side="right")
    m = 0
    for i in range(lo, hi):
        if inreg[sites[i]]:
            ebuf[m] = i
            m += 1
    E = ebuf[:m]
    eages = np.empty(m, dtype=np.float64)
    for p in range(m):
        eages[p] = ages[E[p]]
    for v in core:
        # candidate ages: t0, the events of v in (t0, t0+span], t0+span
        nc = 2
        for p in range(m):
            if sites[E[p]] == v and t0 < eages[p] <= t0 + span:
                nc += 1
        cand = np.empty(nc, dtype=np.float64)
        cand[0] = t0
        cand[1] = t0 + span
        c = 2
        for p in range(m):
            if sites[E[p]] == v and t0 < eages[p] <= t0 + span:
                cand[c] = eages[p]
                c += 1
        for t in cand:
            s = np.searchsorted(eages, t, side="left")
            if not _local_agree(ages, sites, marks, nbr, beta, hvec, E, s, m, reg, v, top, bot):
                return False
            a = s
            b = m - 1
            while a < b:
                mid = (a + b) // 2
                if _local_agree(ages, sites, marks, nbr, beta, hvec, E, s, mid + 1, reg, v,
                                top, bot):
                    b = mid
                else:
                    a = mid + 1
            if not _local_upd_inside(sites, nbr, E, s, a + 1, v, inreg, live, reg):
                return False
    return True


@njit
def _paint(ages, sites, marks, nbr, beta, hvec, regs, cores, horizon, dt, span, n):
    nb = regs.shape[0]
    out = np.zeros(horizon * nb, dtype=np.bool_)
    top = np.ones(n, dtype=np.int8)
    bot = -top
    live = np.zeros(n, dtype=np.bool_)
    inreg = np.zeros(n, dtype=np.bool_)
    ebuf = np.empty(ages.shape[0], dtype=np.int64)
    for k in range(horizon):
        t0 = k * dt
        for b in range(nb):
            for x in regs[b]:
                inreg[x] = True
            good = _box_good(ages, sites, marks, nbr, beta, hvec, inreg, regs[b], cores[b],
                             t0, span, t0 + 1.5 * span, top, bot, live, ebuf)
            for x in regs[b]:
                inreg[x] = False
            out[k * nb + b] = not good
    return out


# ---------------------------------------------------------------- single box

def _region(geom, w, l):
    return geom.box(w, (3 * l) // 2), geom.box(w, l)


def check_block_event(real, params, w, t_prime, l, eps=None):
    """The event ``A_l(w, t')`` on a realization; ``w`` is a site index.

    The window must reach age ``t' + 3/2 eps l``.  Region radius is
    ``floor(3l/2)``.
    """
    g = real.geom
    eps = default_eps(g.d) if eps is None else float(eps)
    span = eps * l
    cap = t_prime + 1.5 * span
    real.require(cap)
    reg, core = _region(g, w, l)
    n = g.n_sites
    inreg = np.zeros(n, dtype=np.bool_)
    inreg[reg] = True
    top = np.ones(n, dtype=np.int8)
    return bool(_box_good(real.ages, real.sites, real.marks, g.nbr, float(params.beta),
                          site_field(g, params), inreg, reg, core, float(t_prime), span, cap,
                          top, -top, np.zeros(n, dtype=np.bool_),
                          np.empty(real.n_events, dtype=np.int64)))


def check_block_event_global(real, params, w, t_prime, l, eps=None):
    """Reference evaluation of ``A_l(w, t')`` with unrestricted chains (slow)."""
    g = real.geom
    eps = default_eps(g.d) if eps is None else float(eps)
    span = eps * l
    cap = t_prime + 1.5 * span
    real.require(cap)
    reg, core = _region(g, w, l)
    reg = set(reg.tolist())
    for v in core:
        va, _ = real.events_of(v)
        cand = [t_prime, t_prime + span] + [a for a in va if t_prime < a <= t_prime + span]
        for t in cand:
            later = sorted(a for a in real.ages if t <= a <= cap)
            tau = next((a for a in later if sup_empty(real, params, a, t, [v])), None)
            if tau is None:
                return False
            if not upd(real, tau, t, [v]) <= reg:
                return False
    return True


# ---------------------------------------------------------------- painting Gamma

@dataclass
class PercolationConfig:
    """Open/closed bit per vertex of a finite graph (open = bad box)."""

    graph: object
    open: np.ndarray

    def __post_init__(self):
        self.open = np.asarray(self.open, dtype=bool)
        if self.open.shape != (self.graph.n_vertices,):
            raise ValueError("one bit per vertex expected")

    @property
    def bad_fraction(self):
        return float(self.open.mean())


class TableGraph:
    """Adjacency-list graph (used for Bernoulli windows and tests)."""

    def __init__(self, adj):
        self._adj = [sorted(set(a)) for a in adj]
        self.n_vertices = len(self._adj)

    def neighbours(self, z):
        return self._adj[z]


def _regions(coarse, L):
    g = coarse.geom
    regs = np.stack([g.box(coarse.center(b), (3 * L) // 2) for b in range(coarse.n_blocks)])
    cores = np.stack([g.box(coarse.center(b), L) for b in range(coarse.n_blocks)])
    return regs, cores


def paint_window(gamma):
    """Age the realization must reach to classify every layer of ``gamma``."""
    return (gamma.horizon + 0.5) * gamma.dt


def _paint_real(real, params, gamma, regs=None, cores=None):
    c = gamma.coarse
    if regs is None:
        regs, cores = _regions(c, c.L)
    real.require(paint_window(gamma))
    g = real.geom
    return _paint(real.ages, real.sites, real.marks, g.nbr, float(params.beta),
                  site_field(g, params), regs, cores, gamma.horizon, gamma.dt, gamma.dt,
                  g.n_sites)


def paint_boxes(params, coarse, horizon, seed, replica=0, eps=None, real=None):
    """Classify every box of the Gamma window; returns ``PercolationConfig``."""
    gamma = SpaceTimeGraph(coarse, horizon, eps)
    if real is None:
        real = sample_updates(coarse.geom, paint_window(gamma), seed, replica)
    return PercolationConfig(gamma, _paint_real(real, params, gamma))


# ---------------------------------------------------------------- clusters

@dataclass
class ClusterSet:
    config: PercolationConfig
    V: frozenset
    C: frozenset
    boundary: frozenset
    proj: frozenset
    truncated: bool = False


def _adjacency_csr(graph):
    cached = getattr(graph, "_csr_cache", None)
    if cached is not None:
        return cached
    rows, cols = [], []
    for z in range(graph.n_vertices):
        nb = graph.neighbours(z)
        rows.extend([z] * len(nb))
        cols.extend(nb)
    n = graph.n_vertices
    graph._csr_cache = csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    return graph._csr_cache


def open_components(config):
    """Component label of every open vertex (``-1`` for closed ones)."""
    g = config.graph
    A = _adjacency_csr(g)
    op = config.open
    idx = np.flatnonzero(op)
    lab = np.full(g.n_vertices, -1, dtype=np.int64)
    if idx.size:
        _, sub = connected_components(A[idx][:, idx], directed=False)
        lab[idx] = sub
    return lab


def clusters(config, V, labels=None):
    """``C_V``, its outer boundary and the spatial projection of ``C_V`` and ``dC_V``.

    ``V`` is a set of vertices (for ``Gamma``, coarse blocks are vertices of
    layer 0).  A closed seed ``z`` contributes ``dC_z = {z}``.
    """
    g = config.graph
    V = frozenset(int(z) for z in V)
    lab = open_components(config) if labels is None else labels
    seeds = {lab[z] for z in V if config.open[z]}
    C = frozenset(np.flatnonzero(np.isin(lab, list(seeds)) & (lab >= 0)).tolist()) if seeds else frozenset()
    bd = set()
    for z in C:
        bd.update(y for y in g.neighbours(z) if not config.open[y])
    bd.update(z for z in V if not config.open[z])
    bd = frozenset(bd)
    proj, trunc = frozenset(), False
    if isinstance(g, SpaceTimeGraph):
        proj = frozenset(g.split(z)[0] for z in C | bd)
        trunc = any(g.split(z)[1] == g.horizon - 1 for z in C)
    return ClusterSet(config, V, C, bd, proj, trunc)


def clusters_bfs(config, V):
    """Plain BFS version of :func:`clusters` (``C_V`` only)."""
    g = config.graph
    seen = set()
    for z in V:
        if not config.open[z] or z in seen:
            continue
        stack = [z]
        seen.add(z)
        while stack:
            x = stack.pop()
            for y in g.neighbours(x):
                if config.open[y] and y not in seen:
                    seen.add(y)
                    stack.append(y)
    return frozenset(seen)


# ---------------------------------------------------------------- tails

@dataclass
class TailEstimate:
    M: np.ndarray
    survival: np.ndarray
    se: np.ndarray
    rate: float
    rate_se: float
    ci: tuple
    n: int
    rate_per_ML: float = None

    def rows(self):
        return [{"M": int(m), "survival": float(s), "se": float(e)}
                for m, s, e in zip(self.M, self.survival, self.se)]


def tail_estimate(sizes, M=None, L=1):
    sizes = np.asarray(sizes)
    if M is None:
        M = np.arange(1, int(sizes.max(initial=1)) + 2)
    M = np.asarray(M)
    if sizes.size == 0:
        nan = np.full(len(M), np.nan)
        return TailEstimate(M, nan, nan, np.nan, np.nan, (np.nan, np.nan), 0, np.nan)
    hits = sizes[:, None] >= M[None, :]
    fit = stats.exp_tail_fit(M, hits)
    return TailEstimate(M, fit.p_hat, fit.se, fit.rate, fit.rate_se, fit.ci, len(sizes),
                        fit.rate / L if np.isfinite(fit.rate) else np.inf)


@dataclass
class ContainmentReport:
    n_replicas: int
    n_checked: int
    violations: int
    coarse_violations: int
    card_flags: int
    n_censored: int
    n_truncated: int
    sizes: np.ndarray
    tail: TailEstimate
    good_fraction: float
    min_size_ok: bool

    def summary(self):
        return {"n_replicas": self.n_replicas, "n_checked": self.n_checked,
                "violations": self.violations, "coarse_violations": self.coarse_violations,
                "cardinality_flags": self.card_flags, "n_censored": self.n_censored,
                "n_truncated": self.n_truncated, "good_fraction": self.good_fraction,
                "tail_rate": self.tail.rate, "tail_rate_ci": list(self.tail.ci),
                "min_size_ok": self.min_size_ok}


def kupd_coarse_containment(params, coarse, V, replicas, seed, horizon=None, eps=None,
                            t_max=200.0, start=0, horizon_pad=2):
    """Check ``K(V-bar)`` against the boxes around ``C_V`` and ``dC_V`` replica by replica.

    ``V`` is a set of blocks.  The Gamma window is tall enough to contain the
    coupling time (plus ``horizon_pad`` layers) unless ``horizon`` is given.
    Replicas whose bad cluster touches the top layer are truncated and left
    out of the check and of the tail.
    """
    if replicas < 1:
        raise ValueError("need replicas >= 1")
    g = coarse.geom
    L = coarse.L
    eps = default_eps(g.d) if eps is None else float(eps)
    dt = eps * L
    Vset = sorted(int(v) for v in V)
    Vbar = coarse.expand(Vset)
    regs, cores = _regions(coarse, L)
    R = (3 * L) // 2
    hv = site_field(g, params)
    gammas = {}
    sizes, good = [], []
    viol = cviol = flags = cens = trunc = checked = 0
    min_ok = True
    for r in range(start, start + replicas):
        c, tau, cert, _, reached = _cftp_one(replica_key(seed, r), g.n_sites, g.nbr,
                                             float(params.beta), hv, Vbar, 0.0, float(t_max),
                                             True)
        if not c:
            cens += 1
            continue
        K = np.flatnonzero(reached)
        H = horizon if horizon is not None else int(math.ceil(tau / dt)) + horizon_pad
        if H not in gammas:
            gammas[H] = SpaceTimeGraph(coarse, H, eps)
        gamma = gammas[H]
        real = sample_updates(g, paint_window(gamma), seed, r)
        cfg = PercolationConfig(gamma, _paint_real(real, params, gamma, regs, cores))
        good.append(1.0 - cfg.bad_fraction)
        cl = clusters(cfg, Vset)
        kc = coarsen(coarse, K)
        if len(kc) < len(Vset):
            min_ok = False
        if cl.truncated:
            trunc += 1
            continue
        checked += 1
        sizes.append(len(kc))
        cover = np.zeros(g.n_sites, dtype=bool)
        for w in cl.proj:
            cover[g.box(coarse.center(w), R)] = True
        if not cover[K].all():
            viol += 1
        near = set()
        for z in cl.C | cl.boundary:
            near.update(gamma.split(y)[0] for y in gamma.dist_le(z, 1))
        if not kc <= near:
            cviol += 1
        if len(near) > 5 ** g.d * (len(cl.C) + len(Vset)):
            flags += 1
    tail = tail_estimate(np.asarray(sizes, dtype=np.int64) if sizes else np.zeros(0, np.int64),
                         L=L)
    return ContainmentReport(replicas, checked, viol, cviol, flags, cens, trunc,
                             np.asarray(sizes), tail, float(np.mean(good)) if good else float("nan"),
                             min_ok)


def kupd_coarse_sizes(params, coarse, V, replicas, seed, t_max=200.0, start=0):
    """``|[K(V-bar)]_L|`` per replica (``-1`` when not coupled) plus a flag for torus wrap."""
    g = coarse.geom
    Vbar = coarse.expand(sorted(int(v) for v in V))
    hv = site_field(g, params)
    out = np.empty(replicas, dtype=np.int64)
    for i, r in enumerate(range(start, start + replicas)):
        c, tau, _, _, reached = _cftp_one(replica_key(seed, r), g.n_sites, g.nbr, float(params.beta),
                                          hv, Vbar, 0.0, float(t_max), True)
        out[i] = len(np.unique(coarse.block_of[reached])) if c else -1
    return out


# ---------------------------------------------------------------- lattice animals

ANIMAL_CAP = 12


def _nbr_fn(graph):
    if callable(graph):
        return graph
    if hasattr(graph, "neighbours"):
        return graph.neighbours
    table = np.asarray(graph)
    return lambda v: [int(y) for y in table[v] if y >= 0]


def square_lattice(d=2):
    """Neighbour function of ``Z^d`` on coordinate tuples."""
    def nb(v):
        out = []
        for k in range(d):
            for s in (1, -1):
                w = list(v)
                w[k] += s
                out.append(tuple(w))
        return out
    return nb


def count_lattice_animals(graph, root, K):
    """Connected vertex sets of size ``K`` containing ``root`` (Redelmeier's method).

    ``graph`` is a neighbour function, an object with ``neighbours`` or a
    ``-1``-padded neighbour table.
    """
    if K > ANIMAL_CAP:
        raise ValueError(f"lattice animal enumeration is capped at K={ANIMAL_CAP}")
    if K < 1:
        return 0
    nb = _nbr_fn(graph)
    count = 0

    def grow(untried, seen, size):
        nonlocal count
        untried = list(untried)
        while untried:
            v = untried.pop()
            if size + 1 == K:
                count += 1
                continue
            fresh = [u for u in nb(v) if u not in seen]
            fresh = list(dict.fromkeys(fresh))
            seen.update(fresh)
            grow(untried + fresh, seen, size + 1)
            seen.difference_update(fresh)

    grow([root], {root}, 0)
    return count


# ---------------------------------------------------------------- Bernoulli percolation

@dataclass
class BernoulliTail:
    M: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    exact: np.ndarray = None


def _cluster_sizes_batch(graph, openm, V):
    out = np.empty(openm.shape[0], dtype=np.int64)
    A = _adjacency_csr(graph)
    for r in range(openm.shape[0]):
        op = openm[r]
        idx = np.flatnonzero(op)
        lab = np.full(graph.n_vertices, -1)
        if idx.size:
            lab[idx] = connected_components(A[idx][:, idx], directed=False)[1]
        seeds = {lab[z] for z in V if op[z]}
        out[r] = int(np.isin(lab, list(seeds)).sum()) if seeds else 0
    return out


def bernoulli_cluster_tail(p, graph, V, M, replicas, seed, exact_cap=20):
    """``P_p(|C_V| >= M)`` by Monte Carlo; exact enumeration as well on small windows."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    M = np.atleast_1d(np.asarray(M))
    V = [int(z) for z in V]
    rng = np.random.default_rng(seed)
    openm = rng.random((replicas, graph.n_vertices)) < p
    sizes = _cluster_sizes_batch(graph, openm, V)
    est = (sizes[:, None] >= M[None, :]).mean(axis=0)
    exact = None
    if graph.n_vertices <= exact_cap:
        exact = bernoulli_tail_exact(p, graph, V, M)
    return BernoulliTail(M, est, stats.binomial_se(est, replicas), exact)


def bernoulli_tail_exact(p, graph, V, M):
    n = graph.n_vertices
    if n > 20:
        raise ValueError("exact enumeration is limited to 20 vertices")
    M = np.atleast_1d(np.asarray(M))
    codes = np.arange(2 ** n, dtype=np.int64)
    openm = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
    k = openm.sum(axis=1)
    w = p ** k * (1 - p) ** (n - k)
    sizes = _cluster_sizes_batch(graph, openm, V)
    return np.array([w[sizes >= m].sum() for m in M])


# ---------------------------------------------------------------- domination

@dataclass
class DominationReport:
    p_uncond: float
    p_hat: float
    classes: dict
    flagged: list
    M: np.ndarray
    painted_tail: np.ndarray
    painted_se: np.ndarray
    bern_tail: np.ndarray
    bern_se: np.ndarray
    passes: bool
    n_replicas: int
    extra: dict = field(default_factory=dict)

    def summary(self):
        return {"p_uncond": self.p_uncond, "p_hat": self.p_hat, "passes": self.passes,
                "n_replicas": self.n_replicas, "flagged_classes": [list(k) for k in self.flagged],
                "classes": {f"{k[0]}/{k[1]}": v for k, v in self.classes.items()},
                "M": self.M.tolist(), "painted_tail": self.painted_tail.tolist(),
                "bernoulli_tail": self.bern_tail.tolist()}


def domination_check(params, coarse, horizon, replicas, seed, eps=None, V=None,
                     min_class=50, start=0, bern_replicas=None):
    """Empirical domination of the bad-box process by Bernoulli percolation.

    A vertex's conditioning class is ``(number of bad vertices at Gamma-distance
    exactly 2, size of that shell)``; the far field is summarised by the
    nearest shell that is not a neighbour.  ``p_hat`` is the largest bad
    frequency over classes seen at least ``min_class`` times.  The painted
    cluster tail of ``V`` (default: block 0 at layer 0) must not exceed the
    Bernoulli(``p_hat``) tail by more than 3 standard errors.
    """
    gamma = SpaceTimeGraph(coarse, horizon, eps)
    n = gamma.n_vertices
    shells = [sorted(gamma.dist_le(z, 2) - gamma.dist_le(z, 1)) for z in range(n)]
    V = [0] if V is None else list(V)
    regs, cores = _regions(coarse, coarse.L)
    slen = np.array([len(sh) for sh in shells], dtype=np.int64)
    # shells padded with a sentinel index pointing at an always-closed slot
    spad = np.full((n, max(int(slen.max(initial=0)), 1)), n, dtype=np.int64)
    for z, sh in enumerate(shells):
        spad[z, :len(sh)] = sh
    nbad = np.empty((replicas, n), dtype=np.int64)
    opens = np.empty((replicas, n), dtype=bool)
    sizes = np.empty(replicas, dtype=np.int64)
    for i, r in enumerate(range(start, start + replicas)):
        real = sample_updates(coarse.geom, paint_window(gamma), seed, r)
        op = _paint_real(real, params, gamma, regs, cores)
        opens[i] = op
        nbad[i] = np.append(op, False)[spad].sum(axis=1)
        sizes[i] = len(clusters_bfs(PercolationConfig(gamma, op), V))
    bad_total = int(opens.sum())
    keys = np.stack([nbad.ravel(), np.broadcast_to(slen, nbad.shape).ravel()], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    cnt = np.bincount(inv, minlength=len(uniq))
    bad = np.bincount(inv, weights=opens.ravel(), minlength=len(uniq))
    classes = {(int(k[0]), int(k[1])): {"count": int(c), "bad": int(b), "p": b / c}
               for k, c, b in zip(uniq, cnt, bad)}
    counts = {k: v["count"] for k, v in classes.items()}
    ok = [k for k in classes if counts[k] >= min_class]
    flagged = [k for k in classes if counts[k] < min_class]
    p_unc = bad_total / (replicas * n)
    p_hat = max((classes[k]["p"] for k in ok), default=p_unc)
    M = np.arange(1, n + 1)
    pt = (sizes[:, None] >= M[None, :]).mean(axis=0)
    pse = stats.binomial_se(pt, replicas)
    bt = bernoulli_cluster_tail(p_hat, gamma, V, M, bern_replicas or replicas, seed + 1)
    passes = bool(np.all(pt <= bt.estimate + 3 * np.sqrt(pse ** 2 + bt.se ** 2)))
    return DominationReport(p_unc, p_hat, classes, flagged, M, pt, pse, bt.estimate, bt.se,
                            passes, replicas)
