"""Polymer models, cluster expansions and dependency-encoding polymer weights.

Three layers live here:

* abstract polymer models (Ursell functions, exact partition functions, the
  convergence criterion and the truncated cluster expansion);
* exactly enumerable synthetic dependency-encoding measures on at most six
  sites, used to check the polymer representation of a product of local
  functions to machine precision;
* Monte Carlo polymer weights built from coupled Glauber samples on a coarse
  torus, giving perturbative estimates of the pressure and of correlations.
"""
from dataclasses import dataclass, field
from fractions import Fraction
import itertools
import math

import numpy as np

from ._accel import njit
from ._rng import child_key, master_key
from .glauber import site_field
from .infoperc import _cftp_one
from .lattice import CoarseLattice

URSELL_CAP = 10
Z_EXACT_CAP = 22


# ---------------------------------------------------------------- Ursell functions

def _is_exact(x):
    return isinstance(x, (int, Fraction)) or (isinstance(x, float) and x in (0.0, 1.0)) \
        or (isinstance(x, np.integer))


def _prepare(delta):
    d = [[delta[i][j] for j in range(len(delta))] for i in range(len(delta))]
    n = len(d)
    for i in range(n):
        for j in range(n):
            if d[i][j] != d[j][i]:
                raise ValueError("compatibility matrix must be symmetric")
            if not -1 <= d[i][j] <= 1:
                raise ValueError("compatibility entries must lie in [-1, 1]")
    exact = all(_is_exact(d[i][j]) for i in range(n) for j in range(n))
    if exact:
        d = [[Fraction(d[i][j]) if not isinstance(d[i][j], Fraction) else d[i][j]
              for j in range(n)] for i in range(n)]
    return d, exact


def connected_sum(delta):
    """Sum over connected spanning graphs ``G`` of ``K_n`` of ``prod_{ij in G} (delta_ij - 1)``.

    Subset recursion on the vertex set: with ``F(S) = prod_{i<j in S} delta_ij``
    (the same sum over *all* graphs on ``S``), splitting off the component of
    the smallest vertex gives ``F(S) = sum_T C(T) F(S \\ T)``.
    """
    d, exact = _prepare(delta)
    n = len(d)
    if n == 0:
        return Fraction(0) if exact else 0.0
    one = Fraction(1) if exact else 1.0
    full = (1 << n) - 1
    F = [one] * (1 << n)
    for S in range(1, 1 << n):
        low = (S & -S).bit_length() - 1
        rest = S & ~(1 << low)
        f = F[rest]
        r = rest
        while r:
            j = (r & -r).bit_length() - 1
            f = f * d[low][j]
            r &= r - 1
        F[S] = f
    C = [0] * (1 << n)
    for S in range(1, 1 << n):
        low = S & -S
        rest = S & ~low
        c = F[S]
        # proper subsets T of S containing the lowest vertex
        sub = (rest - 1) & rest
        while True:
            T = low | sub
            if T != S:
                c -= C[T] * F[S & ~T]
            if sub == 0:
                break
            sub = (sub - 1) & rest
        C[S] = c
    return C[full]


def multiset_connected_sum(D, counts, cache=None):
    """``connected_sum`` of the list holding ``counts[i]`` copies of polymer ``i``.

    Recursion over count vectors rather than labelled vertex subsets: with
    ``F(m) = prod_i D_ii^C(m_i, 2) prod_{i<j} D_ij^(m_i m_j)``, split off the
    component of one copy of the lowest present polymer, weighting each type
    vector ``t`` by the number of labelled subsets realizing it.  Integer
    valued when ``D`` is 0/1, so hard-core coefficients stay exact.
    """
    k = len(counts)
    if cache is None:
        cache = {}

    def F(m):
        f = 1
        for i in range(k):
            if m[i]:
                f = f * D[i][i] ** (m[i] * (m[i] - 1) // 2)
                for j in range(i + 1, k):
                    if m[j]:
                        f = f * D[i][j] ** (m[i] * m[j])
        return f

    def C(m):
        if m in cache:
            return cache[m]
        i0 = next(i for i in range(k) if m[i])
        c = F(m)
        ranges = [range(1, m[i] + 1) if i == i0 else range(m[i] + 1) for i in range(k)]
        for t in itertools.product(*ranges):
            if t == m:
                continue
            mult = math.comb(m[i0] - 1, t[i0] - 1)
            for i in range(k):
                if i != i0:
                    mult *= math.comb(m[i], t[i])
            rest = tuple(a - b for a, b in zip(m, t))
            c -= mult * C(t) * F(rest)
        cache[m] = c
        return c

    return C(tuple(int(c) for c in counts))


def ursell(delta, cap=URSELL_CAP):
    """Ursell function ``U(gamma_1, ..., gamma_n)`` from the pair compatibility matrix.

    Exact (``Fraction``) when every entry is 0 or 1 (or rational).
    """
    n = len(delta)
    if n < 1:
        raise ValueError("Ursell function needs n >= 1")
    if n > cap:
        raise ValueError(f"Ursell function capped at n={cap}")
    c = connected_sum(delta)
    return c / math.factorial(n)


def ursell_brute(delta):
    """Same quantity by listing every edge subset of ``K_n`` (``n <= 5``)."""
    d, exact = _prepare(delta)
    n = len(d)
    if n > 5:
        raise ValueError("brute-force Ursell limited to n <= 5")
    if n == 1:
        return Fraction(1) if exact else 1.0
    edges = list(itertools.combinations(range(n), 2))
    tot = Fraction(0) if exact else 0.0
    for k in range(len(edges) + 1):
        for G in itertools.combinations(edges, k):
            parent = list(range(n))

            def find(x):
                while parent[x] != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x
            for a, b in G:
                parent[find(a)] = find(b)
            if len({find(x) for x in range(n)}) == 1:
                prod = Fraction(1) if exact else 1.0
                for a, b in G:
                    prod *= d[a][b] - 1
                tot += prod
    return tot / math.factorial(n)


def all_graph_sum(delta):
    """Sum over every edge subset of ``K_n`` (connected or not) of ``prod (delta - 1)``."""
    d, exact = _prepare(delta)
    n = len(d)
    edges = list(itertools.combinations(range(n), 2))
    tot = Fraction(0) if exact else 0.0
    for k in range(len(edges) + 1):
        for G in itertools.combinations(edges, k):
            prod = Fraction(1) if exact else 1.0
            for a, b in G:
                prod *= d[a][b] - 1
            tot += prod
    return tot


# ---------------------------------------------------------------- polymer models

POLYMER_SCHEMA = {
    "type": "object",
    "required": ["polymers", "weights"],
    "properties": {
        "polymers": {"type": "array",
                     "items": {"type": "array", "items": {"type": "integer"}}},
        "weights": {"type": "array",
                    "items": {"type": "array", "items": {"type": "number"},
                              "minItems": 2, "maxItems": 2}},
        "sizes": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
    },
}


@dataclass
class PolymerModel:
    polymers: list
    weights: np.ndarray
    delta: np.ndarray
    g: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.complex128)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        n = len(self.polymers)
        if self.weights.shape != (n,) or self.delta.shape != (n, n):
            raise ValueError("weights / compatibility matrix do not match the polymer list")
        if not np.array_equal(self.delta, self.delta.T):
            raise ValueError("compatibility must be symmetric")
        if np.any(np.abs(self.delta) > 1):
            raise ValueError("compatibility entries must lie in [-1, 1]")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        if self.g is None:
            self.g = np.array([float(len(p)) if hasattr(p, "__len__") else 1.0
                               for p in self.polymers])
        self.g = np.asarray(self.g, dtype=np.float64)

    def __len__(self):
        return len(self.polymers)

    @property
    def hard_core(self):
        return bool(np.all((self.delta == 0) | (self.delta == 1)))

    @classmethod
    def from_sets(cls, sets, weights, g=None):
        """Polymers are finite sets, compatible iff disjoint (a set is incompatible with itself)."""
        sets = [frozenset(s) for s in sets]
        n = len(sets)
        delta = np.array([[1.0 if not (sets[i] & sets[j]) else 0.0 for j in range(n)]
                          for i in range(n)]).reshape(n, n)
        return cls(sets, weights, delta, g)

    @classmethod
    def from_json(cls, data):
        import jsonschema

        jsonschema.validate(data, POLYMER_SCHEMA)
        w = [complex(a, b) for a, b in data["weights"]]
        return cls.from_sets(data["polymers"], w, data.get("sizes"))

    def to_json(self):
        return {"polymers": [sorted(p) for p in self.polymers],
                "weights": [[float(w.real), float(w.imag)] for w in self.weights],
                "sizes": self.g.tolist()}

    def with_weights(self, weights):
        return PolymerModel(self.polymers, weights, self.delta, self.g)

    def incompat(self):
        n = len(self)
        return [[j for j in range(n) if self.delta[i, j] != 1.0] for i in range(n)]


def polymer_z_exact(model, cap=Z_EXACT_CAP):
    """``sum_H prod_{pairs in H} delta prod_{H} w`` over all finite subsets ``H``."""
    n = len(model)
    if n > cap:
        raise ValueError(f"exact polymer partition function capped at {cap} polymers")
    w = model.weights
    d = model.delta
    total = 0j

    def rec(i, prod, chosen):
        nonlocal total
        if i == n:
            total += prod
            return
        rec(i + 1, prod, chosen)
        if w[i] == 0:
            return
        f = prod * w[i]
        for j in chosen:
            f *= d[i, j]
            if f == 0:
                return
        chosen.append(i)
        rec(i + 1, f, chosen)
        chosen.pop()

    rec(0, 1.0 + 0j, [])
    return complex(total)


@dataclass
class KPResult:
    passes: bool
    slack: float
    margins: np.ndarray
    total: float


def kp_check(model, g=None):
    """``sum_gamma e^{g(gamma)} |w(gamma)| |delta(gamma, gamma') - 1| <= g(gamma')`` for all ``gamma'``."""
    g = model.g if g is None else np.asarray(g, dtype=np.float64)
    if np.any(g <= 0):
        raise ValueError("g must be strictly positive")
    a = np.exp(g) * np.abs(model.weights)
    lhs = np.abs(model.delta - 1.0) @ a if len(model) else np.zeros(0)
    margins = g - lhs
    total = float(a.sum())
    slack = float(margins.min()) if len(model) else math.inf
    return KPResult(bool(np.all(margins >= 0) and math.isfinite(total)), slack, margins, total)


# ---------------------------------------------------------------- cluster expansion

@dataclass
class ClusterSeries:
    """Truncated cluster expansion as an explicit polynomial in the weights."""

    terms: list          # (indices tuple, counts tuple, coefficient)
    n_max: int
    n_polymers: int

    def value(self, w, by_order=False):
        w = np.asarray(w, dtype=np.complex128)
        orders = np.zeros(self.n_max + 1, dtype=np.complex128)
        for idx, cnt, coef in self.terms:
            t = complex(coef)
            for i, m in zip(idx, cnt):
                t *= w[i] ** m
            orders[sum(cnt)] += t
        return (orders.sum(), orders) if by_order else orders.sum()

    def grad(self, w):
        w = np.asarray(w, dtype=np.complex128)
        g = np.zeros(self.n_polymers, dtype=np.complex128)
        for idx, cnt, coef in self.terms:
            for k, (i, m) in enumerate(zip(idx, cnt)):
                t = complex(coef) * m * w[i] ** (m - 1)
                for j, (i2, m2) in enumerate(zip(idx, cnt)):
                    if j != k:
                        t *= w[i2] ** m2
                g[i] += t
        return g


def _connected_supports(adj, n_max, n):
    """Connected vertex sets of size ``<= n_max``, each listed once (rooted at its minimum)."""
    out = []

    def grow(current, untried, seen, root):
        out.append(tuple(sorted(current)))
        if len(current) == n_max:
            return
        untried = list(untried)
        while untried:
            v = untried.pop()
            fresh = [u for u in adj[v] if u > root and u not in seen]
            seen.update(fresh)
            current.append(v)
            grow(current, untried + fresh, seen, root)
            current.pop()
            seen.difference_update(fresh)

    for r in range(n):
        fresh = [u for u in adj[r] if u > r]
        grow([r], fresh, {r, *fresh}, r)
    return out


def cluster_series(model, n_max, max_terms=2_000_000):
    """Enumerate clusters (multisets with connected incompatibility graph) up to order ``n_max``."""
    n = len(model)
    d = model.delta
    exact = model.hard_core
    adj = [[j for j in range(n) if j != i and d[i, j] != 1.0] for i in range(n)]
    supports = _connected_supports(adj, n_max, n)
    caches = {}
    terms = []
    for S in supports:
        k = len(S)
        sub = tuple(int(d[i, j]) if exact else float(d[i, j]) for i in S for j in S)
        D = [list(sub[r * k:(r + 1) * k]) for r in range(k)]
        # one cache per distinct submatrix: count vectors are shared across supports
        cache = caches.setdefault(sub, {})
        for extra in range(n_max - k + 1):
            for add in itertools.combinations_with_replacement(range(k), extra):
                cnt = [1] * k
                for a in add:
                    cnt[a] += 1
                if k == 1 and cnt[0] > 1 and d[S[0], S[0]] == 1.0:
                    continue
                c = multiset_connected_sum(D, cnt, cache)
                denom = 1
                for m in cnt:
                    denom *= math.factorial(m)
                coef = Fraction(c, denom) if exact else c / denom
                if coef != 0:
                    terms.append((S, tuple(cnt), coef))
                if len(terms) > max_terms:
                    raise ValueError("cluster enumeration exceeded max_terms")
    return ClusterSeries(terms, n_max, n)


@dataclass
class ExpansionResult:
    value: complex
    per_order: np.ndarray
    last_order: float
    certified: bool
    n_terms: int
    kp: KPResult = None


def log_z_truncated(model, n_max, max_terms=2_000_000):
    """``sum_{n <= n_max} sum_{gamma_1..gamma_n} U(gamma_1..gamma_n) prod w``.

    ``certified`` records whether the convergence criterion holds with the
    model's size function; the last-order magnitude is a heuristic proxy for
    the neglected tail.
    """
    if len(model) == 0:
        return ExpansionResult(0j, np.zeros(n_max + 1, complex), 0.0, True, 0)
    ser = cluster_series(model, n_max, max_terms)
    val, orders = ser.value(model.weights, by_order=True)
    kp = kp_check(model)
    return ExpansionResult(complex(val), orders, float(abs(orders[-1])), kp.passes,
                           len(ser.terms), kp)


def log1p_series(w, n_max):
    """Power series of ``log(1 + w)`` (single self-incompatible polymer)."""
    return sum((-1) ** (k - 1) * w ** k / k for k in range(1, n_max + 1))


# ---------------------------------------------------------------- dependency encodings

def _subsets(mask):
    sub = mask
    while True:
        yield sub
        if sub == 0:
            return
        sub = (sub - 1) & mask


@dataclass
class DependencyEncoding:
    """Explicit law of ``(sigma, X)`` on ``n <= 6`` sites with spins in ``alphabet``.

    ``X[e, v]`` is the bitmask of ``X_v`` in support point ``e``.
    """

    n: int
    sigma: np.ndarray
    X: np.ndarray
    prob: np.ndarray
    alphabet: tuple = (-1, 1)
    check: bool = True
    mu: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.int64).reshape(-1, self.n)
        self.X = np.asarray(self.X, dtype=np.int64).reshape(-1, self.n)
        self.prob = np.asarray(self.prob, dtype=np.float64)
        self._merge()
        if self.check:
            self.verify()

    def _merge(self):
        key = {}
        for s, x, p in zip(self.sigma, self.X, self.prob):
            k = (tuple(s), tuple(x))
            key[k] = key.get(k, 0.0) + p
        ks = [k for k, p in key.items() if p > 0]
        self.sigma = np.array([k[0] for k in ks], dtype=np.int64).reshape(-1, self.n)
        self.X = np.array([k[1] for k in ks], dtype=np.int64).reshape(-1, self.n)
        self.prob = np.array([key[k] for k in ks], dtype=np.float64)

    def X_of(self, sites_mask):
        """``X_Delta`` per support point."""
        out = np.zeros(len(self.prob), dtype=np.int64)
        for v in range(self.n):
            if sites_mask >> v & 1:
                out |= self.X[:, v]
        return out

    def marginal(self):
        m = {}
        for s, p in zip(self.sigma, self.prob):
            m[tuple(s)] = m.get(tuple(s), 0.0) + p
        return m

    def verify(self, tol=1e-12):
        if self.n > 6:
            raise ValueError("exhaustive verification is limited to 6 sites")
        if abs(self.prob.sum() - 1) > tol:
            raise ValueError("probabilities do not sum to one")
        for v in range(self.n):
            if np.any((self.X[:, v] >> v & 1) == 0):
                raise ValueError(f"site {v} is missing from its own dependency set")
        if self.mu is not None:
            marg = self.marginal()
            for k in set(marg) | set(self.mu):
                if abs(marg.get(k, 0.0) - self.mu.get(k, 0.0)) > tol:
                    raise ValueError("first marginal differs from the declared measure")
        full = (1 << self.n) - 1
        for D1 in range(1, full + 1):
            rest = full & ~D1
            for D2 in _subsets(rest):
                if D2 > D1:
                    self._check_pair(D1, D2, tol)
        return True

    def _keys(self, D):
        cols = [v for v in range(self.n) if D >> v & 1]
        XD = self.X_of(D)
        return [(tuple(s[cols]), int(x)) for s, x in zip(self.sigma, XD)]

    def _check_pair(self, D1, D2, tol):
        k1 = self._keys(D1)
        k2 = self._keys(D2)
        joint, m1, m2 = {}, {}, {}
        for a, b, p in zip(k1, k2, self.prob):
            joint[(a, b)] = joint.get((a, b), 0.0) + p
            m1[a] = m1.get(a, 0.0) + p
            m2[b] = m2.get(b, 0.0) + p
        for a, pa in m1.items():
            for b, pb in m2.items():
                if a[1] & b[1]:
                    continue
                if abs(joint.get((a, b), 0.0) - pa * pb) > tol:
                    raise ValueError(f"factorization fails for supports {D1:b}, {D2:b}")

    # constructors -------------------------------------------------------
    @classmethod
    def from_site_randomness(cls, n, menus, alphabet=(-1, 1), check=True):
        """Law of ``(sigma, X)`` driven by independent per-site randomness.

        ``menus[v]`` lists ``(prob, reach_mask, token)`` options for site ``v``.
        ``X_v`` is the closure of ``{v}`` under ``x -> reach(x)``, and ``sigma_v``
        is ``alphabet[sum of tokens over X_v mod len(alphabet)]``; both only
        read the randomness inside ``X_v``, which is what makes the law
        dependency encoding.
        """
        sig, Xs, ps = [], [], []
        for combo in itertools.product(*[range(len(m)) for m in menus]):
            p = 1.0
            reach = []
            tok = []
            for v, c in enumerate(combo):
                pv, r, t = menus[v][c]
                p *= pv
                reach.append(r | (1 << v))
                tok.append(t)
            if p == 0:
                continue
            X = []
            s = []
            for v in range(n):
                cl = 1 << v
                while True:
                    nxt = cl
                    for x in range(n):
                        if cl >> x & 1:
                            nxt |= reach[x]
                    if nxt == cl:
                        break
                    cl = nxt
                X.append(cl)
                s.append(alphabet[sum(tok[x] for x in range(n) if cl >> x & 1) % len(alphabet)])
            sig.append(s)
            Xs.append(X)
            ps.append(p)
        return cls(n, sig, Xs, ps, tuple(alphabet), check)

    @classmethod
    def block_product(cls, n, blocks, block_laws, alphabet=(-1, 1), check=True):
        """Independent blocks; ``X_v`` is the block of ``v``.

        ``block_laws[b]`` maps spin tuples on ``blocks[b]`` to probabilities.
        """
        sig, Xs, ps = [], [], []
        masks = [sum(1 << v for v in b) for b in blocks]
        items = [list(law.items()) for law in block_laws]
        for combo in itertools.product(*items):
            s = [0] * n
            X = [0] * n
            p = 1.0
            for b, (vals, pb) in zip(range(len(blocks)), combo):
                p *= pb
                for v, x in zip(blocks[b], vals):
                    s[v] = x
                    X[v] = masks[b]
            sig.append(s)
            Xs.append(X)
            ps.append(p)
        return cls(n, sig, Xs, ps, tuple(alphabet), check)

    @classmethod
    def independent_sites(cls, probs_plus, check=True):
        n = len(probs_plus)
        laws = [{(1,): p, (-1,): 1 - p} for p in probs_plus]
        return cls.block_product(n, [[v] for v in range(n)], laws, check=check)


def random_block_encoding(n, rng, check=True):
    """Random partition of ``n`` sites into 1-3 site blocks with random block laws."""
    perm = list(rng.permutation(n))
    blocks = []
    while perm:
        k = int(rng.integers(2, 4)) if len(perm) > 1 else 1
        blocks.append(sorted(int(v) for v in perm[:k]))
        perm = perm[k:]
    laws = []
    for b in blocks:
        vals = list(itertools.product((-1, 1), repeat=len(b)))
        p = rng.dirichlet(np.ones(len(vals)))
        laws.append(dict(zip(vals, p)))
    return DependencyEncoding.block_product(n, blocks, laws, check=check)


def random_reach_encoding(n, rng, n_options=2, check=True):
    menus = []
    for v in range(n):
        p = rng.dirichlet(np.ones(n_options))
        opts = []
        for k in range(n_options):
            r = 0
            for x in range(n):
                if x != v and abs(x - v) <= 2 and rng.random() < 0.4:
                    r |= 1 << x
            opts.append((float(p[k]), r, int(rng.integers(0, 2))))
        menus.append(opts)
    return DependencyEncoding.from_site_randomness(n, menus, check=check)


@dataclass
class LocalFunction:
    """``f~_A`` on ``Omega^A``: ``table`` maps spin tuples on sorted ``support`` to values."""

    support: tuple
    table: dict

    @property
    def mask(self):
        return sum(1 << v for v in self.support)

    def __call__(self, sigma_rows):
        idx = list(self.support)
        return np.array([self.table[tuple(r[idx])] for r in sigma_rows], dtype=np.complex128)


def random_local_function(support, rng, alphabet=(-1, 1), scale=0.5):
    support = tuple(sorted(int(v) for v in support))
    tab = {}
    for vals in itertools.product(alphabet, repeat=len(support)):
        tab[vals] = complex(1 + scale * rng.normal(), scale * rng.normal())
    return LocalFunction(support, tab)


def _conn_table(Xf, a, n_sets):
    """Per support point, ``Conn(U)`` for every ``U`` in ``[0, 2^n)``.

    ``Xf`` is ``(E, F)`` bitmasks of the ``X`` sets of the functions, ``a`` the
    ``(E, F)`` values of ``f~ - 1``.  ``Conn(U)`` sums ``prod a`` over sets ``H``
    of functions whose ``X`` sets cover exactly ``U`` with a connected
    intersection pattern.
    """
    E, F = Xf.shape
    N = 1 << n_sets
    P = np.ones((E, N), dtype=np.complex128)
    U = np.arange(N)
    for f in range(F):
        inside = (Xf[:, f][:, None] & ~U[None, :]) == 0
        P *= np.where(inside, 1.0 + a[:, f][:, None], 1.0)
    G = P.copy()
    for k in range(n_sets):
        bit = 1 << k
        hi = (U & bit) != 0
        G[:, hi] -= G[:, U[hi] ^ bit]
    conn = np.zeros_like(G)
    for S in range(1, N):
        low = S & -S
        rest = S & ~low
        c = G[:, S].copy()
        sub = (rest - 1) & rest if rest else 0
        while rest:
            T = low | sub
            c -= conn[:, T] * G[:, S & ~T]
            if sub == 0:
                break
            sub = (sub - 1) & rest
        conn[:, S] = c
    return conn


def polymer_weights_exact(phi, functions):
    """``w(C)`` for every nonempty ``C``: ``Phi(prod_{A in H}(f~_A - 1) 1_{A(C, H)})`` summed over ``H``."""
    Xf = np.stack([phi.X_of(f.mask) for f in functions], axis=1) if functions else \
        np.zeros((len(phi.prob), 0), dtype=np.int64)
    a = np.stack([f(phi.sigma) - 1.0 for f in functions], axis=1) if functions else \
        np.zeros((len(phi.prob), 0), dtype=np.complex128)
    conn = _conn_table(Xf, a, phi.n)
    return phi.prob @ conn


def polymer_weights_direct(phi, functions):
    """Reference ``w(C)`` by listing every nonempty ``H`` explicitly (few functions)."""
    n = phi.n
    w = np.zeros(1 << n, dtype=np.complex128)
    Xf = [phi.X_of(f.mask) for f in functions]
    vals = [f(phi.sigma) - 1.0 for f in functions]
    for k in range(1, len(functions) + 1):
        for H in itertools.combinations(range(len(functions)), k):
            for e in range(len(phi.prob)):
                sets = [int(Xf[i][e]) for i in H]
                U = 0
                for s in sets:
                    U |= s
                if not _connected_masks(sets):
                    continue
                t = phi.prob[e]
                for i in H:
                    t *= vals[i][e]
                w[U] += t
    return w


def _connected_masks(sets):
    comp = sets[0]
    left = list(sets[1:])
    changed = True
    while left and changed:
        changed = False
        for s in list(left):
            if s & comp:
                comp |= s
                left.remove(s)
                changed = True
    return not left


def hard_core_z(weights, n):
    """Partition function of subsets of ``[n]`` with disjointness: ``Z(S) = Z(S-min) + sum w(C) Z(S-C)``."""
    Z = np.zeros(1 << n, dtype=np.complex128)
    Z[0] = 1.0
    for S in range(1, 1 << n):
        low = S & -S
        rest = S & ~low
        z = Z[rest]
        for sub in _subsets(rest):
            C = low | sub
            z += weights[C] * Z[S & ~C]
        Z[S] = z
    return Z[(1 << n) - 1]


@dataclass
class IdentityResult:
    lhs: complex
    rhs: complex
    residual: float
    weights: np.ndarray


def verify_polymer_identity(phi, functions):
    """Both sides of ``<prod f~_A> = Z_polymer(w)`` computed exactly."""
    if phi.n > 6:
        raise ValueError("identity check limited to 6 sites")
    for f in functions:
        if not f.support or max(f.support) >= phi.n:
            raise ValueError("function supports must be nonempty subsets of the sites")
    prod = np.ones(len(phi.prob), dtype=np.complex128)
    for f in functions:
        prod *= f(phi.sigma)
    lhs = complex(phi.prob @ prod)
    w = polymer_weights_exact(phi, functions)
    rhs = complex(hard_core_z(w, phi.n))
    return IdentityResult(lhs, rhs, abs(lhs - rhs), w)


# ---------------------------------------------------------------- block energy decomposition

class BlockEnergyDecomposition:
    """Bond sum split into block terms ``f_v`` and face-adjacent cross terms ``f_vw``."""

    def __init__(self, coarse):
        self.coarse = coarse
        g = coarse.geom
        bonds = g.bonds
        if g.side < 3:
            raise ValueError("energy split needs torus side >= 3 (side 2 doubles bonds)")
        bo = coarse.block_of
        bi, bj = bo[bonds[:, 0]], bo[bonds[:, 1]]
        self.edges = coarse.face_edges
        eidx = {e: k for k, e in enumerate(self.edges)}
        nb = coarse.n_blocks
        owner = np.where(bi == bj, bi, -1)
        for k in np.flatnonzero(owner < 0):
            e = (min(bi[k], bj[k]), max(bi[k], bj[k]))
            owner[k] = nb + eidx[e]
        self.bonds = bonds
        self.owner = owner
        self.n_functions = nb + len(self.edges)
        # blocks touched by each function (padded with -1)
        self.fblocks = np.full((self.n_functions, 2), -1, dtype=np.int64)
        self.fblocks[:nb, 0] = np.arange(nb)
        for k, (a, b) in enumerate(self.edges):
            self.fblocks[nb + k] = (a, b)
        self.bound = 2 * g.d * (2 * coarse.L + 1) ** g.d

    def values(self, sigma):
        """``(R, n_functions)`` matrix of ``f_b(sigma)`` for a batch of configurations."""
        s = np.atleast_2d(np.asarray(sigma, dtype=np.int64))
        prod = s[:, self.bonds[:, 0]] * s[:, self.bonds[:, 1]]
        out = np.zeros((s.shape[0], self.n_functions), dtype=np.int64)
        np.add.at(out.T, self.owner, prod.T)
        return out

    def total(self, sigma):
        s = np.atleast_2d(np.asarray(sigma, dtype=np.int64))
        return (s[:, self.bonds[:, 0]] * s[:, self.bonds[:, 1]]).sum(axis=1)


# ---------------------------------------------------------------- coupled samples of Phi^L

@njit
def _phi_batch(master, r0, nrep, n, nbr, beta, hvec, members, block_of, t_max):
    nb = members.shape[0]
    sigma = np.zeros((nrep, n), dtype=np.int8)
    X = np.zeros((nrep, nb), dtype=np.int64)
    ok = np.ones(nrep, dtype=np.bool_)
    for r in range(nrep):
        key = child_key(master, r0 + r)
        for b in range(nb):
            A = members[b]
            c, tau, cert, samp, reached = _cftp_one(key, n, nbr, beta, hvec, A, 0.0, t_max,
                                                    True)
            if not c:
                ok[r] = False
                break
            for i in range(A.shape[0]):
                sigma[r, A[i]] = samp[i]
            m = 0
            for x in range(n):
                if reached[x]:
                    m |= np.int64(1) << block_of[x]
            X[r, b] = m
    return sigma, X, ok


@dataclass
class PhiSamples:
    coarse: CoarseLattice
    sigma: np.ndarray
    X: np.ndarray
    ok: np.ndarray

    @property
    def n_censored(self):
        return int(np.sum(~self.ok))


def sample_phi_L(params, coarse, replicas, seed, t_max=200.0, start=0):
    """Samples of ``(sigma, X)`` with ``X(v) = [KUPD(B_L(v))]_L`` (bitmask over blocks)."""
    if coarse.n_blocks > 62:
        raise ValueError("coarse torus limited to 62 blocks")
    g = coarse.geom
    s, X, ok = _phi_batch(master_key(seed), int(start), int(replicas), g.n_sites, g.nbr,
                          float(params.beta), site_field(g, params),
                          np.ascontiguousarray(coarse.members), coarse.block_of, float(t_max))
    return PhiSamples(coarse, s[ok], X[ok], ok)


@njit
def _weight_contrib(X, a, fblocks, polys, max_cand):
    R = X.shape[0]
    F = fblocks.shape[0]
    P = polys.shape[0]
    out = np.zeros((R, P), dtype=np.complex128)
    Xf = np.zeros(F, dtype=np.int64)
    cand = np.zeros(F, dtype=np.int64)
    for r in range(R):
        for f in range(F):
            m = X[r, fblocks[f, 0]]
            if fblocks[f, 1] >= 0:
                m |= X[r, fblocks[f, 1]]
            Xf[f] = m
        for p in range(P):
            C = polys[p]
            k = 0
            for f in range(F):
                if (Xf[f] & ~C) == 0 and a[r, f] != 0:
                    cand[k] = f
                    k += 1
            if k > max_cand:
                raise ValueError("too many candidate functions inside a polymer")
            tot = 0j
            for H in range(1, 1 << k):
                U = np.int64(0)
                prod = 1.0 + 0j
                first = -1
                for q in range(k):
                    if (H >> q) & 1:
                        U |= Xf[cand[q]]
                        prod *= a[r, cand[q]]
                        if first < 0:
                            first = q
                if U != C:
                    continue
                comp = Xf[cand[first]]
                done = np.int64(1) << first
                changed = True
                while changed:
                    changed = False
                    for q in range(k):
                        if (H >> q) & 1 and not (done >> q) & 1 and (Xf[cand[q]] & comp) != 0:
                            comp |= Xf[cand[q]]
                            done |= np.int64(1) << q
                            changed = True
                if done == H:
                    tot += prod
            out[r, p] = tot
    return out


def connected_block_sets(coarse, max_size):
    """Face-connected block sets of size ``<= max_size`` (as sorted tuples)."""
    adj = [coarse.neighbours(b, "l1") for b in range(coarse.n_blocks)]
    seen = set()
    for S in _connected_supports_any(adj, max_size, coarse.n_blocks):
        seen.add(S)
    return sorted(seen, key=lambda s: (len(s), s))


def _connected_supports_any(adj, n_max, n):
    out = []

    def grow(current, untried, seen, root):
        out.append(tuple(sorted(current)))
        if len(current) == n_max:
            return
        untried = list(untried)
        while untried:
            v = untried.pop()
            fresh = [u for u in adj[v] if u > root and u not in seen]
            seen.update(fresh)
            current.append(v)
            grow(current, untried + fresh, seen, root)
            current.pop()
            seen.difference_update(fresh)

    for r in range(n):
        fresh = [u for u in adj[r] if u > r]
        grow([r], list(dict.fromkeys(fresh)), {r, *fresh}, r)
    return out


def _mask(blocks):
    m = 0
    for b in blocks:
        m |= 1 << int(b)
    return m


@dataclass
class WeightEstimate:
    C: tuple
    mean: complex
    se: float
    n: int
    n_censored: int


def _pressure_functions(dec, sigma, z):
    f = dec.values(sigma).astype(np.float64)
    return np.expm1(z * f) if np.isrealobj(z) else np.exp(z * f) - 1.0


def estimate_weight(C, params, z, coarse, replicas, seed, t_max=200.0, samples=None,
                    max_cand=24):
    """Monte Carlo estimate of ``w(C)`` for the block energy split at coupling shift ``z``."""
    C = tuple(sorted(int(c) for c in C))
    if len(C) > 4:
        raise ValueError("weight estimation limited to |C| <= 4")
    dec = BlockEnergyDecomposition(coarse)
    ph = samples if samples is not None else sample_phi_L(params, coarse, replicas, seed, t_max)
    a = np.ascontiguousarray(_pressure_functions(dec, ph.sigma, z).astype(np.complex128))
    c = _weight_contrib(ph.X, a, dec.fblocks, np.array([_mask(C)], dtype=np.int64), max_cand)[:, 0]
    n = len(c)
    return WeightEstimate(C, complex(c.mean()), float(np.std(c) / math.sqrt(max(n, 1))), n,
                          ph.n_censored)


@dataclass
class PressureEstimate:
    value: float
    se: float
    first_order: float
    first_order_se: float
    energy_density: float
    energy_density_se: float
    direct: float
    direct_se: float
    n_samples: int
    n_censored: int
    n_polymers: int
    per_order: list = None
    method: str = "estimate"


def _log_z_and_grad(model, n_max):
    if len(model) <= 16:
        Z = polymer_z_exact(model)
        grad = np.zeros(len(model), dtype=np.complex128)
        h = 1e-7
        for i in range(len(model)):
            wp = model.weights.copy()
            wm = model.weights.copy()
            wp[i] += h
            wm[i] -= h
            grad[i] = (np.log(polymer_z_exact(model.with_weights(wp)))
                       - np.log(polymer_z_exact(model.with_weights(wm)))) / (2 * h)
        return complex(np.log(Z)), grad, None
    ser = cluster_series(model, n_max)
    val, orders = ser.value(model.weights, by_order=True)
    return complex(val), ser.grad(model.weights), orders


def pressure_perturbation(params, z, coarse, n_max, replicas, seed, max_size=None,
                          t_max=200.0, samples=None):
    """Estimate ``psi(beta + z, h) - psi(beta, h)`` on the torus of ``coarse``.

    Weights of every face-connected block set up to ``max_size`` blocks are
    estimated from coupled samples of ``Phi^L``; ``log Z`` of the resulting
    hard-core polymer model is taken exactly for at most 16 polymers and by
    the cluster expansion to order ``n_max`` otherwise.  Errors come from a
    first-order propagation of the per-sample weight contributions.
    """
    g = coarse.geom
    vol = g.n_sites
    dec = BlockEnergyDecomposition(coarse)
    ph = samples if samples is not None else sample_phi_L(params, coarse, replicas, seed, t_max)
    n = len(ph.sigma)
    energy = dec.total(ph.sigma).astype(np.float64)
    dens = energy / vol
    e_mean, e_se = float(dens.mean()), float(dens.std() / math.sqrt(n))
    ez = np.exp(z * energy)
    direct = float(np.log(ez.mean()) / vol)
    direct_se = float(ez.std() / math.sqrt(n) / ez.mean() / vol)
    if z == 0:
        return PressureEstimate(0.0, 0.0, 0.0, 0.0, e_mean, e_se, 0.0, 0.0, n,
                                ph.n_censored, 0)
    max_size = coarse.n_blocks if max_size is None else max_size
    polys = connected_block_sets(coarse, max_size)
    pm = np.array([_mask(p) for p in polys], dtype=np.int64)
    a = np.ascontiguousarray(_pressure_functions(dec, ph.sigma, z).astype(np.complex128))
    contrib = _weight_contrib(ph.X, a, dec.fblocks, pm, 24)
    w = contrib.mean(axis=0)
    model = PolymerModel.from_sets([frozenset(p) for p in polys], w)
    logz, grad, orders = _log_z_and_grad(model, n_max)
    s = (contrib @ grad).real
    se = float(s.std() / math.sqrt(n) / vol)
    return PressureEstimate(float(logz.real / vol), se, float(z * e_mean), float(abs(z) * e_se),
                            e_mean, e_se, direct, direct_se, n, ph.n_censored, len(polys),
                            None if orders is None else [complex(o).real / vol for o in orders])


@dataclass
class CorrelationEstimate:
    value: float
    se: float
    log_value: complex
    direct: float
    direct_se: float
    cancel_ok: bool
    n_samples: int
    n_censored: int


def correlation_perturbation(A, params, z, coarse, n_max, replicas, seed, max_size=None,
                             t_max=200.0, samples=None):
    """Estimate ``<sigma_A>`` at field ``h + z`` from the two polymer models ``w^A`` and ``w``."""
    A = sorted(int(a) for a in A)
    if not A:
        return CorrelationEstimate(1.0, 0.0, 0j, 1.0, 0.0, True, 0, 0)
    g = coarse.geom
    ph = samples if samples is not None else sample_phi_L(params, coarse, replicas, seed, t_max)
    n = len(ph.sigma)
    sig = ph.sigma.astype(np.int64)
    nb = coarse.n_blocks
    M = np.zeros((n, nb))
    fA = np.ones((n, nb))
    mem = coarse.members
    Aset = np.zeros(g.n_sites, dtype=bool)
    Aset[A] = True
    for b in range(nb):
        M[:, b] = sig[:, mem[b]].sum(axis=1)
        inA = mem[b][Aset[mem[b]]]
        if inA.size:
            fA[:, b] = np.prod(sig[:, inA], axis=1)
    ez = np.exp(z * M)
    a = ez - 1.0
    aA = ez * fA - 1.0
    fblocks = np.full((nb, 2), -1, dtype=np.int64)
    fblocks[:, 0] = np.arange(nb)
    max_size = nb if max_size is None else max_size
    polys = connected_block_sets(coarse, max_size)
    pm = np.array([_mask(p) for p in polys], dtype=np.int64)
    c = _weight_contrib(ph.X, np.ascontiguousarray(a.astype(np.complex128)), fblocks, pm, 24)
    cA = _weight_contrib(ph.X, np.ascontiguousarray(aA.astype(np.complex128)), fblocks, pm, 24)
    Ablocks = set(coarse.block_of[A].tolist())
    far = np.array([not (set(p) & Ablocks) for p in polys])
    cancel_ok = bool(np.array_equal(c[:, far], cA[:, far]))
    w, wA = c.mean(axis=0), cA.mean(axis=0)
    sets = [frozenset(p) for p in polys]
    lz, gz, _ = _log_z_and_grad(PolymerModel.from_sets(sets, w), n_max)
    lzA, gzA, _ = _log_z_and_grad(PolymerModel.from_sets(sets, wA), n_max)
    diff = lzA - lz
    val = float(np.exp(diff).real)
    s = (cA @ gzA - c @ gz).real
    se = float(val * s.std() / math.sqrt(n))
    # direct reweighting estimate from the same samples
    sA = np.prod(sig[:, A], axis=1)
    wgt = np.exp(z * sig.sum(axis=1))
    direct = float((sA * wgt).mean() / wgt.mean())
    direct_se = float(np.std(sA * wgt - direct * wgt) / math.sqrt(n) / wgt.mean())
    return CorrelationEstimate(val, se, complex(diff), direct, direct_se, cancel_ok, n,
                               ph.n_censored)
