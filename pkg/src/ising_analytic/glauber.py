"""Graphical construction of the heat-bath Glauber dynamic.

Time runs on ``(-inf, 0]``; internally every event is stored by its *age*
(``-time``), sorted ascending, so that extending a realization further into
the past appends to the arrays.  Randomness for site ``x`` in the unit age
slab ``[k, k+1)`` ("epoch" ``k``) comes from the keyed stream
``child_key(child_key(key, x), k)``:

* counter 0 gives the Poisson(1) event count by inverse CDF,
* counters ``1 + 2j`` and ``2 + 2j`` give the age offset and the mark of the
  ``j``-th event.
"""
from dataclasses import dataclass, field
import json
import math

import numpy as np

from ._accel import njit
from ._rng import child_key, keyed_uniform, master_key, replica_key
from .lattice import BoxGeom

_MAX_POISSON = 40
# salt for redrawing an event age that collided with another one
_COLLISION_SALT = 1 << 40


@dataclass(frozen=True)
class ModelParams:
    beta: float
    h: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if math.isnan(self.h):
            raise ValueError("h must not be NaN")


@dataclass
class SpinConfig:
    geom: object
    values: np.ndarray
    bc: str = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int8)
        if self.values.shape != (self.geom.n_sites,):
            raise ValueError("spin array does not match the geometry")
        if not np.all(np.abs(self.values) == 1):
            raise ValueError("spins must be +-1")
        if self.bc is None and isinstance(self.geom, BoxGeom):
            self.bc = self.geom.bc

    @classmethod
    def constant(cls, geom, value):
        return cls(geom, np.full(geom.n_sites, value, dtype=np.int8))

    def __le__(self, other):
        return bool(np.all(self.values <= other.values))

    def __eq__(self, other):
        return isinstance(other, SpinConfig) and np.array_equal(self.values, other.values)


def site_field(geom, params):
    """Per-site field seen by the heat-bath rule (boundary spins folded in)."""
    if hasattr(geom, "field"):
        return np.ascontiguousarray(geom.field(params.beta, params.h), dtype=np.float64)
    return np.full(geom.n_sites, float(params.h))


# ---------------------------------------------------------------- kernels

@njit
def _poisson1(u):
    k = 0
    p = math.exp(-1.0)
    cdf = p
    while u >= cdf and k < _MAX_POISSON:
        k += 1
        p /= k
        cdf += p
    return k


@njit
def _gen_epochs(key, n, e0, e1):
    """Events of every site in epochs ``e0 <= k < e1``, ascending in age."""
    total = 0
    for k in range(e0, e1):
        for x in range(n):
            sk = child_key(child_key(key, x), k)
            total += _poisson1(keyed_uniform(sk, 0))
    ages = np.empty(total, dtype=np.float64)
    sites = np.empty(total, dtype=np.int64)
    marks = np.empty(total, dtype=np.float64)
    slots = np.empty(total, dtype=np.int64)
    i = 0
    for k in range(e0, e1):
        for x in range(n):
            sk = child_key(child_key(key, x), k)
            c = _poisson1(keyed_uniform(sk, 0))
            for j in range(c):
                ages[i] = k + keyed_uniform(sk, 1 + 2 * j)
                marks[i] = keyed_uniform(sk, 2 + 2 * j)
                sites[i] = x
                slots[i] = j
                i += 1
    order = np.argsort(ages)
    ages = ages[order]
    sites = sites[order]
    marks = marks[order]
    slots = slots[order]
    salt = 0
    while True:
        clash = False
        for i in range(1, total):
            if ages[i] == ages[i - 1]:
                clash = True
                k = int(math.floor(ages[i]))
                sk = child_key(child_key(key, sites[i]), k)
                ages[i] = k + keyed_uniform(sk, _COLLISION_SALT + 2 * slots[i] + salt)
        if not clash:
            break
        salt += 1
        order = np.argsort(ages)
        ages = ages[order]
        sites = sites[order]
        marks = marks[order]
        slots = slots[order]
    return ages, sites, marks


@njit
def _threshold(beta, a, hx):
    return 1.0 / (1.0 + math.exp(-2.0 * beta * a - 2.0 * hx))


@njit
def _nsum(nbr, spins, v):
    a = 0
    for k in range(nbr.shape[1]):
        y = nbr[v, k]
        if y >= 0:
            a += int(spins[y])
    return a


@njit
def _run(ages, sites, marks, nbr, beta, hvec, lo, hi, spins):
    """Apply events ``hi-1, ..., lo`` (decreasing age = forward in time)."""
    for i in range(hi - 1, lo - 1, -1):
        v = sites[i]
        if marks[i] < _threshold(beta, _nsum(nbr, spins, v), hvec[v]):
            spins[v] = 1
        else:
            spins[v] = -1


@njit
def _run_pair(ages, sites, marks, nbr, beta, hvec, lo, hi, top, bot):
    for i in range(hi - 1, lo - 1, -1):
        v = sites[i]
        u = marks[i]
        top[v] = 1 if u < _threshold(beta, _nsum(nbr, top, v), hvec[v]) else -1
        bot[v] = 1 if u < _threshold(beta, _nsum(nbr, bot, v), hvec[v]) else -1


@njit
def _sandwich(ages, sites, marks, nbr, beta, hvec, lo, hi, A, top, bot):
    """Run the extremal pair over events ``[lo, hi)`` and test agreement on ``A``."""
    top[:] = 1
    bot[:] = -1
    _run_pair(ages, sites, marks, nbr, beta, hvec, lo, hi, top, bot)
    for a in A:
        if top[a] != bot[a]:
            return False
    return True


@njit
def _evolve_batch(master, r0, nrep, n, nbr, beta, hvec, eta, t):
    out = np.empty((nrep, n), dtype=np.int8)
    ne = int(math.ceil(t))
    for r in range(nrep):
        key = child_key(master, r0 + r)
        ages, sites, marks = _gen_epochs(key, n, 0, ne)
        hi = np.searchsorted(ages, t, side="right")
        s = eta.copy()
        _run(ages, sites, marks, nbr, beta, hvec, 0, hi, s)
        out[r] = s
    return out


# ---------------------------------------------------------------- realization

@dataclass
class UpdateRealization:
    """Poisson clocks and marks of every site on the window ``[-window, 0]``.

    ``ages`` is ascending; the event ``i`` happens at time ``-ages[i]`` at site
    ``sites[i]`` with uniform mark ``marks[i]``.
    """

    geom: object
    window: float
    key: int
    ages: np.ndarray
    sites: np.ndarray
    marks: np.ndarray
    seed: int = None
    replica: int = 0
    _epochs: int = field(default=0, repr=False)

    @property
    def n_events(self):
        return len(self.ages)

    @property
    def times(self):
        return -self.ages

    def span(self, age_lo, age_hi):
        """Index range of events with ``age_lo <= age <= age_hi``."""
        return (int(np.searchsorted(self.ages, age_lo, side="left")),
                int(np.searchsorted(self.ages, age_hi, side="right")))

    def require(self, age):
        if age > self.window:
            raise ValueError(f"realization window {self.window} does not cover age {age}")

    def restrict(self, window):
        if window > self.window:
            raise ValueError("cannot restrict to a longer window")
        hi = int(np.searchsorted(self.ages, window, side="right"))
        return UpdateRealization(self.geom, float(window), self.key, self.ages[:hi].copy(),
                                 self.sites[:hi].copy(), self.marks[:hi].copy(),
                                 self.seed, self.replica,
                                 -1 if self._epochs < 0 else int(math.ceil(window)))

    def events_of(self, site):
        sel = self.sites == site
        return self.ages[sel], self.marks[sel]

    def site_mask(self, sites):
        m = np.zeros(self.geom.n_sites, dtype=np.bool_)
        m[np.asarray(list(sites), dtype=np.int64)] = True
        return m

    def identical(self, other):
        return (self.window == other.window and self.key == other.key
                and np.array_equal(self.ages, other.ages)
                and np.array_equal(self.sites, other.sites)
                and np.array_equal(self.marks, other.marks))

    def to_dict(self):
        return {"n_sites": int(self.geom.n_sites), "window": self.window,
                "seed": self.seed, "replica": self.replica,
                "events": [[int(s), -float(a), float(u)]
                           for s, a, u in zip(self.sites, self.ages, self.marks)]}

    def dump(self, path):
        """JSON dump of ``(site, time, mark)`` triples."""
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, geom, data):
        ev = np.asarray(data["events"], dtype=np.float64).reshape(-1, 3)
        order = np.argsort(-ev[:, 1], kind="stable")
        ev = ev[order]
        seed = data.get("seed")
        key = replica_key(seed, data.get("replica", 0)) if seed is not None else 0
        return cls(geom, float(data["window"]), key, np.ascontiguousarray(-ev[:, 1]),
                   ev[:, 0].astype(np.int64), np.ascontiguousarray(ev[:, 2]),
                   seed, data.get("replica", 0), int(math.ceil(data["window"])))

    @classmethod
    def load(cls, geom, path):
        with open(path) as fh:
            return cls.from_dict(geom, json.load(fh))

    @classmethod
    def from_events(cls, geom, window, events):
        """Hand-built realization from ``(site, age, mark)`` triples (no stream)."""
        ev = sorted(events, key=lambda e: e[1])
        ages = np.array([e[1] for e in ev], dtype=np.float64)
        if len(set(ages.tolist())) != len(ages):
            raise ValueError("event ages must be distinct")
        if ages.size and (ages[0] < 0 or ages[-1] > window):
            raise ValueError("event outside the window")
        return cls(geom, float(window), 0, ages,
                   np.array([e[0] for e in ev], dtype=np.int64),
                   np.array([e[2] for e in ev], dtype=np.float64), None, 0, -1)


def sample_updates(geom, window, seed, replica=0):
    """Realization on ``[-window, 0]`` from master ``seed`` (replica ``replica``)."""
    if window < 0:
        raise ValueError("window length must be >= 0")
    key = replica_key(seed, replica)
    ne = int(math.ceil(window))
    ages, sites, marks = _gen_epochs(key, geom.n_sites, 0, ne)
    hi = int(np.searchsorted(ages, window, side="right"))
    return UpdateRealization(geom, float(window), key, ages[:hi], sites[:hi], marks[:hi],
                             seed, replica, ne)


def extend_backward(real, new_window):
    """Same randomness on the longer window ``[-new_window, 0]``."""
    if new_window < real.window:
        raise ValueError("new start must be earlier than the old one")
    if new_window == real.window:
        return real
    if real._epochs < 0:
        raise ValueError("hand-built realizations cannot be extended")
    e0 = int(math.floor(real.window))
    e1 = int(math.ceil(new_window))
    ages, sites, marks = _gen_epochs(real.key, real.geom.n_sites, e0, e1)
    lo = int(np.searchsorted(ages, real.window, side="right"))
    hi = int(np.searchsorted(ages, new_window, side="right"))
    return UpdateRealization(real.geom, float(new_window), real.key,
                             np.concatenate([real.ages, ages[lo:hi]]),
                             np.concatenate([real.sites, sites[lo:hi]]),
                             np.concatenate([real.marks, marks[lo:hi]]),
                             real.seed, real.replica, e1)


def flip(params, neighbour_sum, mark):
    """Heat-bath outcome: +1 iff ``mark < (1 + exp(-2 beta A - 2 h))^-1``."""
    if not 0.0 <= mark <= 1.0:
        raise ValueError("mark must lie in [0, 1]")
    return 1 if mark < _threshold(params.beta, float(neighbour_sum), float(params.h)) else -1


def evolve(real, params, eta, age_from=None, age_to=0.0):
    """Run the dynamic from time ``-age_from`` (default: window start) to ``-age_to``."""
    if eta.geom.n_sites != real.geom.n_sites:
        raise ValueError("configuration and realization live on different geometries")
    age_from = real.window if age_from is None else age_from
    real.require(age_from)
    lo, hi = real.span(age_to, age_from)
    s = eta.values.copy()
    _run(real.ages, real.sites, real.marks, real.geom.nbr, float(params.beta),
         site_field(real.geom, params), lo, hi, s)
    return SpinConfig(eta.geom, s, eta.bc)


def evolve_extremal(real, params, age_from=None, age_to=0.0):
    """Evolutions from all-plus and all-minus under the same realization."""
    g = real.geom
    return (evolve(real, params, SpinConfig.constant(g, 1), age_from, age_to),
            evolve(real, params, SpinConfig.constant(g, -1), age_from, age_to))


def extremal_trajectory(real, params):
    """Yield ``(top, bottom)`` arrays after every event, oldest first."""
    g = real.geom
    top = np.ones(g.n_sites, dtype=np.int8)
    bot = -top
    hv = site_field(g, params)
    for i in range(real.n_events - 1, -1, -1):
        _run_pair(real.ages, real.sites, real.marks, g.nbr, float(params.beta), hv,
                  i, i + 1, top, bot)
        yield top, bot


def evolve_batch(geom, params, eta, window, seed, replicas, start=0):
    """Final configurations of ``replicas`` independent runs (replica ``start + r``).

    Replica ``r`` uses exactly the randomness of ``sample_updates(geom, window,
    seed, start + r)``.
    """
    eta = eta.values if isinstance(eta, SpinConfig) else np.asarray(eta, dtype=np.int8)
    return _evolve_batch(master_key(seed), int(start), int(replicas), geom.n_sites,
                         geom.nbr, float(params.beta), site_field(geom, params),
                         eta.astype(np.int8), float(window))
