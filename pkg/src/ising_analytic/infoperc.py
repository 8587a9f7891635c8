"""Information percolation: support emptiness, update sets, coupling times.

``SUP(t, t', A)`` is only ever exposed through its emptiness, decided by the
monotone sandwich: the chains started from all-plus and all-minus at ``-t``
agree on ``A`` at ``-t'``.

The update set follows backward paths: scanning events from age ``t'`` to age
``t``, a *live* site ``x`` hit by an update becomes settled and every
neighbour of ``x`` becomes live (and reached).  ``UPD`` is the set of reached
sites, ``A`` included.
"""
from dataclasses import dataclass
import itertools
import math

import numpy as np

from ._accel import njit
from ._rng import child_key, master_key
from .glauber import (SpinConfig, UpdateRealization, _gen_epochs, _run, _run_pair,
                      _sandwich, extend_backward, sample_updates, site_field)
from . import stats

NOT_COUPLED = "not coupled within t_max"


# ---------------------------------------------------------------- kernels

@njit
def _upd(sites, nbr, lo, hi, amask):
    """Sites reached by backward paths through events ``lo..hi-1`` (ascending age)."""
    reached = amask.copy()
    live = amask.copy()
    for i in range(lo, hi):
        v = sites[i]
        if live[v]:
            live[v] = False
            for k in range(nbr.shape[1]):
                y = nbr[v, k]
                if y >= 0:
                    live[y] = True
                    reached[y] = True
    return reached


@njit
def _first_coupling(ages, sites, marks, nbr, beta, hvec, lo, jlo, jhi, A, top, bot):
    """Smallest ``j`` in ``[jlo, jhi)`` with the sandwich over ``[lo, j+1)`` agreeing.

    The caller guarantees the sandwich over ``[lo, jhi)`` agrees.
    """
    a = jlo
    b = jhi - 1
    while a < b:
        mid = (a + b) // 2
        if _sandwich(ages, sites, marks, nbr, beta, hvec, lo, mid + 1, A, top, bot):
            b = mid
        else:
            a = mid + 1
    return a


@njit
def _cftp_one(key, n, nbr, beta, hvec, A, t_obs, t_max, want_upd):
    """Window doubling then exact search of the coupling time for one stream.

    Returns ``(coupled, tau, t_cert, sample, reached)``.
    """
    top = np.ones(n, dtype=np.int8)
    bot = -top
    sample = np.zeros(A.shape[0], dtype=np.int8)
    reached = np.zeros(n if want_upd else 0, dtype=np.bool_)
    amask = np.zeros(n, dtype=np.bool_)
    for a in A:
        amask[a] = True
    if A.shape[0] == 0:
        return True, t_obs, t_obs, sample, reached
    have = int(math.ceil(t_obs + 1.0))
    ages, sites, marks = _gen_epochs(key, n, 0, have)
    lo = np.searchsorted(ages, t_obs, side="left")
    step = 1.0
    t_prev = t_obs
    while True:
        T = min(t_obs + step, t_max)
        need = int(math.ceil(T))
        if need > have:
            a2, s2, m2 = _gen_epochs(key, n, have, need)
            ages = np.concatenate((ages, a2))
            sites = np.concatenate((sites, s2))
            marks = np.concatenate((marks, m2))
            have = need
        hi = np.searchsorted(ages, T, side="right")
        if _sandwich(ages, sites, marks, nbr, beta, hvec, lo, hi, A, top, bot):
            break
        if T >= t_max:
            return False, math.inf, t_max, sample, reached
        t_prev = T
        step *= 2.0
    jlo = lo if t_prev == t_obs else np.searchsorted(ages, t_prev, side="right")
    j = _first_coupling(ages, sites, marks, nbr, beta, hvec, lo, jlo, hi, A, top, bot)
    tau = ages[j]
    _sandwich(ages, sites, marks, nbr, beta, hvec, lo, j + 1, A, top, bot)
    for i in range(A.shape[0]):
        sample[i] = top[A[i]]
    if want_upd:
        reached = _upd(sites, nbr, lo, j + 1, amask)
    return True, tau, T, sample, reached


@njit
def _cftp_batch(master, r0, nrep, n, nbr, beta, hvec, A, t_obs, t_max, want_upd):
    coupled = np.zeros(nrep, dtype=np.bool_)
    tau = np.empty(nrep, dtype=np.float64)
    cert = np.empty(nrep, dtype=np.float64)
    samples = np.zeros((nrep, A.shape[0]), dtype=np.int8)
    reached = np.zeros((nrep, n if want_upd else 0), dtype=np.bool_)
    for r in range(nrep):
        c, t, tc, s, re = _cftp_one(child_key(master, r0 + r), n, nbr, beta, hvec, A,
                                    t_obs, t_max, want_upd)
        coupled[r] = c
        tau[r] = t
        cert[r] = tc
        samples[r] = s
        if want_upd:
            reached[r] = re
    return coupled, tau, cert, samples, reached


# ---------------------------------------------------------------- single realization

def _site_array(A):
    return np.array(sorted({int(a) for a in A}), dtype=np.int64)


def sup_empty(real, params, t, t_prime, A):
    """``SUP(t, t', A)`` is empty: extremal chains from ``-t`` agree on ``A`` at ``-t'``."""
    if not t >= t_prime >= 0:
        raise ValueError("need t >= t' >= 0")
    real.require(t)
    A = _site_array(A)
    if A.size == 0:
        return True
    lo, hi = real.span(t_prime, t)
    n = real.geom.n_sites
    top = np.empty(n, dtype=np.int8)
    bot = np.empty(n, dtype=np.int8)
    return bool(_sandwich(real.ages, real.sites, real.marks, real.geom.nbr, float(params.beta),
                          site_field(real.geom, params), lo, hi, A, top, bot))


def sup_brute(real, params, t, t_prime, A):
    """``SUP(t, t', A)`` by running every initial configuration (tiny systems)."""
    real.require(t)
    A = _site_array(A)
    n = real.geom.n_sites
    if n > 20:
        raise ValueError("brute-force support is limited to 20 sites")
    lo, hi = real.span(t_prime, t)
    hv = site_field(real.geom, params)
    sup = set()
    outs = []
    for bits in itertools.product((-1, 1), repeat=n):
        s = np.array(bits, dtype=np.int8)
        _run(real.ages, real.sites, real.marks, real.geom.nbr, float(params.beta), hv, lo, hi, s)
        outs.append((bits, s[A].copy()))
    # a site is in the support if flipping it alone changes the output on A
    index = {b: o for b, o in outs}
    for bits, o in outs:
        for x in range(n):
            flipped = list(bits)
            flipped[x] = -flipped[x]
            if not np.array_equal(index[tuple(flipped)], o):
                sup.add(x)
    return frozenset(sup)


def upd(real, t, t_prime, A):
    """Sites reached by backward update paths from ``A x {-t'}`` within ``[-t, -t']``."""
    if not t >= t_prime >= 0:
        raise ValueError("need t >= t' >= 0")
    real.require(t)
    amask = np.zeros(real.geom.n_sites, dtype=np.bool_)
    amask[_site_array(A)] = True
    lo, hi = real.span(t_prime, t)
    return frozenset(np.flatnonzero(_upd(real.sites, real.geom.nbr, lo, hi, amask)).tolist())


def upd_paths_brute(real, t, t_prime, A):
    """``UPD`` by explicit enumeration of update paths (small realizations)."""
    lo, hi = real.span(t_prime, t)
    nbr = real.geom.nbr
    events = [(real.ages[i], int(real.sites[i])) for i in range(lo, hi)]
    out = set(int(a) for a in A)

    def walk(site, age):
        # follow the first update of ``site`` older than ``age``
        nxt = [(a, s) for a, s in events if s == site and a >= age]
        if not nxt:
            return
        a0 = min(nxt)[0]
        for y in nbr[site]:
            y = int(y)
            if y >= 0:
                out.add(y)
                walk(y, a0)

    for a in A:
        walk(int(a), t_prime)
    return frozenset(out)


# ---------------------------------------------------------------- coupling from the past

@dataclass
class CouplingResult:
    A: tuple
    t_prime: float
    tau: float
    window: float
    sample: np.ndarray
    coupled: bool = True
    seed: int = None
    replica: int = 0
    reached: frozenset = None

    @property
    def status(self):
        return "coupled" if self.coupled else NOT_COUPLED

    def realization(self, geom):
        """The realization on the certifying window (same randomness)."""
        return sample_updates(geom, self.window, self.seed, self.replica)


def _field_and_nbr(geom, params):
    return geom.nbr, site_field(geom, params)


def coupling_time(geom, params, A, t_prime, t_max, seed, replica=0, with_upd=False):
    """CFTP for ``A`` observed at ``-t'``, stream ``(seed, replica)``."""
    if t_prime < 0 or t_max < t_prime:
        raise ValueError("need 0 <= t' <= t_max")
    Aa = _site_array(A)
    nbr, hv = _field_and_nbr(geom, params)
    c, tau, cert, s, re = _cftp_batch(master_key(seed), int(replica), 1, geom.n_sites, nbr,
                                      float(params.beta), hv, Aa, float(t_prime),
                                      float(t_max), bool(with_upd))
    reached = frozenset(np.flatnonzero(re[0]).tolist()) if with_upd and c[0] else None
    return CouplingResult(tuple(Aa.tolist()), float(t_prime), float(tau[0]), float(cert[0]),
                          s[0].copy(), bool(c[0]), seed, replica, reached)


def kupd(geom, params, A, t_prime, t_max, seed, replica=0):
    """``UPD(tau_A(t'), t', A)`` on the stream ``(seed, replica)``; ``None`` if not coupled."""
    res = coupling_time(geom, params, A, t_prime, t_max, seed, replica, with_upd=True)
    return res.reached if res.coupled else None


@dataclass
class CftpBatch:
    coupled: np.ndarray
    tau: np.ndarray
    window: np.ndarray
    samples: np.ndarray
    reached: np.ndarray
    A: np.ndarray


def cftp_batch(geom, params, A, t_prime, t_max, seed, replicas, start=0, with_upd=False):
    """Replicas ``start .. start+replicas-1``; replica ``r`` equals ``coupling_time(..., r)``."""
    Aa = _site_array(A)
    nbr, hv = _field_and_nbr(geom, params)
    c, tau, cert, s, re = _cftp_batch(master_key(seed), int(start), int(replicas), geom.n_sites,
                                      nbr, float(params.beta), hv, Aa, float(t_prime),
                                      float(t_max), bool(with_upd))
    return CftpBatch(c, tau, cert, s, re, Aa)


def cftp_from_realization(real, params, A, t_prime, eta=None):
    """Coupled value on ``A`` from a fixed realization, started from ``eta`` at the window start.

    Returns ``None`` when the window does not couple.
    """
    if not sup_empty(real, params, real.window, t_prime, A):
        return None
    g = real.geom
    eta = SpinConfig.constant(g, 1) if eta is None else eta
    lo, hi = real.span(t_prime, real.window)
    s = eta.values.copy()
    _run(real.ages, real.sites, real.marks, g.nbr, float(params.beta), site_field(g, params),
         lo, hi, s)
    return s[_site_array(A)]


# ---------------------------------------------------------------- decay estimation

@dataclass
class DecayFit:
    t_grid: np.ndarray
    n_replicas: int
    n_nonempty: np.ndarray
    p_hat: np.ndarray
    se: np.ndarray
    rate: float
    rate_se: float
    ci: tuple
    prefactor: float
    used: np.ndarray
    n_censored: int = 0

    def rows(self):
        return [{"t_prime": float(t), "n_replicas": self.n_replicas, "n_nonempty": int(k),
                 "p_hat": float(p), "se": float(s)}
                for t, k, p, s in zip(self.t_grid, self.n_nonempty, self.p_hat, self.se)]

    def summary(self):
        return {"rate": self.rate, "rate_se": self.rate_se, "ci": list(self.ci),
                "prefactor": self.prefactor, "n_replicas": self.n_replicas,
                "n_censored": self.n_censored, "lags_used": int(np.sum(self.used))}


def estimate_sup_decay(params, geom, t_grid, replicas, seed, site=0, t_obs=0.0,
                       t_max=None, start=0):
    """Estimate ``P(SUP(t+t', t, v) != 0)`` on a grid of lags ``t'``.

    One coupling time per replica gives every lag at once, since
    ``SUP(t+t', t, v) != 0`` iff ``tau_v(t) > t + t'``.  Replicas that fail to
    couple before ``t_max`` count as non-empty at every lag up to ``t_max``.
    """
    if replicas < 1000:
        raise ValueError("estimate_sup_decay needs at least 10^3 replicas")
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_max is None:
        t_max = t_obs + max(64.0, 4 * float(t_grid.max(initial=0.0)))
    if t_grid.size and t_grid.max() > t_max - t_obs:
        raise ValueError("lag grid extends beyond t_max")
    b = cftp_batch(geom, params, [site], t_obs, t_max, seed, replicas, start)
    lag = np.where(b.coupled, b.tau - t_obs, np.inf)
    hits = lag[:, None] > t_grid[None, :]
    fit = stats.exp_tail_fit(t_grid, hits)
    return DecayFit(t_grid, int(replicas), hits.sum(axis=0), fit.p_hat, fit.se, fit.rate,
                    fit.rate_se, fit.ci, fit.prefactor, fit.used,
                    int(np.sum(~b.coupled)))
