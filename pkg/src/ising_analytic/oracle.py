"""Exact references on small volumes.

Full enumeration (Gray code, up to 25 sites), the ``2 x 2`` transfer matrix in
one dimension, periodic strips in two dimensions, and Onsager's zero-field
pressure by quadrature.
"""
from dataclasses import dataclass, field
import json
import math

import numpy as np
from scipy import integrate

from ._accel import njit
from .lattice import BoxGeom, GraphGeom, TorusGeom

ENUM_CAP = 25
DIST_CAP = 20


@dataclass
class ExactResult:
    value: object
    method: str
    instance: dict = field(default_factory=dict)

    def __float__(self):
        return float(self.value)


def _describe(geom):
    if isinstance(geom, TorusGeom):
        return {"kind": "torus", "d": geom.d, "N": geom.N}
    if isinstance(geom, BoxGeom):
        return {"kind": "box", "d": geom.d, "N": geom.N, "bc": geom.bc}
    return {"kind": "graph", "n_sites": geom.n_sites, "n_edges": int(len(geom.bonds))}


def _check(geom, cap=ENUM_CAP):
    if isinstance(geom, TorusGeom) and geom.side < 4:
        raise ValueError("torus side must be >= 4 for exact computations (side 2 doubles bonds)")
    if geom.n_sites > cap:
        raise ValueError(f"exact enumeration capped at {cap} sites, got {geom.n_sites}")


def _fields(geom, params):
    if hasattr(geom, "field"):
        return np.asarray(geom.field(params.beta, params.h), dtype=np.float64)
    return np.full(geom.n_sites, float(params.h))


def _nbr_table(geom):
    """Neighbour table with ``-1`` padding; works for every geometry class."""
    nb = np.asarray(geom.nbr, dtype=np.int64)
    return np.ascontiguousarray(nb)


@njit
def _gray_enumerate(n, nbr, beta, hvec, masks, shift):
    """Sums of ``w``, ``w sigma_v``, ``w * bond sum`` and ``w sigma_A`` over all ``2^n`` states.

    Bit ``k`` set in the state means ``sigma_k = -1``.  ``w = exp(E - shift)``.
    """
    spins = np.ones(n, dtype=np.int64)
    E = 0.0
    bsum = 0.0
    # each bond appears twice in the table; multigraph entries are kept
    for v in range(n):
        E += hvec[v]
        for j in range(nbr.shape[1]):
            y = nbr[v, j]
            if y >= 0:
                bsum += 0.5
    E += beta * bsum
    nm = masks.shape[0]
    sgn = np.ones(nm, dtype=np.int64)
    Z = 0.0
    comp = 0.0
    mag = np.zeros(n)
    en = 0.0
    obs = np.zeros(nm)
    total = np.int64(1) << n
    for i in range(total):
        if i > 0:
            k = 0
            t = i
            while (t & 1) == 0:
                t >>= 1
                k += 1
            s = 0.0
            for j in range(nbr.shape[1]):
                y = nbr[k, j]
                if y >= 0:
                    s += spins[y]
            E -= 2.0 * spins[k] * (beta * s + hvec[k])
            bsum -= 2.0 * spins[k] * s
            spins[k] = -spins[k]
            for m in range(nm):
                if (masks[m] >> k) & 1:
                    sgn[m] = -sgn[m]
        w = math.exp(E - shift)
        y2 = w - comp
        t2 = Z + y2
        comp = (t2 - Z) - y2
        Z = t2
        for v in range(n):
            mag[v] += w * spins[v]
        en += w * bsum
        for m in range(nm):
            obs[m] += w * sgn[m]
    return Z, mag, en, obs


@dataclass
class Enumeration:
    log_z: float
    magnetization: np.ndarray
    bond_sum: float
    observables: np.ndarray
    n_bonds: int


def enumerate_ising(geom, params, observables=(), cap=ENUM_CAP):
    """One Gray-code pass giving ``log Z``, ``<sigma_v>``, ``<sum sigma sigma>`` and ``<sigma_A>``."""
    _check(geom, cap)
    n = geom.n_sites
    nbr = _nbr_table(geom)
    hv = _fields(geom, params)
    masks = np.array([sum(1 << int(v) for v in A) for A in observables], dtype=np.int64)
    nb = int((nbr >= 0).sum()) // 2
    shift = params.beta * nb + float(np.abs(hv).sum())
    Z, mag, en, obs = _gray_enumerate(n, nbr, float(params.beta), hv, masks, shift)
    return Enumeration(math.log(Z) + shift, mag / Z, en / Z, obs / Z, nb)


def exact_partition(geom, params):
    """``log Z`` by exhaustive enumeration (boundary spins enter through the field)."""
    e = enumerate_ising(geom, params)
    return ExactResult(e.log_z, "enumeration", _describe(geom))


def exact_expectation(geom, params, A):
    """``<sigma_A>`` for a site set ``A`` (the empty set gives 1)."""
    e = enumerate_ising(geom, params, [list(A)])
    return ExactResult(float(e.observables[0]), "enumeration", _describe(geom))


def truncated_correlation(geom, params, x, y):
    e = enumerate_ising(geom, params, [[x, y]])
    return float(e.observables[0] - e.magnetization[x] * e.magnetization[y])


def energy_density(geom, params):
    """``<sum_{bonds} sigma_i sigma_j> / |sites|``."""
    e = enumerate_ising(geom, params)
    return ExactResult(e.bond_sum / geom.n_sites, "enumeration", _describe(geom))


def ising_distribution(n, edges, hvec, beta, cap=DIST_CAP):
    """Exact Gibbs law on a (multi)graph as a vector over ``2^n`` states.

    State ``s`` has ``sigma_v = -1`` iff bit ``v`` of ``s`` is set.
    """
    if n > cap:
        raise ValueError(f"full distribution capped at {cap} vertices")
    states = np.arange(1 << n, dtype=np.int64)
    spins = 1 - 2 * ((states[:, None] >> np.arange(n)) & 1)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    E = spins @ np.asarray(hvec, dtype=np.float64)
    if len(e):
        E = E + beta * (spins[:, e[:, 0]] * spins[:, e[:, 1]]).sum(axis=1)
    E -= E.max()
    p = np.exp(E)
    return p / p.sum()


def spins_of(states, n):
    states = np.asarray(states, dtype=np.int64)
    return 1 - 2 * ((states[..., None] >> np.arange(n)) & 1)


# ---------------------------------------------------------------- one dimension

def _kernel_1d(params):
    b, h = params.beta, params.h
    return np.array([[math.exp(b + h), math.exp(-b)], [math.exp(-b), math.exp(b - h)]])


def _eigs_1d(params):
    b, h = params.beta, params.h
    a = math.exp(b) * math.cosh(h)
    r = math.sqrt(math.exp(2 * b) * math.sinh(h) ** 2 + math.exp(-2 * b))
    return a + r, a - r


def transfer_pressure_1d(params):
    """``psi(beta, h)`` in one dimension: log of the top transfer eigenvalue."""
    if math.isinf(params.h):
        raise ValueError("transfer pressure needs a finite field")
    l1, _ = _eigs_1d(params)
    return ExactResult(math.log(l1), "transfer", {"d": 1})


def ring_log_z(n, params):
    """``log Z`` of the ring with ``n`` sites from the trace formula."""
    if n < 3:
        raise ValueError("ring needs at least 3 sites")
    l1, l2 = _eigs_1d(params)
    return ExactResult(n * math.log(l1) + math.log1p((l2 / l1) ** n), "transfer",
                       {"kind": "ring", "n": n})


def chain_magnetization(N, params, bc="free"):
    """``<sigma_0>`` on ``[-N, N]`` in one dimension with boundary condition ``bc``.

    Boundary vectors are propagated inward with normalization at every step.
    """
    if N < 0:
        raise ValueError("N must be >= 0")
    b, h = params.beta, params.h
    s = np.array([1.0, -1.0])
    site = np.exp(h * s)
    bond = np.exp(b * np.outer(s, s))
    if bc == "free":
        v = np.ones(2)
    elif bc in ("plus", "minus"):
        ext = 1.0 if bc == "plus" else -1.0
        v = np.exp(b * ext * s)
    else:
        raise ValueError(f"unknown boundary condition {bc!r}")
    # v(s) = weight of the part of the chain outside the current site, seen from it
    for _ in range(N):
        v = bond @ (site * v)
        v /= v.sum()
    w = site * v * v
    return ExactResult(float((s * w).sum() / w.sum()), "transfer", {"d": 1, "N": N, "bc": bc})


# ---------------------------------------------------------------- two dimensions

def onsager_pressure(beta, tol=1e-12):
    """Zero-field pressure of the square lattice.

    The double integral is reduced to one dimension by integrating the inner
    angle in closed form; ``onsager_pressure_double`` keeps the double form.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if beta == 0:
        return ExactResult(math.log(2.0), "closed-form", {"beta": 0.0})
    c = math.cosh(2 * beta)
    k = 2 * math.sinh(2 * beta) / (c * c)

    def f(t):
        return math.log((1 + math.sqrt(max(1 - (k * math.sin(t)) ** 2, 0.0))) / 2)

    val, err = integrate.quad(f, 0, math.pi, epsabs=tol, epsrel=tol, limit=400,
                              points=[math.pi / 2])
    if not math.isfinite(val) or err > 1e-9:
        raise RuntimeError("Onsager quadrature did not converge")
    return ExactResult(math.log(2 * c) + val / (2 * math.pi), "closed-form", {"beta": beta})


def onsager_pressure_double(beta):
    """Same value from ``log 2 + (1/8 pi^2) iint log[cosh^2 2b - sinh 2b (cos a + cos b)]``."""
    c2 = math.cosh(2 * beta) ** 2
    s = math.sinh(2 * beta)
    val, _ = integrate.dblquad(lambda x, y: math.log(c2 - s * (math.cos(x) + math.cos(y))),
                               0, math.pi, 0, math.pi, epsabs=1e-11, epsrel=1e-11)
    return math.log(2.0) + val / (2 * math.pi ** 2)


def strip_transfer(W, params):
    """Transfer matrix of a periodic column of height ``W`` (columns as states)."""
    if W < 1 or W > 14:
        raise ValueError("strip width must be in 1..14")
    sp = spins_of(np.arange(1 << W), W).astype(np.float64)
    if W >= 3:
        vert = (sp * np.roll(sp, -1, axis=1)).sum(axis=1)
    elif W == 2:
        vert = sp[:, 0] * sp[:, 1]
    else:
        vert = np.zeros(len(sp))
    diag = params.beta * vert + params.h * sp.sum(axis=1)
    horiz = params.beta * (sp @ sp.T)
    return np.exp(horiz + 0.5 * (diag[:, None] + diag[None, :]))


def strip_pressure(W, params):
    """``log lambda_max / W`` of the periodic strip (a cylinder of infinite length)."""
    T = strip_transfer(W, params)
    lam = np.linalg.eigvalsh(T)[-1]
    return ExactResult(float(math.log(lam) / W), "transfer", {"kind": "strip", "W": W})


def torus_log_z_transfer(W, L, params):
    """``log Z`` of the ``W x L`` torus as ``log tr T^L`` (an enumeration-free check)."""
    T = strip_transfer(W, params)
    ev = np.linalg.eigvalsh(T)
    m = np.abs(ev).max()
    return ExactResult(float(L * math.log(m) + math.log(np.sum((ev / m) ** L))), "transfer",
                       {"kind": "torus", "W": W, "L": L})


# ---------------------------------------------------------------- fixtures

def fixtures():
    """Small table of exact values consumed by tests and the command line."""
    from .glauber import ModelParams

    out = []
    for n, b, h in [(4, 0.5, 0.0), (4, 0.3, 0.2), (6, 0.4, 0.1)]:
        p = ModelParams(b, h)
        out.append({"kind": "ring", "n": n, "beta": b, "h": h,
                    "log_z": ring_log_z(n, p).value})
    for b in (0.0, 0.2, 0.4):
        out.append({"kind": "onsager", "beta": b, "psi": onsager_pressure(b).value})
    return out


def export_fixtures(path):
    with open(path, "w") as fh:
        json.dump(fixtures(), fh, indent=2, sort_keys=True)
