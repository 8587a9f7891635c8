"""Small estimation helpers: binomial errors, exponential tail fits, jackknife."""
from dataclasses import dataclass

import numpy as np
from scipy import stats as _st


def binomial_se(p, n):
    p = np.asarray(p, dtype=np.float64)
    return np.sqrt(np.clip(p * (1 - p), 0, None) / max(int(n), 1))


def _wls_line(x, y, w):
    """Weighted least squares ``y = a + b x``; returns ``(a, b)``."""
    W = w.sum()
    xm = (w * x).sum() / W
    ym = (w * y).sum() / W
    sxx = (w * (x - xm) ** 2).sum()
    b = (w * (x - xm) * (y - ym)).sum() / sxx
    return ym - b * xm, b


@dataclass
class ExpFit:
    x: np.ndarray
    p_hat: np.ndarray
    se: np.ndarray
    rate: float
    rate_se: float
    ci: tuple
    prefactor: float
    used: np.ndarray


def _fit_counts(x, k, n, min_count):
    p = k / n
    # p_hat = 1 carries no information on the slope
    used = (k > min_count) & (k < n)
    if used.sum() < 2:
        return np.inf, np.nan, used
    pu = p[used]
    # variance of log p_hat by the delta method
    w = n * pu / np.clip(1 - pu, 1.0 / n, None)
    a, b = _wls_line(x[used], np.log(pu), w)
    return -b, float(np.exp(a)), used


def exp_tail_fit(x, hits, n_blocks=20, level=0.95, min_count=5):
    """Fit ``P(event at x) ~ C exp(-rate x)`` from a replicas-by-grid indicator matrix.

    Only grid points where the estimate exceeds ``min_count / replicas`` enter
    the weighted least-squares fit on ``log p``.  The columns share replicas,
    so the error on the rate is a delete-one-block jackknife over replicas.
    A fit with fewer than two usable points reports ``rate = inf``.
    """
    x = np.asarray(x, dtype=np.float64)
    hits = np.asarray(hits, dtype=bool)
    n = hits.shape[0]
    k = hits.sum(axis=0).astype(np.float64)
    p = k / n
    se = binomial_se(p, n)
    rate, pref, used = _fit_counts(x, k, n, min_count)
    if not np.isfinite(rate):
        return ExpFit(x, p, se, np.inf, np.nan, (np.inf, np.inf), np.nan, used)
    blocks = np.array_split(np.arange(n), min(n_blocks, n))
    reps = []
    for b in blocks:
        kb = k - hits[b].sum(axis=0)
        nb = n - len(b)
        # keep the lag set fixed across jackknife samples
        pb = kb / nb
        if np.any(pb[used] <= 0):
            continue
        w = nb * pb[used] / np.clip(1 - pb[used], 1.0 / nb, None)
        reps.append(-_wls_line(x[used], np.log(pb[used]), w)[1])
    g = len(reps)
    if g < 2:
        return ExpFit(x, p, se, rate, np.nan, (np.nan, np.nan), pref, used)
    reps = np.asarray(reps)
    rate_se = float(np.sqrt((g - 1) / g * np.sum((reps - reps.mean()) ** 2)))
    q = _st.t.ppf(0.5 + level / 2, g - 1)
    return ExpFit(x, p, se, float(rate), rate_se, (rate - q * rate_se, rate + q * rate_se),
                  pref, used)


@dataclass
class LineFit:
    slope: float
    intercept: float
    slope_se: float
    ci: tuple
    r2: float


def linear_fit(x, y, level=0.95):
    """Ordinary least squares with a Student-t interval on the slope."""
    res = _st.linregress(np.asarray(x, float), np.asarray(y, float))
    dof = max(len(x) - 2, 1)
    q = _st.t.ppf(0.5 + level / 2, dof)
    return LineFit(float(res.slope), float(res.intercept), float(res.stderr),
                   (res.slope - q * res.stderr, res.slope + q * res.stderr),
                   float(res.rvalue ** 2))


def jackknife(estimator, data, n_blocks=20):
    """Delete-one-block jackknife of ``estimator(data_subset)`` along axis 0.

    Returns ``(estimate, standard error)``.
    """
    data = np.asarray(data)
    n = data.shape[0]
    full = estimator(data)
    blocks = np.array_split(np.arange(n), min(n_blocks, n))
    reps = np.array([estimator(np.delete(data, b, axis=0)) for b in blocks])
    g = len(blocks)
    return full, float(np.sqrt((g - 1) / g * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0)))


def within(value, target, se, k=3.0):
    return abs(value - target) <= k * se
