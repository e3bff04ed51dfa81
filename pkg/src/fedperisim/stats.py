"""Nonparametric test statistics with a self-contained chi-square survival
function (regularized incomplete gamma via series / continued fraction)."""

from __future__ import annotations

import math

import numpy as np

from .errors import StatTestError

_MAX_ITER = 500
_TINY = 1e-300
_EPS = 1e-15


def _gamma_p_series(a, x):
    """Lower regularized incomplete gamma P(a, x) by power series (x < a+1)."""
    term = 1.0 / a
    total = term
    n = a
    for _ in range(_MAX_ITER):
        n += 1.0
        term *= x / n
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

def _gamma_q_contfrac(a, x):
    """Upper regularized incomplete gamma Q(a, x) by Lentz continued
    fraction (x >= a+1)."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gamma_q(a, x):
    """Upper regularized incomplete gamma Q(a, x) = Gamma(a, x)/Gamma(a)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_contfrac(a, x)


def chi2_sf(x, df):
    """Survival function of the chi-square distribution."""
    return gamma_q(df / 2.0, x / 2.0)


def chi2_test(table):
    """Pearson chi-square test of independence on an r x k count table.

    Returns (statistic, p_value).  Expected counts must all be positive.
    """
    obs = np.asarray(table, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] < 2 or obs.shape[1] < 2:
        raise StatTestError(f"need an r x k table with r,k >= 2, got shape {obs.shape}")
    if np.any(obs < 0):
        raise StatTestError("counts must be non-negative")
    row = obs.sum(axis=1, keepdims=True)
    col = obs.sum(axis=0, keepdims=True)
    total = obs.sum()
    if total == 0 or np.any(row == 0) or np.any(col == 0):
        raise StatTestError("degenerate table: zero marginal")
    expected = row * col / total
    stat = float(((obs - expected) ** 2 / expected).sum())
    df = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return stat, chi2_sf(stat, df)


def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average of 1-based ranks
        i = j + 1
    return ranks


def kruskal_wallis(groups):
    """Kruskal-Wallis H test with tie correction.

    Returns (H, p_value) with p from the chi-square approximation on k-1
    degrees of freedom.
    """
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2 or any(len(g) == 0 for g in groups):
        raise StatTestError("need at least two non-empty groups")
    pooled = np.concatenate(groups)
    n_total = len(pooled)
    ranks = _midranks(pooled)

    h = 0.0
    offset = 0
    for g in groups:
        r = ranks[offset:offset + len(g)]
        h += r.sum() ** 2 / len(g)
        offset += len(g)
    h = 12.0 / (n_total * (n_total + 1)) * h - 3.0 * (n_total + 1)

    _vals, counts = np.unique(pooled, return_counts=True)
    tie_term = float((counts ** 3 - counts).sum())
    correction = 1.0 - tie_term / (n_total ** 3 - n_total)
    if correction == 0.0:
        raise StatTestError("all pooled values identical")
    h /= correction
    return float(h), chi2_sf(h, len(groups) - 1)


def bonferroni(p_values, m=None):
    """Family-wise error correction: min(1, p * m) elementwise."""
    p = np.asarray(p_values, dtype=np.float64)
    if m is None:
        m = p.size
    if m < 1:
        raise StatTestError("m must be >= 1")
    return np.minimum(1.0, p * m)
