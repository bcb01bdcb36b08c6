"""Small estimators shared by the Monte Carlo modules."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import special


def jackknife_means(fn: Callable[..., np.ndarray], *arrays: np.ndarray) -> tuple[float, float]:
    """Delete-one jackknife for a smooth function of sample means.

    ``fn`` receives one mean per input array, taken over the first axis, and
    returns the statistic; leave-one-out means arrive stacked along axis 0.
    """
    arrays = [np.asarray(a, dtype=float) for a in arrays]
    n = arrays[0].shape[0]
    if n == 0:
        raise ValueError("empty input")
    full = float(np.squeeze(fn(*[a.mean(axis=0) for a in arrays])))
    if n == 1:
        return full, 0.0
    loo = [(a.sum(axis=0) - a) / (n - 1) for a in arrays]
    vals = np.asarray(fn(*loo), dtype=float)
    se = np.sqrt((n - 1) / n * np.sum((vals - vals.mean()) ** 2))
    return full, float(se)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / np.sum(w * w))


def normalized_weights_from_log(logw) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    w = np.exp(logw - np.max(logw))
    return w / w.sum()


def weighted_ks_1samp(x, weights, cdf: Callable[[np.ndarray], np.ndarray]) -> tuple[float, float]:
    """KS distance between a weighted empirical law and a continuous cdf.

    The p-value uses the Kolmogorov distribution at the effective sample size.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ws = w[order] / w.sum()
    upper = np.cumsum(ws)
    lower = upper - ws
    f = cdf(xs)
    stat = float(max(np.max(upper - f), np.max(f - lower)))
    n_eff = effective_sample_size(w)
    return stat, float(special.kolmogorov(np.sqrt(n_eff) * stat))


def weighted_ecdf_distance(x1, w1, x2, w2) -> float:
    """Sup distance between two weighted empirical distribution functions."""
    grid = np.sort(np.concatenate([x1, x2]))

    def ecdf(x, w):
        o = np.argsort(x, kind="stable")
        cw = np.concatenate([[0.0], np.cumsum(w[o]) / np.sum(w)])
        return cw[np.searchsorted(x[o], grid, side="right")]

    return float(np.max(np.abs(ecdf(np.asarray(x1), np.asarray(w1)) - ecdf(np.asarray(x2), np.asarray(w2)))))


def weighted_ks_2samp(x1, w1, x2, w2) -> tuple[float, float]:
    """Two-sample KS with effective sample sizes standing in for n and m."""
    stat = weighted_ecdf_distance(x1, w1, x2, w2)
    n1 = effective_sample_size(w1)
    n2 = effective_sample_size(w2)
    en = np.sqrt(n1 * n2 / (n1 + n2))
    return stat, float(special.kolmogorov(en * stat))
