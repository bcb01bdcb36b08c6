"""Gaussian multiplicative chaos on the quadrature grid.

The chaos is represented against the sphere measure with Wick normalization:
node weight w_j exp(d b X_j − (d b)² Var_j / 2 + d b² shift).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats as sps
from scipy.special import logsumexp

from . import geometry as geo
from . import gaussian_field as gf
from . import sphere_spectral as ss
from .stats import jackknife_means

LOG_OVERFLOW = 700.0


class GmcOverflowError(FloatingPointError):
    """A chaos weight would overflow double precision."""


@dataclass(frozen=True, eq=False)
class GmcMeasure:
    grid: ss.SphereGrid
    weights: np.ndarray
    b: float
    d: int
    sample_id: int | None = None
    L: int | None = None

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))


def gmc_log_weights(x, var, params: ss.ModelParams, grid: ss.SphereGrid) -> np.ndarray:
    """Log node weights for one sample (shape (N,)) or a batch (shape (n, N))."""
    db = params.d * params.b
    return (
        np.log(grid.weights)
        + db * np.asarray(x, dtype=float)
        - 0.5 * db * db * np.asarray(var, dtype=float)
        + params.d * params.b**2 * params.gmc_constant_shift
    )


def _safe_exp(logw):
    if np.max(logw) > LOG_OVERFLOW:
        raise GmcOverflowError("chaos weight overflows; reduce b or the cutoff")
    return np.exp(logw)


def gmc_from_sample(x, var, params: ss.ModelParams, grid: ss.SphereGrid,
                    sample_id: int | None = None, L: int | None = None) -> GmcMeasure:
    logw = gmc_log_weights(x, var, params, grid)
    return GmcMeasure(grid, _safe_exp(logw), params.b, params.d, sample_id, L)


def integrate(m: GmcMeasure, f) -> float:
    return float(np.asarray(f, dtype=float) @ m.weights)


def z_naught(m: GmcMeasure, H, params: ss.ModelParams) -> float:
    """Z_0 = ∫ e^{d b H} dM, computed in log space."""
    H = np.asarray(H, dtype=float)
    with np.errstate(divide="ignore"):
        lw = np.log(m.weights)
    lz = logsumexp(lw + params.d * params.b * H)
    if lz > LOG_OVERFLOW:
        raise GmcOverflowError("Z_0 overflows")
    return float(np.exp(lz))


def log_z_naught_batch(x, var, H, params: ss.ModelParams, grid: ss.SphereGrid) -> np.ndarray:
    """ln Z_0 per sample for a batch of field samples."""
    lw = gmc_log_weights(x, var, params, grid)
    return logsumexp(lw + params.d * params.b * np.asarray(H)[None, :], axis=1)


def negative_moment(zs, s: float) -> tuple[float, float]:
    """Sample mean of z^s with its jackknife standard error."""
    zs = np.asarray(zs, dtype=float)
    if zs.size == 0:
        raise ValueError("empty input")
    if s >= 0:
        raise ValueError("negative_moment expects s < 0")
    return jackknife_means(lambda m: m, zs**s)


def moment_from_logs(log_zs, s: float) -> tuple[float, float]:
    """E[Z^s] ± stderr from ln Z samples (any sign of s)."""
    return jackknife_means(lambda m: m, np.exp(s * np.asarray(log_zs)))


# --- experiments -----------------------------------------------------------------


def _field_setup(params: ss.ModelParams, L: int, resolution: int | None):
    grid = ss.build_grid(params.d, resolution if resolution is not None else L + 1)
    cov = gf.build_covariance(grid, L)
    return grid, cov


def seiberg_scan(ins: gf.InsertionSet, params: ss.ModelParams, cutoffs: Sequence[int], n: int,
                 seed: int = 0, resolution: int | None = None, threads: int = 1) -> dict:
    """E[Z_L^s] ± stderr across cutoffs, s = Σα − Q, all on one grid resolving max(cutoffs)."""
    cutoffs = list(cutoffs)
    if sorted(cutoffs) != cutoffs:
        raise ValueError("cutoffs must be increasing")
    res = resolution if resolution is not None else max(cutoffs) + 1
    s = ins.s(params.Q)
    rows = []
    for k, L in enumerate(cutoffs):
        grid, cov = _field_setup(params, L, res)
        kernel = ss.GreenKernel(grid, ss.calibrate_green_constant(grid), L, "series")
        H = gf.girsanov_shift(kernel, ins)
        lz = gf.map_field_samples(
            cov, seed, k, n, lambda r, x: log_z_naught_batch(x, cov.variances, H, params, grid), threads
        )
        est, se = moment_from_logs(lz, s)
        rows.append({"cutoff_L": L, "moment_estimate": est, "stderr": se, "n_samples": n,
                     "b": params.b, "d": params.d, "s": s})
    return {
        "rows": rows,
        "any_alpha_above_half_Q": bool(np.any(ins.alphas >= params.Q / 2)),
        "grid_resolution": res,
    }


def mobius_covariance_check(psi: geo.MobiusMap, f, params: ss.ModelParams, n: int, L: int,
                            seed: int = 0, resolution: int | None = None, threads: int = 1,
                            significance: float = 0.01) -> dict:
    """Two-sample KS test of ∫f dM against its Möbius-transformed representation.

    ``f`` is a callable on chart points (batch) so that f∘ψ can be evaluated.
    """
    grid, cov = _field_setup(params, L, resolution)
    d, b, Q = params.d, params.b, params.Q
    img = geo.mobius_apply(psi, grid.chart)
    near_inf = ~np.all(np.isfinite(img), axis=-1)
    f_nodes = np.asarray(f(grid.chart), dtype=float)
    f_psi = np.zeros(grid.size)
    if np.any(~near_inf):
        f_psi[~near_inf] = f(img[~near_inf])
    warn = bool(np.any(np.abs(f_psi[near_inf]) > 0)) if np.any(near_inf) else False
    ratio = geo.metric_pullback_ratio(psi, grid.chart)
    with np.errstate(divide="ignore"):
        tilt = np.where(ratio > 0, np.exp(d * b * (Q / 2.0) * np.log(np.where(ratio > 0, ratio, 1.0))), 0.0)
    rho = ratio ** (d / 2.0)
    g_lhs = f_nodes
    g_rhs = f_psi * tilt

    def lhs(r, x):
        return np.exp(gmc_log_weights(x, cov.variances, params, grid)) @ g_lhs

    def rhs(r, x):
        m = (x @ (grid.weights * rho)) / grid.volume
        return np.exp(-d * b * m) * (np.exp(gmc_log_weights(x, cov.variances, params, grid)) @ g_rhs)

    a = gf.map_field_samples(cov, seed, 0, n, lhs, threads)
    c = gf.map_field_samples(cov, seed, 1, n, rhs, threads)
    res = sps.ks_2samp(a, c)
    return {
        "ks_statistic": float(res.statistic),
        "p_value": float(res.pvalue),
        "passed": bool(res.pvalue > significance),
        "mean_lhs": float(a.mean()),
        "mean_rhs": float(c.mean()),
        "stderr_lhs": float(a.std(ddof=1) / np.sqrt(n)),
        "stderr_rhs": float(c.std(ddof=1) / np.sqrt(n)),
        "support_near_infinity": warn,
        "n": n,
        "L": L,
    }
