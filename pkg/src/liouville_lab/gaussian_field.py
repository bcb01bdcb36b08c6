"""The log-correlated field X_ĝ with covariance (2/d)G_ĝ, truncated at spectral degree L."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import geometry as geo
from . import sphere_spectral as ss
from .rng import concat, map_chunks, sample_generator

JITTER_LADDER = (0.0, 1e-14, 1e-13, 1e-12, 1e-11, 1e-10)
NODE_TOLERANCE = 1e-9


class FactorizationError(RuntimeError):
    """Covariance could not be factorized within the jitter budget."""


class InsertionOnNodeError(ValueError):
    """An insertion point coincides with a quadrature node."""


class SeibergBoundError(ValueError):
    """Insertion weights violate the bounds required by the requested quantity."""


# --- insertions ----------------------------------------------------------------


@dataclass(frozen=True)
class InsertionSet:
    """Marked points x_i (chart coordinates) with weights α_i."""

    points: np.ndarray
    alphas: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, pts.shape[-1] if pts.ndim == 2 else 0)
        pts = np.atleast_2d(pts)
        al = np.atleast_1d(np.asarray(self.alphas, dtype=float))
        if pts.shape[0] != al.shape[0]:
            raise ValueError("points and alphas must have the same length")
        for i in range(len(al)):
            for j in range(i):
                if np.allclose(pts[i], pts[j], rtol=0.0, atol=1e-14):
                    raise ValueError("insertion points must be pairwise distinct")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "alphas", al)

    @classmethod
    def empty(cls, d: int) -> "InsertionSet":
        return cls(np.zeros((0, d)), np.zeros(0))

    def __len__(self):
        return self.alphas.shape[0]

    def sphere_points(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, self.points.shape[1] + 1))
        return geo.from_chart(self.points)

    def s(self, Q: float) -> float:
        return float(np.sum(self.alphas) - Q)

    def seiberg(self, Q: float) -> bool:
        return bool(np.sum(self.alphas) > Q and np.all(self.alphas < Q / 2))

    def moved(self, m: geo.MobiusMap) -> "InsertionSet":
        return InsertionSet(geo.mobius_apply(m, self.points), self.alphas)


def parse_insertions(text: str, d: int = 2) -> InsertionSet:
    """Parse "x1,y1,a1;x2,y2,a2" (d chart coordinates then α per item)."""
    items = [t for t in text.replace(" ", "").split(";") if t]
    if not items:
        return InsertionSet.empty(d)
    rows = [[float(v) for v in it.split(",")] for it in items]
    if any(len(r) != d + 1 for r in rows):
        raise ValueError(f"each insertion needs {d} coordinates and a weight")
    arr = np.asarray(rows)
    return InsertionSet(arr[:, :d], arr[:, d])


# --- covariance ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CovarianceOperator:
    grid: ss.SphereGrid
    L: int
    matrix: np.ndarray
    variances: np.ndarray
    factor: np.ndarray
    jitter: float

    @property
    def metadata(self) -> dict:
        return {"L": self.L, "nodes": self.grid.size, "jitter": self.jitter,
                "jitter_policy": "first of " + ", ".join(f"{j:g}" for j in JITTER_LADDER) + " x max diagonal"}


@lru_cache(maxsize=8)
def build_covariance(grid: ss.SphereGrid, L: int) -> CovarianceOperator:
    """(2/d)·G_L at node pairs, with a Cholesky factor."""
    if L > grid.L_max:
        raise ss.BandLimitError(f"cutoff L={L} exceeds grid band limit {grid.L_max}")
    coeffs = (2.0 / grid.d) * ss.green_series_coefficients(grid.d, L)
    cmat = ss.zonal_sum(grid.points @ grid.points.T, coeffs, grid.d)
    cmat = 0.5 * (cmat + cmat.T)
    diag = float(np.max(np.diag(cmat)))
    for j in JITTER_LADDER:
        try:
            fac = np.linalg.cholesky(cmat + j * diag * np.eye(grid.size))
        except np.linalg.LinAlgError:
            continue
        break
    else:
        raise FactorizationError("covariance factorization failed within the jitter budget")
    for arr in (cmat, fac):
        arr.setflags(write=False)
    return CovarianceOperator(grid, L, cmat, np.diag(cmat).copy(), fac, j * diag)


# --- sampling ------------------------------------------------------------------


@dataclass(frozen=True)
class FieldEnsemble:
    values: np.ndarray
    variances: np.ndarray
    seed: int
    stream: int
    L: int

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _draw(cov: CovarianceOperator, seed: int, stream: int, idx: range) -> np.ndarray:
    z = np.stack([sample_generator(seed, stream, i).standard_normal(cov.grid.size) for i in idx])
    x = z @ cov.factor.T
    # remove the λ-mean (only the jitter contributes one)
    return x - (x @ cov.grid.weights)[:, None] / cov.grid.volume


def map_field_samples(
    cov: CovarianceOperator,
    seed: int,
    stream: int,
    n: int,
    fn: Callable[[range, np.ndarray], object],
    threads: int = 1,
):
    """Draw samples chunk by chunk and reduce each chunk with fn(indices, values)."""
    parts = map_chunks(lambda r: fn(r, _draw(cov, seed, stream, r)), n, threads)
    return concat(parts)


def sample_field(cov: CovarianceOperator, seed: int, stream: int, n: int, threads: int = 1) -> FieldEnsemble:
    if n < 1:
        raise ValueError("n must be >= 1")
    vals = map_field_samples(cov, seed, stream, n, lambda r, x: x, threads)
    return FieldEnsemble(vals, cov.variances, int(seed), int(stream), cov.L)


# --- shifts and diagnostics ----------------------------------------------------


def check_off_nodes(grid: ss.SphereGrid, sphere_points: np.ndarray) -> None:
    if len(sphere_points) == 0:
        return
    chord = np.linalg.norm(grid.points[None, :, :] - sphere_points[:, None, :], axis=-1)
    if np.min(chord) < NODE_TOLERANCE:
        raise InsertionOnNodeError("an insertion point coincides with a grid node; jitter it by a mesh width")


def girsanov_shift(kernel: ss.GreenKernel, ins: InsertionSet) -> np.ndarray:
    """H(y) = Σ 2α_i G(y, x_i) at every node."""
    grid = kernel.grid
    if len(ins) == 0:
        return np.zeros(grid.size)
    sp = ins.sphere_points()
    check_off_nodes(grid, sp)
    g = kernel.on_sphere(grid.points[:, None, :], sp[None, :, :])
    return g @ (2.0 * ins.alphas)


def cap_average_variance(grid: ss.SphereGrid, x, eps: float, L: int, n_points: int | None = None) -> float:
    """Variance of the average of X_L over the chart sphere {x + ε u : |u| = 1}."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if eps * L < 1.0:
        raise ValueError(f"eps={eps} is below the resolution 1/L of cutoff L={L}")
    d = grid.d
    x = np.asarray(x, dtype=float)
    if d == 2:
        m = n_points or max(128, 4 * L)
        ang = 2.0 * np.pi * np.arange(m) / m
        u = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        wu = np.full(m, 1.0 / m)
    else:
        u, wu = ss._sphere_rule(d - 1, n_points or max(8, L // 2 + 2))
        wu = wu / wu.sum()
    p = geo.from_chart(x[None, :] + eps * u)
    coeffs = (2.0 / d) * ss.green_series_coefficients(d, L)
    k = ss.zonal_sum(p @ p.T, coeffs, d)
    return float(wu @ k @ wu)


def verify_girsanov(
    cov: CovarianceOperator,
    nodes: Sequence[int],
    coeffs: Sequence[float],
    functional: Callable[[np.ndarray], np.ndarray],
    n: int,
    seed: int = 0,
    threads: int = 1,
):
    """Estimate E[e^{Z−Var Z/2} F(X)] and E[F(X + Cov(Z, X))] on independent sample sets.

    Returns ((lhs, lhs_err), (rhs, rhs_err)).
    """
    nodes = np.asarray(nodes, dtype=int)
    c = np.asarray(coeffs, dtype=float)
    var_z = float(c @ cov.matrix[np.ix_(nodes, nodes)] @ c)
    shift = cov.matrix[:, nodes] @ c

    def left(r, x):
        z = x[:, nodes] @ c
        return np.exp(z - 0.5 * var_z) * functional(x)

    def right(r, x):
        return functional(x + shift[None, :])

    a = map_field_samples(cov, seed, 0, n, left, threads)
    b = map_field_samples(cov, seed, 1, n, right, threads)
    return (
        (float(a.mean()), float(a.std(ddof=1) / np.sqrt(n))),
        (float(b.mean()), float(b.std(ddof=1) / np.sqrt(n))),
    )


def mobius_field_covariance_gap(psi: geo.MobiusMap, points, d: int = 2, resolution: int = 64) -> float:
    """Max |Cov(X∘ψ) − Cov(X − m_{ĝ_ψ}(X))| at chart points, from kernels alone.

    Cov(X∘ψ) uses the closed-form kernel at ψ-images. For the other side,
    m_{ĝ_ψ}(G(x,·)) = (1/vol)∫G(x,z)ρ(z)dλ(z) with ρ = (ĝ_ψ/ĝ)^{d/2}, which
    is smooth; it is evaluated spectrally from ρ sampled on a fine grid.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    fine = ss.build_grid(d, resolution)
    closed = ss.make_green_kernel(fine, "closed")
    series = ss.GreenKernel(fine, closed.C_hat_g, fine.L_max, "series")
    vol = fine.volume
    rho = geo.metric_pullback_ratio(psi, fine.chart) ** (d / 2.0)
    sp = geo.from_chart(points)
    m_x = ss.green_apply(series, rho, sp) / vol
    m_nodes = ss.green_apply(series, rho) / vol
    mm = float(fine.integrate(m_nodes * rho)) / vol
    img = geo.mobius_apply(psi, points)
    k = len(points)
    lhs = np.empty((k, k))
    rhs = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            if i == j:
                lhs[i, j] = rhs[i, j] = 0.0
                continue
            lhs[i, j] = ss.green_eval(closed, img[i], img[j])
            rhs[i, j] = ss.green_eval(closed, points[i], points[j]) - m_x[i] - m_x[j] + mm
    return float(np.max(np.abs(lhs - rhs)) * 2.0 / d)
