"""Quadrature grids on S^d, the GJMS operator in spectral form, Q-curvature and Green kernels.

Node values live on a product quadrature grid. Spectral operations go through
zonal kernels Z_l(p, q) = (N(d,l)/vol) C_l^{(d-1)/2}(p·q)/C_l^{(d-1)/2}(1), the
reproducing kernels of degree-l harmonics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from . import geometry as geo

SUPPORTED_DIMENSIONS = (2, 4)


class BandLimitError(ValueError):
    """Input to a spectral operator is not band-limited at the requested degree."""


class CoincidentPointsError(ValueError):
    """Closed-form Green kernel evaluated on the diagonal."""


# --- constants ---------------------------------------------------------------


def sphere_volume(d: int) -> float:
    return 2.0 * math.pi ** ((d + 1) / 2) / math.gamma((d + 1) / 2)


def green_normalization(d: int) -> float:
    """γ_d = (d−1)!·vol(S^d)/2, the constant with P_0 G = γ_d(δ − 1/vol)."""
    return math.factorial(d - 1) * sphere_volume(d) / 2.0


def multiplicity(d: int, l):
    """Dimension of the space of degree-l spherical harmonics on S^d."""
    l = np.asarray(l)
    return np.where(l == 0, 1, (2 * l + d - 1) / (d - 1) * special.comb(l + d - 2, l))


def gjms_eigenvalue(d: int, l):
    """Λ_l = ∏_{k=0}^{d/2−1} (l(l+d−1) + k(d−k−1))."""
    l = np.asarray(l, dtype=float)
    out = np.ones_like(l)
    for k in range(d // 2):
        out = out * (l * (l + d - 1) + k * (d - k - 1))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ModelParams:
    """Parameter block; Q and gamma_d are derived from (d, b)."""

    d: int
    b: float
    mu: float = 1.0
    Lambda: float = 1.0
    gmc_constant_shift: float = 0.0
    Q: float = field(init=False)
    gamma_d: float = field(init=False)

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ValueError(f"d must be an even integer >= 2, got {self.d}")
        if not 0.0 < self.b < 1.0:
            raise ValueError(f"b must lie in (0, 1), got {self.b}")
        if self.mu <= 0.0 or self.Lambda <= 0.0:
            raise ValueError("mu and Lambda must be positive")
        object.__setattr__(self, "Q", self.b + 1.0 / self.b)
        object.__setattr__(self, "gamma_d", green_normalization(self.d))

    @property
    def volume(self) -> float:
        return sphere_volume(self.d)

    def as_dict(self) -> dict:
        return {
            "d": self.d,
            "b": self.b,
            "Q": self.Q,
            "mu": self.mu,
            "Lambda": self.Lambda,
            "gamma_d": self.gamma_d,
            "gmc_constant_shift": self.gmc_constant_shift,
        }


# --- grids -------------------------------------------------------------------


def _sphere_rule(d: int, n: int):
    """Product rule on S^d ⊂ R^{d+1}, exact for polynomials of degree ≤ 2n−1."""
    if d == 1:
        m = 2 * n
        phi = (np.arange(m) + 0.5) * 2.0 * np.pi / m
        return np.stack([np.cos(phi), np.sin(phi)], axis=1), np.full(m, 2.0 * np.pi / m)
    a = (d - 2) / 2.0
    t, wt = special.roots_jacobi(n, a, a)
    sub, wsub = _sphere_rule(d - 1, n)
    s = np.sqrt(1.0 - t * t)
    pts = np.concatenate(
        [
            (s[:, None, None] * sub[None, :, :]).reshape(-1, d),
            np.repeat(t, sub.shape[0])[:, None],
        ],
        axis=1,
    )
    return pts, (wt[:, None] * wsub[None, :]).ravel()


@dataclass(frozen=True, eq=False)
class SphereGrid:
    """Quadrature nodes on S^d with weights for the sphere measure λ_ĝ."""

    d: int
    resolution: int
    points: np.ndarray
    chart: np.ndarray
    weights: np.ndarray
    metric_density: np.ndarray
    L_max: int

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def volume(self) -> float:
        return sphere_volume(self.d)

    def integrate(self, f) -> np.ndarray:
        return np.asarray(f) @ self.weights

    def mean(self, f) -> np.ndarray:
        return self.integrate(f) / self.volume

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["node_index"] + [f"x{i + 1}" for i in range(self.d)] + ["weight", "metric_density"]
            )
            for j in range(self.size):
                w.writerow([j, *map(repr, self.chart[j]), repr(self.weights[j]), repr(self.metric_density[j])])


@lru_cache(maxsize=16)
def build_grid(d: int, resolution: int) -> SphereGrid:
    """Gauss–Jacobi in the polar angles × uniform azimuth; L_max = resolution − 1."""
    if d not in SUPPORTED_DIMENSIONS:
        raise ValueError(f"unsupported dimension {d}; choose from {SUPPORTED_DIMENSIONS}")
    if resolution < 4:
        raise ValueError("resolution must be at least 4")
    pts, w = _sphere_rule(d, resolution)
    chart = pts[:, :d] / (1.0 - pts[:, d])[:, None]
    dens = (1.0 - pts[:, d]) ** 2
    for arr in (pts, chart, w, dens):
        arr.setflags(write=False)
    return SphereGrid(d, resolution, pts, chart, w, dens, resolution - 1)


# --- zonal kernels -----------------------------------------------------------


def _gegenbauer_sum(t, coeffs, lam: float) -> np.ndarray:
    """Σ_l coeffs[l]·C_l^{lam}(t) by the three-term recurrence."""
    c_prev = np.zeros_like(t)
    c_cur = np.ones_like(t)
    out = np.zeros_like(t)
    for l, a in enumerate(coeffs):
        if l == 1:
            c_prev, c_cur = c_cur, 2.0 * lam * t
        elif l >= 2:
            c_prev, c_cur = c_cur, (2.0 * (l + lam - 1.0) * t * c_cur - (l + 2.0 * lam - 2.0) * c_prev) / l
        if a != 0.0:
            out += a * c_cur
    return out


def _zonal_weights(coeffs, d: int) -> np.ndarray:
    l = np.arange(len(coeffs))
    return np.asarray(coeffs, dtype=float) * (2 * l + d - 1) / ((d - 1) * sphere_volume(d))


def zonal_sum(t, coeffs, d: int) -> np.ndarray:
    """Σ_l coeffs[l]·Z_l(t) with Z_l the degree-l zonal reproducing kernel on S^d."""
    t = np.clip(np.asarray(t, dtype=float), -1.0, 1.0)
    return _gegenbauer_sum(t, _zonal_weights(coeffs, d), (d - 1) / 2.0)


def zonal_sum_derivative(t, coeffs, d: int) -> np.ndarray:
    """d/dt of :func:`zonal_sum`, using C_l^λ' = 2λ C_{l−1}^{λ+1}."""
    t = np.clip(np.asarray(t, dtype=float), -1.0, 1.0)
    lam = (d - 1) / 2.0
    a = _zonal_weights(coeffs, d)
    return 2.0 * lam * _gegenbauer_sum(t, a[1:], lam + 1.0)


@lru_cache(maxsize=64)
def _node_zonal_matrix(grid: SphereGrid, coeffs: tuple) -> np.ndarray:
    k = zonal_sum(grid.points @ grid.points.T, coeffs, grid.d)
    k.setflags(write=False)
    return k


def spectral_matrix(grid: SphereGrid, coeffs) -> np.ndarray:
    """Matrix K with (K f)_i = Σ_j Σ_l coeffs[l] Z_l(y_i, y_j) w_j f_j."""
    return _node_zonal_matrix(grid, tuple(float(c) for c in coeffs)) * grid.weights[None, :]


def band_projector(grid: SphereGrid, L: int) -> np.ndarray:
    return spectral_matrix(grid, np.ones(L + 1))


def _check_cutoff(grid: SphereGrid, L: int):
    if L > grid.L_max:
        raise BandLimitError(f"cutoff L={L} exceeds grid band limit {grid.L_max}")


def band_limit_defect(grid: SphereGrid, f, L: int) -> float:
    """Relative change of f under projection onto degrees ≤ L (λ-weighted L²)."""
    f = np.asarray(f, dtype=float)
    diff = f - f @ band_projector(grid, L).T
    num = np.sqrt(np.sum(diff * diff * grid.weights, axis=-1))
    den = np.sqrt(np.sum(f * f * grid.weights, axis=-1))
    return float(np.max(num / np.maximum(den, 1e-300)))


def evaluate_band_limited(grid: SphereGrid, f, L: int, points) -> np.ndarray:
    """Interpolate band-limited node values f at arbitrary sphere points."""
    points = np.atleast_2d(points)
    k = zonal_sum(points @ grid.points.T, np.ones(L + 1), grid.d)
    return (k * grid.weights) @ np.asarray(f)


def gradient_band_limited(grid: SphereGrid, f, L: int, points) -> np.ndarray:
    """Tangential gradient on S^d of the band-limited interpolant of f."""
    points = np.atleast_2d(points)
    kp = zonal_sum_derivative(points @ grid.points.T, np.ones(L + 1), grid.d)
    amb = (kp * (grid.weights * np.asarray(f))) @ grid.points
    return amb - np.sum(amb * points, axis=1)[:, None] * points


def apply_gjms(grid: SphereGrid, f, L: int, tol: float = 1e-8) -> np.ndarray:
    """P_0 f for node values f band-limited at degree ≤ L."""
    _check_cutoff(grid, L)
    f = np.asarray(f, dtype=float)
    if band_limit_defect(grid, f, L) > tol and np.any(f != 0):
        raise BandLimitError(f"input is not band-limited at degree {L}")
    return f @ spectral_matrix(grid, gjms_eigenvalue(grid.d, np.arange(L + 1))).T


def sobolev_norm_sq(grid: SphereGrid, u, L: int) -> float:
    """(1/γ_d)∫(u P_0 u + γ_d u²) dλ, a diagnostic norm."""
    g = green_normalization(grid.d)
    pu = apply_gjms(grid, u, L)
    return float(grid.integrate(u * pu + g * u * u) / g)


def q_curvature(grid: SphereGrid, phi, L: int) -> np.ndarray:
    """Q-curvature of e^{2φ}ĝ: (P_0 φ + (d−1)!)·e^{−dφ}."""
    phi = np.asarray(phi, dtype=float)
    return (apply_gjms(grid, phi, L) + math.factorial(grid.d - 1)) * np.exp(-grid.d * phi)


def eval_polyharmonic_log(d: int, m: int, r):
    """(−Δ)^m ln(1/r) on R^d away from the origin."""
    if m < 1:
        raise ValueError("m must be >= 1")
    r = np.asarray(r, dtype=float)
    prod = 1.0
    for k in range(1, m + 1):
        prod *= d - 2 * k
    return 2.0 ** (m - 1) * math.factorial(m - 1) * prod / r ** (2 * m)


# --- Green kernel ------------------------------------------------------------


def green_series_coefficients(d: int, L: int) -> np.ndarray:
    """Coefficients γ_d/Λ_l (l = 1..L, zero at l = 0) of the truncated Green kernel."""
    c = np.zeros(L + 1)
    if L >= 1:
        l = np.arange(1, L + 1)
        c[1:] = green_normalization(d) / gjms_eigenvalue(d, l)
    return c


@lru_cache(maxsize=8)
def _green_constant(d: int) -> float:
    # mean of ln(1/|p−q|) over q, written as a zonal integral in s = 1 − p·q
    a = (d - 2) / 2.0
    ratio = sphere_volume(d - 1) / sphere_volume(d)
    w_int = 2.0 ** (2 * a + 1) * special.beta(a + 1, a + 1)
    l_int, _ = integrate.quad(
        lambda s: 1.0, 0.0, 2.0, weight="alg-loga", wvar=(a, a), epsabs=1e-15, epsrel=1e-14
    )
    mean = -0.5 * ratio * (math.log(2.0) * w_int + l_int)
    return -mean


def calibrate_green_constant(grid_or_d) -> float:
    """C_ĝ making ln(1/chord) + C_ĝ mean-zero; by rotation invariance it reduces to a zonal integral."""
    d = grid_or_d.d if isinstance(grid_or_d, SphereGrid) else int(grid_or_d)
    return _green_constant(d)


@dataclass(frozen=True, eq=False)
class GreenKernel:
    grid: SphereGrid
    C_hat_g: float
    L: int
    mode: str = "closed"

    def __post_init__(self):
        if self.mode not in ("closed", "series"):
            raise ValueError("mode must be 'closed' or 'series'")

    @property
    def d(self):
        return self.grid.d

    def on_sphere(self, p, q) -> np.ndarray:
        """G between unit-sphere points (broadcasting)."""
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        if self.mode == "series":
            t = np.sum(p * q, axis=-1)
            return zonal_sum(t, green_series_coefficients(self.d, self.L), self.d)
        chord = np.linalg.norm(p - q, axis=-1)
        if np.any(chord == 0.0):
            raise CoincidentPointsError("closed-form Green kernel is singular on the diagonal")
        return -np.log(chord) + self.C_hat_g

    def __call__(self, x, y):
        return green_eval(self, x, y)


def make_green_kernel(grid: SphereGrid, mode: str = "closed", L: int | None = None) -> GreenKernel:
    if L is None:
        L = grid.L_max
    return GreenKernel(grid, calibrate_green_constant(grid), L, mode)


def green_eval(kernel: GreenKernel, x, y):
    """G_ĝ between chart points (INF allowed)."""
    d = kernel.d
    if kernel.mode == "series" or x is geo.INF or y is geo.INF:
        return kernel.on_sphere(geo.from_chart(x, d), geo.from_chart(y, d))
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
        return kernel.on_sphere(geo.from_chart(xa, d), geo.from_chart(ya, d))
    dist = np.linalg.norm(xa - ya, axis=-1)
    if np.any(dist == 0.0):
        raise CoincidentPointsError("closed-form Green kernel is singular on the diagonal")
    return (
        -np.log(dist)
        - 0.25 * (np.log(geo.round_metric_density(xa)) + np.log(geo.round_metric_density(ya)))
        + kernel.C_hat_g
    )


def green_apply(kernel: GreenKernel, F, points=None, L_F: int | None = None) -> np.ndarray:
    """∫ G(x, y) F(y) dλ(y) at sphere points x (default: the grid nodes).

    Series mode uses plain quadrature. Closed mode subtracts F(x) + ∇F(x)·y
    inside the integral. Both pieces integrate to zero against G(x, ·): the
    constant by the zero-mean property, the linear one because it is a
    degree-1 harmonic vanishing at x. The remaining integrand vanishes to
    second order at y = x. F(x) and ∇F(x) come from band-limited
    interpolation at degree ``L_F``.
    """
    grid = kernel.grid
    F = np.asarray(F, dtype=float)
    at_nodes = points is None
    pts = grid.points if at_nodes else np.atleast_2d(points)
    if kernel.mode == "series":
        k = zonal_sum(pts @ grid.points.T, green_series_coefficients(grid.d, kernel.L), grid.d)
        return k @ (grid.weights * F)
    L_F = grid.L_max if L_F is None else L_F
    fx = F if at_nodes else evaluate_band_limited(grid, F, L_F, pts)
    grad = gradient_band_limited(grid, F, L_F, pts)
    chord = np.sqrt(np.maximum(2.0 - 2.0 * (pts @ grid.points.T), 0.0))
    with np.errstate(divide="ignore"):
        g = np.where(chord > 0.0, -np.log(np.where(chord > 0.0, chord, 1.0)) + kernel.C_hat_g, 0.0)
    resid = F[None, :] - fx[:, None] - grad @ grid.points.T
    return np.sum(g * grid.weights * resid, axis=1)


def green_identity_error(kernel: GreenKernel, f, L_f: int, points=None) -> float:
    """max |(1/γ_d)∫G(x,y) P_0 f(y) dλ(y) − (f(x) − mean f)| at sphere points (default: nodes)."""
    grid = kernel.grid
    f = np.asarray(f, dtype=float)
    pf = apply_gjms(grid, f, L_f)
    lhs = green_apply(kernel, pf, points, L_F=L_f)
    fx = f if points is None else evaluate_band_limited(grid, f, L_f, points)
    return float(np.max(np.abs(lhs / green_normalization(grid.d) - (fx - grid.mean(f)))))
