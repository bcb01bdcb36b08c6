"""Classical Liouville theory: constant negative Q-curvature metrics with conical singularities.

The unknown is split as u = h + ½ ln w + const with ln w = Σ 4χ_k ln(1/‖x − x_k‖),
so that h is smooth and band-limited. h minimizes the strictly convex functional

    J(h) = (d/4γ_d)∫(h P_0 h − 2(d−1)! c_0 h) dλ + c_0 ln ∫ e^{d(h + ½ ln w)} dλ,

whose critical points satisfy P_0 h = −2γ_d c_0 (e^{d(h+½ln w)}/∫e^{d(h+½ln w)} − 1/vol).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import digamma, logsumexp

from . import geometry as geo
from . import gaussian_field as gf
from . import liouville as lv
from . import sphere_spectral as ss
from .stats import jackknife_means

EXCLUSION_RADIUS = 0.3


class ClassicalBoundError(ValueError):
    """The conical weights violate χ_k < 1/2 or Σχ_k > 1."""


class NonConvergenceError(RuntimeError):
    """The descent did not reach the requested tolerance."""


# --- data --------------------------------------------------------------------


@dataclass(frozen=True)
class SingularData:
    """Conical points x_k on S^d (ambient coordinates) with weights χ_k."""

    points: np.ndarray
    chis: np.ndarray

    def __post_init__(self):
        chis = np.atleast_1d(np.asarray(self.chis, dtype=float))
        pts = np.asarray(self.points, dtype=float)
        pts = pts.reshape(len(chis), -1) if len(chis) else pts.reshape(0, pts.shape[-1] if pts.ndim == 2 else 3)
        if len(chis) and not np.allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12):
            raise ValueError("singular points must lie on the unit sphere")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "chis", chis)

    @classmethod
    def from_chart(cls, points, chis) -> "SingularData":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(geo.from_chart(pts), chis)

    @property
    def d(self) -> int:
        return self.points.shape[1] - 1

    @property
    def c0(self) -> float:
        return float(np.sum(self.chis) - 1.0)

    def bounds_hold(self) -> bool:
        return bool(len(self.chis) > 0 and np.all(self.chis < 0.5) and self.c0 > 0.0)

    def check_bounds(self) -> None:
        if np.any(self.chis >= 0.5):
            raise ClassicalBoundError("every chi must be below 1/2")
        if self.c0 <= 0.0:
            raise ClassicalBoundError(f"sum of chis must exceed 1 (c0 = {self.c0:.6g})")

    def check_integrable(self) -> None:
        if np.any(self.chis >= 0.5):
            raise ClassicalBoundError("every chi must be below 1/2 for e^{d·½ln w} to be integrable")


def symmetric_triple(grid: ss.SphereGrid, chi: float = 0.4) -> SingularData:
    """Three points related by rotations of 2π/3 about the pole, away from the nodes.

    The polar coordinate sits halfway between the two Gauss nodes closest to
    the equator and the azimuth halfway between azimuthal nodes, so the grid is
    invariant under the rotation whenever 3 divides the azimuth count.
    """
    if grid.d != 2:
        raise ValueError("symmetric_triple is defined on S^2")
    ts = np.unique(np.round(grid.points[:, 2], 14))
    k = np.searchsorted(ts, 0.0)
    t = 0.5 * (ts[k - 1] + ts[k]) if ts[k] != 0.0 else 0.5 * (ts[k] + ts[k + 1])
    s = math.sqrt(1.0 - t * t)
    az = 2.0 * np.pi * np.arange(3) / 3.0
    pts = np.stack([s * np.cos(az), s * np.sin(az), np.full(3, t)], axis=1)
    return SingularData(pts, np.full(3, chi))


# --- spectral basis ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Basis:
    Y: np.ndarray          # node values of a λ-orthonormal basis of degrees 1..L
    degrees: np.ndarray
    eig: np.ndarray        # Λ_l per basis vector


@lru_cache(maxsize=8)
def _basis(grid: ss.SphereGrid, L: int) -> _Basis:
    ss._check_cutoff(grid, L)
    sw = np.sqrt(grid.weights)
    labels = ss.zonal_sum(grid.points @ grid.points.T, np.arange(L + 1, dtype=float), grid.d)
    vals, vecs = np.linalg.eigh(sw[:, None] * labels * sw[None, :])
    keep = vals > 0.5
    deg = np.rint(vals[keep]).astype(int)
    Y = vecs[:, keep] / sw[:, None]
    for arr in (Y, deg):
        arr.setflags(write=False)
    return _Basis(Y, deg, ss.gjms_eigenvalue(grid.d, deg.astype(float)))


def _coefficients(basis: _Basis, grid: ss.SphereGrid, f) -> np.ndarray:
    return basis.Y.T @ (grid.weights * np.asarray(f, dtype=float))


# --- profile and functional --------------------------------------------------


def singular_profile(grid: ss.SphereGrid, data: SingularData) -> np.ndarray:
    """ln w = Σ 4χ_k ln(1/‖x − x_k‖) at every node (chordal norm)."""
    if len(data.chis) == 0:
        return np.zeros(grid.size)
    if data.d != grid.d:
        raise ValueError("dimension mismatch between grid and singular data")
    gf.check_off_nodes(grid, data.points)
    chord = np.linalg.norm(grid.points[:, None, :] - data.points[None, :, :], axis=-1)
    return -np.log(chord) @ (4.0 * data.chis)


def weak_profile_pairing(grid: ss.SphereGrid, data: SingularData, f, L: int) -> float:
    """2γ_d Σχ_k (f(x_k) − mean f), the exact value of ⟨½ln w, P_0 f⟩ for band-limited f."""
    if len(data.chis) == 0:
        return 0.0
    fx = ss.evaluate_band_limited(grid, f, L, data.points)
    return float(2.0 * ss.green_normalization(grid.d) * data.chis @ (fx - grid.mean(f)))


def _log_integral(grid: ss.SphereGrid, h, logw) -> float:
    """ln ∫ e^{d(h + ½ ln w)} dλ by quadrature."""
    return float(logsumexp(grid.d * (np.asarray(h) + 0.5 * logw) + np.log(grid.weights)))


def functional_j(h, data: SingularData, params: ss.ModelParams, grid: ss.SphereGrid,
                 L: int | None = None) -> float:
    data.check_integrable()
    L = grid.L_max if L is None else L
    h = np.asarray(h, dtype=float)
    d, g = grid.d, ss.green_normalization(grid.d)
    ph = ss.apply_gjms(grid, h, L)
    logw = singular_profile(grid, data)
    quad = grid.integrate(h * ph - 2.0 * math.factorial(d - 1) * data.c0 * h)
    return float(d / (4.0 * g) * quad + data.c0 * _log_integral(grid, h, logw))


def functional_j_gradient(h, data: SingularData, params: ss.ModelParams, grid: ss.SphereGrid,
                          L: int | None = None) -> np.ndarray:
    """Gradient of J in the λ-inner product on fields of degree ≤ L, as node values.

    The pointwise first variation is projected onto degrees 1..L; the l = 0
    part vanishes by shift invariance and the rest is invisible to J.
    """
    data.check_integrable()
    L = grid.L_max if L is None else L
    h = np.asarray(h, dtype=float)
    d, g = grid.d, ss.green_normalization(grid.d)
    logw = singular_profile(grid, data)
    density = np.exp(d * (h + 0.5 * logw) - _log_integral(grid, h, logw))
    full = d / (2.0 * g) * (ss.apply_gjms(grid, h, L) - math.factorial(d - 1) * data.c0) + data.c0 * d * density
    basis = _basis(grid, L)
    return basis.Y @ _coefficients(basis, grid, full)


# --- solver ------------------------------------------------------------------


@dataclass(frozen=True)
class SolverOptions:
    L: int = 24
    tol: float = 1e-11
    max_iter: int = 500
    pgd_tol: float = 1e-3
    max_pgd: int = 200
    seed: int | None = None
    init_scale: float = 1.0

    def as_dict(self) -> dict:
        return {"L": self.L, "tol": self.tol, "max_iter": self.max_iter, "pgd_tol": self.pgd_tol,
                "max_pgd": self.max_pgd, "seed": self.seed, "init_scale": self.init_scale}


@dataclass(frozen=True, eq=False)
class ClassicalSolution:
    h: np.ndarray
    u0: np.ndarray
    J_value: float
    residual_norm: float
    iterations: int
    log: list = field(default_factory=list)
    volume: float = float("nan")
    log_integral: float = float("nan")
    L: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_index", "h", "u0"])
            for j in range(len(self.h)):
                w.writerow([j, repr(float(self.h[j])), repr(float(self.u0[j]))])

    def log_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "J", "grad_norm", "step"])
            for row in self.log:
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])


class _Problem:
    """J and its derivatives in the coefficients of the orthonormal basis."""

    def __init__(self, data: SingularData, grid: ss.SphereGrid, L: int):
        self.grid, self.data, self.L = grid, data, L
        self.basis = _basis(grid, L)
        self.logw = singular_profile(grid, data)
        self.d = grid.d
        self.kq = self.d / (4.0 * ss.green_normalization(grid.d))
        self.lnw_nodes = np.log(grid.weights) + 0.5 * self.d * self.logw

    def _log_terms(self, a):
        e = self.d * (self.basis.Y @ a) + self.lnw_nodes
        lz = float(logsumexp(e))
        return lz, np.exp(e - lz)

    def value(self, a) -> float:
        lz, _ = self._log_terms(a)
        return float(self.kq * np.sum(self.basis.eig * a * a) + self.data.c0 * lz)

    def grad(self, a):
        lz, pi = self._log_terms(a)
        g = 2.0 * self.kq * self.basis.eig * a + self.data.c0 * self.d * (self.basis.Y.T @ pi)
        return float(self.kq * np.sum(self.basis.eig * a * a) + self.data.c0 * lz), g, pi

    def hessian(self, pi):
        Y = self.basis.Y
        yp = Y.T @ pi
        hess = (Y.T * pi) @ Y - np.outer(yp, yp)
        hess *= self.data.c0 * self.d**2
        hess[np.diag_indices_from(hess)] += 2.0 * self.kq * self.basis.eig
        return hess


def _initial(problem: _Problem, options: SolverOptions) -> np.ndarray:
    a = np.zeros(problem.basis.Y.shape[1])
    if options.seed is not None:
        rng = np.random.default_rng(options.seed)
        a = options.init_scale * rng.standard_normal(a.size) / (1.0 + problem.basis.eig)
    return a


def _armijo(problem: _Problem, a, J, g, step_dir, t0=1.0, shrink=0.5, c=1e-4, max_halvings=60):
    slope = float(g @ step_dir)
    t = t0
    for _ in range(max_halvings):
        trial = a + t * step_dir
        Jt = problem.value(trial)
        if Jt <= J + c * t * slope:
            return t, trial, Jt
        t *= shrink
    return 0.0, a, J


def solve_classical(data: SingularData, params: ss.ModelParams, grid: ss.SphereGrid,
                    options: SolverOptions = SolverOptions()) -> ClassicalSolution:
    """Minimize J over mean-zero fields of degree ≤ L, then rebuild u_0."""
    data.check_bounds()
    if data.d != grid.d:
        raise ValueError("dimension mismatch between grid and singular data")
    L = options.L
    problem = _Problem(data, grid, L)
    a = _initial(problem, options)
    log = []
    J, g, pi = problem.grad(a)
    it = 0
    log.append((0, J, float(np.linalg.norm(g)), 0.0))
    precond = 1.0 / (1.0 + problem.basis.eig)
    # preconditioned descent until the basin is reached
    t = 1.0
    while it < options.max_pgd and np.linalg.norm(g) > options.pgd_tol:
        t, a_new, J_new = _armijo(problem, a, J, g, -precond * g, t0=min(1.0, 2.0 * t) if t else 1.0)
        if t == 0.0:
            break
        it += 1
        a = a_new
        J, g, pi = problem.grad(a)
        log.append((it, J, float(np.linalg.norm(g)), t))
    # Newton refinement
    while np.linalg.norm(g) > options.tol:
        if it >= options.max_iter:
            raise NonConvergenceError(f"gradient norm {np.linalg.norm(g):.3e} after {it} iterations")
        delta = np.linalg.solve(problem.hessian(pi), -g)
        if abs(float(g @ delta)) < 1e-13 * max(1.0, abs(J)):
            # the decrease is below round-off in J, so the Armijo test is uninformative
            a_new, t = a + delta, 1.0
            J_new = problem.value(a_new)
            if J_new > J + 1e-13 * max(1.0, abs(J)):
                raise NonConvergenceError("Newton step increased J at round-off level")
        else:
            t, a_new, J_new = _armijo(problem, a, J, g, delta)
            if t == 0.0:
                raise NonConvergenceError("line search failed")
        it += 1
        a = a_new
        J, g, pi = problem.grad(a)
        log.append((it, J, float(np.linalg.norm(g)), t))
    h = problem.basis.Y @ a
    lz = _log_integral(grid, h, problem.logw)
    d = grid.d
    u0 = h + 0.5 * problem.logw - lz / d + math.log(data.c0 / params.Lambda) / d
    residual = 2.0 * ss.green_normalization(d) / d * float(np.linalg.norm(g))
    return ClassicalSolution(
        h=h, u0=u0, J_value=J, residual_norm=residual, iterations=it, log=log,
        volume=float(grid.integrate(np.exp(d * u0))), log_integral=lz, L=L,
    )


def weak_residual(sol: ClassicalSolution, data: SingularData, params: ss.ModelParams,
                  grid: ss.SphereGrid, tests=None) -> float:
    """Max |⟨u0, P_0 f⟩ + (d−1)!∫f + 2γΛ∫e^{du0}f − 2γΣχ f(x_k)| over test functions.

    ``tests`` are node values of band-limited functions (degree ≤ sol.L); the
    default is the λ-orthonormal basis of degrees 0..L. ⟨½ln w, P_0 f⟩ uses its
    exact value, since ½ln w is not band-limited.
    """
    d, L = grid.d, sol.L
    g = ss.green_normalization(d)
    if tests is None:
        basis = _basis(grid, L)
        tests = np.concatenate([np.full((1, grid.size), 1.0 / math.sqrt(grid.volume)), basis.Y.T])
    tests = np.atleast_2d(tests)
    out = 0.0
    for f in tests:
        pf = ss.apply_gjms(grid, f, L)
        fx = ss.evaluate_band_limited(grid, f, L, data.points) if len(data.chis) else np.zeros(0)
        r = (grid.integrate(sol.h * pf) + weak_profile_pairing(grid, data, f, L)
             + math.factorial(d - 1) * grid.integrate(f)
             + 2.0 * g * params.Lambda * grid.integrate(np.exp(d * sol.u0) * f)
             - 2.0 * g * float(data.chis @ fx))
        out = max(out, abs(float(r)))
    return out


def exclusion_mask(grid: ss.SphereGrid, data: SingularData, radius: float = EXCLUSION_RADIUS) -> np.ndarray:
    if len(data.chis) == 0:
        return np.ones(grid.size, dtype=bool)
    chord = np.linalg.norm(grid.points[:, None, :] - data.points[None, :, :], axis=-1)
    return np.all(chord > radius, axis=1)


def curvature_check(sol: ClassicalSolution, data: SingularData, params: ss.ModelParams,
                    grid: ss.SphereGrid, radius: float = EXCLUSION_RADIUS) -> dict:
    """Q-curvature of e^{2u0}ĝ against −2γ_dΛ at nodes beyond the exclusion radius.

    P_0 u0 = P_0 h − 2γ_dΣχ/vol away from the singular points (½ln w contributes
    its smooth part exactly).
    """
    d = grid.d
    g = ss.green_normalization(d)
    p_u0 = ss.apply_gjms(grid, sol.h, sol.L) - 2.0 * g * float(np.sum(data.chis)) / grid.volume
    q = (p_u0 + math.factorial(d - 1)) * np.exp(-d * sol.u0)
    mask = exclusion_mask(grid, data, radius)
    err = np.abs(q[mask] + 2.0 * g * params.Lambda)
    return {"max_error": float(np.max(err)), "target": -2.0 * g * params.Lambda,
            "exclusion_radius": radius, "nodes_checked": int(mask.sum())}


def uniqueness_check(data: SingularData, params: ss.ModelParams, grid: ss.SphereGrid,
                     seeds: Sequence[int] = (1, 2), options: SolverOptions = SolverOptions()) -> dict:
    """Solve from two random initializations and compare the mean-zero parts."""
    data.check_bounds()
    if len(seeds) != 2:
        raise ValueError("uniqueness_check takes two seeds")
    sols = [solve_classical(data, params, grid, SolverOptions(**{**options.as_dict(), "seed": s})) for s in seeds]
    diff = sols[0].h - sols[1].h
    diff = diff - grid.mean(diff)
    return {"gap": float(np.max(np.abs(diff))), "seeds": list(seeds),
            "iterations": [s.iterations for s in sols], "J": [s.J_value for s in sols]}


def moser_trudinger_check(h, data: SingularData, c: float, C: float, grid: ss.SphereGrid,
                          L: int | None = None) -> tuple[float, float, float]:
    """Both sides of ln ⨍e^{h + 2dΣχ ln(1/‖x−x_k‖)} ≤ c + C⨍hP_0h + ⨍h on the normalized measure."""
    data.check_integrable()
    L = grid.L_max if L is None else L
    h = np.asarray(h, dtype=float)
    logw = singular_profile(grid, data)
    lhs = float(logsumexp(h + 0.5 * grid.d * logw + np.log(grid.weights)) - math.log(grid.volume))
    rhs = float(c + C * grid.mean(h * ss.apply_gjms(grid, h, L)) + grid.mean(h))
    return lhs, rhs, rhs - lhs


def random_band_limited(grid: ss.SphereGrid, L: int, rng: np.random.Generator, amplitude: float = 1.0,
                        mean_zero: bool = False) -> np.ndarray:
    """Random field of degree ≤ L scaled to sup-norm ``amplitude`` on the nodes."""
    basis = _basis(grid, L)
    f = basis.Y @ (rng.standard_normal(basis.Y.shape[1]) / (1.0 + basis.degrees))
    if not mean_zero:
        f = f + rng.standard_normal()
    return amplitude * f / np.max(np.abs(f))


# --- semi-classical limit ------------------------------------------------------------


def classical_chart_field(sol: ClassicalSolution, data: SingularData, grid: ss.SphereGrid,
                          target: ss.SphereGrid) -> np.ndarray:
    """φ_0 = u0 + ½ ln ĝ at the nodes of ``target`` (h interpolated at degree sol.L)."""
    h = ss.evaluate_band_limited(grid, sol.h, sol.L, target.points)
    logw = singular_profile(target, data)
    d = grid.d
    const = float(np.mean(sol.u0 - sol.h - 0.5 * singular_profile(grid, data)))
    return h + 0.5 * logw + const + 0.5 * np.log(target.metric_density)


def semiclassical_params(b: float, Lambda: float, d: int = 2) -> ss.ModelParams:
    """μ = Λ/b², which keeps E[A] = (Σα − Q)/(bμ) → c_0/Λ as b → 0."""
    return ss.ModelParams(d, b, mu=Lambda / b**2, Lambda=Lambda)


def semiclassical_compare(data: SingularData, Lambda: float, b_list: Sequence[float],
                          config: lv.EnsembleConfig, solver: SolverOptions = SolverOptions(),
                          classical_resolution: int | None = None, mode: str = "conditioned",
                          radius: float = EXCLUSION_RADIUS) -> dict:
    """Distance between the weighted mean of bφ and the classical chart field φ_0.

    mode "conditioned" fixes the total mass at c_0/Λ; mode "sampled" draws it
    from the Gamma law and needs the Seiberg bounds at every b.
    """
    if mode not in ("conditioned", "sampled"):
        raise ValueError("mode must be 'conditioned' or 'sampled'")
    data.check_bounds()
    d = data.d
    fine = ss.build_grid(d, classical_resolution or solver.L + 3)
    sol = solve_classical(data, ss.ModelParams(d, 0.5, Lambda=Lambda), fine, solver)
    grid = config.grid(d)
    phi0 = classical_chart_field(sol, data, fine, grid)
    mask = exclusion_mask(grid, data, radius)
    wm = grid.weights * mask
    chart = geo.to_chart(data.points)
    rows = []
    for i, b in enumerate(b_list):
        params = semiclassical_params(b, Lambda, d)
        ins = gf.InsertionSet(chart, data.chis / b)
        cfg = lv.EnsembleConfig(config.L, config.n, config.seed, config.stream + i, config.resolution, config.threads)
        ens = lv.sample_liouville(ins, params, cfg, volume=data.c0 / Lambda if mode == "conditioned" else None)
        w = np.exp(ens.log_weights - np.max(ens.log_weights))
        bphi = b * ens.phi

        def err(mw, mwphi):
            diff = mwphi / np.atleast_1d(mw)[..., None] - phi0
            return np.sqrt(np.sum(diff * diff * wm, axis=-1))

        e, se = jackknife_means(err, w, w[:, None] * bphi)
        row = {"b": b, "error": e, "stderr": se, "ess": ens.ess, "n_samples": config.n,
               "mu": params.mu, "mode": mode}
        if mode == "sampled":
            cpart = np.log(ens.total_mass) / d
            m, sm = jackknife_means(lambda a, c: c / a, w, w * cpart)
            p = ins.s(params.Q) / b
            row.update({"c_part_mean": m, "c_part_stderr": sm,
                        "c_part_plugin": math.log(data.c0 / Lambda) / d,
                        "c_part_exact": (digamma(p) - math.log(params.mu)) / d})
        rows.append(row)
    return {"rows": rows, "exclusion_radius": radius, "classical_residual": sol.residual_norm,
            "classical_L": sol.L, "nodes_compared": int(mask.sum())}
