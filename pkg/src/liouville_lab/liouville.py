"""Vertex correlators, KPZ laws, the A-type anomaly, Liouville samplers and conventions."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import logsumexp

from . import geometry as geo
from . import gaussian_field as gf
from . import gmc
from . import sphere_spectral as ss
from .gaussian_field import InsertionSet, SeibergBoundError
from .rng import sample_generator
from .stats import effective_sample_size, jackknife_means, normalized_weights_from_log


class AmplitudeGuardError(ValueError):
    """Anomaly reweighting variance exceeds the configured guard."""


@dataclass(frozen=True)
class EnsembleConfig:
    """Monte Carlo settings shared by the samplers."""

    L: int = 16
    n: int = 2000
    seed: int = 0
    stream: int = 0
    resolution: int | None = None
    threads: int = 1

    @property
    def grid_resolution(self) -> int:
        return self.resolution if self.resolution is not None else self.L + 1

    def grid(self, d: int) -> ss.SphereGrid:
        return ss.build_grid(d, self.grid_resolution)

    def as_dict(self) -> dict:
        return {"L": self.L, "n": self.n, "seed": self.seed, "stream": self.stream,
                "resolution": self.grid_resolution, "threads": self.threads}


# --- algebra -----------------------------------------------------------------


def conformal_dimension(alpha, params: ss.ModelParams):
    """Δ_α = d α (Q − α)."""
    return params.d * np.asarray(alpha) * (params.Q - np.asarray(alpha))


def interaction_constant(kernel: ss.GreenKernel, ins: InsertionSet, d: int | None = None) -> float:
    """C(x, α) = d Σ_{i≠j} α_i α_j G(x_i, x_j) over ordered pairs."""
    d = kernel.d if d is None else d
    total = 0.0
    for i in range(len(ins)):
        for j in range(len(ins)):
            if i != j:
                total += ins.alphas[i] * ins.alphas[j] * float(ss.green_eval(kernel, ins.points[i], ins.points[j]))
    return d * total


def seiberg_check(ins: InsertionSet, params: ss.ModelParams) -> None:
    Q = params.Q
    if np.any(ins.alphas >= Q / 2):
        raise SeibergBoundError(f"Seiberg bound violated: some alpha >= Q/2 = {Q / 2:.6g}")
    if np.sum(ins.alphas) <= Q:
        raise SeibergBoundError(f"Seiberg bound violated: sum of alphas {np.sum(ins.alphas):.6g} <= Q = {Q:.6g}")


def extended_bounds_hold(ins: InsertionSet, params: ss.ModelParams) -> bool:
    """All α_i < Q/2 and Q − Σα < min(1/b, min_i(Q − 2α_i))."""
    Q, b = params.Q, params.b
    if len(ins) == 0 or np.any(ins.alphas >= Q / 2):
        return False
    return bool(Q - np.sum(ins.alphas) < min(1.0 / b, float(np.min(Q - 2.0 * ins.alphas))))


def extended_check(ins: InsertionSet, params: ss.ModelParams) -> None:
    if not extended_bounds_hold(ins, params):
        raise SeibergBoundError("extended unit-volume bounds violated")


# --- ensembles of Z_0 -----------------------------------------------------------


@dataclass(frozen=True)
class _Setup:
    grid: ss.SphereGrid
    cov: gf.CovarianceOperator
    H: np.ndarray


def _setup(ins: InsertionSet, params: ss.ModelParams, config: EnsembleConfig) -> _Setup:
    grid = config.grid(params.d)
    cov = gf.build_covariance(grid, config.L)
    kernel = ss.GreenKernel(grid, ss.calibrate_green_constant(grid), config.L, "series")
    return _Setup(grid, cov, gf.girsanov_shift(kernel, ins))


def log_z_naught_ensemble(ins: InsertionSet, params: ss.ModelParams, config: EnsembleConfig,
                          stream: int | None = None) -> np.ndarray:
    st = _setup(ins, params, config)
    return gf.map_field_samples(
        st.cov, config.seed, config.stream if stream is None else stream, config.n,
        lambda r, x: gmc.log_z_naught_batch(x, st.cov.variances, st.H, params, st.grid),
        config.threads,
    )


@dataclass(frozen=True)
class CorrelatorEstimate:
    value: float
    stderr: float
    pieces: dict
    params: dict
    s: float
    ess: float

    def as_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "pieces": dict(self.pieces),
                "params": dict(self.params), "s": self.s, "ess": self.ess}


def correlator_from_logs(ins: InsertionSet, params: ss.ModelParams, log_z: np.ndarray,
                         grid: ss.SphereGrid) -> CorrelatorEstimate:
    """Assemble ⟨∏V⟩ = e^C ∏ĝ^{Δ/2} Γ(s/b)/(db) μ^{−s/b} E[Z_0^{−s/b}] from ln Z_0 samples."""
    seiberg_check(ins, params)
    d, b = params.d, params.b
    s = ins.s(params.Q)
    p = s / b
    closed = ss.make_green_kernel(grid, "closed")
    c_int = interaction_constant(closed, ins, d)
    dims = conformal_dimension(ins.alphas, params)
    metric = float(np.prod(geo.round_metric_density(ins.points) ** (dims / 2.0)))
    gamma_factor = math.gamma(p) / (d * b)
    mu_power = params.mu ** (-p)
    moment, moment_se = gmc.moment_from_logs(log_z, -p)
    pre = math.exp(c_int) * metric * gamma_factor * mu_power
    w = np.exp(-p * (log_z - np.max(log_z)))
    pieces = {
        "interaction_constant": c_int,
        "metric_factor": metric,
        "gamma_factor": gamma_factor,
        "mu_power": mu_power,
        "moment": moment,
        "moment_stderr": moment_se,
    }
    return CorrelatorEstimate(pre * moment, pre * moment_se, pieces, params.as_dict(), s,
                              effective_sample_size(w))


def correlator(ins: InsertionSet, params: ss.ModelParams, config: EnsembleConfig) -> CorrelatorEstimate:
    seiberg_check(ins, params)
    log_z = log_z_naught_ensemble(ins, params, config)
    return correlator_from_logs(ins, params, log_z, config.grid(params.d))


def kpz_factor(psi: geo.MobiusMap, ins: InsertionSet, params: ss.ModelParams) -> float:
    """∏ |ψ'(x_i)|^{−Δ_i}."""
    fac = geo.mobius_conformal_factor(psi, ins.points)
    return float(np.prod(fac ** (-conformal_dimension(ins.alphas, params))))


def kpz_covariance_check(psi: geo.MobiusMap, ins: InsertionSet, params: ss.ModelParams,
                         config: EnsembleConfig) -> dict:
    """Compare ⟨∏V(ψx_i)⟩ with ∏|ψ'(x_i)|^{−Δ_i}⟨∏V(x_i)⟩ on independent ensembles."""
    moved = ins.moved(psi)
    if np.any(geo.is_infinite(moved.points)):
        raise ValueError("an insertion is mapped to infinity")
    seiberg_check(ins, params)
    lhs = correlator(moved, params, config)
    rhs = correlator(ins, params, EnsembleConfig(config.L, config.n, config.seed, config.stream + 1,
                                                 config.resolution, config.threads))
    factor = kpz_factor(psi, ins, params)
    ratio = lhs.value / (factor * rhs.value)
    rel = math.hypot(lhs.stderr / lhs.value, rhs.stderr / rhs.value)
    return {
        "ratio": ratio,
        "stderr": ratio * rel,
        "z_score": (ratio - 1.0) / (ratio * rel),
        "predicted_factor": factor,
        "lhs": lhs.as_dict(),
        "rhs": rhs.as_dict(),
    }


def kpz_mu_scan(ins: InsertionSet, params: ss.ModelParams, config: EnsembleConfig, mus) -> list[dict]:
    """Correlators at several μ from one shared ensemble of Z_0.

    The ratio to the first μ equals (μ/μ_0)^{−s/b} up to rounding, since only
    the μ^{−s/b} prefactor changes.
    """
    seiberg_check(ins, params)
    mus = [float(m) for m in mus]
    log_z = log_z_naught_ensemble(ins, params, config)
    grid = config.grid(params.d)
    p = ins.s(params.Q) / params.b
    rows = []
    base = None
    for m in mus:
        est = correlator_from_logs(ins, dataclasses.replace(params, mu=m), log_z, grid)
        base = est.value if base is None else base
        rows.append({"mu": m, "value": est.value, "stderr": est.stderr, "ratio": est.value / base,
                     "predicted_ratio": (m / mus[0]) ** (-p)})
    return rows


# --- A-type anomaly --------------------------------------------------------------


def _anomaly_integral(d: int) -> float:
    poly = Polynomial([1.0])
    for k in range(d // 2):
        poly = poly * Polynomial([k * k, 0.0, -1.0])
    prim = poly.integ()
    return float(prim(d / 2.0) - prim(0.0))


def det_ratio_constant(d: int) -> float:
    """c_d = (1/γ_d) (−1)^{d/2}/d! ∫_0^{d/2} ∏(k² − t²) dt."""
    return (-1) ** (d // 2) / math.factorial(d) * _anomaly_integral(d) / ss.green_normalization(d)


def anomaly_coefficient(params: ss.ModelParams) -> float:
    d = params.d
    vol = ss.sphere_volume(d)
    return (2.0 / (math.factorial(d) ** 2 * vol) * _anomaly_integral(d)
            + (-1) ** (d // 2) / (math.factorial(d - 1) * vol) * params.Q ** 2)


def anomaly_prediction(grid: ss.SphereGrid, phi, params: ss.ModelParams, L: int) -> dict:
    """Predicted ln(Π_g/Π_ĝ) for g = e^{2φ}ĝ.

    ``value`` is d(−1)^{d/2} a ∫φ(Q_ĝ + ½P φ)dλ, the form that follows from
    the Girsanov reduction and equals the Polyakov anomaly for d = 2.
    ``display_value`` evaluates the variant ∫2φ(Q_ĝ + Pφ)dλ for comparison.
    """
    d = params.d
    phi = np.asarray(phi, dtype=float)
    pphi = ss.apply_gjms(grid, phi, L)
    q0 = math.factorial(d - 1)
    coef = d * (-1) ** (d // 2) * anomaly_coefficient(params)
    return {
        "value": coef * float(grid.integrate(phi * (q0 + 0.5 * pphi))),
        "display_value": coef * float(grid.integrate(2.0 * phi * (q0 + pphi))),
    }


@dataclass(frozen=True)
class AnomalyReport:
    a_coefficient: float
    predicted: float
    predicted_display: float
    mc_estimate: float
    mc_stderr: float
    phi_description: str
    reweight_variance: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def anomaly_check(phi, ins: InsertionSet, params: ss.ModelParams, config: EnsembleConfig,
                  description: str = "", max_variance: float = 1.0) -> AnomalyReport:
    """MC estimate of ln(Π_g/Π_ĝ) by reweighting one round-metric ensemble.

    With Y = −(dQ/2γ)∫X P φ dλ and W = ∫e^{db(H + Qφ)}dM,
    ln(Π_g/Π_ĝ) = c_d∫φ(Q + ½Pφ) + dQ m(φ)Σα + ln E[e^Y W^{−s/b}] − ln E[Z_0^{−s/b}].
    """
    seiberg_check(ins, params)
    d, b, Q, gam = params.d, params.b, params.Q, params.gamma_d
    st = _setup(ins, params, config)
    grid = st.grid
    phi = np.asarray(phi, dtype=float)
    pphi = ss.apply_gjms(grid, phi, config.L)
    var_y = d * Q * Q / (2.0 * gam) * float(grid.integrate(phi * pphi))
    if var_y > max_variance:
        raise AmplitudeGuardError(f"reweighting variance {var_y:.3g} exceeds guard {max_variance:.3g}")
    p = ins.s(Q) / b
    m_phi = float(grid.mean(phi))
    q0 = math.factorial(d - 1)
    det_part = det_ratio_constant(d) * float(grid.integrate(phi * (q0 + 0.5 * pphi)))
    y_vec = -(d * Q / (2.0 * gam)) * grid.weights * pphi

    def reduce(r, x):
        lw = gmc.gmc_log_weights(x, st.cov.variances, params, grid)
        lz = logsumexp(lw + d * b * st.H[None, :], axis=1)
        lw_phi = logsumexp(lw + d * b * (st.H + Q * phi)[None, :], axis=1)
        return np.stack([x @ y_vec - p * lw_phi, -p * lz], axis=1)

    logs = gf.map_field_samples(st.cov, config.seed, config.stream, config.n, reduce, config.threads)
    shift = float(np.max(logs))
    num = np.exp(logs[:, 0] - shift)
    den = np.exp(logs[:, 1] - shift)
    est, se = jackknife_means(lambda a, c: np.log(a) - np.log(c), num, den)
    pred = anomaly_prediction(grid, phi, params, config.L)
    mc = det_part + d * Q * m_phi * float(np.sum(ins.alphas)) + est
    return AnomalyReport(anomaly_coefficient(params), pred["value"], pred["display_value"], mc, se,
                         description, var_y)


# --- Liouville field and measure ---------------------------------------------------


@dataclass(frozen=True)
class WeightedFieldEnsemble:
    """Samples of φ with importance weights Z_0^{−s/b} (stored as logs)."""

    phi: np.ndarray
    log_weights: np.ndarray
    total_mass: np.ndarray
    log_z: np.ndarray
    measures: np.ndarray | None = None

    @property
    def weights(self) -> np.ndarray:
        return normalized_weights_from_log(self.log_weights)

    @property
    def ess(self) -> float:
        return effective_sample_size(self.weights)

    def weighted_mean(self, values) -> float:
        return float(np.asarray(values) @ self.weights)


def sample_liouville(ins: InsertionSet, params: ss.ModelParams, config: EnsembleConfig,
                     volume: float | None = None, keep_measures: bool = False) -> WeightedFieldEnsemble:
    """Weighted samples of the Liouville field with marked points.

    With ``volume=None`` the total mass A is drawn from Gamma(s/b, rate μ)
    (Seiberg bounds required). A fixed ``volume`` samples the law conditioned
    on total mass, which only needs the extended bounds.
    """
    if volume is None:
        seiberg_check(ins, params)
    else:
        extended_check(ins, params)
        if volume <= 0:
            raise ValueError("volume must be positive")
    d, b, Q = params.d, params.b, params.Q
    st = _setup(ins, params, config)
    grid = st.grid
    p = ins.s(Q) / b
    base = st.H + 0.5 * Q * np.log(grid.metric_density)

    def reduce(r, x):
        lw = gmc.gmc_log_weights(x, st.cov.variances, params, grid)
        lwh = lw + d * b * st.H[None, :]
        lz = logsumexp(lwh, axis=1)
        if volume is None:
            a = np.array([sample_generator(config.seed, config.stream, i, 1).gamma(p) for i in r]) / params.mu
        else:
            a = np.full(len(r), float(volume))
        c = (np.log(a) - lz) / (d * b)
        out = {"phi": x + base[None, :] + c[:, None], "lz": lz, "a": a}
        if keep_measures:
            out["m"] = np.exp(lwh - lz[:, None])
        return out

    res = gf.map_field_samples(st.cov, config.seed, config.stream, config.n, reduce, config.threads)
    return WeightedFieldEnsemble(res["phi"], -p * res["lz"], res["a"], res["lz"], res.get("m"))


def unit_volume_sphere(ins: InsertionSet, params: ss.ModelParams, config: EnsembleConfig) -> WeightedFieldEnsemble:
    """Normalized chaos measures Z_0-measure/Z_0 with weights Z_0^{−s/b}."""
    return sample_liouville(ins, params, config, volume=1.0, keep_measures=True)


def pullback_field(psi: geo.MobiusMap, phi, params: ss.ModelParams, grid: ss.SphereGrid, L: int) -> np.ndarray:
    """φ∘ψ + (Q/2) ln|ψ'| at the nodes, φ interpolated at degree L."""
    img = geo.mobius_apply(psi, grid.chart)
    if np.any(geo.is_infinite(img)):
        raise ValueError("a node is mapped to infinity")
    vals = ss.evaluate_band_limited(grid, phi, L, geo.from_chart(img))
    return vals + 0.5 * params.Q * np.log(geo.mobius_conformal_factor(psi, grid.chart))


# --- conventions -------------------------------------------------------------------


def convert_conventions(params: ss.ModelParams) -> dict:
    """Map the physics (b, Q_b) convention to (γ, Q_γ)."""
    d, b, Q = params.d, params.b, params.Q
    gamma = b * math.sqrt(2 * d)
    q_gamma = gamma / 2.0 + d / gamma
    return {
        "gamma": gamma,
        "Q_gamma": q_gamma,
        "Q_gamma_over_Q_b": q_gamma / Q,
        "field_scale": math.sqrt(d / 2.0),
        "vertex_beta_per_alpha": math.sqrt(2 * d),
        "dimension_ratio": 0.5,
        "b_roundtrip": gamma / math.sqrt(2 * d),
    }


def convention_rows(b: float, d: int, alphas=None) -> dict:
    """Check each row of the convention correspondence at (b, d).

    Each entry is the absolute residual of the row's relationship. Row
    ``background_charge_table`` uses the tabulated Q_γ = √(2/d) Q_b;
    ``background_charge`` uses Q_γ = γ/2 + d/γ.
    """
    params = ss.ModelParams(d, b)
    conv = convert_conventions(params)
    gamma, qg, Q = conv["gamma"], conv["Q_gamma"], params.Q
    alphas = np.array([0.3, 0.45, 0.6]) * Q if alphas is None else np.asarray(alphas)
    beta = alphas * math.sqrt(2 * d)
    dim_b = d * alphas * (Q - alphas)
    dim_g = beta / 2 * (qg - beta / 2)
    qg_table = math.sqrt(2.0 / d) * Q
    dim_g_table = beta / 2 * (qg_table - beta / 2)

    def bounds(al, be, qgv):
        phys = (np.sum(al) > Q, bool(np.all(al < Q / 2)))
        math_ = (np.sum(be) > 2 * qgv, bool(np.all(be < qgv)))
        return float(phys != math_)

    return {
        "coupling": abs(gamma - b * math.sqrt(2 * d)),
        "background_charge": abs(qg - math.sqrt(d / 2.0) * Q),
        "background_charge_table": abs(qg - qg_table),
        "covariance": abs(conv["field_scale"] ** 2 * (2.0 / d) - 1.0),
        "vertex": float(np.max(np.abs(beta * conv["field_scale"] - d * alphas))),
        "dimension": float(np.max(np.abs(dim_g - 0.5 * dim_b))),
        "dimension_table": float(np.max(np.abs(dim_g_table - 0.5 * dim_b))),
        "seiberg": max(bounds(alphas, beta, qg), bounds(alphas * 1.7, beta * 1.7, qg),
                       bounds(alphas * 0.5, beta * 0.5, qg)),
        "seiberg_table": max(bounds(alphas, beta, qg_table), bounds(alphas * 1.7, beta * 1.7, qg_table),
                             bounds(alphas * 0.5, beta * 0.5, qg_table)),
    }
