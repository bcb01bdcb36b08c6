"""Command-line front end: one command runs one experiment and writes one output bundle.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import classical as cl
from . import gaussian_field as gf
from . import geometry as geo
from . import gmc
from . import liouville as lv
from . import sphere_spectral as ss
from .stats import jackknife_means, weighted_ks_1samp

COMMANDS = (
    "green-check", "sample-field", "gmc-scan", "correlator", "kpz-scan", "mobius-check", "anomaly",
    "volume-law", "unit-sphere", "classical-solve", "mt-check", "semiclassical", "convert",
)

DEFAULT_INSERTIONS = "0.31,0.22,0.4Q;-0.43,0.12,0.4Q;0.13,-0.52,0.4Q"

DEFAULTS = {
    "d": 2,
    "b": 0.4,
    "mu": 1.0,
    "Lambda": 1.0,
    "resolution": None,
    "L": 16,
    "n": 2000,
    "seed": 0,
    "threads": 1,
    "insertions": None,
    # command-specific
    "cutoffs": [8, 16, 32],
    "mus": [1.0, 2.0],
    "dilation": 2.0,
    "rotation": 0.0,
    "amplitude": 0.1,
    "max_variance": 1.0,
    "pairs": 20,
    "L_f": 8,
    "chi": 0.4,
    "tol": 1e-11,
    "uniqueness_seeds": [1, 2],
    "draws": 100,
    "b_list": [0.5, 0.3, 0.2],
    "mode": "conditioned",
    "significance": 0.01,
}

ENV_OUT = "LIOUVILLE_LAB_OUT"
NOT_RECORDED = ("threads",)  # outputs must not depend on the worker count


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


# --- configuration -------------------------------------------------------------


def _coerce(key, value):
    if value is None:
        return None
    ref = DEFAULTS[key]
    if isinstance(ref, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        cast = type(ref[0])
        return [cast(v) for v in value]
    if key in ("resolution",):
        return int(value)
    if key == "insertions":
        return str(value)
    if isinstance(ref, bool):
        return bool(value)
    if isinstance(ref, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    if isinstance(ref, float):
        return float(value)
    return value


def resolve_config(overrides: dict, path: str | None = None) -> dict:
    """Defaults, then the config file, then command-line overrides."""
    cfg = dict(DEFAULTS)
    layers = []
    if path:
        try:
            with open(path) as fh:
                layers.append(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(layers[0], dict):
            raise ConfigError("config file must hold a flat JSON object")
    layers.append({k: v for k, v in overrides.items() if v is not None})
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                cfg[key] = _coerce(key, value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {value!r}") from exc
    if cfg["n"] < 1 or cfg["L"] < 1 or cfg["threads"] < 1:
        raise ConfigError("n, L and threads must be positive")
    if cfg["seed"] < 0 or cfg["seed"] >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return cfg


def parse_insertions(text: str, params: ss.ModelParams) -> gf.InsertionSet:
    """"x1,y1,a1;..." in chart coordinates; a weight may be written as a multiple of Q ("0.4Q")."""
    items = []
    for item in (t for t in text.replace(" ", "").split(";") if t):
        vals = item.split(",")
        w = vals[-1]
        weight = float(w[:-1]) * params.Q if w.endswith("Q") else float(w)
        items.append(",".join(vals[:-1] + [repr(weight)]))
    return gf.parse_insertions(";".join(items), params.d)


def _params(cfg) -> ss.ModelParams:
    return ss.ModelParams(cfg["d"], cfg["b"], mu=cfg["mu"], Lambda=cfg["Lambda"])


def _ensemble(cfg, L=None) -> lv.EnsembleConfig:
    return lv.EnsembleConfig(L=L or cfg["L"], n=cfg["n"], seed=cfg["seed"], resolution=cfg["resolution"],
                             threads=cfg["threads"])


def _insertions(cfg, params) -> gf.InsertionSet:
    text = cfg["insertions"] if cfg["insertions"] is not None else DEFAULT_INSERTIONS
    return parse_insertions(text, params)


# --- output ---------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


class Bundle:
    """Output directory with results.json and CSV tables, all carrying the config."""

    def __init__(self, out: Path, command: str, cfg: dict):
        self.out = out
        self.command = command
        self.snapshot = {k: v for k, v in cfg.items() if k not in NOT_RECORDED}
        self.files = []
        out.mkdir(parents=True, exist_ok=True)

    def _header(self) -> str:
        return "# config=" + json.dumps(_jsonable(self.snapshot), sort_keys=True, separators=(",", ":"))

    def csv(self, name: str, header, rows) -> None:
        with open(self.out / name, "w", newline="") as fh:
            fh.write(self._header() + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        self.files.append(name)

    def results(self, payload: dict) -> None:
        doc = {"command": self.command, "config": self.snapshot, "seed": self.snapshot["seed"],
               "files": sorted(self.files), "results": payload}
        with open(self.out / "results.json", "w") as fh:
            json.dump(_jsonable(doc), fh, sort_keys=True, indent=2)
            fh.write("\n")


# --- commands -------------------------------------------------------------------


def cmd_green_check(cfg, bundle):
    d = cfg["d"]
    grid = ss.build_grid(d, cfg["resolution"] or 33)
    rng = np.random.default_rng(cfg["seed"])
    f = cl.random_band_limited(grid, cfg["L_f"], rng) if d == 2 else _random_band_limited_small(grid, cfg["L_f"], rng)
    probes = geo.from_chart(rng.uniform(-1.5, 1.5, size=(16, d)))
    rows = []
    for mode, L in (("series", cfg["L_f"]), ("closed", grid.L_max)):
        kernel = ss.make_green_kernel(grid, mode, L)
        err_nodes = ss.green_identity_error(kernel, f, cfg["L_f"])
        err_probe = ss.green_identity_error(kernel, f, cfg["L_f"], probes)
        rows.append((mode, L, err_nodes, err_probe))
    bundle.csv("green_check.csv", ["kernel", "L", "max_error_nodes", "max_error_offgrid"], rows)
    bundle.results({"nodes": grid.size, "C_hat_g": ss.calibrate_green_constant(d),
                    "errors": {r[0]: {"nodes": r[2], "offgrid": r[3]} for r in rows}})


def _random_band_limited_small(grid, L, rng):
    proj = ss.band_projector(grid, L)
    f = proj @ rng.standard_normal(grid.size)
    return f / np.max(np.abs(f))


def cmd_sample_field(cfg, bundle):
    params = _params(cfg)
    ec = _ensemble(cfg)
    grid = ec.grid(params.d)
    cov = gf.build_covariance(grid, ec.L)
    rng = np.random.default_rng(cfg["seed"])
    pairs = rng.integers(0, grid.size, size=(cfg["pairs"], 2))
    i, j = pairs[:, 0], pairs[:, 1]
    prods = gf.map_field_samples(cov, ec.seed, 0, ec.n, lambda r, x: x[:, i] * x[:, j], ec.threads)
    rows = []
    worst = 0.0
    for k in range(len(pairs)):
        est, se = jackknife_means(lambda m: m, prods[:, k])
        theory = float(cov.matrix[i[k], j[k]])
        z = (est - theory) / se
        worst = max(worst, abs(z))
        rows.append((int(i[k]), int(j[k]), est, se, theory, z))
    bundle.csv("covariance.csv", ["node_i", "node_j", "empirical", "stderr", "theory", "z_score"], rows)
    bundle.results({"covariance": cov.metadata, "max_abs_z": worst, "n_samples": ec.n})


def cmd_gmc_scan(cfg, bundle):
    params = ss.ModelParams(cfg["d"], cfg["b"], mu=cfg["mu"])
    ins = _insertions(cfg, params)
    res = gmc.seiberg_scan(ins, params, cfg["cutoffs"], cfg["n"], cfg["seed"], cfg["resolution"], cfg["threads"])
    keys = ["cutoff_L", "moment_estimate", "stderr", "n_samples", "b", "d", "s"]
    bundle.csv("seiberg_scan.csv", keys, [[r[k] for k in keys] for r in res["rows"]])
    # Wick normalization of the bare chaos at the largest cutoff
    ec = _ensemble(cfg, max(cfg["cutoffs"]))
    grid = ss.build_grid(params.d, res["grid_resolution"])
    cov = gf.build_covariance(grid, ec.L)
    mass = gf.map_field_samples(
        cov, ec.seed, len(cfg["cutoffs"]), ec.n,
        lambda r, x: np.exp(gmc.gmc_log_weights(x, cov.variances, params, grid)).sum(axis=1), ec.threads)
    m, se = jackknife_means(lambda v: v, mass)
    bundle.results({**res, "mean_total_mass": m, "mean_total_mass_stderr": se, "volume": grid.volume})


def cmd_correlator(cfg, bundle):
    params = _params(cfg)
    ins = _insertions(cfg, params)
    lv.seiberg_check(ins, params)
    est = lv.correlator(ins, params, _ensemble(cfg))
    bundle.csv("correlator.csv", ["value", "stderr", "s", "ess"], [(est.value, est.stderr, est.s, est.ess)])
    bundle.results(est.as_dict())


def cmd_kpz_scan(cfg, bundle):
    params = _params(cfg)
    ins = _insertions(cfg, params)
    ec = _ensemble(cfg)
    rows = lv.kpz_mu_scan(ins, params, ec, cfg["mus"])
    keys = ["mu", "value", "stderr", "ratio", "predicted_ratio"]
    bundle.csv("kpz_mu.csv", keys, [[r[k] for k in keys] for r in rows])
    psi = geo.MobiusMap((geo.Dilation(cfg["dilation"]),))
    cov = lv.kpz_covariance_check(psi, ins, params, lv.EnsembleConfig(ec.L, ec.n, ec.seed, 10, ec.resolution, ec.threads))
    bundle.csv("kpz_covariance.csv", ["dilation", "ratio", "stderr", "z_score", "predicted_factor"],
               [(cfg["dilation"], cov["ratio"], cov["stderr"], cov["z_score"], cov["predicted_factor"])])
    bundle.results({"mu_scan": rows, "covariance": cov})


def _mobius_from_cfg(cfg):
    prims = []
    if cfg["rotation"]:
        th = cfg["rotation"]
        rot = np.eye(cfg["d"])
        rot[:2, :2] = [[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]
        prims.append(geo.Rotation(rot))
    if cfg["dilation"] != 1.0:
        prims.append(geo.Dilation(cfg["dilation"]))
    return geo.MobiusMap(tuple(prims))


def cmd_mobius_check(cfg, bundle):
    params = ss.ModelParams(cfg["d"], cfg["b"])
    psi = _mobius_from_cfg(cfg)

    def bump(x):
        x = np.asarray(x, dtype=float)
        return np.exp(-4.0 * np.sum((x - 0.2) ** 2, axis=-1))

    res = gmc.mobius_covariance_check(psi, bump, params, cfg["n"], cfg["L"], cfg["seed"], cfg["resolution"],
                                      cfg["threads"], cfg["significance"])
    bundle.csv("mobius_check.csv", ["mean_lhs", "stderr_lhs", "mean_rhs", "stderr_rhs", "ks_statistic", "p_value"],
               [(res["mean_lhs"], res["stderr_lhs"], res["mean_rhs"], res["stderr_rhs"], res["ks_statistic"],
                 res["p_value"])])
    bundle.results(res)


def cmd_anomaly(cfg, bundle):
    params = _params(cfg)
    ins = _insertions(cfg, params)
    ec = _ensemble(cfg)
    grid = ec.grid(params.d)
    phi = cfg["amplitude"] * grid.points[:, params.d]
    rep = lv.anomaly_check(phi, ins, params, ec, f"{cfg['amplitude']}*x_{params.d + 1}", cfg["max_variance"])
    bundle.csv("anomaly.csv", ["predicted", "predicted_display", "mc_estimate", "stderr", "z_score"],
               [(rep.predicted, rep.predicted_display, rep.mc_estimate, rep.mc_stderr,
                 (rep.mc_estimate - rep.predicted) / rep.mc_stderr)])
    bundle.results(rep.as_dict())


def cmd_volume_law(cfg, bundle):
    params = _params(cfg)
    ins = _insertions(cfg, params)
    ens = lv.sample_liouville(ins, params, _ensemble(cfg))
    k = ins.s(params.Q) / params.b
    stat, p = weighted_ks_1samp(ens.total_mass, ens.weights, lambda x: sps.gamma.cdf(x, k, scale=1.0 / params.mu))
    w = ens.weights
    bundle.csv("volume_samples.csv", ["sample_index", "total_mass", "weight"],
               [(i, ens.total_mass[i], w[i]) for i in range(len(w))])
    bundle.results({"shape": k, "rate": params.mu, "ks_statistic": stat, "p_value": p, "ess": ens.ess})


def cmd_unit_sphere(cfg, bundle):
    params = _params(cfg)
    ins = _insertions(cfg, params)
    ec = _ensemble(cfg)
    grid = ec.grid(params.d)
    ens = lv.unit_volume_sphere(ins, params, ec)
    w = np.exp(ens.log_weights - np.max(ens.log_weights))
    rows = []
    dens = ens.measures / grid.weights[None, :]
    for j in range(grid.size):
        m, se = jackknife_means(lambda a, c: c / a, w, w * dens[:, j])
        rows.append((j, *grid.chart[j], m, se))
    bundle.csv("unit_sphere_density.csv", ["node_index"] + [f"x{i + 1}" for i in range(params.d)]
               + ["mean_density", "stderr"], rows)
    bundle.results({"ess": ens.ess, "n_samples": ec.n, "mean_total_mass": float(np.mean(ens.total_mass))})


def _classical_setup(cfg):
    d = cfg["d"]
    L = cfg["L"]
    grid = ss.build_grid(d, cfg["resolution"] or L + 3)
    if cfg["insertions"] is None:
        data = cl.symmetric_triple(grid, cfg["chi"])
    else:
        ins = gf.parse_insertions(cfg["insertions"], d)
        data = cl.SingularData.from_chart(ins.points, ins.alphas)
    return grid, data


def cmd_classical_solve(cfg, bundle):
    grid, data = _classical_setup(cfg)
    params = ss.ModelParams(cfg["d"], cfg["b"], Lambda=cfg["Lambda"])
    opts = cl.SolverOptions(L=cfg["L"], tol=cfg["tol"])
    sol = cl.solve_classical(data, params, grid, opts)
    bundle.csv("solution.csv", ["node_index", "h", "u0"],
               [(j, float(sol.h[j]), float(sol.u0[j])) for j in range(grid.size)])
    bundle.csv("convergence.csv", ["iteration", "J", "grad_norm", "step"], sol.log)
    uniq = cl.uniqueness_check(data, params, grid, cfg["uniqueness_seeds"], opts)
    bundle.results({
        "J": sol.J_value,
        "iterations": sol.iterations,
        "gradient_residual": sol.residual_norm,
        "weak_residual": cl.weak_residual(sol, data, params, grid),
        "volume": sol.volume,
        "volume_target": data.c0 / params.Lambda,
        "curvature": cl.curvature_check(sol, data, params, grid),
        "uniqueness": uniq,
        "singular_points": data.points,
        "chis": data.chis,
        "nodes": grid.size,
    })


def cmd_mt_check(cfg, bundle):
    d = cfg["d"]
    grid = ss.build_grid(d, cfg["resolution"] or cfg["L"] + 1)
    data = cl.SingularData(np.zeros((0, d + 1)), [])
    rng = np.random.default_rng(cfg["seed"])
    C = 1.0 / (2.0 * math.factorial(d))
    rows = []
    for k in range(cfg["draws"]):
        amp = float(rng.uniform(0.0, 1.0))
        h = cl.random_band_limited(grid, cfg["L"], rng, amp)
        lhs, rhs, margin = cl.moser_trudinger_check(h, data, 0.0, C, grid, cfg["L"])
        rows.append((k, amp, lhs, rhs, margin))
    bundle.csv("moser_trudinger.csv", ["draw", "amplitude", "lhs", "rhs", "margin"], rows)
    bundle.results({"C": C, "c": 0.0, "min_margin": min(r[4] for r in rows), "draws": cfg["draws"],
                    "measure": "normalized"})


def cmd_semiclassical(cfg, bundle):
    grid, data = _classical_setup({**cfg, "L": 24, "resolution": 27})
    res = cl.semiclassical_compare(data, cfg["Lambda"], cfg["b_list"], _ensemble(cfg),
                                   cl.SolverOptions(L=24), classical_resolution=27, mode=cfg["mode"])
    keys = ["b", "error", "stderr", "ess", "n_samples", "mu"]
    bundle.csv("semiclassical.csv", keys, [[r[k] for k in keys] for r in res["rows"]])
    bundle.results(res)


def cmd_convert(cfg, bundle):
    params = ss.ModelParams(cfg["d"], cfg["b"])
    conv = lv.convert_conventions(params)
    bundle.results({**conv, "Q_b": params.Q, "b": params.b, "d": params.d,
                    "residuals": lv.convention_rows(params.b, params.d)})


HANDLERS = {
    "green-check": cmd_green_check,
    "sample-field": cmd_sample_field,
    "gmc-scan": cmd_gmc_scan,
    "correlator": cmd_correlator,
    "kpz-scan": cmd_kpz_scan,
    "mobius-check": cmd_mobius_check,
    "anomaly": cmd_anomaly,
    "volume-law": cmd_volume_law,
    "unit-sphere": cmd_unit_sphere,
    "classical-solve": cmd_classical_solve,
    "mt-check": cmd_mt_check,
    "semiclassical": cmd_semiclassical,
    "convert": cmd_convert,
}

NUMERICAL_ERRORS = (gf.FactorizationError, cl.NonConvergenceError, gmc.GmcOverflowError, FloatingPointError,
                    np.linalg.LinAlgError)


# --- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="liouville-lab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="flat JSON file with config keys")
    ap.add_argument("--out", help=f"output directory (default: ${ENV_OUT} or ./out)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--d", type=int)
    ap.add_argument("--b", type=float)
    ap.add_argument("--mu", type=float)
    ap.add_argument("--lambda", dest="Lambda", type=float)
    ap.add_argument("--L", type=int)
    ap.add_argument("--n", type=int)
    ap.add_argument("--resolution", type=int)
    ap.add_argument("--insertions", help='"x1,y1,a1;x2,y2,a2" in chart coordinates; "0.4Q" means 0.4·Q')
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override any command-specific key")
    return ap


def run(command: str, overrides: dict, config_path: str | None = None, out: str | None = None) -> int:
    try:
        if command not in HANDLERS:
            raise ConfigError(f"unknown command {command!r}")
        cfg = resolve_config(overrides, config_path)
        out_dir = Path(out or os.environ.get(ENV_OUT) or "out")
        bundle = Bundle(out_dir, command, cfg)
        HANDLERS[command](cfg, bundle)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"invalid configuration: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in ("seed", "threads", "d", "b", "mu", "Lambda", "L", "n",
                                               "resolution", "insertions")}
    for item in args.set:
        if "=" not in item:
            print(f"invalid configuration: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        key, value = item.split("=", 1)
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    return run(args.command, overrides, args.config, args.out)


if __name__ == "__main__":
    sys.exit(main())
