import math

import numpy as np
import pytest
from scipy import integrate, stats

from liouville_lab import geometry as geo
from liouville_lab import gaussian_field as gf
from liouville_lab import liouville as lv
from liouville_lab import sphere_spectral as ss
from liouville_lab.stats import weighted_ks_1samp, weighted_ks_2samp

P = ss.ModelParams(2, 0.4)
TRIPLE = gf.parse_insertions("0.31,0.22,0.4Q;-0.43,0.12,0.4Q;0.13,-0.52,0.4Q".replace("0.4Q", str(0.4 * P.Q)), 2)
SMALL = lv.EnsembleConfig(L=8, n=2000, seed=3)


def test_conformal_dimension():
    assert lv.conformal_dimension(0.0, P) == 0.0
    assert math.isclose(lv.conformal_dimension(P.Q / 2, P), 2 * P.Q**2 / 4)
    assert math.isclose(lv.conformal_dimension(1.0, ss.ModelParams(2, 0.5)), 3.0)
    a = 0.3
    assert math.isclose(lv.conformal_dimension(a, P), lv.conformal_dimension(P.Q - a, P))


def test_interaction_constant():
    g = ss.build_grid(2, 9)
    k = ss.make_green_kernel(g, "closed")
    assert lv.interaction_constant(k, gf.InsertionSet([[0.1, 0.2]], [0.7])) == 0.0
    two = gf.InsertionSet([[0.1, 0.2], [-0.3, 0.5]], [0.7, 0.4])
    swp = gf.InsertionSet([[-0.3, 0.5], [0.1, 0.2]], [0.4, 0.7])
    assert math.isclose(lv.interaction_constant(k, two), lv.interaction_constant(k, swp), rel_tol=1e-14)
    # chart points 0 and ∞ are antipodal; use 0 and a point far out
    x1, x2 = np.zeros(2), np.array([0.0, 1.0])
    anti = gf.InsertionSet([x1, x2], [1.0, 1.0])
    assert math.isclose(lv.interaction_constant(k, anti), 2 * 2 * float(ss.green_eval(k, x1, x2)), rel_tol=1e-14)


def test_seiberg_errors():
    bad = gf.InsertionSet([[0.1, 0.2], [0.3, -0.4]], [0.6 * P.Q, 0.3 * P.Q])
    with pytest.raises(gf.SeibergBoundError):
        lv.correlator(bad, P, SMALL)
    low = gf.InsertionSet([[0.1, 0.2], [0.3, -0.4]], [0.3 * P.Q, 0.3 * P.Q])
    with pytest.raises(gf.SeibergBoundError):
        lv.correlator(low, P, SMALL)


def test_correlator_pieces_and_smoke():
    est = lv.correlator(TRIPLE, P, lv.EnsembleConfig(L=16, n=2000, seed=1))
    pc = est.pieces
    prod = math.exp(pc["interaction_constant"]) * pc["metric_factor"] * pc["gamma_factor"] * pc["mu_power"] * pc["moment"]
    assert abs(est.value - prod) <= 1e-12 * est.value
    assert all(math.isfinite(v) for v in pc.values())
    assert est.value > 0 and est.s > 0 and est.ess > 0


def test_mu_scaling_exact_on_shared_ensemble():
    rows = lv.kpz_mu_scan(TRIPLE, P, SMALL, [1.0, 2.0, 0.5])
    for r in rows:
        assert abs(r["ratio"] / r["predicted_ratio"] - 1.0) <= 1e-12
    p = TRIPLE.s(P.Q) / P.b
    assert math.isclose(rows[1]["predicted_ratio"], 2.0 ** (-p))


def test_kpz_rotation_and_factor():
    th = 1.1
    rot = geo.MobiusMap((geo.Rotation(np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])),))
    r = lv.kpz_covariance_check(rot, TRIPLE, P, SMALL)
    assert abs(r["ratio"] - 1.0) <= 4 * r["stderr"]
    dil = geo.MobiusMap((geo.Dilation(2.0),))
    dims = lv.conformal_dimension(TRIPLE.alphas, P)
    assert math.isclose(lv.kpz_factor(dil, TRIPLE, P), 2.0 ** (-np.sum(dims)), rel_tol=1e-12)


def test_anomaly_coefficient():
    Q = P.Q
    assert math.isclose(lv.anomaly_coefficient(P), -(1 + 6 * Q * Q) / (24 * math.pi), rel_tol=1e-12)
    assert math.isclose(lv._anomaly_integral(4), 56 / 15, rel_tol=1e-14)
    for d in (2, 4, 6):
        num = integrate.quad(lambda t: np.prod([k * k - t * t for k in range(d // 2)]), 0, d / 2)[0]
        assert abs(lv._anomaly_integral(d) - num) <= 1e-10 * max(1.0, abs(num))
    # at Q=0 only the determinant part survives
    for d in (2, 4):
        vol = ss.sphere_volume(d)
        q0 = 2.0 / (math.factorial(d) ** 2 * vol) * lv._anomaly_integral(d)
        cd = lv.det_ratio_constant(d)
        gam = ss.green_normalization(d)
        assert math.isclose(q0, cd * gam * 2 * (-1) ** (d // 2) / (math.factorial(d) * vol), rel_tol=1e-12)


def test_anomaly_trivial_and_constant():
    g = SMALL.grid(2)
    zero = lv.anomaly_check(np.zeros(g.size), TRIPLE, P, SMALL)
    assert zero.predicted == 0.0
    assert abs(zero.mc_estimate) <= max(4 * zero.mc_stderr, 1e-12)
    const = lv.anomaly_check(np.full(g.size, 0.3), TRIPLE, P, SMALL)
    assert abs(const.mc_estimate - const.predicted) <= max(4 * const.mc_stderr, 1e-10)
    with pytest.raises(lv.AmplitudeGuardError):
        lv.anomaly_check(3.0 * g.points[:, 2], TRIPLE, P, SMALL)


def test_volume_law_and_weights():
    ens = lv.sample_liouville(TRIPLE, P, lv.EnsembleConfig(L=8, n=4000, seed=4), keep_measures=True)
    shape = TRIPLE.s(P.Q) / P.b
    w = ens.weights
    assert np.all(w >= 0) and w.sum() > 0
    _, p = weighted_ks_1samp(ens.total_mass, w, lambda t: stats.gamma.cdf(t, shape, scale=1 / P.mu))
    assert p > 0.01
    assert abs(stats.spearmanr(ens.total_mass, ens.log_weights)[0]) <= 4 / math.sqrt(len(w))
    assert ens.ess >= 0.1 * len(w)
    # the normalized measure does not see the drawn volume
    g = SMALL.grid(2)
    obs = ens.measures @ (g.points[:, 2] > 0)
    wa = ens.total_mass - ens.weighted_mean(ens.total_mass)
    wo = obs - ens.weighted_mean(obs)
    corr = float(np.sum(w * wa * wo) / math.sqrt(np.sum(w * wa**2) * np.sum(w * wo**2)))
    assert abs(corr) <= 4 / math.sqrt(ens.ess)


def test_unit_volume_sphere():
    ens = lv.unit_volume_sphere(TRIPLE, P, lv.EnsembleConfig(L=8, n=3000, seed=5))
    assert np.max(np.abs(ens.measures.sum(axis=1) - 1.0)) <= 1e-12
    ref = lv.sample_liouville(TRIPLE, P, lv.EnsembleConfig(L=8, n=3000, seed=5, stream=1), keep_measures=True)
    g = SMALL.grid(2)
    f = g.points[:, 0] ** 2
    _, p = weighted_ks_2samp(ens.measures @ f, ens.weights, ref.measures @ f, ref.weights)
    assert p > 0.01
    b = 0.4
    gam_like = gf.InsertionSet([[0.1, 0.2], [0.3, -0.4], [-0.5, 0.1]], [b, b, b])
    hand = b < P.Q / 2 and P.Q - 3 * b < min(1 / b, P.Q - 2 * b)
    assert lv.extended_bounds_hold(gam_like, P) is hand is True
    with pytest.raises(gf.SeibergBoundError):
        lv.unit_volume_sphere(gf.InsertionSet([[0.1, 0.2]], [0.1]), P, SMALL)


def test_convert_conventions():
    c = lv.convert_conventions(ss.ModelParams(2, 0.5))
    assert math.isclose(c["gamma"], 1.0) and math.isclose(c["Q_gamma"], 2.5)
    assert abs(c["b_roundtrip"] - 0.5) <= 1e-14
    rows = lv.convention_rows(0.37, 2)
    assert max(rows.values()) <= 1e-12
    rng = np.random.default_rng(0)
    for _ in range(3):
        d = int(rng.choice([2, 4, 6]))
        r = lv.convention_rows(float(rng.uniform(0.1, 0.9)), d)
        for key in ("coupling", "background_charge", "covariance", "vertex", "dimension", "seiberg"):
            assert r[key] <= 1e-12


def test_pullback_field():
    g = ss.build_grid(2, 9)
    phi = g.points[:, 2] + 0.5 * g.points[:, 0] * g.points[:, 1]
    ident = lv.pullback_field(geo.MobiusMap(()), phi, P, g, 8)
    assert np.allclose(ident, phi, atol=1e-12)
    th = 0.7
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    rot = lv.pullback_field(geo.MobiusMap((geo.Rotation(R),)), phi, P, g, 8)
    q = geo.from_chart(g.chart @ R.T)
    assert np.allclose(rot, q[:, 2] + 0.5 * q[:, 0] * q[:, 1], atol=1e-12)
    lam = 1.6
    dil = geo.MobiusMap((geo.Dilation(lam),))
    q = geo.from_chart(lam * g.chart)
    extra = lv.pullback_field(dil, phi, P, g, 8) - (q[:, 2] + 0.5 * q[:, 0] * q[:, 1])
    assert np.allclose(extra, 0.5 * P.Q * math.log(lam), atol=1e-12)
