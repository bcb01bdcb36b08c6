import math

import numpy as np
import pytest
from scipy import stats

from liouville_lab import geometry as geo
from liouville_lab import gaussian_field as gf
from liouville_lab import sphere_spectral as ss


def _cov(res=17, L=16):
    return gf.build_covariance(ss.build_grid(2, res), L)


def test_covariance_structure():
    cov = _cov()
    g = cov.grid
    assert np.max(np.abs(cov.matrix - cov.matrix.T)) <= 1e-12
    assert np.max(np.abs(cov.matrix @ g.weights)) <= 1e-8
    # nodes on one latitude form a rotation orbit
    ring = np.isclose(g.points[:, 2], g.points[0, 2])
    assert np.ptp(cov.variances[ring]) <= 1e-8
    ev = np.linalg.eigvalsh(cov.matrix)
    assert ev.min() >= -1e-8 * cov.variances.max()
    assert cov.jitter <= 1e-10 * cov.variances.max()
    assert "jitter" in cov.metadata


def test_covariance_matches_series_at_L32():
    g = ss.build_grid(2, 33)
    cov = gf.build_covariance(g, 32)
    kern = ss.make_green_kernel(g, "series", 32)
    rng = np.random.default_rng(0)
    i, j = rng.integers(0, g.size, size=(2, 20))
    ref = kern.on_sphere(g.points[i], g.points[j])
    assert np.max(np.abs(cov.matrix[i, j] - ref)) <= 1e-12
    # a pair at right angles
    t = g.points @ g.points[0]
    k = int(np.argmin(np.abs(t)))
    assert np.isclose(cov.matrix[0, k], ss.zonal_sum(np.array([t[k]]), ss.green_series_coefficients(2, 32), 2)[0])


def test_band_limit_enforced():
    with pytest.raises(ss.BandLimitError):
        gf.build_covariance(ss.build_grid(2, 9), 12)


def test_sample_field_covariance_and_mean():
    cov = _cov()
    ens = gf.sample_field(cov, seed=11, stream=0, n=10_000)
    x = ens.values
    rng = np.random.default_rng(1)
    i, j = rng.integers(0, cov.grid.size, size=(2, 20))
    prod = x[:, i] * x[:, j]
    se = prod.std(axis=0, ddof=1) / math.sqrt(ens.n)
    assert np.all(np.abs(prod.mean(axis=0) - cov.matrix[i, j]) <= 4 * se)
    mse = x.std(axis=0, ddof=1) / math.sqrt(ens.n)
    assert np.mean(np.abs(x.mean(axis=0)) <= 4 * mse) >= 0.999
    assert np.max(np.abs(x @ cov.grid.weights)) / cov.grid.volume <= 1e-6


def test_linear_functionals_follow_exact_law():
    cov = _cov()
    n = 10_000
    x = gf.sample_field(cov, seed=5, stream=2, n=n).values
    rng = np.random.default_rng(2)
    c = rng.normal(size=(50, cov.grid.size))
    sd = np.sqrt(np.einsum("ki,ij,kj->k", c, cov.matrix, c))
    z = (x @ c.T) / sd
    chi2 = np.sum(z * z, axis=0)
    p = 2 * np.minimum(stats.chi2.cdf(chi2, n), stats.chi2.sf(chi2, n))
    assert np.min(p) * 50 > 0.01


def test_sampling_determinism_and_streams():
    cov = _cov(9, 8)
    a = gf.sample_field(cov, 3, 0, 600).values
    b = gf.sample_field(cov, 3, 0, 600, threads=3).values
    assert np.array_equal(a, b)
    # chunk shapes differ, so only round-off may separate a prefix run
    assert np.allclose(a[300:310], gf.sample_field(cov, 3, 0, 310).values[300:310], rtol=0, atol=1e-12)
    c = gf.sample_field(cov, 3, 1, 600).values
    n = a.shape[0]
    corr = np.corrcoef(a[:, 5], c[:, 5])[0, 1]
    assert abs(corr) < 4 / math.sqrt(n)
    with pytest.raises(ValueError):
        gf.sample_field(cov, 3, 0, 0)


def test_girsanov_shift():
    g = ss.build_grid(2, 17)
    kern = ss.GreenKernel(g, ss.calibrate_green_constant(g), 16, "series")
    assert np.all(gf.girsanov_shift(kern, gf.InsertionSet.empty(2)) == 0)
    one = gf.InsertionSet([[0.2, 0.1]], [0.7])
    two = gf.InsertionSet([[0.2, 0.1], [-0.5, 0.3]], [0.7, 0.4])
    h1 = gf.girsanov_shift(kern, one)
    for k in range(5):
        ref = 2 * 0.7 * kern.on_sphere(g.points[k], geo.from_chart(np.array([0.2, 0.1])))
        assert np.isclose(h1[k], ref, atol=1e-12)
    h2 = gf.girsanov_shift(kern, gf.InsertionSet([[-0.5, 0.3]], [0.4]))
    assert np.allclose(gf.girsanov_shift(kern, two), h1 + h2, atol=1e-12)
    assert abs(g.mean(h1)) <= 1e-5
    with pytest.raises(gf.InsertionOnNodeError):
        gf.girsanov_shift(kern, gf.InsertionSet(g.chart[:1], [0.3]))


def test_insertion_set():
    ins = gf.parse_insertions("0.1,0.2,0.5;-0.3,0.0,0.9", 2)
    assert len(ins) == 2 and np.isclose(ins.s(1.0), 0.4)
    assert ins.seiberg(1.3) is False
    assert gf.InsertionSet([[0, 0], [1, 0], [0, 1]], [0.5, 0.5, 0.5]).seiberg(1.3)
    with pytest.raises(ValueError):
        gf.InsertionSet([[0, 0], [0, 0]], [0.1, 0.2])
    with pytest.raises(ValueError):
        gf.parse_insertions("0.1,0.2", 2)


def test_cap_average_variance_asymptotics():
    g = ss.build_grid(2, 8)
    eps = [0.2, 0.1, 0.05]
    v0 = [gf.cap_average_variance(g, np.zeros(2), e, 128) for e in eps]
    slopes = np.diff(v0) / math.log(2)
    assert np.all(np.abs(slopes - 1.0) <= 0.1)
    v1 = gf.cap_average_variance(g, np.array([1.0, 0.0]), 0.1, 128)
    v1b = gf.cap_average_variance(g, np.array([0.0, -1.0]), 0.1, 128)
    assert abs(v1 - v1b) <= 1e-6
    # the chart cap at |x|=1 is half as large on the sphere as the one at 0
    assert abs((v1 - v0[1]) / (0.5 * math.log(4)) - 1.0) <= 0.15
    with pytest.raises(ValueError):
        gf.cap_average_variance(g, np.zeros(2), 0.01, 16)


def test_verify_girsanov():
    cov = _cov(9, 8)
    nodes, coeffs = [3, 40, 77], [0.5, -0.3, 0.4]
    (l1, e1), _ = gf.verify_girsanov(cov, nodes, coeffs, lambda x: np.ones(len(x)), 20_000, seed=1)
    assert abs(l1 - 1.0) <= 4 * e1
    k = 10
    (l2, e2), (r2, _) = gf.verify_girsanov(cov, nodes, coeffs, lambda x: x[:, k], 20_000, seed=2)
    target = float(np.asarray(coeffs) @ cov.matrix[nodes, k])
    assert abs(l2 - target) <= 4 * e2
    (l3, e3), (r3, f3) = gf.verify_girsanov(cov, nodes, coeffs, lambda x: np.cos(x[:, k]), 100_000, seed=3)
    assert abs(l3 - r3) <= 4 * math.hypot(e3, f3)


def test_mobius_field_law_kernel_identity():
    rng = np.random.default_rng(4)
    psi = geo.MobiusMap((geo.Dilation(1.7), geo.Translation(np.array([0.2, -0.1]))))
    gap = gf.mobius_field_covariance_gap(psi, rng.uniform(-1, 1, size=(6, 2)), resolution=40)
    assert gap <= 1e-8
