import math

import numpy as np
import pytest

from liouville_lab import classical as cl
from liouville_lab import geometry as geo
from liouville_lab import liouville as lv
from liouville_lab import sphere_spectral as ss

P = ss.ModelParams(2, 0.5, Lambda=1.0)
GRID = ss.build_grid(2, 15)
OPTS = cl.SolverOptions(L=12)
TRIPLE = cl.symmetric_triple(GRID)


@pytest.fixture(scope="module")
def solution():
    return cl.solve_classical(TRIPLE, P, GRID, OPTS)


def test_singular_data_bounds():
    assert TRIPLE.bounds_hold() and math.isclose(TRIPLE.c0, 0.2)
    with pytest.raises(cl.ClassicalBoundError):
        cl.SingularData.from_chart([[0.1, 0.2], [0.5, -0.3]], [0.4, 0.4]).check_bounds()
    with pytest.raises(cl.ClassicalBoundError):
        cl.SingularData.from_chart([[0.1, 0.2], [0.5, -0.3], [1.2, 0.3]], [0.6, 0.3, 0.3]).check_bounds()
    with pytest.raises(cl.ClassicalBoundError):
        cl.solve_classical(cl.SingularData.from_chart([[0.1, 0.2]], [0.3]), P, GRID, OPTS)


def test_singular_profile():
    empty = cl.SingularData(np.zeros((0, 3)), np.zeros(0))
    assert np.all(cl.singular_profile(GRID, empty) == 0)
    x = geo.from_chart(np.array([0.23, -0.41]))
    one = cl.SingularData(x[None, :], np.array([0.3]))
    half = 0.5 * cl.singular_profile(GRID, one)
    f = GRID.points[:, 0] + GRID.points[:, 2] ** 2 - 0.3 * GRID.points[:, 1] * GRID.points[:, 2]
    big = ss.build_grid(2, 41)
    fb = big.points[:, 0] + big.points[:, 2] ** 2 - 0.3 * big.points[:, 1] * big.points[:, 2]
    pairing = big.integrate(0.5 * cl.singular_profile(big, one) * ss.apply_gjms(big, fb, 16))
    exact = cl.weak_profile_pairing(GRID, one, f, 12)
    assert math.isclose(exact, 2 * ss.green_normalization(2) * 0.3 * (x[0] + x[2] ** 2 - 0.3 * x[1] * x[2] - GRID.mean(f)), rel_tol=1e-10)
    assert abs(pairing - exact) <= 1e-3
    # antipodal pair with equal χ: swap symmetry
    y = geo.from_chart(np.array([0.31, 0.17]))
    pair = cl.SingularData(np.stack([y, -y]), np.array([0.3, 0.3]))
    g = ss.build_grid(2, 14)
    lw = cl.singular_profile(g, pair)
    swapped = cl.SingularData(np.stack([-y, y]), np.array([0.3, 0.3]))
    assert np.max(np.abs(lw - cl.singular_profile(g, swapped))) <= 1e-12
    with pytest.raises(Exception):
        cl.singular_profile(GRID, cl.SingularData(GRID.points[:1], np.array([0.3])))


def test_functional_trivial_and_shift():
    none = cl.SingularData(np.zeros((0, 3)), np.zeros(0))
    J0 = cl.functional_j(np.zeros(GRID.size), none, P, GRID, 12)
    assert math.isclose(J0, none.c0 * math.log(GRID.volume), rel_tol=1e-12)
    rng = np.random.default_rng(0)
    h = cl.random_band_limited(GRID, 12, rng)
    assert abs(cl.functional_j(h + 5, TRIPLE, P, GRID, 12) - cl.functional_j(h, TRIPLE, P, GRID, 12)) <= 1e-9
    with pytest.raises(cl.ClassicalBoundError):
        cl.functional_j(h, cl.SingularData(TRIPLE.points, np.array([0.5, 0.4, 0.4])), P, GRID, 12)


def test_gradient_finite_differences():
    rng = np.random.default_rng(1)
    h = cl.random_band_limited(GRID, 12, rng, 0.5, mean_zero=True)
    g = cl.functional_j_gradient(h, TRIPLE, P, GRID, 12)
    assert abs(GRID.mean(g)) <= 1e-10
    eps = 1e-5
    for _ in range(10):
        v = cl.random_band_limited(GRID, 12, rng, mean_zero=True)
        fd = (cl.functional_j(h + eps * v, TRIPLE, P, GRID, 12) - cl.functional_j(h - eps * v, TRIPLE, P, GRID, 12)) / (2 * eps)
        an = GRID.integrate(g * v)
        assert abs(fd - an) <= 1e-5 * abs(an)


def test_solution(solution):
    sol = solution
    assert abs(GRID.mean(sol.h)) <= 1e-8
    assert sol.residual_norm <= OPTS.tol
    assert abs(sol.volume / (TRIPLE.c0 / P.Lambda) - 1) <= 1e-6
    Js = [row[1] for row in sol.log]
    assert all(b <= a + 1e-13 * abs(a) for a, b in zip(Js, Js[1:]))
    g = cl.functional_j_gradient(sol.h, TRIPLE, P, GRID, 12)
    assert np.max(np.abs(g)) <= 1e-9
    assert cl.weak_residual(sol, TRIPLE, P, GRID) <= 1e-8


def test_solution_symmetry(solution):
    th = 2 * math.pi / 3
    R = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1]])
    rotated = GRID.points @ R.T
    idx = np.array([int(np.argmin(np.sum((GRID.points - p) ** 2, axis=1))) for p in rotated])
    assert np.max(np.abs(GRID.points[idx] - rotated)) <= 1e-12
    assert np.max(np.abs(solution.u0[idx] - solution.u0)) <= 1e-6


def test_uniqueness():
    r = cl.uniqueness_check(TRIPLE, P, GRID, (1, 2), OPTS)
    assert r["gap"] <= 1e-6
    a = cl.solve_classical(TRIPLE, P, GRID, cl.SolverOptions(L=12, seed=4))
    b = cl.solve_classical(TRIPLE, P, GRID, cl.SolverOptions(L=12, seed=4))
    assert np.array_equal(a.h, b.h)
    with pytest.raises(cl.ClassicalBoundError):
        cl.uniqueness_check(cl.SingularData(np.zeros((0, 3)), np.zeros(0)), P, GRID)


def test_csv_export(solution, tmp_path):
    solution.to_csv(tmp_path / "s.csv")
    solution.log_to_csv(tmp_path / "c.csv")
    head = (tmp_path / "s.csv").read_text().splitlines()
    assert head[0] == "node_index,h,u0" and len(head) == GRID.size + 1
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "iteration,J,grad_norm,step"


def test_moser_trudinger():
    none = cl.SingularData(np.zeros((0, 3)), np.zeros(0))
    lhs, rhs, m = cl.moser_trudinger_check(np.zeros(GRID.size), none, 0.0, 0.25, GRID)
    assert abs(lhs) <= 1e-14 and rhs == 0.0 and abs(m) <= 1e-14
    rng = np.random.default_rng(2)
    C = 1 / (2 * math.factorial(2))
    margins = [cl.moser_trudinger_check(cl.random_band_limited(GRID, 12, rng, rng.uniform(0, 1)), none, 0.0, C, GRID, 12)[2]
               for _ in range(100)]
    assert min(margins) >= 0
    h = cl.random_band_limited(GRID, 6, rng, mean_zero=True)
    quad = C * GRID.mean(h * ss.apply_gjms(GRID, h, 12))
    ts = [10.0, 20.0, 40.0]
    ms = [cl.moser_trudinger_check(t * h, none, 0.0, C, GRID, 12)[2] for t in ts]
    assert all(m2 > m1 for m1, m2 in zip(ms, ms[1:]))
    assert abs(ms[-1] / (quad * ts[-1] ** 2) - 1) <= 0.5


def test_semiclassical_table_structure():
    out = cl.semiclassical_compare(TRIPLE, 1.0, [0.5], lv.EnsembleConfig(L=8, n=300, seed=1),
                                   cl.SolverOptions(L=12), classical_resolution=15)
    row = out["rows"][0]
    assert row["mode"] == "conditioned" and row["error"] > 0 and row["stderr"] > 0
    assert math.isclose(row["mu"], 1.0 / 0.25)
    assert out["exclusion_radius"] == 0.3 and out["nodes_compared"] > 0
    with pytest.raises(ValueError):
        cl.semiclassical_compare(TRIPLE, 1.0, [0.5], lv.EnsembleConfig(L=8, n=10), mode="other")
