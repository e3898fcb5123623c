#!/usr/bin/env python3
"""
Tests for the Picard mild solver and its pathwise diagnostics.
"""
import sys
import os

import numpy as np

project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from levyfbsde.bsde_engine import (
    SolveConfig, apriori_check, jensen_check, martingale_residual, mild_value_at, nonlocal_field, nonlocal_term,
    norm_estimators, pathwise_yz, picard_step, solve_value_function, zero_field,
)
from levyfbsde.errors import DomainError, InterpolationError
from levyfbsde.forward_flow import simulate_paths
from levyfbsde.levy_model import StableLikeMeasure
from levyfbsde.model_coefficients import Driver, ModelCoefficients
from levyfbsde.models import build_model
from levyfbsde.models.additive import AdditiveDynamics
from levyfbsde.value_function import make_grid, tabulate


def _identity_field(t0=0.0):
    return tabulate(lambda s, pts: pts[:, 0], [t0, 1.0], make_grid(3.0, 7, 1))


def test_nonlocal_term_of_linear_function():
    """z[x](s, x) = s0 int_{r_min < |u| <= 1} u^2 nu(du) = 4 (1 - sqrt(r_min)) for beta = 1.5"""
    m = StableLikeMeasure(1, 1.5)
    c = build_model('additive', m)
    v = _identity_field()
    pts = np.array([[-1.0], [0.0], [0.5]])
    for r_min in (0.0, 0.05):
        z = nonlocal_term(v, c, m, 0.5, pts, r_min)
        exact = 4.0 * (1.0 - np.sqrt(r_min))
        assert np.allclose(z, exact, rtol=1e-6)


def test_zero_field_shape():
    axes = make_grid(1.0, 5, 2)
    z = zero_field([0.0, 0.5, 1.0], axes)
    assert z.values.shape == (3, 5, 5)
    assert np.all(z(0.25, np.array([[0.1, 0.2]])) == 0.0)


def test_mild_value_of_constant_payoff():
    m = StableLikeMeasure(1, 1.5)
    c = build_model('additive', m, payoff={'kind': 'constant', 'value': 2.0})
    est = mild_value_at(c, m, 0.0, [[0.0], [1.0]], 1.0, None, None, None, 50, 5, 1)
    assert np.allclose(est.values, 2.0) and np.allclose(est.stderr, 0.0)
    assert est.n_paths == 50 and est.invalid_fraction == 0.0


def test_zero_driver_solve_shares_noise_across_nodes():
    """Additive dynamics, linear payoff: every node sees the same jump increments"""
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    c = build_model('additive', m)
    cfg = SolveConfig(box=2.0, space_nodes=5, time_slices=3, paths_per_node=50, n_steps=5)
    v, report = solve_value_function(c, m, 0.0, cfg, 3)
    grid = v.grid_points()[:, 0]
    assert report.iterates == 1
    assert np.allclose(v.values[-1], grid)
    for j in range(len(v.times) - 1):
        shift = v.values[j] - grid
        assert np.allclose(shift, shift[0], atol=1e-10)


def test_linear_driver_picard_contracts():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    c = build_model('linear-driver:0.5', m)
    cfg = SolveConfig(box=2.0, space_nodes=5, time_slices=3, paths_per_node=100, n_steps=5,
                      iterates_max=4, tol=1e-12)
    v, report = solve_value_function(c, m, 0.0, cfg, 11)
    assert report.iterates == 4
    assert len(report.contraction_ratios) == 3
    assert all(0.0 < r < 0.8 for r in report.contraction_ratios)
    # v(0, x) ~ exp(-1/2) (2 + 0.1 E cos X_T)
    assert np.all((v.values[0] > 1.1) & (v.values[0] < 1.35))
    assert set(report.norm_estimates) >= {'S', 'M'}


def test_horizon_splitting_stitches_slices():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    c = build_model('linear-driver:0.5', m)
    cfg = SolveConfig(box=2.0, space_nodes=5, time_slices=5, paths_per_node=50, n_steps=4,
                      iterates_max=3, splits=2)
    v, report = solve_value_function(c, m, 0.0, cfg, 2)
    assert v.span == (0.0, 1.0)
    assert np.all(np.diff(v.times) > 0.0)
    assert len(report.chunks) == 2


def test_solve_rejects_empty_horizon():
    m = StableLikeMeasure(1, 1.5)
    c = build_model('additive', m)
    try:
        solve_value_function(c, m, 1.0, SolveConfig(horizon=1.0), 0)
    except DomainError:
        return
    raise AssertionError("t_min >= T should raise DomainError")


def test_pathwise_y_requires_time_coverage():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    c = build_model('additive', m)
    path = simulate_paths(m, c, 0.0, [0.2], 1.0, 5, 1, 1).path(0)
    Y, Z = pathwise_yz(path, _identity_field(), c)
    assert np.allclose(Y, path.states[:, 0])
    assert np.allclose(Z(0, [0.5]), 0.5)
    try:
        pathwise_yz(path, _identity_field(0.5), c)
    except InterpolationError:
        return
    raise AssertionError("path before the span of v should raise InterpolationError")


def test_norm_estimators_arithmetic():
    norms = norm_estimators(np.array([[0.0, 1.0]]), np.array([[1.0, -2.0]]), np.array([[4.0, 0.0]]))
    assert abs(norms['S'] - 2.0) < 1e-12
    assert abs(norms['M'] - 2.0) < 1e-12


def test_jensen_bound_holds():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    c = build_model('additive', m)
    v = tabulate(lambda s, pts: np.sin(pts[:, 0]) + pts[:, 0] ** 2, [0.0, 1.0], make_grid(3.0, 31, 1))
    batch = simulate_paths(m, c, 0.0, [0.2], 1.0, 5, 1, 10)
    report = jensen_check(batch, v, c, m, r_min=0.1)
    assert report['passed'] and report['l_mass'] > 0.0


def test_constant_solution_has_zero_residual():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    c = build_model('additive', m, payoff={'kind': 'constant', 'value': 1.0})
    cfg = SolveConfig(box=2.0, space_nodes=5, time_slices=3, paths_per_node=20, n_steps=4)
    v, _ = solve_value_function(c, m, 0.0, cfg, 5)
    assert np.allclose(v.values, 1.0)
    residual, se = martingale_residual(v, None, c, m, 0.0, [0.5], 30, 5)
    assert abs(residual) < 1e-12 and se < 1e-12
    bound = apriori_check(v, None, c, m, 0.0, [[0.0], [1.0]], 20, 5, r_min=0.1)
    assert all(abs(r['ratio'] - 1.0) < 1e-9 for r in bound['rows'])
    assert bound['bounded']


class _NonlocalDriver(Driver):
    """psi = z / 10"""
    name = 'nonlocal'
    has_gradient = False

    def __call__(self, t, x, y, z):
        return 0.1 * np.asarray(z, dtype=float)


def test_picard_step_uses_inner_radius():
    """Without z_n the sweep builds z[v_n] with the requested inner radius, not delta0"""
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    c = ModelCoefficients(AdditiveDynamics(dim=1), driver=_NonlocalDriver())
    v = _identity_field(0.5)
    implicit, _ = picard_step(v, None, c, m, 20, 4, 7, r_min=0.5)
    explicit, _ = picard_step(v, nonlocal_field(v, c, m, 0.5), c, m, 20, 4, 7)
    assert np.array_equal(implicit.values, explicit.values)
    # z = 4 (1 - sqrt(r_min)) moves v(0.5, .) by 0.05 * 4 (sqrt(0.5) - sqrt(0.1))
    default, _ = picard_step(v, None, c, m, 20, 4, 7)
    shift = implicit.values[0] - default.values[0]
    assert np.allclose(shift, 0.2 * (np.sqrt(0.5) - np.sqrt(0.1)), rtol=1e-6)


def main():
    """Run all tests"""
    print("=" * 60)
    print("BSDE engine tests")
    print("=" * 60)

    tests = [(name, fn) for name, fn in globals().items() if name.startswith('test_') and callable(fn)]
    results = []
    for name, fn in tests:
        try:
            fn()
            results.append((name, True))
        except Exception as e:
            print(f"✗ {name}: {e}")
            results.append((name, False))

    passed = sum(1 for _, ok in results if ok)
    for name, ok in results:
        print(f"{'✓ PASS' if ok else '✗ FAIL'}: {name}")
    print(f"\nTotal: {passed}/{len(results)} tests passed")
    return 0 if passed == len(results) else 1


if __name__ == '__main__':
    sys.exit(main())
