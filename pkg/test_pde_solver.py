#!/usr/bin/env python3
"""
Tests for the deterministic side: generator, semigroup, manufactured problems,
the explicit 1D solver and mollification.
"""
import sys
import os

import numpy as np

project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from levyfbsde.errors import CapabilityError, DomainError, InstabilityError
from levyfbsde.levy_model import StableLikeMeasure, TiltedAmplitude
from levyfbsde.models import build_manufactured, build_model
from levyfbsde.pde_solver import (
    PdeGridConfig, central_gradient, deterministic_solve, discretization_envelope, generator_apply,
    kolmogorov_check, mild_identity_residual, mollify, operator_norm, refinement_study, semigroup_apply,
)
from levyfbsde.value_function import make_grid, tabulate


def test_generator_of_quadratic():
    """L[x^2] = int_{r_min < |u| <= 1} u^2 nu(du) = 4 (1 - sqrt(r_min)) for beta = 1.5"""
    m = StableLikeMeasure(1, 1.5)
    c = build_model('additive', m)
    pts = np.array([[-1.0], [0.0], [2.0]])
    for r_min in (0.0, 0.05):
        out = generator_apply(c, m, lambda x: x[..., 0] ** 2, 0.0, pts, r_min=r_min,
                              grad_phi=lambda x: 2.0 * x)
        assert np.allclose(out, 4.0 * (1.0 - np.sqrt(r_min)), rtol=1e-6)
    linear = generator_apply(c, m, lambda x: x[..., 0], 0.0, pts)
    assert np.allclose(linear, 0.0, atol=1e-10)


def test_generator_needs_symmetric_measure():
    m = StableLikeMeasure(1, 1.5, amplitude=TiltedAmplitude(tilt=0.5))
    assert not m.is_symmetric
    c = build_model('additive', m)
    try:
        generator_apply(c, m, lambda x: x[..., 0] ** 2, 0.0, [0.0])
    except CapabilityError:
        return
    raise AssertionError("asymmetric amplitude should raise CapabilityError")


def test_central_gradient():
    pts = np.array([[0.5, -1.0], [2.0, 0.0]])
    grad = central_gradient(lambda x: np.sum(x ** 2, axis=-1), pts)
    assert np.allclose(grad, 2.0 * pts, atol=1e-6)


def test_semigroup_at_zero_time_and_order():
    m = StableLikeMeasure(1, 1.5)
    c = build_model('additive', m)
    mean, se = semigroup_apply(c, m, lambda x: np.cos(x[..., 0]), 0.3, 0.3, [0.0], 10, 0)
    assert mean == 1.0 and se == 0.0
    try:
        semigroup_apply(c, m, lambda x: x[..., 0], 0.5, 0.2, [0.0], 10, 0)
    except DomainError:
        return
    raise AssertionError("tau < t should raise DomainError")


def test_kolmogorov_of_linear_function():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    c = build_model('additive', m)
    report = kolmogorov_check(c, m, lambda x: x[..., 0], 0.0, [0.3], 2000, 4)
    assert abs(report['generator']) < 1e-10
    assert abs(report['estimate']) <= 5.0 * report['stderr']


def test_manufactured_problem_values():
    m = StableLikeMeasure(1, 1.5)
    problem = build_manufactured('manufactured:cosine-decay', m)
    assert problem.residual < 1e-6
    x = np.array([[0.0], [np.pi / 2]])
    assert np.allclose(problem.v_star(0.0, x), [2.0, 1.0])
    assert np.allclose(problem.grad_v_star(0.0, x)[:, 0], [0.0, -1.0])
    assert np.allclose(problem.coefficients.phi(x), 1.0 + np.exp(-1.0) * np.cos(x[:, 0]))


def test_unknown_manufactured_solution():
    m = StableLikeMeasure(1, 1.5)
    try:
        build_manufactured('manufactured:bessel', m)
    except DomainError:
        return
    raise AssertionError("unknown manufactured name should raise DomainError")


def test_linear_solution_is_preserved():
    m = StableLikeMeasure(1, 1.5)
    problem = build_manufactured('manufactured:linear', m)
    v = deterministic_solve(problem.coefficients, m, PdeGridConfig(box=3.0, space_nodes=31))
    assert np.allclose(v.values, 1.0 + v.axes[0][None, :], atol=1e-9)


def test_cosine_decay_solve():
    m = StableLikeMeasure(1, 1.5)
    problem = build_manufactured('manufactured:cosine-decay', m)
    cfg = PdeGridConfig(box=4.0, space_nodes=81)
    v = deterministic_solve(problem.coefficients, m, cfg, exterior=problem.v_star)
    pts = v.grid_points()
    err = max(np.max(np.abs(v.values[j] - problem.v_star(s, pts))) for j, s in enumerate(v.times))
    assert err < 2e-2
    study = refinement_study(problem.coefficients, m, problem.v_star, PdeGridConfig(box=4.0, space_nodes=41),
                             levels=2, exterior=problem.v_star)
    assert len(study['rows']) == 2 and study['rows'][1]['dx'] < study['rows'][0]['dx']
    assert all(r['error'] < 5e-2 for r in study['rows'])


def test_explicit_step_bound():
    m = StableLikeMeasure(1, 1.5)
    c = build_model('additive', m)
    cfg = PdeGridConfig(box=2.0, space_nodes=41, dt=1.0)
    info = operator_norm(c, m, cfg)
    assert info['norm'] > 1.0 and abs(info['suggested_dt'] * info['norm'] - 0.9) < 1e-12
    try:
        deterministic_solve(c, m, cfg)
    except InstabilityError as e:
        assert abs(e.suggested_dt - info['suggested_dt']) < 1e-15
        return
    raise AssertionError("dt = 1 should violate the explicit bound")


def test_solver_is_one_dimensional():
    m = StableLikeMeasure(2, 1.5)
    c = build_model('smooth-2d', m)
    try:
        deterministic_solve(c, m)
    except CapabilityError:
        return
    raise AssertionError("d = 2 should raise CapabilityError")


def test_envelope_for_linear_solution():
    m = StableLikeMeasure(1, 1.5)
    problem = build_manufactured('manufactured:linear', m)
    coarse, env = discretization_envelope(problem.coefficients, m, PdeGridConfig(box=2.0, space_nodes=21))
    assert coarse.dim == 1 and env < 1e-8


def test_mild_identity_for_constant_solution():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    c = build_model('additive', m, payoff={'kind': 'constant', 'value': 1.0})
    v = tabulate(lambda s, pts: np.ones(len(pts)), [0.0, 0.5, 1.0], make_grid(2.0, 5, 1))
    report = mild_identity_residual(v, c, m, 3, 20, 1, n_steps=4)
    assert report['passed'] and report['max_abs_residual'] < 1e-12
    assert len(report['rows']) == 3


def test_mollified_kink():
    f = lambda x: np.abs(x[..., 0])  # noqa: E731
    fn = mollify(f, 4)
    x = np.array([[2.0], [-3.0], [0.0]])
    vals = fn(x)
    assert np.allclose(vals[:2], [2.0, 3.0], atol=1e-10)
    assert 0.0 < vals[2] < 0.25
    grads = fn.grad(x)
    assert np.allclose(grads[:2, 0], [1.0, -1.0], atol=1e-4)
    assert abs(grads[2, 0]) < 1e-10


def test_mollify_guards():
    try:
        mollify(lambda x: x, 0)
        raise AssertionError("n = 0 accepted")
    except DomainError:
        pass
    try:
        mollify(lambda x: x[..., 0], 2)(np.zeros((1, 4)))
    except CapabilityError:
        return
    raise AssertionError("dim 4 should raise CapabilityError")


def main():
    """Run all tests"""
    print("=" * 60)
    print("PDE solver tests")
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
