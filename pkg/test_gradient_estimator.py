#!/usr/bin/env python3
"""
Tests for the gradient estimators (BEL, finite differences, variational) and their guards.
"""
import sys
import os

import numpy as np

project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from levyfbsde.errors import CapabilityError, DomainError
from levyfbsde.gradient_estimator import (
    GradientEstimate, VectorField, bel_gradient, bel_time_nodes, fd_gradient, gradient_nonlocal,
    variational_gradient,
)
from levyfbsde.levy_model import StableLikeMeasure
from levyfbsde.models import build_model
from levyfbsde.value_function import make_grid


def _additive():
    m = StableLikeMeasure(1, 1.5)
    return m, build_model('additive', m)


def test_linear_payoff_gradient_is_one():
    """phi(x) = x_1 under additive dynamics: grad v h = h_1 exactly"""
    m, c = _additive()
    fd = fd_gradient(c, m, 0.0, [0.5], [1.0], 1.0, 200, 3, n_steps=5)
    assert abs(fd.value - 1.0) < 1e-9
    var = variational_gradient(c, m, 0.0, [0.5], [1.0], 1.0, 200, 3, n_steps=5)
    assert abs(var.value - 1.0) < 1e-12 and var.stderr < 1e-12
    bel = bel_gradient(c, m, 0.0, [0.5], [1.0], 1.0, n_paths=3000, rng_seed=3, n_steps=5)
    assert bel.method == 'bel' and bel.n_paths > 2900
    # the cut at |u| = 1/30 leaves an O(r^1.5) boundary bias
    assert abs(bel.value - 1.0) <= 4.0 * bel.stderr + 0.1


def test_constant_payoff_bel_mean_zero():
    m = StableLikeMeasure(1, 1.5)
    c = build_model('multiplicative-1d', m, payoff={'kind': 'constant', 'value': 1.0})
    est = bel_gradient(c, m, 0.0, [0.5], [1.0], 1.0, n_paths=2000, rng_seed=8, n_steps=5)
    assert abs(est.value) <= 4.0 * est.stderr
    assert est.diagnostics['policy'] == 'resample'
    assert est.diagnostics['expected_events'] > 0.0


def test_zero_direction_returns_zero():
    m, c = _additive()
    for est in (bel_gradient(c, m, 0.0, [0.5], [0.0], 1.0, n_paths=10),
                fd_gradient(c, m, 0.0, [0.5], [0.0], 1.0, 10, 0),
                variational_gradient(c, m, 0.0, [0.5], [0.0], 1.0, 10, 0)):
        assert est.value == 0.0 and est.stderr == 0.0


def test_bel_guards():
    m, c = _additive()
    try:
        bel_gradient(c, m, 0.0, [0.5], [1.0], 1.0, n_paths=10, policy='ignore')
        raise AssertionError("unknown policy accepted")
    except DomainError:
        pass
    m_low = StableLikeMeasure(1, 0.8)
    try:
        bel_gradient(build_model('additive', m_low), m_low, 0.0, [0.5], [1.0], 1.0, n_paths=10)
        raise AssertionError("singular schedule accepted with beta < 1")
    except DomainError:
        pass
    c_lin = build_model('linear-driver:0.5', m)
    try:
        bel_gradient(c_lin, m, 0.0, [0.5], [1.0], 1.0, n_paths=10)
        raise AssertionError("driver in (y, z) accepted without v")
    except DomainError:
        pass


def test_fd_rejects_nonpositive_step():
    m, c = _additive()
    try:
        fd_gradient(c, m, 0.0, [0.5], [1.0], 1.0, 10, 0, delta=0.0)
    except DomainError:
        return
    raise AssertionError("delta = 0 should raise DomainError")


def test_variational_needs_smooth_data():
    m = StableLikeMeasure(1, 1.5)
    c = build_model('kinked-terminal', m)
    assert c.smoothness == 'BL'
    try:
        variational_gradient(c, m, 0.0, [0.3], [1.0], 1.0, 10, 0)
    except CapabilityError:
        return
    raise AssertionError("kinked payoff should raise CapabilityError")


def test_singular_time_nodes():
    nodes, weights = bel_time_nodes(0.0, 1.0, 1.5, 16, 'singular')
    assert np.all(np.diff(nodes) > 0.0) and nodes[0] > 0.0 and nodes[-1] < 1.0
    assert abs(weights.sum() - 1.0) < 1e-2
    # (s - t)^(-1/beta) ds stays integrable: the weighted singular sum tracks int_0^1 s^(-2/3) ds = 3
    assert abs(np.sum(weights * nodes ** (-1.0 / 1.5)) - 3.0) < 0.1
    flat_nodes, flat_weights = bel_time_nodes(0.0, 2.0, 1.5, 4, 'fixed')
    assert np.allclose(flat_nodes, [0.25, 0.75, 1.25, 1.75]) and np.allclose(flat_weights, 0.5)


def test_singular_time_nodes_need_beta_above_one():
    try:
        bel_time_nodes(0.0, 1.0, 0.9, 8, 'singular')
    except DomainError:
        return
    raise AssertionError("beta <= 1 should raise DomainError")


def test_gradient_nonlocal_of_constant_gradient():
    """g = grad v constant and sigma constant: every shift cancels"""
    m, c = _additive()
    times, axes = [0.0, 1.0], make_grid(3.0, 7, 1)
    g = VectorField.from_values(times, axes, np.ones((2, 7, 1)))
    out = gradient_nonlocal(g, c, m, 0.5, np.array([[0.0], [1.0]]), r_min=0.05)
    assert np.allclose(out, 0.0, atol=1e-12)


def test_estimate_row_format():
    est = GradientEstimate(0.25, 0.01, 100, 'fd')
    row = est.to_row(0.0, [0.5, 0.0], [1.0, 0.0])
    assert row['x'] == '0.5 0' and row['h'] == '1 0'
    assert row['method'] == 'fd' and row['n_paths'] == 100


def main():
    """Run all tests"""
    print("=" * 60)
    print("Gradient estimator tests")
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
