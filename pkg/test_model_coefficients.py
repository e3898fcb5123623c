#!/usr/bin/env python3
"""
Tests for the sample-based coefficient checkers: the shipped models pass, and inputs that
break a bound only far out (or close in) are caught by the growth of the fitted constants.
"""
import sys
import os

import numpy as np

project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from levyfbsde.levy_model import StableLikeMeasure
from levyfbsde.model_coefficients import (
    Driver, FirstCoordinateWeight, LinearPayoff, LWeight, ModelCoefficients, Payoff, SineWeight,
    check_coefficients, check_driver, check_l_weight,
)
from levyfbsde.models import build_model
from levyfbsde.models.additive import AdditiveDynamics


class _ConstantWeight(LWeight):
    name = 'constant'

    def __call__(self, u):
        return np.ones(np.asarray(u).shape[:-1])


class _QuadraticDrift(AdditiveDynamics):
    """b(x) = -x |x|: locally Lipschitz only"""

    def drift(self, t, x):
        x = np.asarray(x, dtype=float)
        return -x * np.linalg.norm(x, axis=-1, keepdims=True)

    def grad_drift(self, t, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)[..., None, None]
        outer = x[..., :, None] * x[..., None, :]
        return -(r * np.eye(self.dim) + outer / np.where(r > 0, r, 1.0))


class _SquareDriver(Driver):
    name = 'square'

    def __call__(self, t, x, y, z):
        return np.asarray(y, dtype=float) ** 2


class _CubicPayoff(Payoff):
    name = 'cubic'

    def __call__(self, x):
        return np.asarray(x, dtype=float)[..., 0] ** 3


def _shipped_models():
    m1, m2 = StableLikeMeasure(1, 1.5), StableLikeMeasure(2, 1.5)
    return [build_model('additive', m1), build_model('additive', m1, params={'kappa': 0.5}),
            build_model('multiplicative-1d', m1), build_model('smooth-2d', m2),
            build_model('kinked-terminal', m1), build_model('linear-driver:0.5', m1)]


def test_shipped_models_pass():
    for c in _shipped_models():
        report = check_coefficients(c)
        assert report['passed'], (c.name, report['checks'])
        assert check_driver(c)['passed'], c.name
        assert check_l_weight(c.l_weight, c.dim)['passed'], c.name


def test_bounded_l_weights_pass():
    for dim in (1, 2):
        for weight in (FirstCoordinateWeight(), SineWeight()):
            report = check_l_weight(weight, dim)
            assert report['passed'], (dim, weight.name, report['shell_ratios'])
            assert report['C_l'] <= 1.0 + 1e-12


def test_constant_l_weight_fails():
    """l = 1 is bounded but not O(|u|) at the origin"""
    report = check_l_weight(_ConstantWeight(), 1)
    assert not report['passed']
    ratios = report['shell_ratios']
    assert ratios[0] < ratios[1] < ratios[2]
    assert report['growth'] > 50.0


def test_superlinear_drift_fails():
    c = ModelCoefficients(_QuadraticDrift(dim=1), payoff=LinearPayoff())
    report = check_coefficients(c)
    assert not report['passed']
    assert not report['checks']['FL']
    assert not report['checks']['FD']
    assert report['checks']['FE'] and report['checks']['sigma_inverse']
    growth = report['shell_constants']['growth']
    assert growth[-1] > 10.0 * growth[0]


def test_quadratic_driver_fails():
    m = StableLikeMeasure(1, 1.5)
    c = ModelCoefficients(AdditiveDynamics(dim=1), driver=_SquareDriver())
    report = check_driver(c)
    assert not report['checks']['BL']
    assert report['checks']['polynomial_growth']
    linear = check_driver(build_model('linear-driver:0.5', m))
    assert linear['checks']['BL']


def test_cubic_payoff_fails_growth():
    c = ModelCoefficients(AdditiveDynamics(dim=1), payoff=_CubicPayoff())
    report = check_driver(c)
    assert not report['checks']['polynomial_growth']
    assert report['checks']['BL']


def main():
    """Run all tests"""
    print("=" * 60)
    print("Coefficient checker tests")
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
