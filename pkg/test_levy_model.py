#!/usr/bin/env python3
"""
Tests for the stable-like measure: closed-form integrals, sampling, the cutoff zeta_eps
and the assumption checkers.
"""
import sys
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats

project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from levyfbsde.errors import DivergenceError, DomainError, EmptyMeasureError
from levyfbsde.levy_model import (
    SCALE_GROWTH_LIMIT, Amplitude, CutoffZeta, StableLikeMeasure, check_assumption_l, eval_density,
    eval_log_density_grad, inverse_moment_check, laplace_functional_ratio, laplace_limit, measure_from_config,
    moment_integral, omitted_variance_bound, sample_jump_events, scale_growth, tail_mass, zeta_eval, zeta_grad,
)


def test_moment_integral_closed_form():
    """int_{|u|<=eps} |u|^p nu(du) = 2 eps^(p-beta) / (p-beta) for l = 1, a = 1"""
    for beta in (0.5, 1.5):
        m = StableLikeMeasure(1, beta)
        for p in (2.0, 3.0):
            for eps in (0.9, 0.1):
                exact = 2.0 * eps ** (p - beta) / (p - beta)
                assert abs(moment_integral(m, p, eps) - exact) / exact < 1e-6


def test_tail_mass_closed_form():
    m = StableLikeMeasure(1, 1.5)
    for eps in (0.5, 0.05, 0.005):
        exact = 2.0 * (eps ** -1.5 - 1.0) / 1.5
        assert abs(tail_mass(m, eps) - exact) / exact < 1e-6
    assert tail_mass(m, 1.0) == 0.0


def test_moment_below_beta_diverges():
    m = StableLikeMeasure(1, 1.5)
    try:
        moment_integral(m, 1.0, 0.5)
    except DivergenceError:
        return
    raise AssertionError("p <= beta should raise DivergenceError")


def test_density_and_log_gradient():
    m = StableLikeMeasure(1, 1.2)
    assert abs(eval_density(m, [0.5]) - 0.5 ** -2.2) < 1e-12
    grad = eval_log_density_grad(m, [0.5])
    assert abs(grad[0] + 2.2 / 0.5) < 1e-12
    for bad in ([0.0], [1.5]):
        try:
            eval_density(m, bad)
        except DomainError:
            continue
        raise AssertionError(f"{bad} should be outside the punctured ball")


def test_invalid_beta_rejected():
    for beta in (0.0, 2.0, -1.0):
        try:
            StableLikeMeasure(1, beta)
        except DomainError:
            continue
        raise AssertionError(f"beta={beta} should be rejected")


def test_sampled_events_sorted_and_in_annulus():
    m = StableLikeMeasure(2, 1.5, truncation_radius=0.1)
    events = sample_jump_events(m, 0.0, 1.0, (3, 1))
    times = [e.time for e in events]
    assert times == sorted(times)
    radii = np.array([np.linalg.norm(e.mark) for e in events])
    assert np.all(radii > 0.1) and np.all(radii <= 1.0)
    # same key, same events
    again = sample_jump_events(m, 0.0, 1.0, (3, 1))
    assert [e.time for e in again] == times


def test_sampled_event_count_matches_tail_mass():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    counts = [len(sample_jump_events(m, 0.0, 1.0, (11, k))) for k in range(400)]
    expected = tail_mass(m, 0.1)
    se = np.sqrt(expected / len(counts))
    assert abs(np.mean(counts) - expected) < 5.0 * se


def test_empty_measure_above_unit_radius():
    m = StableLikeMeasure(1, 1.5, truncation_radius=1.0)
    try:
        sample_jump_events(m, 0.0, 1.0, 1)
    except EmptyMeasureError:
        return
    raise AssertionError("truncation radius 1 leaves nothing to sample")


def test_zeta_profile():
    z = CutoffZeta(0.9)
    u = np.array([[0.1], [0.3], [0.45], [0.6], [0.7]])
    vals = zeta_eval(z, u)
    assert abs(vals[0] - 0.1 ** 3) < 1e-15
    assert abs(vals[1] - 0.3 ** 3) < 1e-15
    assert 0.0 < vals[2] < 0.45 ** 3
    assert vals[3] == 0.0 and vals[4] == 0.0
    grad = zeta_grad(z, np.array([[0.2]]))
    assert abs(grad[0, 0] - 3 * 0.2 ** 2) < 1e-12


def test_zeta_rejects_bad_epsilon():
    for eps in (0.0, 1.5):
        try:
            CutoffZeta(eps)
        except DomainError:
            continue
        raise AssertionError(f"epsilon={eps} should be rejected")


def test_assumption_checker_on_stable_measure():
    report = check_assumption_l(StableLikeMeasure(1, 1.5))
    assert report['passed'], report['checks']
    assert report['checks']['symmetric']
    assert report['omitted_variance_bound'] > 0.0


def test_omitted_variance_scales_with_radius():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.04)
    exact = 2.0 * 0.04 ** 0.5 / 0.5
    assert abs(omitted_variance_bound(m) - exact) / exact < 1e-6


def test_laplace_ratio_stabilizes():
    m = StableLikeMeasure(1, 1.5)
    r6, r8 = laplace_functional_ratio(m, 1e6), laplace_functional_ratio(m, 1e8)
    assert abs(r6 - r8) / r8 < 0.02
    assert abs(r8 - laplace_limit(m)) / laplace_limit(m) < 0.01
    assert laplace_functional_ratio(m, 1e-9) < 1e-3
    try:
        laplace_functional_ratio(m, 0.0)
    except DomainError:
        return
    raise AssertionError("lambda = 0 should raise DomainError")


def test_inverse_moment_envelope():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.01)
    report = inverse_moment_check(m, 1.0, 0.3, 0.0, 1.0, 500, 5)
    assert len(report.cells) == 9
    assert report.passed, report.cells
    assert np.isfinite(report.fitted_constant) and report.fitted_constant > 0.0


def test_inverse_moment_under_resolved():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.05)
    report = inverse_moment_check(m, 1.0, 0.06, 0.0, 1e-3, 200, 5)
    assert report.status == 'under-resolved'
    assert any(c['status'] == 'under-resolved' for c in report.cells)


def test_measure_from_config():
    m = measure_from_config({'dim': 2, 'beta': 1.2, 'amplitude': 'const', 'amplitude_params': {},
                             'truncation_radius': 0.1, 'quadrature': {}})
    assert m.dim == 2 and m.beta == 1.2 and m.truncation_radius == 0.1
    data = m.to_dict()
    assert data['amplitude'] == 'const'
    assert measure_from_config(data) == m


def test_zeta_grad_matches_central_differences():
    """Away from the rounding floor eps/h the difference quotient error is O(h^2 g''')"""
    h = 1e-6
    gen = np.random.default_rng(5)
    for eps in (0.9, 0.3):
        z = CutoffZeta(eps)
        a = eps / 3.0
        for dim in (1, 2):
            radii = np.concatenate([
                gen.uniform(0.05 * a, a, 100),
                gen.uniform(a, 2.0 * a, 100),
                gen.uniform(2.0 * a, min(3.0 * a, 1.0), 100),
                [a, 2.0 * a],
            ])
            dirs = gen.standard_normal((len(radii), dim))
            u = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * radii[:, None]
            grad = zeta_grad(z, u)
            for i in range(dim):
                e = np.zeros(dim)
                e[i] = h
                fd = (zeta_eval(z, u + e) - zeta_eval(z, u - e)) / (2.0 * h)
                err = np.abs(fd - grad[:, i])
                assert np.all(err <= 10 * h ** 2 + 1e-8), (eps, dim, float(err.max()))


def test_event_times_uniform():
    t0, t1 = 0.25, 1.25
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    times = np.concatenate([[e.time for e in sample_jump_events(m, t0, t1, (23, k))] for k in range(250)])
    assert len(times) >= 10000
    assert stats.kstest((times - t0) / (t1 - t0), 'uniform').pvalue > 1e-3


def test_radial_marks_follow_power_law():
    """For a = 1 the radii on (delta0, 1] have cdf (delta0^-beta - r^-beta) / (delta0^-beta - 1)"""
    beta, delta0 = 1.5, 0.1
    m = StableLikeMeasure(1, beta, truncation_radius=delta0)
    radii = np.concatenate([[abs(e.mark[0]) for e in sample_jump_events(m, 0.0, 1.0, (29, k))]
                            for k in range(250)])
    assert len(radii) >= 10000

    def cdf(r):
        return (delta0 ** -beta - np.asarray(r) ** -beta) / (delta0 ** -beta - 1.0)

    assert stats.kstest(radii, cdf).pvalue > 1e-3


def test_scale_growth():
    assert scale_growth([1.0, 1.5, 2.0]) == 2.0
    assert scale_growth([0.0, 0.0]) == 1.0
    assert scale_growth([1.0, np.inf]) == np.inf
    assert scale_growth([1.0, 10.0, 100.0]) > SCALE_GROWTH_LIMIT


@dataclass(frozen=True)
class _OscillatingAmplitude(Amplitude):
    """a(u) = 1 + cos(1/|u|) / 2: bounded, but |u| |grad log a| grows like 1/|u|"""
    name = 'oscillating'

    def value(self, u):
        r = np.maximum(np.linalg.norm(np.asarray(u, dtype=float), axis=-1), 1e-300)
        return 1.0 + 0.5 * np.cos(1.0 / r)

    def grad(self, u):
        u = np.asarray(u, dtype=float)
        r = np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), 1e-300)
        return 0.5 * np.sin(1.0 / r) / r ** 2 * u / r

    @property
    def bounds(self):
        return 0.5, 1.5


def test_assumption_checker_flags_log_gradient_growth():
    report = check_assumption_l(StableLikeMeasure(1, 1.5, amplitude=_OscillatingAmplitude()))
    assert not report['checks']['log_density_grad_bound']
    assert not report['passed']
    shells = report['C_B_shells']
    assert shells[-1] > shells[0]


def main():
    """Run all tests"""
    print("=" * 60)
    print("Levy measure tests")
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
