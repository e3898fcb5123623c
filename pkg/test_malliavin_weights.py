#!/usr/bin/env python3
"""
Tests for the lent-particle weights: the single-jump closed form, window merging,
batched schedules against per-path accumulation, and the mark-sampling oracle.
"""
import sys
import os

import numpy as np

project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from levyfbsde.errors import DomainError, NoSmallJumps
from levyfbsde.forward_flow import insert_particle, jump_free_path, simulate_paths
from levyfbsde.levy_model import CutoffZeta, StableLikeMeasure
from levyfbsde.malliavin_weights import (
    accumulate_weight, event_weight_terms, mark_sampling_oracle, schedule_epsilon, schedule_weights,
    weight_moment_scaling, weight_schedule, weight_state,
)
from levyfbsde.models import build_model


def _single_jump():
    """Additive d=1 (s0=1), beta=1.5, one jump y=0.1 at alpha=0.5"""
    m = StableLikeMeasure(1, 1.5)
    c = build_model('additive', m)
    path = insert_particle(jump_free_path(c, 0.0, [0.0], 1.0), 0.5, [0.1], c)
    return m, c, path


def test_single_jump_closed_form():
    """a = -(zeta dlogk + zeta') = -0.005, g = 1e-3, b = zeta zeta' = 3e-5, so U = -5 + 30 = 25"""
    m, c, path = _single_jump()
    a, g, b = event_weight_terms(path.events[0], c, CutoffZeta(0.9), [1.0], m)
    assert abs(a + 0.005) < 1e-15
    assert abs(g - 1e-3) < 1e-18
    assert abs(b - 3e-5) < 1e-18
    assert abs(accumulate_weight(path, 0.0, 1.0, 0.9, [1.0], c, m) - 25.0) < 1e-9


def test_weight_is_linear_in_direction():
    m, c, path = _single_jump()
    u1 = accumulate_weight(path, 0.0, 1.0, 0.9, [1.0], c, m)
    u2 = accumulate_weight(path, 0.0, 1.0, 0.9, [-2.0], c, m)
    assert abs(u2 + 2.0 * u1) < 1e-9


def test_jump_outside_core_contributes_nothing():
    m, c, path = _single_jump()
    assert event_weight_terms(path.events[0], c, CutoffZeta(0.15), [1.0], m) == (0.0, 0.0, 0.0)


def test_no_small_jumps_raises():
    m, c, path = _single_jump()
    for tau, eps in ((0.4, 0.9), (1.0, 0.15)):
        try:
            accumulate_weight(path, 0.0, tau, eps, [1.0], c, m)
        except NoSmallJumps:
            continue
        raise AssertionError(f"tau={tau}, eps={eps} has no core jump")


def test_window_states_merge():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.05)
    c = build_model('multiplicative-1d', m)
    path = simulate_paths(m, c, 0.0, [0.6], 1.0, 10, 14, 1).path(0)
    early = weight_state(path, 0.0, 0.5, 0.9, [1.0], c, m)
    late = weight_state(path, 0.5, 1.0, 0.9, [1.0], c, m)
    full = weight_state(path, 0.0, 1.0, 0.9, [1.0], c, m)
    merged = early.merge(late)
    assert abs(merged.value - full.value) < 1e-9 * max(1.0, abs(full.value))
    try:
        late.merge(early)
    except DomainError:
        return
    raise AssertionError("non-adjacent windows should not merge")


def test_batched_schedule_matches_per_path():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.05)
    c = build_model('multiplicative-1d', m)
    batch = simulate_paths(m, c, 0.0, [0.6], 1.0, 10, 6, 25)
    values, flagged = schedule_weights(batch, 0.0, [0.5, 1.0], 'fixed', [1.0], c, m, 0.9)
    for i in range(batch.n_paths):
        path = batch.path(i)
        for j, tau in enumerate((0.5, 1.0)):
            if flagged[i, j]:
                continue
            u = accumulate_weight(path, 0.0, tau, 0.9, [1.0], c, m)
            assert abs(values[i, j] - u) <= 1e-9 * max(1.0, abs(u))


def test_weight_schedule_rejects_nodes_outside_horizon():
    m, c, path = _single_jump()
    try:
        weight_schedule(path, 0.0, [0.0, 1.0], 'fixed', [1.0], c, m, 0.9)
    except DomainError:
        return
    raise AssertionError("node at t should be rejected")


def test_oracle_on_single_jump_is_exact():
    """One jump in d=1: every Rademacher draw gives the mark-averaged weight"""
    m, c, path = _single_jump()
    mean, se = mark_sampling_oracle(path, 0.0, 1.0, 0.9, [1.0], c, m, 1000, 3)
    assert abs(mean - 25.0) < 1e-9
    assert se < 1e-9


def test_oracle_agrees_on_simulated_path():
    m = StableLikeMeasure(2, 1.5, truncation_radius=0.1)
    c = build_model('smooth-2d', m)
    path = simulate_paths(m, c, 0.0, [0.3, -0.2], 1.0, 10, 12, 1).path(0)
    u = accumulate_weight(path, 0.0, 1.0, 0.9, [0.6, 0.8], c, m)
    mean, se = mark_sampling_oracle(path, 0.0, 1.0, 0.9, [0.6, 0.8], c, m, 4000, (12, 2, 0))
    assert abs(u - mean) <= 5.0 * se + 1e-12


def test_schedule_epsilon():
    eps = schedule_epsilon('singular', 0.0, np.array([0.008, 0.125, 2.0]), 2.0, 1.5)
    assert np.allclose(eps, [0.04, 0.25, 1.0])
    assert np.allclose(schedule_epsilon('terminal', 0.0, [0.1, 0.2], 0.125, 1.5), 0.25)
    for args in (('fixed', None), ('bogus', 0.5)):
        try:
            schedule_epsilon(args[0], 0.0, [0.5], 1.0, 1.5, args[1])
        except DomainError:
            continue
        raise AssertionError(f"{args} should be rejected")


def test_weight_scaling_needs_beta_above_one():
    m = StableLikeMeasure(1, 0.8)
    c = build_model('additive', m)
    try:
        weight_moment_scaling(m, c, 0.0, [0.0], [1.0], 2.0, [0.1, 1.0], 10, 0)
    except DomainError:
        return
    raise AssertionError("beta <= 1 should raise DomainError")


def test_weight_scaling_slope_sign():
    m = StableLikeMeasure(1, 1.5)
    c = build_model('additive', m)
    report = weight_moment_scaling(m, c, 0.0, [0.0], [1.0], 2.0, [0.05, 0.2, 1.0], 600, 4, n_steps=5)
    fit = report['by_power'][2.0]
    assert fit['slope'] < 0.0
    assert all(np.isfinite(fit['moments']))


def main():
    """Run all tests"""
    print("=" * 60)
    print("Malliavin weight tests")
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
