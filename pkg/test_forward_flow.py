#!/usr/bin/env python3
"""
Tests for the forward flow: jump-adapted simulation, common random numbers, restarts,
the lent-particle operations and moment diagnostics.
"""
import sys
import os
import tempfile
from pathlib import Path

import numpy as np

project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from levyfbsde.errors import CapabilityError, DomainError
from levyfbsde.forward_flow import (
    insert_particle, iter_batches, jump_free_path, lent_particle_jacobian, mark_sensitivity, moment_check,
    moment_check_grid, replace_mark, restart_path, simulate_path, simulate_paths, truncated_measure,
    truncation_windows,
)
from levyfbsde.levy_model import StableLikeMeasure, TiltedAmplitude
from levyfbsde.models import build_model
from levyfbsde.persistence import dump_paths, read_csv, read_json


def _additive(dim=1):
    m = StableLikeMeasure(dim, 1.5, truncation_radius=0.1)
    return m, build_model('additive', m)


def _multiplicative():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.1)
    return m, build_model('multiplicative-1d', m)


def test_additive_state_is_sum_of_marks():
    m, c = _additive()
    batch = simulate_paths(m, c, 0.0, [0.3], 1.0, 10, 5, 20)
    for i in range(batch.n_paths):
        path = batch.path(i)
        expected = 0.3 + path.marks[path.is_jump, 0].sum()
        assert abs(path.final_state[0] - expected) < 1e-12
        assert np.allclose(path.final_jacobian, np.eye(1))


def test_grid_contains_mesh_and_events():
    m, c = _additive()
    path = simulate_path(m, c, 0.0, [0.0], 1.0, 4, 9)
    assert path.grid[0] == 0.0 and path.grid[-1] == 1.0
    assert np.all(np.diff(path.grid) >= 0.0)
    for node in np.linspace(0.0, 1.0, 5):
        assert np.any(np.isclose(path.grid, node))
    assert len(path.events) == int(path.is_jump.sum())


def test_common_random_numbers_across_starts():
    m, c = _additive()
    batch = simulate_paths(m, c, 0.0, [[-1.0], [0.0], [2.0]], 1.0, 5, 3, 8)
    assert batch.n_paths == 24
    increments = (batch.final_states - batch.origins)[:, 0].reshape(3, 8)
    assert np.allclose(increments[0], increments[1]) and np.allclose(increments[1], increments[2])


def test_single_path_matches_batch_member():
    m, c = _multiplicative()
    batch = simulate_paths(m, c, 0.0, [0.4], 1.0, 10, 17, 6)
    single = simulate_path(m, c, 0.0, [0.4], 1.0, 10, (17, 4))
    assert np.array_equal(single.states, batch.path(4).states)


def test_batching_does_not_change_paths():
    m, c = _multiplicative()
    whole = simulate_paths(m, c, 0.0, [0.4], 1.0, 10, 21, 12)
    chunks = list(iter_batches(m, c, 0.0, [0.4], 1.0, 10, 21, 12, batch_size=5))
    assert len(chunks) > 1
    finals = np.concatenate([b.final_states for b in chunks])
    assert np.array_equal(finals, whole.final_states)


def test_restart_reproduces_states():
    m, c = _multiplicative()
    path = simulate_path(m, c, 0.0, [0.8], 1.0, 10, 2)
    k = len(path.grid) // 2
    restarted = restart_path(path, k, c)
    assert np.allclose(restarted.states, path.states[k:], atol=1e-12)
    assert np.allclose(restarted.jacobians[0], np.eye(1))


def test_inserted_particle_on_jump_free_path():
    m, c = _additive()
    base = jump_free_path(c, 0.0, [0.0], 1.0)
    bumped = insert_particle(base, 0.5, [0.1], c)
    assert abs(bumped.final_state[0] - 0.1) < 1e-15
    assert len(bumped.events) == 1 and bumped.events[0].time == 0.5


def test_insert_particle_rejects_bad_arguments():
    m, c = _additive()
    base = jump_free_path(c, 0.0, [0.0], 1.0)
    for alpha, y in ((0.0, [0.1]), (1.5, [0.1]), (0.5, [0.0]), (0.5, [1.2])):
        try:
            insert_particle(base, alpha, y, c)
        except DomainError:
            continue
        raise AssertionError(f"({alpha}, {y}) should be rejected")


def test_lent_particle_jacobian_matches_finite_difference():
    m, c = _multiplicative()
    path = simulate_path(m, c, 0.0, [0.8], 1.0, 10, 31)
    assert len(path.event_indices) > 0
    for e in range(min(5, len(path.event_indices))):
        exact = lent_particle_jacobian(path, e, c)[:, 0]
        fd = mark_sensitivity(path, e, 0, 1e-4, c)
        assert np.allclose(fd, exact, rtol=1e-5, atol=1e-9)


def test_replace_mark_with_same_mark_is_identity():
    m, c = _multiplicative()
    path = simulate_path(m, c, 0.0, [0.8], 1.0, 10, 8)
    k = path.event_indices[0]
    same = replace_mark(path, 0, path.marks[k], c)
    assert np.allclose(same.final_state, path.final_state, atol=1e-12)
    try:
        replace_mark(path, len(path.event_indices), path.marks[k], c)
    except DomainError:
        return
    raise AssertionError("out-of-range event index should raise")


def test_truncation_windows_graded():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.05)
    nodes = np.array([0.1, 0.5, 1.0])
    eps = nodes ** (1.0 / 1.5)
    windows = truncation_windows(m, 0.0, 1.0, nodes, eps)
    assert np.allclose(windows.edges, [0.0, 0.1, 0.5, 1.0])
    assert np.all(np.diff(windows.r_lo) >= 0.0)
    assert abs(windows.r_lo[0] - eps[0] / 30.0) < 1e-15
    assert windows.r_lo[-1] <= 0.05
    assert windows.expected_events(m) > 0.0


def test_truncated_measure_tightens_radius():
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.05)
    assert abs(truncated_measure(m, 0.3).truncation_radius - 0.01) < 1e-15
    assert truncated_measure(m, 3.0) is m


def test_moment_check_ratio():
    m, c = _additive()
    batch = simulate_paths(m, c, 0.0, [[0.0], [2.0]], 1.0, 5, 4, 200)
    report = moment_check([batch], 2.0)
    assert len(report['rows']) == 2
    assert np.isfinite(report['max_ratio']) and report['spread'] >= 1.0


def test_moment_ratio_bounded_in_start():
    """Additive fluctuations do not depend on x, so the ratio peaks at x = 0"""
    m, c = _additive()
    for p in (2.0, 4.0):
        report = moment_check_grid(m, c, [[0.0], [1.0], [10.0], [100.0]], 1.0, p, 300, 6, n_steps=5)
        assert len(report['rows']) == 4
        assert report['max_ratio'] <= 2.0 * report['rows'][0]['ratio']


def test_invalid_horizon_rejected():
    m, c = _additive()
    try:
        simulate_paths(m, c, 1.0, [0.0], 1.0, 5, 0, 2)
    except DomainError:
        return
    raise AssertionError("t >= T should raise DomainError")


def test_jacobian_cocycle():
    """grad X(T, tau_k) grad X(tau_k, t) = grad X(T, t) on the same noise"""
    m, c = _multiplicative()
    for seed in (2, 9):
        path = simulate_path(m, c, 0.0, [0.8], 1.0, 10, seed)
        for k in (1, len(path.grid) // 3, len(path.grid) // 2, len(path.grid) - 2):
            tail = restart_path(path, k, c).jacobians[-1]
            composed = tail @ path.jacobians[k]
            assert np.allclose(composed, path.final_jacobian, rtol=1e-8, atol=0.0), (seed, k)


def test_asymmetric_measure_refused():
    m = StableLikeMeasure(1, 1.5, amplitude=TiltedAmplitude(tilt=0.5), truncation_radius=0.05)
    c = build_model('additive', m)
    for call in (lambda: simulate_paths(m, c, 0.0, [0.0], 1.0, 10, 1, 4),
                 lambda: simulate_path(m, c, 0.0, [0.0], 1.0, 10, 1)):
        try:
            call()
        except CapabilityError:
            continue
        raise AssertionError("an asymmetric measure needs a compensator drift")


def test_dump_keeps_every_origin():
    m, c = _additive()
    batch = simulate_paths(m, c, 0.0, [[-1.0], [0.0], [2.0]], 1.0, 5, 3, 4)
    with tempfile.TemporaryDirectory() as tmp:
        csv_path = dump_paths(batch, Path(tmp) / 'paths')
        sidecar = read_json(csv_path.with_suffix('.json'))
        rows = read_csv(csv_path)
    origins = sidecar['origins']
    assert len(origins) == batch.n_paths == 12
    assert [o['record'] for o in origins] == list(range(12))
    assert sorted({o['x'][0] for o in origins}) == [-1.0, 0.0, 2.0]
    for i, o in enumerate(origins):
        assert o['x'][0] == batch.origins[i, 0]
    assert {int(r['record']) for r in rows} == set(range(12))
    # path ids repeat across starts, record indices do not
    assert len({o['path_id'] for o in origins}) == 4
    assert sidecar['invalid_records'] == []


def main():
    """Run all tests"""
    print("=" * 60)
    print("Forward flow tests")
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
