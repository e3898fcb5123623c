"""
Run orchestration: one function per CLI subcommand and the acceptance suite behind `verify`.
Coordinates the numerical modules and writes every artifact through persistence.
"""
import logging
import math
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from levyfbsde import __version__
from levyfbsde import rng as rng_streams
from levyfbsde.bsde_engine import SolveConfig, mild_value_at, nonlocal_field, solve_value_function
from levyfbsde.config import Config
from levyfbsde.errors import CapabilityError, LevyFbsdeError
from levyfbsde.forward_flow import (
    insert_particle, jump_free_path, lent_particle_jacobian, mark_sensitivity, moment_check, moment_check_grid,
    simulate_paths,
)
from levyfbsde.gradient_estimator import (
    bel_gradient, bel_variance_diagnostic, fd_gradient, gradient_scaling_experiment, variational_gradient,
)
from levyfbsde.levy_model import (
    StableLikeMeasure, check_assumption_l, measure_from_config, moment_integral, tail_mass,
)
from levyfbsde.malliavin_weights import accumulate_weight, mark_sampling_oracle, weight_moment_scaling
from levyfbsde.model_coefficients import (
    ModelCoefficients, check_coefficients, check_driver, check_l_weight, require_dim,
)
from levyfbsde.models import build_manufactured, build_model
from levyfbsde.pde_solver import PdeGridConfig, deterministic_solve, discretization_envelope, mild_identity_residual
from levyfbsde.persistence import (
    dump_paths, read_json, save_value_function, sha256_file, write_csv, write_json, write_manifest,
)
from levyfbsde.schemas import config_hash, default_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_UNDERPOWERED = 3

VERIFY_PATHS = 100_000


class RunLogger:
    """In-memory record of criterion outcomes"""

    def __init__(self):
        self.logs = []

    def log(self, criterion: str, status: str, estimate=None, tolerance=None, detail: str = '') -> Dict:
        """Log one criterion result"""
        entry = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'criterion': criterion,
            'status': status,
            'estimate': estimate,
            'tolerance': tolerance,
            'detail': detail,
        }
        self.logs.append(entry)
        level = logging.INFO if status in ('pass', 'skipped') else logging.WARNING
        logger.log(level, "%s: %s (estimate=%s, tolerance=%s) %s", criterion, status, estimate, tolerance, detail)
        return entry

    def get_logs(self, limit: int = 50) -> List[Dict]:
        """Get recent logs"""
        return self.logs[-limit:] if len(self.logs) > limit else self.logs


def exit_code(statuses: Sequence[str]) -> int:
    if any(s in ('fail', 'error') for s in statuses):
        return EXIT_FAILED
    if any(s == 'underpowered' for s in statuses):
        return EXIT_UNDERPOWERED
    return EXIT_OK


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def build_problem(cfg: Dict) -> Tuple[StableLikeMeasure, ModelCoefficients]:
    m = measure_from_config(cfg['measure'])
    c = build_model(cfg['model'], m, cfg['model_params'], cfg['payoff'], cfg['driver'], cfg['l_weight'],
                    horizon=cfg['horizon']['T'])
    require_dim(c, m.dim)
    return m, c


def direction_and_point(cfg: Dict) -> Tuple[np.ndarray, np.ndarray]:
    dim = cfg['measure']['dim']
    est = cfg['estimator']
    x = np.asarray(est['x'] if est['x'] is not None else [0.5] + [0.0] * (dim - 1), dtype=float)
    h = np.asarray(est['h'] if est['h'] is not None else np.eye(dim)[0], dtype=float)
    return x, h


def solve_config(cfg: Dict) -> SolveConfig:
    grid = cfg['grid']
    return SolveConfig(
        horizon=cfg['horizon']['T'], box=grid['box'], space_nodes=grid['space_nodes'],
        time_slices=grid['time_slices'], paths_per_node=grid['paths_per_node'],
        n_steps=cfg['estimator']['n_steps'], iterates_max=grid['iterates_max'], tol=grid['tol'],
        splits=grid['splits'],
    )


def pde_config(cfg: Dict) -> PdeGridConfig:
    grid = cfg['grid']
    return PdeGridConfig(t_min=cfg['horizon']['t'], horizon=cfg['horizon']['T'], box=grid['box'],
                         space_nodes=grid['pde_space_nodes'], dt=grid['pde_dt'])


def finish_run(out_dir: Path, cfg: Dict, started: float, criteria: Sequence[Dict],
               artifacts: Sequence[Path], extra: Optional[Dict] = None) -> Path:
    return write_manifest(out_dir, config_hash(cfg), __version__, time.time() - started, criteria,
                          list(artifacts) + [out_dir / 'config.json'], extra)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def run_check_measure(cfg: Dict, out_dir: Path) -> Tuple[int, Dict]:
    """Assumption checkers on the configured measure and coefficients"""
    m, c = build_problem(cfg)
    report = {
        'measure': m.to_dict(),
        'assumption_l': check_assumption_l(m),
        'coefficients': check_coefficients(c),
        'driver': check_driver(c),
        'l_weight': check_l_weight(c.l_weight, c.dim),
    }
    report['passed'] = all(report[k]['passed'] for k in ('assumption_l', 'coefficients', 'driver', 'l_weight'))
    artifacts = [write_json(out_dir / 'check_measure.json', report)]
    return (EXIT_OK if report['passed'] else EXIT_FAILED), {'report': report, 'artifacts': artifacts}


def run_simulate_forward(cfg: Dict, out_dir: Path, dump: bool = True) -> Tuple[int, Dict]:
    """Forward paths from x with the (L-p) moment diagnostic; optional path dump"""
    m, c = build_problem(cfg)
    x, _ = direction_and_point(cfg)
    t, T = cfg['horizon']['t'], cfg['horizon']['T']
    est = cfg['estimator']
    batch = simulate_paths(m, c, t, x, T, est['n_steps'], cfg['seed'], est['n_paths'])
    # sup-moment growth in |x| along e_1
    starts = [r * np.eye(len(x))[0] for r in (0.0, 1.0, 10.0, 100.0)]
    report = {
        'n_paths': batch.n_paths,
        'invalid_fraction': float(np.mean(~batch.valid)),
        'mean_events': float(batch.is_jump.sum() / max(batch.n_paths, 1)),
        'moments': {p: moment_check([batch], p) for p in (1.0, 2.0)},
        'moment_grid': {p: moment_check_grid(m, c, starts, T - t, p, min(est['n_paths'], 2000), cfg['seed'],
                                             est['n_steps'])
                        for p in (2.0, 4.0)},
        'final_mean': batch.final_states[batch.valid].mean(axis=0),
        'final_stderr': batch.final_states[batch.valid].std(axis=0, ddof=1) / math.sqrt(max(batch.valid.sum(), 1)),
    }
    artifacts = []
    if dump:
        artifacts.append(dump_paths(batch, out_dir / 'paths', {'seed': cfg['seed']}))
    artifacts.append(write_json(out_dir / 'simulate_forward.json', report))
    return EXIT_OK, {'report': report, 'artifacts': artifacts}


def run_solve_pde(cfg: Dict, out_dir: Path) -> Tuple[int, Dict]:
    """Probabilistic solve, plus the deterministic oracle when d = 1, plus v* for manufactured models"""
    m, c = build_problem(cfg)
    t = cfg['horizon']['t']
    v, report = solve_value_function(c, m, t, solve_config(cfg), cfg['seed'])
    artifacts = [save_value_function(v, out_dir / 'value_bsde', {'solve': report.to_dict()})]
    summary = {'solve': report.to_dict()}
    if c.dim == 1 and m.is_symmetric:
        exterior = 'linear'
        if cfg['model'].startswith('manufactured:'):
            problem = build_manufactured(cfg['model'], m, cfg['model_params'], cfg['l_weight'], cfg['horizon']['T'])
            exterior = problem
            summary['sup_error_vs_exact'] = _grid_distance(v, problem)
        v_pde = deterministic_solve(c, m, pde_config(cfg), exterior)
        artifacts.append(save_value_function(v_pde, out_dir / 'value_pde'))
        summary['sup_distance_bsde_pde'] = _grid_distance(v, v_pde)
    artifacts.append(write_json(out_dir / 'solve_report.json', summary))
    return EXIT_OK, {'report': summary, 'artifacts': artifacts}


def _grid_distance(v, other: Callable) -> float:
    pts = v.grid_points()
    return max(float(np.max(np.abs(v.slice_values(j) - np.asarray(other(s, pts)))))
               for j, s in enumerate(v.times))


def gradient_rows(cfg: Dict, m: StableLikeMeasure, c: ModelCoefficients, n_paths: Optional[int] = None) -> List[Dict]:
    """bel / fd / variational at (t, x, h); a capability error becomes a row with its message"""
    x, h = direction_and_point(cfg)
    t, T = cfg['horizon']['t'], cfg['horizon']['T']
    est = cfg['estimator']
    n_paths = n_paths or est['n_paths']
    seed = cfg['seed']
    v = None
    scfg = solve_config(cfg)
    if c.driver.depends_on_yz:
        v, _ = solve_value_function(c, m, t, scfg, seed)
    rows = [
        bel_gradient(c, m, t, x, h, T, v=v, schedule=est['schedule'], n_paths=n_paths,
                     time_nodes=est['time_nodes'], rng_seed=seed, epsilon=est['epsilon'],
                     policy=est['policy'], n_steps=est['n_steps']).to_row(t, x, h),
        fd_gradient(c, m, t, x, h, T, n_paths, seed, delta=est['fd_delta'], v=v, cfg=scfg,
                    n_steps=est['n_steps']).to_row(t, x, h),
    ]
    try:
        rows.append(variational_gradient(c, m, t, x, h, T, n_paths, seed, v=v, cfg=scfg,
                                         n_steps=est['n_steps']).to_row(t, x, h))
    except CapabilityError as err:
        rows.append({'method': 'variational', 't': t, 'status': 'capability', 'detail': str(err)})
    return rows


def run_estimate_gradient(cfg: Dict, out_dir: Path) -> Tuple[int, Dict]:
    m, c = build_problem(cfg)
    rows = gradient_rows(cfg, m, c)
    artifacts = [write_csv(out_dir / 'gradient.csv', rows)]
    return EXIT_OK, {'report': {'rows': rows}, 'artifacts': artifacts}


def run_scaling(cfg: Dict, out_dir: Path) -> Tuple[int, Dict]:
    """Weight moment scaling (p = 1, 2) and the gradient scaling experiment"""
    m, c = build_problem(cfg)
    x, h = direction_and_point(cfg)
    est = cfg['estimator']
    seed = cfg['seed']
    weights = weight_moment_scaling(m, c, cfg['horizon']['t'], x, h, [1.0, 2.0], est['horizons'],
                                    est['n_paths'], seed, est['n_steps'])
    gradient = gradient_scaling_experiment(c, m, x, h, est['horizons'], est['n_paths'], seed,
                                           time_nodes=est['time_nodes'], cfg=solve_config(cfg))
    variance = bel_variance_diagnostic(c, m, cfg['horizon']['t'], x, h, est['horizons'], est['n_paths'], seed)
    rows = []
    for q, fit in weights['by_power'].items():
        for H, mom, se in zip(weights['horizons'], fit['moments'], fit['stderr']):
            rows.append({'quantity': f'weight_moment_p{q:g}', 'horizon': H, 'value': mom, 'stderr': se})
    for row in gradient['rows']:
        rows.append({'quantity': 'bel_gradient', 'horizon': row['horizon'], 'value': row['value'],
                     'stderr': row['stderr'], 'envelope': row['envelope']})
    artifacts = [write_csv(out_dir / 'scaling.csv', rows),
                 write_json(out_dir / 'scaling.json', {'weights': weights, 'gradient': gradient, 'variance': variance})]
    code = EXIT_OK if gradient['passed'] and variance['passed'] else EXIT_FAILED
    return code, {'report': {'weights': weights, 'gradient': gradient, 'variance': variance}, 'artifacts': artifacts}


def summarize_run(run_dir: Path) -> Dict:
    """Manifest summary of a finished run directory"""
    manifest = read_json(Path(run_dir) / 'manifest.json')
    counts: Dict[str, int] = {}
    for entry in manifest.get('criteria', []):
        counts[entry['status']] = counts.get(entry['status'], 0) + 1
    return {
        'config_hash': manifest['config_hash'],
        'code_version': manifest['code_version'],
        'wall_time_s': manifest['wall_time_s'],
        'passed': manifest['passed'],
        'status_counts': counts,
        'criteria': [(e['criterion'], e['status']) for e in manifest.get('criteria', [])],
        'artifacts': [a['path'] for a in manifest.get('artifacts', [])],
    }


# ---------------------------------------------------------------------------
# Acceptance criteria
# ---------------------------------------------------------------------------

def _seed(seed: int, k: int) -> int:
    return (int(seed) + 1_000_003 * k) % (2 ** 63)


def _combined(*ses: float) -> float:
    return math.sqrt(sum(s * s for s in ses))


def criterion_measure_analytics(cfg: Dict, paths: int) -> Tuple[str, float, float, str]:
    beta = cfg['measure']['beta'] if cfg['measure']['dim'] == 1 else 1.5
    m = StableLikeMeasure(1, beta)
    worst = 0.0
    for p in (2.0, 3.0, 5.0):
        for eps in (0.9, 0.3, 0.05):
            exact = 2.0 * eps ** (p - beta) / (p - beta)
            worst = max(worst, abs(moment_integral(m, p, eps) - exact) / exact)
    for eps in (0.9, 0.3, 0.05):
        exact = 2.0 * (eps ** -beta - 1.0) / beta
        worst = max(worst, abs(tail_mass(m, eps) - exact) / exact)
    checks = check_assumption_l(m)['checks']
    ok = worst < 1e-6 and checks['moment_condition'] and checks['order_condition']
    return ('pass' if ok else 'fail'), worst, 1e-6, f"order/moment checks {checks['order_condition']}/{checks['moment_condition']}"


def criterion_lent_particle(cfg: Dict, paths: int) -> Tuple[str, float, float, str]:
    beta = cfg['measure']['beta'] if cfg['measure']['dim'] == 1 else 1.5
    m = StableLikeMeasure(1, beta, truncation_radius=0.1)
    c = build_model('multiplicative-1d', m)
    gen = rng_streams.stream(cfg['seed'], rng_streams.FINITE_DIFF, 50)
    batch = simulate_paths(m, c, 0.0, [0.8], 1.0, 10, _seed(cfg['seed'], 2), 64)
    delta_acc = 1e-5
    # rounding swamps the O(delta^2) term at 1e-5; the order is read off a coarser pair
    delta = 1e-2
    errors, ratios = [], []
    for i in range(batch.n_paths):
        path = batch.path(i)
        n_events = len(path.event_indices)
        if not path.valid or n_events == 0:
            continue
        e = int(gen.integers(n_events))
        exact = lent_particle_jacobian(path, e, c)[:, 0]
        scale = max(float(np.max(np.abs(exact))), 1e-12)
        errors.append(float(np.max(np.abs(mark_sensitivity(path, e, 0, delta_acc, c) - exact))) / scale)
        coarse = mark_sensitivity(path, e, 0, delta, c)
        fine = mark_sensitivity(path, e, 0, delta / 2.0, c)
        err_c = float(np.max(np.abs(coarse - exact))) / scale
        err_f = float(np.max(np.abs(fine - exact))) / scale
        if err_c > 1e-9:
            ratios.append(err_c / max(err_f, 1e-300))
        if len(errors) == 50:
            break
    worst = max(errors)
    ratio = float(np.median(ratios)) if ratios else 4.0
    ok = len(errors) == 50 and worst < 1e-3 and 3.0 <= ratio <= 5.0
    detail = (f"{len(errors)} events, max relative error at delta={delta_acc:g}; "
              f"median refinement ratio {ratio:.2f} for delta {delta:g} -> {delta / 2:g}")
    return ('pass' if ok else 'fail'), worst, 1e-3, detail


def criterion_weight_oracle(cfg: Dict, paths: int) -> Tuple[str, float, float, str]:
    seed = cfg['seed']
    m1 = StableLikeMeasure(1, 1.5)
    c_add = build_model('additive', m1)
    single = insert_particle(jump_free_path(c_add, 0.0, [0.0], 1.0), 0.5, [0.1], c_add)
    worked = accumulate_weight(single, 0.0, 1.0, 0.9, [1.0], c_add, m1)
    cases = [
        (m1, build_model('multiplicative-1d', m1), np.array([0.8]), np.array([1.0])),
        (StableLikeMeasure(2, 1.5), None, np.array([0.3, -0.2]), np.array([0.6, 0.8])),
    ]
    agree = total = 0
    for k, (m, c, x, h) in enumerate(cases):
        m = replace(m, truncation_radius=0.1)
        c = c or build_model('smooth-2d', m)
        batch = simulate_paths(m, c, 0.0, x, 1.0, 10, _seed(seed, 3 + k), 100)
        for i in range(batch.n_paths):
            path = batch.path(i)
            if not path.valid:
                continue
            try:
                u = accumulate_weight(path, 0.0, 1.0, 0.9, h, c, m)
                est, se = mark_sampling_oracle(path, 0.0, 1.0, 0.9, h, c, m, 4000,
                                               (seed, rng_streams.MARKS, k, i))
            except LevyFbsdeError:
                continue
            total += 1
            agree += abs(u - est) <= 3.0 * se
    fraction = agree / max(total, 1)
    ok = abs(worked - 25.0) < 1e-9 and total >= 190 and fraction >= 0.95
    return ('pass' if ok else 'fail'), fraction, 0.95, f"worked single-jump U={worked:.12g}; {agree}/{total} paths agree"


def criterion_unbiasedness(cfg: Dict, paths: int) -> Tuple[str, float, float, str]:
    seed = cfg['seed']
    m = StableLikeMeasure(1, 1.5, truncation_radius=0.02)
    c = build_model('multiplicative-1d', m)
    x, h = np.array([0.5]), np.array([1.0])
    bel = bel_gradient(c, m, 0.0, x, h, 1.0, n_paths=paths, rng_seed=_seed(seed, 4))
    fd = fd_gradient(c, m, 0.0, x, h, 1.0, paths, _seed(seed, 4))
    gap = abs(bel.value - fd.value)
    tol = 3.0 * _combined(bel.stderr, fd.stderr)
    c_const = build_model('additive', m, payoff={'kind': 'constant', 'value': 1.0})
    const = bel_gradient(c_const, m, 0.0, x, h, 1.0, n_paths=paths // 4, rng_seed=_seed(seed, 5))
    ok = gap <= tol and abs(const.value) <= 3.0 * const.stderr
    return ('pass' if ok else 'fail'), gap, tol, \
        f"bel {bel.value:.5g}+-{bel.stderr:.2g}, fd {fd.value:.5g}+-{fd.stderr:.2g}, constant payoff {const.value:.3g}+-{const.stderr:.2g}"


def criterion_weight_scaling(cfg: Dict, paths: int) -> Tuple[str, float, float, str]:
    beta = cfg['measure']['beta'] if cfg['measure']['dim'] == 1 and 1 < cfg['measure']['beta'] < 2 else 1.5
    m = StableLikeMeasure(1, beta)
    c = build_model('additive', m)
    rep = weight_moment_scaling(m, c, 0.0, [0.0], [1.0], 2.0, np.geomspace(0.05, 1.0, 6), paths,
                                _seed(cfg['seed'], 6))
    slope = rep['by_power'][2.0]['slope']
    gap = abs(slope + 1.0 / beta)
    return ('pass' if gap <= 0.15 else 'fail'), slope, 0.15, f"expected {-1.0 / beta:.4f}"


def criterion_picard(cfg: Dict, paths: int) -> Tuple[str, float, float, str]:
    seed = _seed(cfg['seed'], 7)
    m = StableLikeMeasure(1, 1.5)
    c = build_model('linear-driver:0.5', m)
    scfg = SolveConfig(horizon=1.0, box=3.0, space_nodes=13, time_slices=11,
                       paths_per_node=max(paths // 100, 50), iterates_max=5, tol=1e-9)
    v, report = solve_value_function(c, m, 0.0, scfg, seed)
    ratios = report.contraction_ratios
    xs = np.array([[-1.0], [0.0], [1.0]])
    est = mild_value_at(c, m, 0.0, xs, 1.0, None, None, None, paths // 10, scfg.n_steps, seed,
                        stream_keys=(rng_streams.SEMIGROUP,))
    closed = math.exp(-0.5) * est.values
    se_v = math.exp(-0.5) * est.stderr * math.sqrt((paths // 10) / scfg.paths_per_node)
    gaps = np.abs(v(0.0, xs) - closed)
    tols = 3.0 * np.sqrt(se_v ** 2 + (math.exp(-0.5) * est.stderr) ** 2) + 5e-3
    ok = bool(ratios) and abs(ratios[0] - 0.5) <= 0.1 and max(ratios) <= 0.6 and bool(np.all(gaps <= tols))
    return ('pass' if ok else 'fail'), float(ratios[0]) if ratios else float('nan'), 0.1, \
        f"ratios {np.round(ratios, 3).tolist()}, max gap to closed form {gaps.max():.3g} (tol {tols.min():.3g})"


def _prob_vs_pde(c, m, seed, paths, exterior) -> Tuple[bool, float, float, Dict]:
    scfg = SolveConfig(horizon=1.0, box=2.0, space_nodes=17, time_slices=6,
                       paths_per_node=max(paths // 200, 100), iterates_max=4, tol=1e-3)
    v, _ = solve_value_function(c, m, 0.0, scfg, seed)
    pcfg = PdeGridConfig(box=5.0, space_nodes=101)
    v_pde, envelope = discretization_envelope(c, m, pcfg, exterior)
    z = nonlocal_field(v, c, m, m.truncation_radius) if c.driver.depends_on_yz else None
    pts = v.grid_points()
    noise = mild_value_at(c, m, 0.0, pts, 1.0, None, v, z, scfg.paths_per_node, scfg.n_steps, seed,
                          stream_keys=(rng_streams.PICARD, 0))
    se = float(np.max(noise.stderr))
    distance = _grid_distance(v, v_pde)
    tol = 3.0 * se + envelope + 1e-3
    fine_x = np.linspace(-2.0, 2.0, 161)[:, None]
    interp = max(float(np.max(np.abs(v(s, fine_x) - v_pde(s, fine_x)))) for s in v.times)
    mild = mild_identity_residual(v, c, m, 20, max(paths // 50, 500), seed, grid_tol=interp + envelope,
                                  n_steps=scfg.n_steps, box=1.5)
    return distance <= tol and mild['passed'], distance, tol, {'mild_max': mild['max_abs_residual']}


def criterion_prob_vs_pde(cfg: Dict, paths: int) -> Tuple[str, float, float, str]:
    seed = _seed(cfg['seed'], 8)
    m = StableLikeMeasure(1, 1.5)
    problem = build_manufactured('manufactured:cosine-decay', m)
    ok1, d1, t1, e1 = _prob_vs_pde(problem.coefficients, m, seed, paths, problem)
    kinked = build_model('kinked-terminal', m, driver={'kind': 'lipschitz'})
    ok2, d2, t2, e2 = _prob_vs_pde(kinked, m, seed + 1, paths, 'linear')
    return ('pass' if ok1 and ok2 else 'fail'), max(d1, d2), min(t1, t2), \
        f"manufactured {d1:.3g}/{t1:.3g}, kinked {d2:.3g}/{t2:.3g}, mild residual max {max(e1['mild_max'], e2['mild_max']):.3g}"


def criterion_gradient_formula(cfg: Dict, paths: int) -> Tuple[str, float, float, str]:
    seed = _seed(cfg['seed'], 9)
    smooth_cfg = default_config(seed, model='linear-driver:0.5',
                                estimator={'n_paths': max(paths // 10, 1000), 'x': [0.3], 'h': [1.0]},
                                grid={'box': 3.0, 'space_nodes': 13, 'time_slices': 6,
                                      'paths_per_node': max(paths // 200, 100), 'iterates_max': 4})
    m, c = build_problem(smooth_cfg)
    rows = gradient_rows(smooth_cfg, m, c)
    values = [(r['value'], r['stderr']) for r in rows if 'value' in r]
    worst = max(abs(a - b) - 3.0 * _combined(sa, sb) for i, (a, sa) in enumerate(values) for (b, sb) in values[i + 1:])
    kinked = build_model('kinked-terminal', m)
    scaling = gradient_scaling_experiment(kinked, m, [0.3], [1.0], [0.05, 0.1, 0.2, 0.5, 1.0],
                                          max(paths // 10, 1000), seed)
    finite = all(np.isfinite(r['value']) for r in scaling['rows'])
    try:
        variational_gradient(kinked, m, 0.0, [0.3], [1.0], 1.0, 10, seed)
        capability = False
    except CapabilityError:
        capability = True
    ok = len(values) == 3 and worst <= 0.0 and finite and scaling['envelope_holds'] and capability
    return ('pass' if ok else 'fail'), worst, 0.0, \
        f"methods {[round(v, 5) for v, _ in values]}, kinked envelope C={scaling['C']:.4g} holds={scaling['envelope_holds']}"


def criterion_mollification(cfg: Dict, paths: int) -> Tuple[str, float, float, str]:
    seed = _seed(cfg['seed'], 10)
    m = StableLikeMeasure(1, 1.5)
    x, h = np.array([0.3]), np.array([1.0])
    n_paths = max(paths // 4, 1000)
    base = bel_gradient(build_model('kinked-terminal', m), m, 0.0, x, h, 1.0, n_paths=n_paths, rng_seed=seed)
    worst, gaps = -np.inf, []
    for n in (4, 16, 64):
        c_n = build_model('kinked-terminal', m, payoff={'kind': 'mollified', 'n': n,
                                                        'base': {'kind': 'kinked', 'x0': 0.0}})
        est = bel_gradient(c_n, m, 0.0, x, h, 1.0, n_paths=n_paths, rng_seed=seed)
        gap = abs(est.value - base.value) - 3.0 * _combined(est.stderr, base.stderr)
        gaps.append(round(est.value, 5))
        worst = max(worst, gap)
    return ('pass' if worst <= 0.0 else 'fail'), worst, 0.0, f"kinked {base.value:.5g}, mollified {gaps}"


def csv_digests(run_dir: Path) -> Dict[str, str]:
    """sha256 of every CSV under run_dir, keyed by relative path"""
    run_dir = Path(run_dir)
    return {p.relative_to(run_dir).as_posix(): sha256_file(p) for p in sorted(run_dir.rglob('*.csv'))}


def differing_files(a: Dict[str, str], b: Dict[str, str]) -> List[str]:
    return sorted(name for name in set(a) | set(b) if a.get(name) != b.get(name))


def criterion_reproducibility(cfg: Dict, paths: int) -> Tuple[str, float, float, str]:
    """
    The rest of the suite plus estimate-gradient, run twice with the same seed at a reduced
    path count, once single-threaded and once on a pool; every CSV must match byte for byte.
    """
    repro_paths = max(1, min(paths, Config.REPRO_PATHS))
    others = [cid for cid, _, _, _ in CRITERIA if cid != 'C10']
    small = dict(cfg, estimator=dict(cfg['estimator'], n_paths=repro_paths))
    pool = max(2, Config.get_threads())
    digests = []
    with tempfile.TemporaryDirectory() as tmp:
        for k, threads in enumerate((1, pool)):
            out = Path(tmp) / f'replica_{k}'
            run_verify(small, out, n_paths=repro_paths, threads=threads, only=others)
            run_estimate_gradient(small, out)
            digests.append(csv_digests(out))
    differing = differing_files(*digests)
    ok = bool(digests[0]) and not differing
    detail = f"{len(digests[0])} CSV files at {repro_paths} paths, threads 1 vs {pool}"
    if differing:
        detail += f"; differ: {', '.join(differing)}"
    return ('pass' if ok else 'fail'), float(len(differing)), 0.0, detail


# (id, label, runner, statistical)
CRITERIA: List[Tuple[str, str, Callable, bool]] = [
    ('C01', 'measure analytics', criterion_measure_analytics, False),
    ('C02', 'lent-particle identity', criterion_lent_particle, False),
    ('C03', 'weight reduction oracle', criterion_weight_oracle, False),
    ('C04', 'unbiasedness', criterion_unbiasedness, True),
    ('C05', 'weight scaling', criterion_weight_scaling, True),
    ('C06', 'picard convergence', criterion_picard, True),
    ('C07', 'probabilistic vs deterministic', criterion_prob_vs_pde, True),
    ('C08', 'gradient formula', criterion_gradient_formula, True),
    ('C09', 'mollification robustness', criterion_mollification, True),
    ('C10', 'reproducibility', criterion_reproducibility, False),
]


def _run_criterion(item, cfg: Dict, paths: int, run_logger: RunLogger) -> Dict:
    cid, label, fn, statistical = item
    name = f'{cid} {label}'
    if statistical and paths < Config.MIN_POWER_PATHS:
        return run_logger.log(name, 'underpowered', None, None,
                              f"{paths} paths < {Config.MIN_POWER_PATHS}")
    started = time.time()
    try:
        status, estimate, tolerance, detail = fn(cfg, paths)
    except LevyFbsdeError as err:
        logger.exception("criterion %s raised", name)
        status, estimate, tolerance, detail = 'error', None, None, f'{type(err).__name__}: {err}'
    entry = run_logger.log(name, status, estimate, tolerance, detail)
    entry['seconds'] = round(time.time() - started, 2)
    return entry


def run_verify(cfg: Dict, out_dir: Path, n_paths: Optional[int] = None, threads: Optional[int] = None,
               only: Optional[Sequence[str]] = None) -> Tuple[int, Dict]:
    """Every acceptance criterion at its stated scale; n_paths overrides the Monte Carlo size"""
    paths = int(n_paths or VERIFY_PATHS)
    run_logger = RunLogger()
    items = [item for item in CRITERIA if not only or item[0] in only]
    workers = Config.get_threads(threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(lambda item: _run_criterion(item, cfg, paths, run_logger), items))
    else:
        entries = [_run_criterion(item, cfg, paths, run_logger) for item in items]
    entries.sort(key=lambda e: e['criterion'])
    rows = [{k: e[k] for k in ('criterion', 'status', 'estimate', 'tolerance', 'detail')} for e in entries]
    artifacts = [write_csv(out_dir / 'verify.csv', rows),
                 write_json(out_dir / 'verify.json', {'paths': paths, 'criteria': entries})]
    code = exit_code([e['status'] for e in entries])
    return code, {'criteria': entries, 'artifacts': artifacts, 'exit_code': code}
