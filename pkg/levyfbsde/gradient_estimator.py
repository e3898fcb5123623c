"""
Three estimators of grad_x v(t, x) h:

  bel          E[phi(X_T) U_T^h] - E[int_t^T psi(s, X, v, z[v]) U_s^h ds], no derivative of phi or psi
  fd           central difference of the mild map with common event streams
  variational  the linear backward equation for grad Y, solved in mild form (needs smooth psi, phi)

and the gradient-scaling experiment on Lipschitz-only data.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from levyfbsde import rng as rng_streams
from levyfbsde.bsde_engine import (
    SolveConfig, mild_value_at, nonlocal_field, nonlocal_term, solve_value_function,
)
from levyfbsde.config import Config
from levyfbsde.errors import CapabilityError, DomainError
from levyfbsde.forward_flow import PathBatch, iter_batches, simulate_batch, truncation_windows
from levyfbsde.levy_model import StableLikeMeasure, shell_rules
from levyfbsde.malliavin_weights import schedule_epsilon, schedule_weights, weight_moment_scaling
from levyfbsde.model_coefficients import ModelCoefficients
from levyfbsde.value_function import ValueFunction, tabulate

logger = logging.getLogger(__name__)

MAX_RESAMPLE = 5
POLICIES = ('resample', 'drop')


@dataclass
class GradientEstimate:
    value: float
    stderr: float
    n_paths: int
    method: str
    schedule: str = ''
    diagnostics: Dict = field(default_factory=dict)

    def to_row(self, t: float, x, h) -> Dict:
        return {
            'method': self.method,
            't': t,
            'x': ' '.join(f'{v:.17g}' for v in np.atleast_1d(x)),
            'h': ' '.join(f'{v:.17g}' for v in np.atleast_1d(h)),
            'value': self.value,
            'stderr': self.stderr,
            'n_paths': self.n_paths,
            'schedule': self.schedule,
            'nosmalljumps_fraction': self.diagnostics.get('nosmalljumps_fraction', 0.0),
        }


def _mean_se(samples: np.ndarray) -> Tuple[float, float]:
    samples = np.asarray(samples, dtype=float)
    if len(samples) < 2:
        return float(np.mean(samples)) if len(samples) else float('nan'), float('nan')
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(len(samples)))


def _zero_estimate(method: str, n_paths: int, schedule: str = '') -> GradientEstimate:
    return GradientEstimate(0.0, 0.0, n_paths, method, schedule, {'zero_direction': True})


# ---------------------------------------------------------------------------
# BEL
# ---------------------------------------------------------------------------

def bel_time_nodes(t: float, T: float, beta: float, n_nodes: int, schedule: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nodes and weights for int_t^T f(s) ds. Under the singular schedule s = t + (T - t) w^gamma,
    gamma = beta / (beta - 1), with midpoints in w, so that (s - t)^(-1/beta) ds stays bounded in w.
    """
    w = (np.arange(n_nodes) + 0.5) / n_nodes
    if schedule == 'singular':
        if not beta > 1.0:
            raise DomainError(f"singular time quadrature needs beta > 1, got {beta}")
        gamma = beta / (beta - 1.0)
        return t + (T - t) * w ** gamma, (T - t) * gamma * w ** (gamma - 1.0) / n_nodes
    return t + (T - t) * w, np.full(n_nodes, (T - t) / n_nodes)


def _bel_samples(batch: PathBatch, c: ModelCoefficients, m: StableLikeMeasure, t: float, T: float, h,
                 nodes: np.ndarray, weights: np.ndarray, schedule: str, epsilon: Optional[float],
                 v: Optional[Callable], z: Optional[Callable]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-path phi(X_T) U_T - sum_j w_j psi(s_j) U_{s_j}, and the paths to discard"""
    all_nodes = np.append(nodes, T)
    U, flagged = schedule_weights(batch, t, all_nodes, schedule, h, c, m, epsilon)
    U_safe = np.nan_to_num(U)
    with np.errstate(all='ignore'):
        total = c.phi(batch.final_states) * U_safe[:, -1]
    bad = flagged[:, -1].copy()
    if len(nodes):
        psi = np.empty((batch.n_paths, len(nodes)))
        for j, s in enumerate(nodes):
            X, _ = batch.state_at(s)
            if c.driver.depends_on_yz:
                y, zz = v(s, X), z(s, X)
            else:
                y = zz = np.zeros(batch.n_paths)
            psi[:, j] = c.psi(s, X, y, zz)
        total = total - np.sum(psi * weights * U_safe[:, :-1], axis=1)
        bad |= np.any(flagged[:, :-1], axis=1)
    bad |= ~batch.valid | ~np.isfinite(total)
    return total, bad


def bel_gradient(c: ModelCoefficients, m: StableLikeMeasure, t: float, x, h, T: float,
                 v: Optional[Callable] = None, schedule: str = 'singular', n_paths: int = 10000,
                 time_nodes: int = 16, rng_seed: int = 0, epsilon: Optional[float] = None,
                 policy: str = 'resample', n_steps: int = 20, r_min: Optional[float] = None) -> GradientEstimate:
    """
    grad_x v(t, x) h by the Bismut-Elworthy-Li weights. The small-jump cut is graded in time so
    the zeta core of every quadrature node is populated (see forward_flow.truncation_windows).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if policy not in POLICIES:
        raise DomainError(f"unknown NoSmallJumps policy '{policy}' (expected one of {POLICIES})")
    if schedule == 'singular' and not 1.0 < m.beta < 2.0:
        raise DomainError(f"singular schedule needs beta in (1, 2), got {m.beta}")
    if c.driver.depends_on_yz and v is None:
        raise DomainError("driver depends on (y, z): pass the solved value function v")
    if not np.any(h):
        return _zero_estimate('bel', n_paths, schedule)

    if c.driver.is_zero:
        nodes, weights = np.empty(0), np.empty(0)
    else:
        nodes, weights = bel_time_nodes(t, T, m.beta, time_nodes, schedule)
    all_nodes = np.append(nodes, T)
    windows = truncation_windows(m, t, T, all_nodes,
                                 schedule_epsilon(schedule, t, all_nodes, T, m.beta, epsilon))
    z = None
    if c.driver.depends_on_yz:
        radius = m.truncation_radius if r_min is None else r_min
        if isinstance(v, ValueFunction):
            z = nonlocal_field(v, c, m, radius)
        else:
            z = lambda s, X: nonlocal_term(v, c, m, s, X, radius)  # noqa: E731

    kept: List[np.ndarray] = []
    n_bad = resampled = dropped = 0
    for batch in iter_batches(m, c, t, x, T, n_steps, rng_seed, n_paths, extra_nodes=nodes,
                              stream_keys=(rng_streams.BEL,), windows=windows):
        vals, bad = _bel_samples(batch, c, m, t, T, h, nodes, weights, schedule, epsilon, v, z)
        kept.append(vals[~bad])
        if not bad.any():
            continue
        n_bad += int(np.count_nonzero(bad))
        if policy == 'drop':
            dropped += int(np.count_nonzero(bad))
            continue
        ids = batch.path_ids[bad]
        for attempt in range(1, MAX_RESAMPLE + 1):
            redo = simulate_batch(m, c, t, x, T, n_steps, rng_seed, ids, nodes,
                                  (rng_streams.BEL, rng_streams.RESAMPLE, attempt), windows=windows)
            vals2, bad2 = _bel_samples(redo, c, m, t, T, h, nodes, weights, schedule, epsilon, v, z)
            kept.append(vals2[~bad2])
            resampled += int(np.count_nonzero(~bad2))
            ids = ids[bad2]
            if not len(ids):
                break
        dropped += len(ids)

    fraction = n_bad / max(n_paths, 1)
    if fraction > Config.NOSMALLJUMPS_CAP:
        logger.warning("NoSmallJumps on %.4f of paths (cap %.1e); policy %s", fraction,
                       Config.NOSMALLJUMPS_CAP, policy)
    elif n_bad:
        logger.info("NoSmallJumps on %d paths: %d resampled, %d dropped", n_bad, resampled, dropped)
    samples = np.concatenate(kept) if kept else np.empty(0)
    value, se = _mean_se(samples)
    return GradientEstimate(value, se, len(samples), 'bel', schedule, {
        'nosmalljumps_fraction': fraction,
        'resampled': resampled,
        'dropped': dropped,
        'time_nodes': int(len(nodes)),
        'expected_events': windows.expected_events(m),
        'policy': policy,
    })


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def _solved_fields(c: ModelCoefficients, m: StableLikeMeasure, t: float, T: float, v: Optional[ValueFunction],
                   cfg: Optional[SolveConfig], rng_seed: int):
    cfg = cfg or SolveConfig(horizon=T)
    if v is None:
        v, _ = solve_value_function(c, m, t, replace(cfg, horizon=T), rng_seed)
    radius = m.truncation_radius if cfg.r_min is None else cfg.r_min
    return v, nonlocal_field(v, c, m, radius), cfg


def fd_gradient(c: ModelCoefficients, m: StableLikeMeasure, t: float, x, h, T: float, n_paths: int,
                rng_seed: int, delta: Optional[float] = None, v: Optional[ValueFunction] = None,
                cfg: Optional[SolveConfig] = None, n_steps: int = 20) -> GradientEstimate:
    """[v(t, x + delta h) - v(t, x - delta h)] / (2 delta), both sides on the same event streams"""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if delta is None:
        delta = 1e-3 * (1.0 + float(np.linalg.norm(x)))
    if delta <= 0.0:
        raise DomainError("finite-difference step must be positive")
    if not np.any(h):
        return _zero_estimate('fd', n_paths)
    z = None
    if c.driver.depends_on_yz:
        v, z, _ = _solved_fields(c, m, t, T, v, cfg, rng_seed)
    est = mild_value_at(c, m, t, np.stack([x + delta * h, x - delta * h]), T, None, v, z, n_paths, n_steps,
                        rng_seed, stream_keys=(rng_streams.FINITE_DIFF,), keep_samples=True)
    diff = (est.samples[0] - est.samples[1]) / (2.0 * delta)
    diff = diff[np.isfinite(diff)]
    value, se = _mean_se(diff)
    return GradientEstimate(value, se, len(diff), 'fd', '', {'delta': delta})


# ---------------------------------------------------------------------------
# Variational equation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class VectorField:
    """(s, x) -> R^d from one ValueFunction per component"""
    parts: List[ValueFunction]

    def __call__(self, s, x) -> np.ndarray:
        return np.stack([p(s, x) for p in self.parts], axis=-1)

    @staticmethod
    def from_values(times, axes, values: np.ndarray, label: str = 'g') -> 'VectorField':
        """values has shape (n_times, *axis sizes, d)"""
        return VectorField([ValueFunction(times, axes, values[..., i], f'{label}{i}')
                            for i in range(values.shape[-1])])


def gradient_nonlocal(g: Callable, c: ModelCoefficients, m: StableLikeMeasure, s: float, pts: np.ndarray,
                      r_min: float = 0.0) -> np.ndarray:
    """
    grad_x z[v](s, x) = int (g(s, x + sigma u)(I + D sigma[u]) - g(s, x)) l(u) nu(du) with g = grad v;
    rows (n, d).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    d = pts.shape[-1]
    sig = c.sigma(s, pts)
    gs = c.grad_sigma(s, pts)
    g0 = g(s, pts)
    total = np.zeros_like(pts)
    eye = np.eye(d)
    for kind, rule in shell_rules(m, r_min):
        step = np.einsum('nab,qb->nqa', sig, rule.nodes)
        dsu = np.einsum('nabc,qb->nqac', gs, rule.nodes)
        up = np.einsum('nqa,nqac->nqc', g(s, pts[:, None] + step), eye + dsu)
        if kind == 'inner':
            down = np.einsum('nqa,nqac->nqc', g(s, pts[:, None] - step), eye - dsu)
            diff = 0.5 * (up - down)
        else:
            diff = up - g0[:, None]
        total += np.einsum('nqc,q->nc', diff, c.l(rule.nodes) * rule.weights)
    return total


def _variational_rows(batch: PathBatch, c: ModelCoefficients, g: Optional[Callable] = None,
                      zg: Optional[Callable] = None, v: Optional[Callable] = None,
                      z: Optional[Callable] = None) -> np.ndarray:
    """
    grad phi(X_T) grad X_T - int_t^T [grad_x psi + d_y psi g + d_z psi zg] grad X ds per path,
    rows (n, d); trapezoid from X(tau_k) to the left limit X(tau_{k+1}-).
    """
    rows = np.einsum('na,nab->nb', c.grad_phi(batch.final_states), batch.final_jacobians)
    if c.driver.is_zero:
        return rows
    depends = c.driver.depends_on_yz

    def integrand(states, jacs, times):
        if depends:
            y, zz = v(times, states), z(times, states)
        else:
            y = zz = np.zeros(times.shape)
        gx, dy, dz = c.grad_psi(times, states, y, zz)
        r = np.asarray(gx, dtype=float)
        if depends:
            r = r + np.asarray(dy)[..., None] * g(times, states) + np.asarray(dz)[..., None] * zg(times, states)
        return np.einsum('nla,nlab->nlb', r, jacs)

    start = integrand(batch.states[:, :-1], batch.jacobians[:, :-1], batch.times[:, :-1])
    end = integrand(batch.left_states[:, 1:], batch.left_jacobians[:, 1:], batch.times[:, 1:])
    dt = np.diff(batch.times, axis=1)[..., None]
    return rows - np.sum(0.5 * (start + end) * dt, axis=1)


def _variational_samples(c, m, t, x, T, n_paths, n_steps, rng_seed, keys, g=None, zg=None, v=None, z=None):
    """Per-start mean rows (G, d), and the valid rows of the first start"""
    starts = np.atleast_2d(x)
    G, d = starts.shape
    sums = np.zeros((G, d))
    counts = np.zeros(G)
    first = []
    for batch in iter_batches(m, c, t, starts, T, n_steps, rng_seed, n_paths, stream_keys=keys):
        rows = _variational_rows(batch, c, g, zg, v, z).reshape(G, -1, d)
        ok = (batch.valid.reshape(G, -1)) & np.all(np.isfinite(rows), axis=-1)
        sums += np.where(ok[..., None], rows, 0.0).sum(axis=1)
        counts += ok.sum(axis=1)
        first.append(rows[0][ok[0]])
    return sums / np.maximum(counts, 1)[:, None], np.concatenate(first)


def variational_gradient(c: ModelCoefficients, m: StableLikeMeasure, t: float, x, h, T: float, n_paths: int,
                         rng_seed: int, v: Optional[ValueFunction] = None, cfg: Optional[SolveConfig] = None,
                         n_steps: int = 20) -> GradientEstimate:
    """
    grad Y(t, t, x) h from the variational backward equation. When psi does not depend on (y, z)
    this is one expectation; otherwise grad v is the fixed point of the linear mild map on the
    grid of v, iterated like picard_step.
    """
    if c.smoothness != 'BD':
        raise CapabilityError(f"variational gradient needs differentiable psi and phi; model '{c.name}' is BL")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if not np.any(h):
        return _zero_estimate('variational', n_paths)
    keys = (rng_streams.VARIATIONAL,)
    if not c.driver.depends_on_yz:
        _, rows = _variational_samples(c, m, t, x, T, n_paths, n_steps, rng_seed, keys)
        value, se = _mean_se(rows @ h)
        return GradientEstimate(value, se, len(rows), 'variational', '', {'iterates': 1})

    v, z, cfg = _solved_fields(c, m, t, T, v, cfg, rng_seed)
    radius = m.truncation_radius if cfg.r_min is None else cfg.r_min
    times, axes = v.times, v.axes
    pts = v.grid_points()
    d = c.dim
    shape = (len(times),) + tuple(len(a) for a in axes) + (d,)
    values = np.zeros(shape)
    values[-1] = c.grad_phi(pts).reshape(shape[1:])
    g = VectorField.from_values(times, axes, values)
    diffs = []
    for n in range(cfg.iterates_max):
        zg_values = np.stack([gradient_nonlocal(g, c, m, s, pts, radius).reshape(shape[1:]) for s in times])
        zg = VectorField.from_values(times, axes, zg_values, 'zg')
        new = values.copy()
        for j, s in enumerate(times[:-1]):
            means, _ = _variational_samples(c, m, float(s), pts, float(times[-1]), cfg.paths_per_node,
                                            cfg.n_steps, rng_seed, keys + (j,), g, zg, v, z)
            new[j] = means.reshape(shape[1:])
        diffs.append(float(np.max(np.abs(new - values))))
        values = new
        g = VectorField.from_values(times, axes, values)
        logger.info("variational iterate %d: sup diff %.4g", n + 1, diffs[-1])
        if diffs[-1] < cfg.tol:
            break
    zg = VectorField.from_values(times, axes, np.stack(
        [gradient_nonlocal(g, c, m, s, pts, radius).reshape(shape[1:]) for s in times]), 'zg')
    _, rows = _variational_samples(c, m, t, x, T, n_paths, n_steps, rng_seed, keys, g, zg, v, z)
    value, se = _mean_se(rows @ h)
    return GradientEstimate(value, se, len(rows), 'variational', '', {'iterates': len(diffs), 'sup_diffs': diffs})


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def gradient_scaling_experiment(c: ModelCoefficients, m: StableLikeMeasure, x, h, horizons: Sequence[float],
                                n_paths: int, rng_seed: int, time_nodes: int = 16, mu: float = 1.0,
                                cfg: Optional[SolveConfig] = None) -> Dict:
    """
    |bel_gradient| against T - t on log-log axes with the envelope C (T - t)^(-1/beta) (1 + |x|)^mu,
    C fitted at the longest horizon; plus the slope of E|U_T^h| (expected -1/beta).
    """
    if not 1.0 < m.beta < 2.0:
        raise DomainError(f"gradient scaling needs beta in (1, 2), got {m.beta}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    horizons = np.sort(np.asarray(horizons, dtype=float))
    growth = (1.0 + float(np.linalg.norm(x))) ** mu
    rows = []
    for H in horizons:
        v = None
        if c.driver.depends_on_yz:
            v, _ = solve_value_function(c, m, 0.0, replace(cfg or SolveConfig(), horizon=float(H)), rng_seed)
        est = bel_gradient(c, m, 0.0, x, h, float(H), v=v, n_paths=n_paths, time_nodes=time_nodes,
                           rng_seed=rng_seed)
        rows.append({'horizon': float(H), 'value': est.value, 'stderr': est.stderr,
                     'scaled': abs(est.value) * H ** (1.0 / m.beta) / growth,
                     'nosmalljumps_fraction': est.diagnostics['nosmalljumps_fraction']})
    longest = rows[-1]
    C = (abs(longest['value']) + 3.0 * longest['stderr']) * longest['horizon'] ** (1.0 / m.beta) / growth
    for row in rows:
        row['envelope'] = C * row['horizon'] ** (-1.0 / m.beta) * growth
        row['below_envelope'] = abs(row['value']) - 3.0 * row['stderr'] <= row['envelope']
    weights = weight_moment_scaling(m, c, 0.0, x, h, 1.0, horizons, n_paths, rng_seed)
    slope = weights['by_power'][1.0]['slope']
    expected = -1.0 / m.beta
    return {
        'rows': rows,
        'C': C,
        'mu': mu,
        'envelope_holds': all(r['below_envelope'] for r in rows),
        'weight_slope': slope,
        'weight_slope_stderr': weights['by_power'][1.0]['slope_stderr'],
        'expected_slope': expected,
        'slope_ok': abs(slope - expected) <= 0.15,
        'passed': all(r['below_envelope'] for r in rows) and abs(slope - expected) <= 0.15,
    }


def bel_variance_diagnostic(c: ModelCoefficients, m: StableLikeMeasure, t: float, x, h,
                            horizons: Sequence[float], n_paths: int, rng_seed: int) -> Dict:
    """Regression of log Var(U_s^h) on log(s - t); the weight has mean zero, so Var = E|U|^2"""
    report = weight_moment_scaling(m, c, t, x, h, 2.0, horizons, n_paths, rng_seed)
    fit = report['by_power'][2.0]
    slope = 2.0 * fit['slope']
    expected = -2.0 / m.beta
    return {
        'variances': (np.asarray(fit['moments']) ** 2).tolist(),
        'slope': slope,
        'slope_stderr': 2.0 * fit['slope_stderr'],
        'expected_slope': expected,
        'passed': abs(slope - expected) <= 0.3,
    }
