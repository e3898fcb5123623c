"""
Backward equation solver.

The Picard scheme Y^0 = 0, Z^0 = 0, Y^{n+1} = phi(X_T) - int psi(s, X, Y^n, int Z^n l dnu) ds - int Z dN~
is run in mild form on a value-function grid:

    v_{n+1}(s, x) = E[phi(X(T, s, x))] - E[int_s^T psi(tau, X, v_n(tau, X), z[v_n](tau, X)) dtau]

with z[v](s, x) = int (v(s, x + sigma u) - v(s, x)) l(u) nu(du). Every slice reuses the same
event streams in every iteration (common random numbers), so the sup-norm differences
between iterates measure the contraction of the map and not Monte Carlo noise.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from levyfbsde import rng as rng_streams
from levyfbsde.errors import DomainError, HorizonSplitError, InterpolationError, PicardStepError
from levyfbsde.forward_flow import PathBatch, PathRecord, iter_batches
from levyfbsde.levy_model import StableLikeMeasure, shell_rules
from levyfbsde.model_coefficients import ModelCoefficients
from levyfbsde.value_function import ValueFunction, make_grid, stitch, tabulate

logger = logging.getLogger(__name__)


@dataclass
class SolveConfig:
    horizon: float = 1.0
    box: float = 4.0
    space_nodes: int = 41
    time_slices: int = 11
    paths_per_node: int = 200
    n_steps: int = 20
    iterates_max: int = 8
    tol: float = 1e-3
    splits: int = 1
    r_min: Optional[float] = None     # lower radius of z[v]; None means the simulated cut delta0


@dataclass
class BsdeSolveReport:
    iterates: int = 0
    sup_diffs: List[float] = field(default_factory=list)
    contraction_ratios: List[float] = field(default_factory=list)
    norm_estimates: Dict[str, float] = field(default_factory=dict)
    invalid_fraction: float = 0.0
    box_exit_fraction: float = 0.0
    splits: int = 1
    chunks: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class MildEstimate:
    values: np.ndarray
    stderr: np.ndarray
    n_paths: int
    invalid_fraction: float
    samples: Optional[np.ndarray] = None


def _r_min(m: StableLikeMeasure, r_min: Optional[float]) -> float:
    return m.truncation_radius if r_min is None else float(r_min)


# ---------------------------------------------------------------------------
# Nonlocal driver argument
# ---------------------------------------------------------------------------

def nonlocal_term(v: Callable, c: ModelCoefficients, m: StableLikeMeasure, s: float, x,
                  r_min: float = 0.0) -> np.ndarray:
    """
    z[v](s, x) = int_{r_min < |u| <= 1} (v(s, x + sigma(s, x) u) - v(s, x)) l(u) nu(du).
    With r_min = 0 the disc |u| <= delta_q uses the first-order form grad v . sigma u l(u),
    its directional derivative taken as a central difference.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    sig = c.sigma(s, pts)
    v0 = np.asarray(v(s, pts), dtype=float)
    total = np.zeros(len(pts))
    for kind, rule in shell_rules(m, r_min):
        step = np.einsum('nab,qb->nqa', sig, rule.nodes)
        if kind == 'inner':
            diff = 0.5 * (np.asarray(v(s, pts[:, None, :] + step)) - np.asarray(v(s, pts[:, None, :] - step)))
        else:
            diff = np.asarray(v(s, pts[:, None, :] + step), dtype=float) - v0[:, None]
        total += diff @ (c.l(rule.nodes) * rule.weights)
    return total[0] if single else total


def nonlocal_field(v: ValueFunction, c: ModelCoefficients, m: StableLikeMeasure,
                   r_min: float = 0.0) -> ValueFunction:
    """z[v] tabulated on the grid of v"""
    z = tabulate(lambda s, pts: nonlocal_term(v, c, m, s, pts, r_min), v.times, v.axes, label='z')
    return z


def zero_field(times: Sequence[float], axes) -> ValueFunction:
    return ValueFunction(np.asarray(times), axes, np.zeros((len(times),) + tuple(len(a) for a in axes)), 'zero')


# ---------------------------------------------------------------------------
# Mild map at points
# ---------------------------------------------------------------------------

def driver_along(batch: PathBatch, c: ModelCoefficients, v: Optional[Callable],
                 z: Optional[Callable]) -> np.ndarray:
    """
    int_s^T psi(tau, X, v(tau, X), z(tau, X)) dtau per path: trapezoid on the path grid,
    each step taken from X(tau_k) to the left limit X(tau_{k+1}-).
    """
    if c.driver.is_zero:
        return np.zeros(batch.n_paths)
    t = batch.times

    def psi_on(states, times):
        if c.driver.depends_on_yz and v is not None:
            y = v(times, states)
            zz = z(times, states) if z is not None else np.zeros(times.shape)
        else:
            y = zz = np.zeros(times.shape)
        return c.psi(times, states, y, zz)

    f_start = psi_on(batch.states[:, :-1], t[:, :-1])
    f_end = psi_on(batch.left_states[:, 1:], t[:, 1:])
    dt = np.diff(t, axis=1)
    return np.sum(0.5 * (f_start + f_end) * dt, axis=1)


def mild_value_at(c: ModelCoefficients, m: StableLikeMeasure, s: float, starts, T: float,
                  terminal: Optional[Callable], v: Optional[Callable], z: Optional[Callable],
                  n_paths: int, n_steps: int, rng_seed: int, stream_keys: Tuple = (),
                  keep_samples: bool = False) -> MildEstimate:
    """
    E[terminal(X_T)] - E[int_s^T psi(...)] from each start point, with shared event streams
    across start points.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    terminal = terminal or c.phi
    G = len(starts)
    sums = np.zeros(G)
    sq = np.zeros(G)
    counts = np.zeros(G)
    samples = [] if keep_samples else None
    invalid = 0
    total = 0
    for batch in iter_batches(m, c, s, starts, T, n_steps, rng_seed, n_paths, stream_keys=stream_keys):
        vals = terminal(batch.final_states) - driver_along(batch, c, v, z)
        ok = batch.valid & np.isfinite(vals)
        invalid += int(np.count_nonzero(~ok))
        total += batch.n_paths
        vals = np.where(ok, vals, 0.0).reshape(G, -1)
        ok = ok.reshape(G, -1)
        sums += vals.sum(axis=1)
        sq += (vals ** 2).sum(axis=1)
        counts += ok.sum(axis=1)
        if keep_samples:
            samples.append(np.where(ok, vals, np.nan))
    mean = sums / np.maximum(counts, 1)
    var = np.maximum(sq / np.maximum(counts, 1) - mean ** 2, 0.0)
    stderr = np.sqrt(var / np.maximum(counts - 1, 1))
    return MildEstimate(mean, stderr, int(counts.min()), invalid / max(total, 1),
                        np.concatenate(samples, axis=1) if keep_samples else None)


# ---------------------------------------------------------------------------
# Picard iteration
# ---------------------------------------------------------------------------

def picard_step(v_n: ValueFunction, z_n: Optional[ValueFunction], c: ModelCoefficients, m: StableLikeMeasure,
                paths_per_node: int, n_steps: int, rng_seed: int,
                terminal: Optional[Callable] = None, r_min: Optional[float] = None) -> Tuple[ValueFunction, float]:
    """
    One sweep of the mild map over every grid node; returns (v_{n+1}, invalid fraction).
    Without z_n the nonlocal argument is computed from v_n with inner radius r_min (default delta0).
    """
    terminal = terminal or c.phi
    if z_n is None and c.driver.depends_on_yz:
        z_n = nonlocal_field(v_n, c, m, _r_min(m, r_min))
    pts = v_n.grid_points()
    T = float(v_n.times[-1])
    shape = v_n.values.shape[1:]
    values = np.empty_like(v_n.values)
    values[-1] = np.asarray(terminal(pts)).reshape(shape)
    worst = 0.0
    for j, s in enumerate(v_n.times[:-1]):
        est = mild_value_at(c, m, float(s), pts, T, terminal, v_n, z_n, paths_per_node, n_steps,
                            rng_seed, stream_keys=(rng_streams.PICARD, j))
        worst = max(worst, est.invalid_fraction)
        if est.invalid_fraction > 0.01:
            raise PicardStepError(f"{est.invalid_fraction:.2%} invalid paths at slice s={s:.4g}")
        values[j] = est.values.reshape(shape)
    return v_n.with_values(values), worst


def _solve_chunk(c: ModelCoefficients, m: StableLikeMeasure, times: np.ndarray, axes, cfg: SolveConfig,
                 rng_seed: int, terminal: Optional[Callable], report: BsdeSolveReport) -> ValueFunction:
    r_min = _r_min(m, cfg.r_min)
    v = zero_field(times, axes)
    z = zero_field(times, axes)
    diffs: List[float] = []
    ratios: List[float] = []
    streak = 0
    single_sweep = not c.driver.depends_on_yz
    for n in range(cfg.iterates_max):
        v_next, invalid = picard_step(v, z, c, m, cfg.paths_per_node, cfg.n_steps, rng_seed, terminal,
                                      r_min=r_min)
        report.invalid_fraction = max(report.invalid_fraction, invalid)
        diff = v_next.sup_diff(v)
        diffs.append(diff)
        if len(diffs) > 1:
            ratio = diff / diffs[-2] if diffs[-2] > 0 else 0.0
            ratios.append(ratio)
            streak = streak + 1 if ratio >= 1.0 else 0
            logger.info("Picard iterate %d: sup diff %.4g, ratio %.3f", n + 1, diff, ratio)
        else:
            logger.info("Picard iterate %d: sup diff %.4g", n + 1, diff)
        v = v_next
        if streak >= 3:
            raise HorizonSplitError(
                f"Picard ratios {ratios[-3:]} >= 1 on [{times[0]:.4g}, {times[-1]:.4g}]; "
                "shorten the horizon or raise 'splits'")
        if single_sweep or (len(diffs) > 1 and diff < cfg.tol):
            break
        if c.driver.depends_on_yz:
            z = nonlocal_field(v, c, m, r_min)
    report.chunks.append({'span': [float(times[0]), float(times[-1])], 'sup_diffs': diffs,
                          'contraction_ratios': ratios})
    report.iterates += len(diffs)
    report.sup_diffs.extend(diffs)
    report.contraction_ratios.extend(ratios)
    return v


def solve_value_function(c: ModelCoefficients, m: StableLikeMeasure, t_min: float, cfg: SolveConfig,
                         rng_seed: int) -> Tuple[ValueFunction, BsdeSolveReport]:
    """
    Iterate picard_step to a fixed point on [t_min, T]. With cfg.splits = k the horizon is cut
    into k pieces solved backward, each using the previous solution as terminal data.
    """
    T = cfg.horizon
    if not t_min < T:
        raise DomainError(f"need t_min < T, got {t_min} >= {T}")
    axes = make_grid(cfg.box, cfg.space_nodes, c.dim)
    edges = np.linspace(t_min, T, cfg.splits + 1)
    per_chunk = max(2, int(math.ceil((cfg.time_slices - 1) / cfg.splits)) + 1)
    report = BsdeSolveReport(splits=cfg.splits)
    parts: List[ValueFunction] = []
    terminal = None
    for k in range(cfg.splits, 0, -1):
        times = np.linspace(edges[k - 1], edges[k], per_chunk)
        part = _solve_chunk(c, m, times, axes, cfg, rng_seed + 7919 * (cfg.splits - k), terminal, report)
        parts.append(part)
        t_k = float(edges[k - 1])
        terminal = (lambda vf, tk: (lambda x: vf(tk, x)))(part, t_k)
    v = stitch(parts, label='v')
    report.box_exit_fraction = max(p.exit_fraction for p in parts)
    if report.box_exit_fraction > 1e-3:
        logger.warning("%.3f%% of value-function queries left the box [-%g, %g]",
                       100 * report.box_exit_fraction, cfg.box, cfg.box)
    report.norm_estimates = solution_norms(v, c, m, t_min, np.zeros(c.dim), min(cfg.paths_per_node, 200),
                                           cfg.n_steps, rng_seed, r_min=_r_min(m, cfg.r_min))
    return v, report


# ---------------------------------------------------------------------------
# Pathwise Y, Z and norms
# ---------------------------------------------------------------------------

class ZRepresentation:
    """Z(tau_k, u) = v(tau_k, X + sigma(tau_k, X) u) - v(tau_k, X) along one path"""

    def __init__(self, path: PathRecord, v: Callable, c: ModelCoefficients):
        self.path = path
        self.v = v
        self.c = c

    def __call__(self, k: int, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.ndim == 0:
            u = u[None]
        tk = self.path.grid[k]
        x = self.path.states[k]
        s = self.c.sigma(tk, x[None])[0]
        shifted = x + np.einsum('ab,...b->...a', s, u)
        return np.asarray(self.v(tk, shifted)) - np.asarray(self.v(tk, x[None]))[0]


def pathwise_yz(path: PathRecord, v: Callable, c: ModelCoefficients) -> Tuple[np.ndarray, ZRepresentation]:
    """Y(tau_k) = v(tau_k, X(tau_k)) and the Z evaluator"""
    if isinstance(v, ValueFunction):
        if not v.covers(path.grid):
            raise InterpolationError("path runs outside the time span of v")
        lo, hi = v.box
        exits = int(np.count_nonzero(np.any((path.states < lo) | (path.states > hi), axis=-1)))
        if exits:
            logger.info("path leaves the spatial box at %d of %d nodes; extension used", exits, len(path.grid))
    Y = np.asarray(v(path.grid, path.states), dtype=float)
    return Y, ZRepresentation(path, v, c)


def z_square_integrals(batch: PathBatch, v: Callable, c: ModelCoefficients, m: StableLikeMeasure,
                       r_min: float = 0.0, with_driver_integral: bool = False):
    """
    Per path and node: int |Z(tau_k, u)|^2 nu(du), optionally also int Z l dnu.
    The disc |u| <= delta_q (when r_min = 0) uses the first-order form of Z.
    """
    rules = shell_rules(m, r_min)
    n, L, d = batch.states.shape
    X = batch.states.reshape(-1, d)
    tt = batch.times.reshape(-1)
    sig = c.sigma(tt, X)
    v0 = np.asarray(v(tt, X))
    sq = np.zeros(n * L)
    lin = np.zeros(n * L)
    for kind, rule in rules:
        step = np.einsum('nab,qb->nqa', sig, rule.nodes)
        times = np.broadcast_to(tt[:, None], step.shape[:-1])
        if kind == 'inner':
            Z = 0.5 * (np.asarray(v(times, X[:, None] + step)) - np.asarray(v(times, X[:, None] - step)))
        else:
            Z = np.asarray(v(times, X[:, None] + step)) - v0[:, None]
        sq += (Z ** 2) @ rule.weights
        lin += Z @ (c.l(rule.nodes) * rule.weights)
    if with_driver_integral:
        return sq.reshape(n, L), lin.reshape(n, L)
    return sq.reshape(n, L)


def norm_estimators(times: np.ndarray, Y: np.ndarray, z_sq: np.ndarray, p: float = 2.0,
                    rho: float = 0.0) -> Dict[str, float]:
    """
    ||Y||_S^p = E[sup |Y|^p]^(1/p), ||Z||_M^p = E[(int int |Z|^2 nu dtau)^(p/2)]^(1/p),
    and the e^(rho tau) weighted versions; z_sq holds int |Z(tau_k, u)|^2 nu(du) per node.
    """
    dt = np.diff(times, axis=1)
    weight = np.exp(rho * times)
    z_int = np.sum(z_sq[:, :-1] * dt, axis=1)
    z_int_w = np.sum((weight * z_sq)[:, :-1] * dt, axis=1)
    return {
        'S': float(np.mean(np.max(np.abs(Y), axis=1) ** p) ** (1.0 / p)),
        'M': float(np.mean(z_int ** (p / 2.0)) ** (1.0 / p)),
        'S_weighted': float(np.mean(np.max(weight * np.abs(Y) ** p, axis=1)) ** (1.0 / p)),
        'M_weighted': float(np.mean(z_int_w ** (p / 2.0)) ** (1.0 / p)),
        'n_paths': int(len(Y)),
        'p': p,
        'rho': rho,
    }


def jensen_check(batch: PathBatch, v: Callable, c: ModelCoefficients, m: StableLikeMeasure,
                 r_min: float = 0.0) -> Dict[str, float]:
    """|int Z l dnu|^2 <= M(O) int |Z|^2 dnu node by node, M(O) = int l^2 dnu"""
    z_sq, z_lin = z_square_integrals(batch, v, c, m, r_min, with_driver_integral=True)
    l_mass = sum(float(rule.integrate(c.l(rule.nodes) ** 2)) for _, rule in shell_rules(m, r_min))
    with np.errstate(all='ignore'):
        ratio = np.where(z_sq > 0, z_lin ** 2 / (l_mass * z_sq), 0.0)
    return {'l_mass': l_mass, 'max_ratio': float(np.max(ratio)), 'passed': bool(np.max(ratio) <= 1.0 + 1e-9)}


def solution_norms(v: ValueFunction, c: ModelCoefficients, m: StableLikeMeasure,
                   t: float, x, n_paths: int, n_steps: int, rng_seed: int, p: float = 2.0,
                   rho: float = 1.0, r_min: float = 0.0) -> Dict[str, float]:
    """S^2, M^2 and weighted norms of (Y, Z) = (v(X), v(X + sigma u) - v(X)) from (t, x)"""
    T = float(v.times[-1])
    Ys, Zs, Ts = [], [], []
    for batch in iter_batches(m, c, t, x, T, n_steps, rng_seed, n_paths, stream_keys=(rng_streams.NORMS,)):
        Ys.append(v(batch.times, batch.states))
        Zs.append(z_square_integrals(batch, v, c, m, r_min))
        Ts.append(batch.times)
    width = max(a.shape[1] for a in Ts)

    def pad(arrs):
        return np.concatenate([np.pad(a, ((0, 0), (0, width - a.shape[1])), mode='edge') for a in arrs])

    return norm_estimators(pad(Ts), pad(Ys), pad(Zs), p, rho)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def martingale_residual(v: ValueFunction, z: Optional[ValueFunction], c: ModelCoefficients,
                        m: StableLikeMeasure, t: float, x, n_paths: int, rng_seed: int,
                        n_steps: int = 20) -> Tuple[float, float]:
    """Mean and standard error of v(t, x) + int_t^T psi(s, X, v, z) ds - phi(X_T)"""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    T = float(v.times[-1])
    est = mild_value_at(c, m, t, x, T, None, v, z, n_paths, n_steps, rng_seed,
                        stream_keys=(rng_streams.RESIDUAL,))
    y0 = float(v(t, x[None])[0])
    return y0 - float(est.values[0]), float(est.stderr[0])


def apriori_check(v: ValueFunction, z: Optional[ValueFunction], c: ModelCoefficients, m: StableLikeMeasure,
                  t: float, xs: Sequence, n_paths: int, rng_seed: int, p: float = 2.0,
                  n_steps: int = 20, r_min: float = 0.0) -> Dict:
    """
    LHS = E[sup |Y|^p + (int int |Z|^2 nu dtau)^(p/2)],
    RHS = E[(int |psi(s, X, 0, 0)|^2 ds)^(p/2)] + E[|phi(X_T)|^p], per starting point.
    """
    T = float(v.times[-1])
    rows = []
    for x in xs:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lhs, rhs, count = 0.0, 0.0, 0
        for batch in iter_batches(m, c, t, x, T, n_steps, rng_seed, n_paths, stream_keys=(rng_streams.NORMS, 1)):
            Y = v(batch.times, batch.states)
            z_sq = z_square_integrals(batch, v, c, m, r_min)
            dt = np.diff(batch.times, axis=1)
            z_int = np.sum(z_sq[:, :-1] * dt, axis=1)
            zeros = np.zeros(batch.times.shape)
            psi0 = c.psi(batch.times, batch.states, zeros, zeros)
            psi_int = np.sum((psi0[:, :-1] ** 2) * dt, axis=1)
            lhs += float(np.sum(np.max(np.abs(Y), axis=1) ** p + z_int ** (p / 2.0)))
            rhs += float(np.sum(psi_int ** (p / 2.0) + np.abs(c.phi(batch.final_states)) ** p))
            count += batch.n_paths
        lhs, rhs = lhs / count, rhs / count
        ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else float('inf'))
        rows.append({'x': x.tolist(), 'lhs': lhs, 'rhs': rhs, 'ratio': ratio})
    ratios = np.array([r['ratio'] for r in rows])
    trivial = all(r['lhs'] == 0 and r['rhs'] == 0 for r in rows)
    return {
        'rows': rows,
        'C_p': float(ratios.max()),
        'spread': float(ratios.max() / ratios.min()) if ratios.min() > 0 else float('nan'),
        'bounded': bool(trivial or np.all(np.isfinite(ratios))),
        'trivial': trivial,
    }
