"""
Bismut-Elworthy-Li weights on Poisson space by the lent-particle method.

For the cutoff zeta_eps and direction h, each jump (alpha, y) with pre-jump state X(alpha-)
and Jacobian grad X(alpha-) contributes, with
    M   = sigma^-1 (I + D sigma[y]) grad X(alpha-)
    A_i = sigma^-1 D sigma[e_i] grad X(alpha-),
the terms
    a = -sum_i (zeta d_i log k + d_i zeta) (M^T h)_i - zeta sum_i (A_i^T h)_i
    g = zeta
    b = zeta sum_i d_i zeta (M^T h)_i
and the weight is U = A / G + B / G^2 with A, G, B the sums over events in (t, tau].
These are the mark-averaged forms of the divergence and carre-du-champ terms; the
mark-sampling oracle evaluates the same quantities with explicit Rademacher marks.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from levyfbsde import rng as rng_streams
from levyfbsde.config import Config
from levyfbsde.errors import DomainError, NoSmallJumps, SingularCoefficientError
from levyfbsde.forward_flow import EventSnapshot, PathBatch, PathRecord, iter_batches, truncated_measure
from levyfbsde.levy_model import CutoffZeta, StableLikeMeasure, log_density_grad, zeta_radial
from levyfbsde.model_coefficients import ModelCoefficients

logger = logging.getLogger(__name__)

SCHEDULES = ('fixed', 'singular', 'terminal')


@dataclass
class WeightState:
    """Running sums over the events of one path in (t, tau]"""
    t: float
    tau: float
    epsilon: float
    h: np.ndarray
    A: float = 0.0
    G: float = 0.0
    B: float = 0.0

    @property
    def value(self) -> float:
        if self.G <= 0.0:
            raise NoSmallJumps(f"no jump with |y| <= 2eps/3 in ({self.t}, {self.tau}] (eps={self.epsilon:.4g})")
        return self.A / self.G + self.B / self.G ** 2

    def merge(self, later: 'WeightState') -> 'WeightState':
        """Concatenate with the window (self.tau, later.tau] of the same path"""
        if later.t != self.tau or later.epsilon != self.epsilon:
            raise DomainError("weight states must be adjacent windows with equal epsilon")
        return WeightState(self.t, later.tau, self.epsilon, self.h,
                           self.A + later.A, self.G + later.G, self.B + later.B)


@dataclass
class ScheduleResult:
    nodes: np.ndarray
    epsilons: np.ndarray
    values: np.ndarray      # nan where flagged
    flagged: np.ndarray     # NoSmallJumps at that node

    def to_rows(self) -> List[Dict]:
        return [{'tau': float(s), 'eps': float(e), 'U': None if f else float(v), 'no_small_jumps': bool(f)}
                for s, e, v, f in zip(self.nodes, self.epsilons, self.values, self.flagged)]


def schedule_epsilon(schedule: str, t: float, s, T: float, beta: float, epsilon: Optional[float] = None):
    """eps for node s: fixed, (s - t)^(1/beta) or (T - t)^(1/beta), capped at 1"""
    s = np.asarray(s, dtype=float)
    if schedule == 'fixed':
        if epsilon is None:
            raise DomainError("fixed schedule needs epsilon")
        eps = np.full(s.shape, float(epsilon))
    elif schedule == 'singular':
        eps = np.maximum(s - t, 0.0) ** (1.0 / beta)
    elif schedule == 'terminal':
        eps = np.full(s.shape, (T - t) ** (1.0 / beta))
    else:
        raise DomainError(f"unknown schedule '{schedule}' (expected one of {SCHEDULES})")
    return np.minimum(eps, 1.0)


# ---------------------------------------------------------------------------
# Per-event geometry (independent of eps)
# ---------------------------------------------------------------------------

def event_geometry(c: ModelCoefficients, m: StableLikeMeasure, ev: Dict[str, np.ndarray], h,
                   t: float, with_quadratic: bool = False) -> Dict[str, np.ndarray]:
    """
    Quantities per event that do not depend on eps: |y|, M^T h, trace term sum_i (A_i^T h)_i,
    grad log k(y). Arrays have leading shape (n, E) from PathBatch.event_arrays.
    """
    h = np.asarray(h, dtype=float)
    d = h.shape[-1]
    times = np.where(ev['mask'], ev['times'], t)
    X, J, Y = ev['left_states'], ev['left_jacobians'], ev['marks']
    with np.errstate(all='ignore'):
        try:
            s_inv = c.sigma_inv(times, X)
        except np.linalg.LinAlgError as exc:
            raise SingularCoefficientError(f"sigma not invertible at a jump pre-state: {exc}")
        gs = c.grad_sigma(times, X)
        dsy = np.einsum('...abc,...b->...ac', gs, Y)
        M = np.einsum('...ab,...bc->...ac', s_inv, np.eye(d) + dsy)
        M = np.einsum('...ab,...bc->...ac', M, J)
        mth = np.einsum('...ia,i->...a', M, h)
        P = np.einsum('...ja,j->...a', s_inv, h)
        H = np.einsum('...a,...aic,...ck->...ik', P, gs, J)
    geom = {
        'mask': ev['mask'],
        'times': ev['times'],
        'marks': Y,
        'r': np.linalg.norm(Y, axis=-1),
        'mth': mth,
        'trace': np.trace(H, axis1=-2, axis2=-1),
        'dlogk': log_density_grad(m, Y),
    }
    if with_quadratic:
        geom['H'] = H
    return geom


def terms_for_eps(geom: Dict[str, np.ndarray], eps) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(a, g, b) per event for cutoff eps (scalar or broadcastable to (n, E))"""
    r, Y = geom['r'], geom['marks']
    eps = np.asarray(eps, dtype=float)
    zeta, dzeta = zeta_radial(eps, r) if eps.ndim == 0 else zeta_radial(np.broadcast_to(eps, r.shape), r)
    in_core = geom['mask'] & (zeta > 0.0)
    with np.errstate(all='ignore'):
        grad_zeta = dzeta[..., None] * Y / np.where(r > 0, r, 1.0)[..., None]
        a = -np.sum((zeta[..., None] * geom['dlogk'] + grad_zeta) * geom['mth'], axis=-1) - zeta * geom['trace']
        b = zeta * np.sum(grad_zeta * geom['mth'], axis=-1)
    a = np.where(in_core, a, 0.0)
    b = np.where(in_core, b, 0.0)
    g = np.where(in_core, zeta, 0.0)
    return a, g, b


def _single_event_arrays(event: EventSnapshot) -> Dict[str, np.ndarray]:
    return {
        'mask': np.array([[True]]),
        'times': np.array([[event.time]]),
        'marks': np.asarray(event.mark, dtype=float)[None, None],
        'left_states': np.asarray(event.state_before, dtype=float)[None, None],
        'left_jacobians': np.asarray(event.jacobian_before, dtype=float)[None, None],
    }


def _path_event_arrays(path: PathRecord, t: float, tau: float) -> Dict[str, np.ndarray]:
    ev = path.as_batch().event_arrays(t_lo=t)
    ev['mask'] &= ev['times'] <= tau
    return ev


# ---------------------------------------------------------------------------
# Operations on a single path
# ---------------------------------------------------------------------------

def event_weight_terms(event: EventSnapshot, c: ModelCoefficients, z: CutoffZeta, h,
                       m: StableLikeMeasure) -> Tuple[float, float, float]:
    """(a_term, g_term, b_term) of one jump"""
    r = float(np.linalg.norm(event.mark))
    if r > 2.0 * z.epsilon / 3.0:
        return 0.0, 0.0, 0.0
    cond = c.dynamics.condition_number(event.time, np.asarray(event.state_before)[None])
    if not np.all(cond <= Config.CONDITION_LIMIT):
        raise SingularCoefficientError(f"sigma singular at X(alpha-)={event.state_before}")
    geom = event_geometry(c, m, _single_event_arrays(event), h, event.time)
    a, g, b = terms_for_eps(geom, z.epsilon)
    return float(a[0, 0]), float(g[0, 0]), float(b[0, 0])


def weight_state(path: PathRecord, t: float, tau: float, epsilon: float, h, c: ModelCoefficients,
                 m: StableLikeMeasure) -> WeightState:
    geom = event_geometry(c, m, _path_event_arrays(path, t, tau), h, t)
    a, g, b = terms_for_eps(geom, min(epsilon, 1.0))
    return WeightState(t, tau, epsilon, np.asarray(h, dtype=float),
                       float(a.sum()), float(g.sum()), float(b.sum()))


def accumulate_weight(path: PathRecord, t: float, tau: float, epsilon: float, h, c: ModelCoefficients,
                      m: StableLikeMeasure) -> float:
    """U = A/G + B/G^2 over events in (t, tau]; NoSmallJumps when G = 0"""
    return weight_state(path, t, tau, epsilon, h, c, m).value


def weight_schedule(path: PathRecord, t: float, nodes: Sequence[float], schedule: str, h,
                    c: ModelCoefficients, m: StableLikeMeasure, epsilon: Optional[float] = None) -> ScheduleResult:
    """U at each node under an eps schedule; zeta terms are recomputed per node"""
    nodes = np.asarray(nodes, dtype=float)
    if np.any(nodes <= t) or np.any(nodes > path.horizon):
        raise DomainError("schedule nodes must lie in (t, T]")
    values, flagged = schedule_weights(path.as_batch(), t, nodes, schedule, h, c, m, epsilon)
    eps = schedule_epsilon(schedule, t, nodes, path.horizon, m.beta, epsilon)
    return ScheduleResult(nodes, eps, values[0], flagged[0])


def mark_sampling_oracle(path: PathRecord, t: float, tau: float, epsilon: float, h, c: ModelCoefficients,
                         m: StableLikeMeasure, n_marks: int, rng_seed) -> Tuple[float, float]:
    """
    Brute-force U with explicit Rademacher marks xi (one d-vector per jump):
        F^*h  = sum_e zeta^(1/2) xi . M^T h
        G#    = sum_e zeta^(1/2) sum_i d_i zeta xi_i
        delta = sum_e [ -theta(xi) zeta^(1/2) (xi . M^T h)
                        - zeta^(1/2) sum_i xi_i (zeta^(1/2) xi^T A_i^T h + d_i zeta^(1/2) xi . M^T h) ]
    with theta = sum_i (d_i log k zeta^(1/2) + d_i zeta / (2 zeta^(1/2))) xi_i, and returns the
    mean and standard error of delta / G + F^*h G# / G^2 over n_marks draws.
    """
    if n_marks < 1000:
        logger.warning("mark sampling oracle with n_marks=%d < 1000", n_marks)
    eps = min(epsilon, 1.0)
    geom = event_geometry(c, m, _path_event_arrays(path, t, tau), h, t, with_quadratic=True)
    _, g, _ = terms_for_eps(geom, eps)
    core = g[0] > 0.0
    G = float(g[0].sum())
    if G <= 0.0:
        raise NoSmallJumps(f"no jump with |y| <= 2eps/3 in ({t}, {tau}]")
    Y = geom['marks'][0, core]
    r = geom['r'][0, core]
    mth = geom['mth'][0, core]
    H = geom['H'][0, core]
    dlogk = geom['dlogk'][0, core]
    zeta, dzeta = zeta_radial(eps, r)
    grad_zeta = dzeta[:, None] * Y / r[:, None]
    root = np.sqrt(zeta)

    gen = rng_streams.as_generator(rng_seed if isinstance(rng_seed, (tuple, np.random.Generator))
                                   else (rng_seed, rng_streams.MARKS))
    xi = np.where(gen.random((n_marks,) + Y.shape) < 0.5, -1.0, 1.0)    # (n_marks, E, d)
    xi_mth = np.einsum('ned,ed->ne', xi, mth)
    f_h = np.sum(root * xi_mth, axis=1)
    g_sharp = np.sum(root * np.einsum('ned,ed->ne', xi, grad_zeta), axis=1)
    # theta * zeta^(1/2) and zeta^(1/2) * d_i zeta^(1/2) written without dividing by zeta^(1/2)
    theta_root = np.einsum('ned,ed->ne', xi, zeta[:, None] * dlogk + 0.5 * grad_zeta)
    quad = zeta * np.einsum('nei,eik,nek->ne', xi, H, xi)
    half_grad = 0.5 * np.einsum('ned,ed->ne', xi, grad_zeta) * xi_mth
    delta = np.sum(-theta_root * xi_mth - quad - half_grad, axis=1)
    samples = delta / G + f_h * g_sharp / G ** 2
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n_marks))


# ---------------------------------------------------------------------------
# Batched schedules
# ---------------------------------------------------------------------------

def schedule_weights(batch: PathBatch, t: float, nodes: Sequence[float], schedule: str, h,
                     c: ModelCoefficients, m: StableLikeMeasure,
                     epsilon: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """U at every node for every path: values (n, S) with nan where flagged, flagged (n, S)"""
    nodes = np.asarray(nodes, dtype=float)
    ev = batch.event_arrays(t_lo=t)
    geom = event_geometry(c, m, ev, h, t)
    eps_nodes = schedule_epsilon(schedule, t, nodes, batch.horizon, m.beta, epsilon)
    n = batch.n_paths
    values = np.full((n, len(nodes)), np.nan)
    flagged = np.zeros((n, len(nodes)), dtype=bool)
    cached_eps, cached = None, None
    for j, (s, eps) in enumerate(zip(nodes, eps_nodes)):
        if eps != cached_eps:
            cached_eps, cached = eps, terms_for_eps(geom, eps)
        a, g, b = cached
        upto = ev['times'] <= s
        A = np.sum(a * upto, axis=1)
        G = np.sum(g * upto, axis=1)
        B = np.sum(b * upto, axis=1)
        ok = G > 0.0
        with np.errstate(all='ignore'):
            values[:, j] = np.where(ok, A / np.where(ok, G, 1.0) + B / np.where(ok, G, 1.0) ** 2, np.nan)
        flagged[:, j] = ~ok
    return values, flagged


def weight_moment_scaling(m: StableLikeMeasure, c: ModelCoefficients, t: float, x, h, p,
                          horizons: Sequence[float], n_paths: int, rng_seed: int,
                          n_steps: int = 20) -> Dict:
    """
    E[|U_tau^h|^p]^(1/p) under eps(tau) = (tau - t)^(1/beta) over tau - t in horizons,
    with a log-log regression slope (expected -1/beta).
    """
    if not 1.0 < m.beta < 2.0:
        raise DomainError("weight scaling needs beta in (1, 2)")
    horizons = np.sort(np.asarray(horizons, dtype=float))
    powers = [float(q) for q in np.atleast_1d(p)]
    m_sim = truncated_measure(m, float(horizons[0]) ** (1.0 / m.beta))
    nodes = t + horizons
    T = float(nodes[-1])
    sums = {q: np.zeros(len(nodes)) for q in powers}
    sq_sums = {q: np.zeros(len(nodes)) for q in powers}
    kept = np.zeros(len(nodes))
    total = 0
    for batch in iter_batches(m_sim, c, t, x, T, n_steps, rng_seed, n_paths, extra_nodes=nodes):
        values, flagged = schedule_weights(batch, t, nodes, 'singular', h, c, m_sim)
        use = ~flagged & batch.valid[:, None]
        total += batch.n_paths
        kept += use.sum(axis=0)
        for q in powers:
            vals = np.where(use, np.abs(np.nan_to_num(values)) ** q, 0.0)
            sums[q] += vals.sum(axis=0)
            sq_sums[q] += (vals ** 2).sum(axis=0)
    excluded = 1.0 - kept / max(total, 1)
    report = {'beta': m.beta, 'expected_slope': -1.0 / m.beta, 'horizons': horizons.tolist(),
              'truncation_radius': m_sim.truncation_radius, 'excluded_fraction': excluded.tolist(),
              'n_paths': total, 'by_power': {}}
    for q in powers:
        mean = sums[q] / np.maximum(kept, 1)
        var = np.maximum(sq_sums[q] / np.maximum(kept, 1) - mean ** 2, 0.0)
        se_mean = np.sqrt(var / np.maximum(kept - 1, 1))
        moment = mean ** (1.0 / q)
        se_moment = moment * se_mean / (q * np.where(mean > 0, mean, 1.0))
        fit = stats.linregress(np.log(horizons), np.log(moment))
        report['by_power'][q] = {
            'moments': moment.tolist(),
            'stderr': se_moment.tolist(),
            'slope': float(fit.slope),
            'slope_stderr': float(fit.stderr),
            'slope_ci': [float(fit.slope - 1.96 * fit.stderr), float(fit.slope + 1.96 * fit.stderr)],
        }
        logger.info("weight scaling p=%g: slope %.3f +- %.3f (expected %.3f)",
                    q, fit.slope, fit.stderr, -1.0 / m.beta)
    if np.max(excluded) > 0:
        logger.info("NoSmallJumps exclusions per horizon: %s", np.round(excluded, 5).tolist())
    return report
