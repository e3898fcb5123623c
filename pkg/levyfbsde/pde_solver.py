"""
Deterministic side: the generator L_t, the semigroup P_{t,tau}, manufactured solutions,
an explicit 1D finite-difference/quadrature solver for

    d_t v + L_t v = psi(t, x, v, int (v(t, x + sigma u) - v(t, x)) l(u) nu(du)),   v(T) = phi,

and mollification of Lipschitz data.
"""
import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats
from scipy.interpolate import CubicSpline

from levyfbsde import rng as rng_streams
from levyfbsde.bsde_engine import mild_value_at, nonlocal_field
from levyfbsde.errors import CapabilityError, DomainError, InstabilityError, ManufacturedResidualError
from levyfbsde.forward_flow import iter_batches
from levyfbsde.levy_model import StableLikeMeasure, moment_integral, nu_quadrature, shell_rules
from levyfbsde.model_coefficients import ModelCoefficients, TableDriver, TablePayoff
from levyfbsde.value_function import ValueFunction, tabulate

logger = logging.getLogger(__name__)

CHUNK = 4096


def _require_symmetric(m: StableLikeMeasure):
    if not m.is_symmetric:
        raise CapabilityError("principal value needs a symmetric amplitude a(u) = a(-u)")


def central_gradient(f: Callable, pts: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Numerical gradient of f: R^d -> R at pts (n, d)"""
    pts = np.asarray(pts, dtype=float)
    h = step * (1.0 + np.abs(pts))
    grad = np.empty_like(pts)
    for i in range(pts.shape[-1]):
        e = np.zeros(pts.shape[-1])
        e[i] = 1.0
        up = np.asarray(f(pts + h[:, i:i + 1] * e))
        down = np.asarray(f(pts - h[:, i:i + 1] * e))
        grad[:, i] = (up - down) / (2.0 * h[:, i])
    return grad


# ---------------------------------------------------------------------------
# Generator and semigroup
# ---------------------------------------------------------------------------

def generator_apply(c: ModelCoefficients, m: StableLikeMeasure, phi: Callable, t, x,
                    r_min: float = 0.0, grad_phi: Optional[Callable] = None) -> np.ndarray:
    """
    L_t[phi](x) = b . grad phi + int_{r_min < |u| <= 1} 1/2 (phi(x + sigma u) + phi(x - sigma u) - 2 phi(x)) nu(du).
    t is a scalar or an array matching the points.
    """
    _require_symmetric(m)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), pts.shape[:-1])
    out = np.empty(len(pts))
    rules = shell_rules(m, r_min)
    for lo in range(0, len(pts), CHUNK):
        p = pts[lo:lo + CHUNK]
        tt = t_arr[lo:lo + CHUNK]
        g = grad_phi(p) if grad_phi is not None else central_gradient(phi, p)
        value = np.sum(c.b(tt, p) * g, axis=-1)
        sig = c.sigma(tt, p)
        f0 = np.asarray(phi(p), dtype=float)
        for _, rule in rules:
            step = np.einsum('nab,qb->nqa', sig, rule.nodes)
            second = 0.5 * (np.asarray(phi(p[:, None] + step)) + np.asarray(phi(p[:, None] - step))) - f0[:, None]
            value = value + second @ rule.weights
        out[lo:lo + CHUNK] = value
    return out[0] if single else out


def semigroup_apply(c: ModelCoefficients, m: StableLikeMeasure, g: Callable, t: float, tau: float, x,
                    n_paths: int, rng_seed: int, n_steps: int = 20) -> Tuple[float, float]:
    """P_{t,tau}[g](x) = E[g(X(tau, t, x))]: (mean, stderr)"""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if tau < t:
        raise DomainError(f"tau={tau} precedes t={t}")
    if tau == t:
        return float(g(x[None])[0]), 0.0
    vals = []
    for batch in iter_batches(m, c, t, x, tau, n_steps, rng_seed, n_paths, stream_keys=(rng_streams.SEMIGROUP,)):
        vals.append(np.asarray(g(batch.final_states))[batch.valid])
    vals = np.concatenate(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


def kolmogorov_check(c: ModelCoefficients, m: StableLikeMeasure, g: Callable, t: float, x,
                     n_paths: int, rng_seed: int, step: float = 0.02) -> Dict:
    """
    d/dtau P_{t,tau}[g](x) at tau = t+ against L_t[g](x) for the simulated (truncated) generator.
    The difference quotient is Richardson-extrapolated from steps h and h/2.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g0 = float(g(x[None])[0])
    quotients = []
    for k, h in enumerate((step, step / 2.0)):
        vals = []
        for batch in iter_batches(m, c, t, x, t + h, 4, rng_seed, n_paths,
                                  stream_keys=(rng_streams.SEMIGROUP, k + 1)):
            vals.append((np.asarray(g(batch.final_states)) - g0)[batch.valid] / h)
        vals = np.concatenate(vals)
        quotients.append((vals.mean(), vals.std(ddof=1) / math.sqrt(len(vals))))
    (d1, s1), (d2, s2) = quotients
    estimate = 2.0 * d2 - d1
    stderr = math.sqrt(4.0 * s2 ** 2 + s1 ** 2)
    gen_value = float(generator_apply(c, m, g, t, x, r_min=m.truncation_radius))
    return {
        'generator': gen_value,
        'estimate': float(estimate),
        'stderr': float(stderr),
        'passed': bool(abs(estimate - gen_value) <= 3.0 * stderr),
    }


# ---------------------------------------------------------------------------
# Manufactured solutions
# ---------------------------------------------------------------------------

# v*(t, x) = level + a(t) f(x): (a, a', f, grad f) per name
MANUFACTURED = {
    'constant': (lambda t: np.zeros_like(t), lambda t: np.zeros_like(t),
                 lambda x: np.zeros(x.shape[:-1]), lambda x: np.zeros_like(x)),
    'linear': (lambda t: np.ones_like(t), lambda t: np.zeros_like(t),
               lambda x: x[..., 0], lambda x: np.eye(x.shape[-1])[0] * np.ones_like(x)),
    'cosine-decay': (lambda t: np.exp(-t), lambda t: -np.exp(-t),
                     lambda x: np.cos(x[..., 0]),
                     lambda x: np.concatenate([-np.sin(x[..., :1]), np.zeros_like(x[..., 1:])], axis=-1)),
}


@dataclass(eq=False)
class ManufacturedProblem:
    name: str
    coefficients: ModelCoefficients
    horizon: float
    r_min: float
    level: float
    residual: float = 0.0

    def _parts(self):
        return MANUFACTURED[self.name]

    def v_star(self, t, x) -> np.ndarray:
        a, _, f, _ = self._parts()
        x = np.asarray(x, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        return self.level + a(t) * f(x)

    def grad_v_star(self, t, x) -> np.ndarray:
        a, _, _, grad_f = self._parts()
        x = np.asarray(x, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        return a(t)[..., None] * grad_f(x)

    def __call__(self, t, x) -> np.ndarray:
        return self.v_star(t, x)

    def tabulate(self, times: Sequence[float], axes) -> ValueFunction:
        return tabulate(self.v_star, times, axes, label=f'v*:{self.name}')


def _induced_psi(c_base: ModelCoefficients, m: StableLikeMeasure, name: str, r_min: float) -> Callable:
    a, da, f, grad_f = MANUFACTURED[name]

    def psi(t, x):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        flat_x = x.reshape(-1, x.shape[-1])
        flat_t = np.broadcast_to(np.asarray(t, dtype=float), shape).reshape(-1)
        gen = generator_apply(c_base, m, f, flat_t, flat_x, r_min=r_min, grad_phi=grad_f)
        return (da(flat_t) * f(flat_x) + a(flat_t) * np.atleast_1d(gen)).reshape(shape)

    return psi


def make_manufactured(name: str, c_base: ModelCoefficients, m: StableLikeMeasure, horizon: float = 1.0,
                      r_min: Optional[float] = None, level: float = 1.0, n_checks: int = 100,
                      seed: int = 23, tol: float = 1e-6) -> ManufacturedProblem:
    """
    Problem whose solution is v*(t, x) = level + a(t) f(x): psi := d_t v* + L_t v* with the
    generator truncated at r_min (default: the simulated cut delta0), phi := v*(T, .).
    """
    if name not in MANUFACTURED:
        raise DomainError(f"unknown manufactured solution '{name}' (expected one of {sorted(MANUFACTURED)})")
    _require_symmetric(m)
    r_min = m.truncation_radius if r_min is None else float(r_min)
    a, _, f, grad_f = MANUFACTURED[name]
    psi = _induced_psi(c_base, m, name, r_min)

    def grad_psi(t, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        tt = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1]).reshape(-1)
        return central_gradient(lambda p: psi(tt, p), flat, step=1e-4).reshape(x.shape)

    T = float(horizon)
    driver = TableDriver(psi, grad_psi, label=name)
    payoff = TablePayoff(lambda x: level + a(np.float64(T)) * f(x),
                         lambda x: a(np.float64(T)) * grad_f(x))
    coeffs = ModelCoefficients(c_base.dynamics, driver=driver, payoff=payoff, l_weight=c_base.l_weight,
                               name=f'manufactured:{name}')
    problem = ManufacturedProblem(name, coeffs, T, r_min, float(level))

    # self-test against a refined quadrature
    fine = replace(m, quadrature=replace(m.quadrature, radial_nodes=2 * m.quadrature.radial_nodes,
                                         angular_nodes=2 * m.quadrature.angular_nodes))
    gen = rng_streams.stream(seed, rng_streams.RESIDUAL)
    ts = gen.uniform(0.0, T, size=n_checks)
    xs = gen.uniform(-2.0, 2.0, size=(n_checks, c_base.dim))
    reference = _induced_psi(c_base, fine, name, r_min)(ts, xs)
    residual = float(np.max(np.abs(psi(ts, xs) - reference) / (1.0 + np.abs(reference))))
    problem.residual = residual
    if residual > tol:
        raise ManufacturedResidualError(f"manufactured '{name}' residual {residual:.3g} > {tol:g}")
    logger.info("manufactured problem '%s' built (self-test residual %.2e)", name, residual)
    return problem


# ---------------------------------------------------------------------------
# Explicit 1D solver
# ---------------------------------------------------------------------------

@dataclass
class PdeGridConfig:
    t_min: float = 0.0
    horizon: float = 1.0
    box: float = 4.0
    space_nodes: int = 81
    dt: Optional[float] = None          # None: 0.9 / ||L||_grid
    r_min: Optional[float] = None       # None: the simulated cut delta0


class _Extension:
    """Cubic spline inside the box; clamped-linear or supplied exact data outside"""

    def __init__(self, grid: np.ndarray, values: np.ndarray, exterior: Union[str, Callable], s: float):
        self.grid = grid
        self.values = values
        self.exterior = exterior
        self.s = s
        self.spline = CubicSpline(grid, values)
        self.dx = grid[1] - grid[0]
        self.queries = 0
        self.exits = 0

    def __call__(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        lo, hi = self.grid[0], self.grid[-1]
        out = self.spline(np.clip(q, lo, hi))
        left, right = q < lo, q > hi
        self.queries += q.size
        self.exits += int(np.count_nonzero(left | right))
        if callable(self.exterior):
            outside = left | right
            if outside.any():
                out[outside] = self.exterior(self.s, q[outside][:, None])
            return out
        v, dx = self.values, self.dx
        out = np.where(left, v[0] + (v[1] - v[0]) / dx * (q - lo), out)
        out = np.where(right, v[-1] + (v[-1] - v[-2]) / dx * (q - hi), out)
        return out


def _shell_moment(m: StableLikeMeasure, p: float, r_lo: float, r_hi: float) -> float:
    if r_hi <= r_lo:
        return 0.0
    return moment_integral(m, p, r_hi) - (moment_integral(m, p, r_lo) if r_lo > 0 else 0.0)


def _shell_weighted(m: StableLikeMeasure, fn: Callable, r_lo: float, r_hi: float) -> float:
    """int_{r_lo < |u| <= r_hi} fn(u) nu(du) for fn of order |u|^2 at 0"""
    if r_hi <= r_lo:
        return 0.0
    return float(sum(rule.integrate(fn(rule.nodes)) for _, rule in shell_rules(m, r_lo, r_hi)))


def operator_norm(c: ModelCoefficients, m: StableLikeMeasure, cfg: PdeGridConfig) -> Dict[str, float]:
    """||L||_grid of the explicit scheme and the matching step bound"""
    r_min = m.truncation_radius if cfg.r_min is None else cfg.r_min
    grid = np.linspace(-cfg.box, cfg.box, cfg.space_nodes)
    dx = grid[1] - grid[0]
    pts = grid[:, None]
    sig_max = max(float(np.max(np.abs(c.sigma(s, pts)))) for s in (cfg.t_min, cfg.horizon))
    b_max = max(float(np.max(np.abs(c.b(s, pts)))) for s in (cfg.t_min, cfg.horizon))
    r_star = min(2.0 * dx / max(sig_max, 1e-300), 1.0)
    m2 = _shell_moment(m, 2.0, r_min, r_star)
    lo = max(r_star, r_min)
    outer = nu_quadrature(m, lo, 1.0) if lo < 1.0 else None
    tail = float(np.sum(outer.weights)) if outer is not None else 0.0
    l_y, l_z = c.driver.lipschitz_yz
    l_tail = float(np.sum(np.abs(c.l(outer.nodes)) * outer.weights)) if outer is not None else 0.0
    l_inner = abs(_shell_weighted(m, lambda u: u[..., 0] * c.l(u), r_min, r_star))
    norm = b_max / dx + 2.0 * sig_max ** 2 * m2 / dx ** 2 + 2.0 * tail + l_y \
        + l_z * (2.0 * l_tail + sig_max * l_inner / dx)
    return {'norm': norm, 'suggested_dt': 0.9 / norm, 'dx': dx, 'r_star': r_star, 'inner_m2': m2, 'tail': tail}


def deterministic_solve(c: ModelCoefficients, m: StableLikeMeasure, cfg: Optional[PdeGridConfig] = None,
                        exterior: Union[str, Callable] = 'linear') -> ValueFunction:
    """
    Explicit backward stepping v(t - dt) = v(t) + dt (L_t v - psi(t, x, v, z[v])) for d = 1.
    The jump operator is split at r* = 2 dx / max|sigma|: below r* a second-order Taylor term
    1/2 sigma^2 v'' int u^2 dnu with a central second difference, above r* the nu-quadrature
    on a cubic spline of v.
    """
    cfg = cfg or PdeGridConfig()
    if c.dim != 1:
        raise CapabilityError(f"deterministic solver is 1D only, got d={c.dim}")
    _require_symmetric(m)
    r_min = m.truncation_radius if cfg.r_min is None else cfg.r_min
    info = operator_norm(c, m, cfg)
    dt = cfg.dt if cfg.dt is not None else info['suggested_dt']
    if dt * info['norm'] > 1.0:
        raise InstabilityError(f"dt={dt:.4g} exceeds the explicit bound (||L|| = {info['norm']:.4g}); "
                               f"use dt <= {info['suggested_dt']:.4g}", info['suggested_dt'])
    grid = np.linspace(-cfg.box, cfg.box, cfg.space_nodes)
    dx, r_star = info['dx'], info['r_star']
    pts = grid[:, None]
    lo = max(r_star, r_min)
    outer = nu_quadrature(m, lo, 1.0) if lo < 1.0 else None
    inner_m2 = info['inner_m2']
    inner_l1 = _shell_weighted(m, lambda u: u[..., 0] * c.l(u), r_min, r_star)
    l_outer = c.l(outer.nodes) * outer.weights if outer is not None else None
    needs_z = c.driver.depends_on_yz

    span = cfg.horizon - cfg.t_min
    n_t = max(1, int(math.ceil(span / dt - 1e-12)))
    dt = span / n_t
    times = cfg.t_min + dt * np.arange(n_t + 1)
    times[-1] = cfg.horizon
    values = np.empty((n_t + 1, len(grid)))
    values[-1] = c.phi(pts)
    queries = exits = 0
    for k in range(n_t, 0, -1):
        s = times[k]
        v = values[k]
        ext = _Extension(grid, v, exterior, s)
        ghost = ext(np.array([grid[0] - dx, grid[-1] + dx]))
        vp = np.concatenate([[ghost[0]], v, [ghost[1]]])
        d1 = (vp[2:] - vp[:-2]) / (2.0 * dx)
        d2 = (vp[2:] - 2.0 * v + vp[:-2]) / dx ** 2
        b = c.b(s, pts)[:, 0]
        sig = c.sigma(s, pts)[:, 0, 0]
        Lv = b * d1 + 0.5 * sig ** 2 * inner_m2 * d2
        z = d1 * sig * inner_l1
        if outer is not None:
            shift = sig[:, None] * outer.nodes[None, :, 0]
            up, down = ext(grid[:, None] + shift), ext(grid[:, None] - shift)
            Lv = Lv + (0.5 * (up + down) - v[:, None]) @ outer.weights
            if needs_z:
                z = z + (up - v[:, None]) @ l_outer
        psi = c.psi(s, pts, v, z) if needs_z else c.psi(s, pts, np.zeros_like(v), np.zeros_like(v))
        values[k - 1] = v + dt * (Lv - psi)
        queries += ext.queries
        exits += ext.exits
    if not np.all(np.isfinite(values)):
        raise InstabilityError("explicit scheme produced non-finite values", info['suggested_dt'])
    if queries:
        logger.info("deterministic solve: %d steps of dt=%.3g, %.3f%% of jump targets outside the box",
                    n_t, dt, 100.0 * exits / queries)
    return ValueFunction(times, (grid,), values, label='v_pde')


def refinement_study(c: ModelCoefficients, m: StableLikeMeasure, exact: Callable, cfg: PdeGridConfig,
                     levels: int = 3, exterior: Union[str, Callable] = 'linear') -> Dict:
    """
    Grid L-infinity errors against an exact solution while halving dx (dt follows the bound);
    the fitted order of the error in dx.
    """
    rows = []
    nodes = cfg.space_nodes
    for _ in range(levels):
        level_cfg = replace(cfg, space_nodes=nodes, dt=None)
        v = deterministic_solve(c, m, level_cfg, exterior)
        pts = v.grid_points()
        err = max(float(np.max(np.abs(v.values[j] - exact(s, pts)))) for j, s in enumerate(v.times))
        rows.append({'space_nodes': nodes, 'dx': float(v.axes[0][1] - v.axes[0][0]),
                     'dt': float(v.times[1] - v.times[0]), 'error': err})
        nodes = 2 * nodes - 1
    dxs = np.array([r['dx'] for r in rows])
    errs = np.array([r['error'] for r in rows])
    order = float(stats.linregress(np.log(dxs), np.log(np.maximum(errs, 1e-300))).slope) if levels > 1 else float('nan')
    return {'rows': rows, 'order': order}


def discretization_envelope(c: ModelCoefficients, m: StableLikeMeasure, cfg: PdeGridConfig,
                            exterior: Union[str, Callable] = 'linear') -> Tuple[ValueFunction, float]:
    """Coarse solution and a Richardson bound 4/3 sup |v_dx - v_dx/2| on the coarse nodes"""
    coarse = deterministic_solve(c, m, replace(cfg, dt=None), exterior)
    fine = deterministic_solve(c, m, replace(cfg, space_nodes=2 * cfg.space_nodes - 1, dt=None), exterior)
    pts = coarse.grid_points()
    diff = max(float(np.max(np.abs(coarse.values[j] - fine(s, pts)))) for j, s in enumerate(coarse.times))
    return coarse, 4.0 * diff / 3.0


# ---------------------------------------------------------------------------
# Mild identity
# ---------------------------------------------------------------------------

def mild_identity_residual(v: ValueFunction, c: ModelCoefficients, m: StableLikeMeasure, n_points: int,
                           n_paths: int, rng_seed: int, r_min: Optional[float] = None, grid_tol: float = 0.0,
                           n_steps: int = 20, box: Optional[float] = None) -> Dict:
    """
    v(t, x) + int_t^T P_{t,tau}[psi(tau, ., v, z[v])](x) dtau - P_{t,T}[phi](x) at random (t, x);
    each should vanish within 3 s.e. + grid_tol.
    """
    r_min = m.truncation_radius if r_min is None else r_min
    z = nonlocal_field(v, c, m, r_min) if c.driver.depends_on_yz else None
    t0, T = v.span
    lo, hi = v.box
    if box is not None:
        lo, hi = np.maximum(lo, -box), np.minimum(hi, box)
    gen = rng_streams.stream(rng_seed, rng_streams.RESIDUAL, 1)
    rows: List[Dict] = []
    for i in range(n_points):
        t = float(gen.uniform(t0, t0 + 0.9 * (T - t0)))
        x = gen.uniform(lo, hi)
        est = mild_value_at(c, m, t, x, T, None, v, z, n_paths, n_steps, rng_seed,
                            stream_keys=(rng_streams.RESIDUAL, 2, i))
        residual = float(v(t, x[None])[0] - est.values[0])
        se = float(est.stderr[0])
        rows.append({'t': t, 'x': x.tolist(), 'residual': residual, 'stderr': se,
                     'passed': abs(residual) <= 3.0 * se + grid_tol})
    return {'rows': rows, 'passed': all(r['passed'] for r in rows),
            'max_abs_residual': max(abs(r['residual']) for r in rows)}


# ---------------------------------------------------------------------------
# Mollification
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _bump_rule(dim: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Offsets s in the unit ball, normalized bump weights and the matching gradient weights"""
    per_axis = {1: 64, 2: 24, 3: 12}.get(dim)
    if per_axis is None:
        raise CapabilityError(f"mollify supports dim <= 3, got {dim}")
    x, w = np.polynomial.legendre.leggauss(per_axis)
    mesh = np.meshgrid(*([x] * dim), indexing='ij')
    s = np.stack([g.reshape(-1) for g in mesh], axis=-1)
    w = np.prod(np.stack([g.reshape(-1) for g in np.meshgrid(*([w] * dim), indexing='ij')], axis=-1), axis=-1)
    r2 = np.sum(s * s, axis=-1)
    inside = r2 < 1.0
    s, w, r2 = s[inside], w[inside], r2[inside]
    bump = np.exp(-1.0 / (1.0 - r2))
    norm = np.sum(w * bump)
    weights = w * bump / norm
    grad_weights = (w * bump * (-2.0 / (1.0 - r2) ** 2))[:, None] * s / norm
    return s, weights, grad_weights


@dataclass(eq=False)
class Mollified:
    """f_n = f * K_n with K_n(y) = n^d K(n y), K a normalized bump on the unit ball"""
    base: Callable
    n: int

    def _points(self, x):
        x = np.asarray(x, dtype=float)
        s, w, gw = _bump_rule(x.shape[-1])
        return x[..., None, :] - s / self.n, w, gw

    def __call__(self, x) -> np.ndarray:
        pts, w, _ = self._points(x)
        return np.asarray(self.base(pts)) @ w

    def grad(self, x) -> np.ndarray:
        # d/dx int K_n(x - y) f(y) dy = n int grad K(s) f(x - s/n) ds
        pts, _, gw = self._points(x)
        return self.n * np.einsum('...k,kd->...d', np.asarray(self.base(pts)), gw)


def mollify(f: Callable, n: int) -> Mollified:
    if n < 1:
        raise DomainError("mollification index n must be >= 1")
    return Mollified(f, int(n))
