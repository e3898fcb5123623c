"""
Base classes for FBSDE coefficients.
Forward dynamics inherit from Dynamics (concrete ones live in levyfbsde/models/);
drivers, terminal payoffs and the l-weight are small interchangeable objects.

Conventions: x has shape (..., d); t is a scalar or broadcasts against x[..., 0];
grad_sigma(t, x)[..., a, b, c] = d sigma_ab / d x_c, so that
D sigma[y]_ac = sum_b grad_sigma[a, b, c] y_b is the x-derivative of x -> sigma(t, x) y.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from levyfbsde.config import Config
from levyfbsde.errors import CapabilityError, DomainError
from levyfbsde.levy_model import SCALE_GROWTH_LIMIT, SHELLS, scale_growth

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Forward dynamics
# ---------------------------------------------------------------------------

class Dynamics(ABC):
    """Base class for the forward coefficients (b, sigma)"""

    def __init__(self, name: str, dim: int):
        self.name = name
        self.dim = dim

    @abstractmethod
    def drift(self, t, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def sigma(self, t, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def grad_drift(self, t, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def grad_sigma(self, t, x: np.ndarray) -> np.ndarray:
        pass

    def sigma_inv(self, t, x: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.sigma(t, x))

    def condition_number(self, t, x: np.ndarray) -> np.ndarray:
        s = self.sigma(t, x)
        if self.dim == 1:
            mag = np.abs(s[..., 0, 0])
            return np.where(mag > 0, 1.0, np.inf)
        return np.linalg.cond(s)

    def params(self) -> Dict:
        return {}


# ---------------------------------------------------------------------------
# Drivers psi(t, x, y, z)
# ---------------------------------------------------------------------------

class Driver(ABC):
    """Generator psi of the backward equation"""
    name = 'driver'
    depends_on_yz = True
    has_gradient = True

    @abstractmethod
    def __call__(self, t, x, y, z) -> np.ndarray:
        pass

    def gradients(self, t, x, y, z) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(grad_x psi, d_y psi, d_z psi)"""
        raise CapabilityError(f"driver '{self.name}' has no derivatives (BL only)")

    @property
    def lipschitz_yz(self) -> Tuple[float, float]:
        return 0.0, 0.0

    @property
    def is_zero(self) -> bool:
        return False


class ZeroDriver(Driver):
    name = 'zero'
    depends_on_yz = False

    def __call__(self, t, x, y, z):
        return np.zeros(np.shape(x)[:-1])

    def gradients(self, t, x, y, z):
        x = np.asarray(x, dtype=float)
        zero = np.zeros(x.shape[:-1])
        return np.zeros_like(x), zero, zero

    @property
    def is_zero(self):
        return True


class ConstantDriver(Driver):
    name = 'constant'
    depends_on_yz = False

    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, t, x, y, z):
        return np.full(np.shape(x)[:-1], self.value)

    def gradients(self, t, x, y, z):
        x = np.asarray(x, dtype=float)
        zero = np.zeros(x.shape[:-1])
        return np.zeros_like(x), zero, zero


class LinearDriver(Driver):
    """psi = lam * y"""
    name = 'linear'

    def __init__(self, lam: float):
        self.lam = float(lam)

    def __call__(self, t, x, y, z):
        return self.lam * np.asarray(y, dtype=float)

    def gradients(self, t, x, y, z):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        return np.zeros_like(x), np.full(shape, self.lam), np.zeros(shape)

    @property
    def lipschitz_yz(self):
        return abs(self.lam), 0.0


class LipschitzDriver(Driver):
    """psi = scale * (sin(y)/2 + z_gain * clip(z, -1, 1)); Lipschitz but not differentiable in z"""
    name = 'lipschitz'
    has_gradient = False

    def __init__(self, scale: float = 1.0, z_gain: float = 0.1):
        self.scale = float(scale)
        self.z_gain = float(z_gain)

    def __call__(self, t, x, y, z):
        return self.scale * (0.5 * np.sin(y) + self.z_gain * np.clip(z, -1.0, 1.0))

    @property
    def lipschitz_yz(self):
        return 0.5 * abs(self.scale), abs(self.scale * self.z_gain)


class TableDriver(Driver):
    """psi(t, x) read from a callable of (t, x) only (manufactured problems)"""
    name = 'manufactured'
    depends_on_yz = False

    def __init__(self, fn, grad_fn=None, label: str = 'manufactured'):
        self.fn = fn
        self.grad_fn = grad_fn
        self.label = label
        self.has_gradient = grad_fn is not None

    def __call__(self, t, x, y, z):
        return self.fn(t, x)

    def gradients(self, t, x, y, z):
        if self.grad_fn is None:
            return super().gradients(t, x, y, z)
        x = np.asarray(x, dtype=float)
        zero = np.zeros(x.shape[:-1])
        return self.grad_fn(t, x), zero, zero


# ---------------------------------------------------------------------------
# Terminal payoffs phi(x)
# ---------------------------------------------------------------------------

class Payoff(ABC):
    name = 'payoff'
    smooth = True

    @abstractmethod
    def __call__(self, x) -> np.ndarray:
        pass

    def grad(self, x) -> np.ndarray:
        raise CapabilityError(f"payoff '{self.name}' is not differentiable")

    @property
    def lipschitz(self) -> float:
        return np.inf

    @property
    def is_constant(self) -> bool:
        return False


class ConstantPayoff(Payoff):
    name = 'constant'

    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def __call__(self, x):
        return np.full(np.shape(x)[:-1], self.value)

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    @property
    def lipschitz(self):
        return 0.0

    @property
    def is_constant(self):
        return True


class LinearPayoff(Payoff):
    """phi(x) = coef . x + offset"""
    name = 'linear'

    def __init__(self, coef=(1.0,), offset: float = 0.0):
        self.coef = np.asarray(coef, dtype=float)
        self.offset = float(offset)

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.coef + self.offset

    def grad(self, x):
        return np.broadcast_to(self.coef, np.shape(x)).copy()

    @property
    def lipschitz(self):
        return float(np.linalg.norm(self.coef))


class CosinePayoff(Payoff):
    """phi(x) = level + amp * cos(freq * x_1)"""
    name = 'cosine'

    def __init__(self, level: float = 0.0, amp: float = 1.0, freq: float = 1.0):
        self.level, self.amp, self.freq = float(level), float(amp), float(freq)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.level + self.amp * np.cos(self.freq * x[..., 0])

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        g[..., 0] = -self.amp * self.freq * np.sin(self.freq * x[..., 0])
        return g

    @property
    def lipschitz(self):
        return abs(self.amp * self.freq)


class KinkedPayoff(Payoff):
    """phi(x) = min(|x_1 - x0|, cap): Lipschitz with a kink at x0"""
    name = 'kinked'
    smooth = False

    def __init__(self, x0: float = 0.0, cap: float = 4.0):
        self.x0, self.cap = float(x0), float(cap)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.minimum(np.abs(x[..., 0] - self.x0), self.cap)

    @property
    def lipschitz(self):
        return 1.0


class TablePayoff(Payoff):
    """phi read from a callable of x (manufactured problems)"""
    name = 'manufactured'

    def __init__(self, fn, grad_fn=None, lipschitz: float = np.inf):
        self.fn = fn
        self.grad_fn = grad_fn
        self.smooth = grad_fn is not None
        self._lipschitz = float(lipschitz)

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def grad(self, x):
        if self.grad_fn is None:
            return super().grad(x)
        return self.grad_fn(np.asarray(x, dtype=float))

    @property
    def lipschitz(self):
        return self._lipschitz


class MollifiedPayoff(Payoff):
    """Wraps a mollified callable from pde_solver.mollify"""
    name = 'mollified'

    def __init__(self, base: Payoff, n: int):
        from levyfbsde.pde_solver import mollify
        self.base = base
        self.n = int(n)
        self._smooth = mollify(base, self.n)

    def __call__(self, x):
        return self._smooth(x)

    def grad(self, x):
        return self._smooth.grad(x)

    @property
    def lipschitz(self):
        return self.base.lipschitz


# ---------------------------------------------------------------------------
# l-weights with |l(u)| <= C (1 ^ |u|)
# ---------------------------------------------------------------------------

class LWeight(ABC):
    name = 'l'

    @abstractmethod
    def __call__(self, u) -> np.ndarray:
        pass


class FirstCoordinateWeight(LWeight):
    """l(u) = u_1 on the unit ball"""
    name = 'first-coordinate'

    def __call__(self, u):
        return np.asarray(u, dtype=float)[..., 0]


class SineWeight(LWeight):
    """l(u) = sin(u_1), a bounded variant"""
    name = 'sine'

    def __call__(self, u):
        return np.sin(np.asarray(u, dtype=float)[..., 0])


L_WEIGHTS = {
    'first-coordinate': FirstCoordinateWeight,
    'sine': SineWeight,
}


# ---------------------------------------------------------------------------
# Composite coefficients
# ---------------------------------------------------------------------------

@dataclass
class ModelCoefficients:
    """Forward dynamics plus backward data (psi, phi, l)"""
    dynamics: Dynamics
    driver: Driver = field(default_factory=ZeroDriver)
    payoff: Payoff = field(default_factory=lambda: LinearPayoff())
    l_weight: LWeight = field(default_factory=FirstCoordinateWeight)
    name: Optional[str] = None

    def __post_init__(self):
        if self.name is None:
            self.name = self.dynamics.name

    @property
    def dim(self) -> int:
        return self.dynamics.dim

    @property
    def smoothness(self) -> str:
        """'BD' when psi and phi expose derivatives, else 'BL'"""
        return 'BD' if self.driver.has_gradient and self.payoff.smooth else 'BL'

    def b(self, t, x):
        return self.dynamics.drift(t, x)

    def sigma(self, t, x):
        return self.dynamics.sigma(t, x)

    def sigma_inv(self, t, x):
        return self.dynamics.sigma_inv(t, x)

    def grad_b(self, t, x):
        return self.dynamics.grad_drift(t, x)

    def grad_sigma(self, t, x):
        return self.dynamics.grad_sigma(t, x)

    def psi(self, t, x, y, z):
        return self.driver(t, x, y, z)

    def grad_psi(self, t, x, y, z):
        return self.driver.gradients(t, x, y, z)

    def phi(self, x):
        return self.payoff(x)

    def grad_phi(self, x):
        return self.payoff.grad(x)

    def l(self, u):
        return self.l_weight(u)

    def describe(self) -> Dict:
        return {
            'name': self.name,
            'dynamics': self.dynamics.name,
            'dynamics_params': self.dynamics.params(),
            'driver': self.driver.name,
            'payoff': self.payoff.name,
            'l_weight': self.l_weight.name,
            'smoothness': self.smoothness,
        }


# ---------------------------------------------------------------------------
# Sample-based assumption checks
# ---------------------------------------------------------------------------

def _shell(gen: np.random.Generator, n: int, dim: int, r_lo: float, r_hi: float) -> np.ndarray:
    g = gen.standard_normal((n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True) * gen.uniform(r_lo, r_hi, size=n)[:, None]


# state shells for growth, and separations shrinking as the shells widen
STATE_SHELLS = ((0.0, 1.0), (1.0, 10.0), (10.0, 100.0))
SEPARATIONS = (1e-1, 1e-2, 1e-3)


def check_coefficients(c: ModelCoefficients, n_samples: int = 256, t: float = 0.0, seed: int = 11) -> Dict:
    """
    Numerical evidence for (FL) linear growth and Lipschitz drift, (FD) bounded derivatives,
    (FE) bounded and nondegenerate sigma, and sigma * sigma_inv = I.

    Each constant is fitted per shell; a bound that fails shows up as growth across shells.
    """
    from levyfbsde import rng as rng_streams
    gen = rng_streams.stream(seed, c.dim)
    eye = np.eye(c.dim)
    lip, growth, deriv, spread = [], [], [], []
    inverse_err, c_fb, c_fe, cond = 0.0, 0.0, np.inf, 0.0
    for (r_lo, r_hi), delta in zip(STATE_SHELLS, SEPARATIONS):
        x = _shell(gen, n_samples, c.dim, r_lo, r_hi)
        y = x + _shell(gen, n_samples, c.dim, delta, delta)
        bx, by = c.b(t, x), c.b(t, y)
        lip.append(float(np.max(np.linalg.norm(bx - by, axis=-1) / np.linalg.norm(x - y, axis=-1))))
        growth.append(float(np.max(np.linalg.norm(bx, axis=-1) / (1.0 + np.linalg.norm(x, axis=-1)))))
        deriv.append(float(max(np.max(np.abs(c.grad_b(t, x))), np.max(np.abs(c.grad_sigma(t, x))))))
        s = c.sigma(t, x)
        inverse_err = max(inverse_err, float(np.max(np.abs(s @ c.sigma_inv(t, x) - eye))))
        norms = np.linalg.norm(s, ord=2, axis=(-2, -1))
        spread.append(float(np.max(norms)))
        c_fb = max(c_fb, float(np.max(norms)))
        c_fe = min(c_fe, float(np.min(np.linalg.eigvalsh(s @ np.swapaxes(s, -1, -2)))))
        cond = max(cond, float(np.max(c.dynamics.condition_number(t, x))))
    checks = {
        'sigma_inverse': inverse_err < 1e-10,
        'FL': scale_growth(lip) <= SCALE_GROWTH_LIMIT and scale_growth(growth) <= SCALE_GROWTH_LIMIT,
        'FD': scale_growth(deriv) <= SCALE_GROWTH_LIMIT,
        'FE': c_fe > 0.0 and scale_growth(spread) <= SCALE_GROWTH_LIMIT,
        'condition': cond <= Config.CONDITION_LIMIT,
    }
    if not all(checks.values()):
        logger.warning("coefficient checks failed for %s: %s", c.name,
                       [k for k, ok in checks.items() if not ok])
    return {
        'passed': all(checks.values()),
        'checks': checks,
        'C_FL': max(lip),
        'growth': max(growth),
        'C_FB': c_fb,
        'C_FE': c_fe,
        'C_FD': max(deriv),
        'shell_constants': {'lipschitz': lip, 'growth': growth, 'derivatives': deriv, 'sigma_norm': spread},
        'sigma_inverse_error': inverse_err,
        'max_condition': cond,
    }


def check_driver(c: ModelCoefficients, n_samples: int = 256, seed: int = 13) -> Dict:
    """(BL): Lipschitz in (y, z) and polynomial growth of psi(t, x, 0, 0) and phi"""
    from levyfbsde import rng as rng_streams
    gen = rng_streams.stream(seed, c.dim, 1)
    zero = np.zeros(n_samples)
    lip, psi_growth, phi_growth = [], [], []
    for (r_lo, r_hi), delta in zip(STATE_SHELLS, SEPARATIONS):
        x = _shell(gen, n_samples, c.dim, r_lo, r_hi)
        t = gen.uniform(0.0, 1.0, size=n_samples)
        y1, z1 = gen.uniform(-r_hi, r_hi, size=(2, n_samples))
        dy, dz = delta * np.where(gen.random((2, n_samples)) < 0.5, -1.0, 1.0)
        d_psi = np.abs(c.psi(t, x, y1, z1) - c.psi(t, x, y1 + dy, z1 + dz))
        lip.append(float(np.max(d_psi / (np.abs(dy) + np.abs(dz)))))
        norm_x = np.linalg.norm(x, axis=-1)
        psi_growth.append(float(np.max(np.abs(c.psi(t, x, zero, zero)) / (1.0 + norm_x) ** 2)))
        phi_growth.append(float(np.max(np.abs(c.phi(x)) / (1.0 + norm_x) ** 2)))
    checks = {
        'BL': scale_growth(lip) <= SCALE_GROWTH_LIMIT,
        'polynomial_growth': (scale_growth(psi_growth) <= SCALE_GROWTH_LIMIT
                              and scale_growth(phi_growth) <= SCALE_GROWTH_LIMIT),
    }
    return {'passed': all(checks.values()), 'checks': checks, 'C_BL': max(lip),
            'psi_growth': max(psi_growth), 'phi_growth': max(phi_growth),
            'shell_constants': {'lipschitz': lip, 'psi_growth': psi_growth, 'phi_growth': phi_growth}}


def check_l_weight(l_weight: LWeight, dim: int, n_samples: int = 256, seed: int = 17) -> Dict:
    """|l(u)| <= C (1 ^ |u|), fitted on shells shrinking towards the origin"""
    from levyfbsde import rng as rng_streams
    gen = rng_streams.stream(seed, dim, 2)
    ratios = []
    for r_lo, r_hi in SHELLS:
        u = _shell(gen, n_samples, dim, r_lo, r_hi)
        ratios.append(float(np.max(np.abs(l_weight(u)) / np.linalg.norm(u, axis=-1))))
    growth = scale_growth(ratios)
    return {'passed': bool(growth <= SCALE_GROWTH_LIMIT), 'C_l': max(ratios), 'shell_ratios': ratios,
            'growth': growth}


def require_dim(c: ModelCoefficients, dim: int):
    if c.dim != dim:
        raise DomainError(f"measure dimension {dim} must equal state dimension {c.dim}")
