"""
Named model registry.

Names: additive, multiplicative-1d, smooth-2d, kinked-terminal,
linear-driver:<lambda>, manufactured:<name>.
"""
from typing import Dict, Optional

from levyfbsde.errors import DomainError
from levyfbsde.model_coefficients import (
    ConstantDriver, ConstantPayoff, CosinePayoff, KinkedPayoff, L_WEIGHTS, LinearDriver,
    LinearPayoff, LipschitzDriver, ModelCoefficients, MollifiedPayoff, ZeroDriver,
)

BASE_MODELS = ('additive', 'multiplicative-1d', 'smooth-2d', 'kinked-terminal')
PREFIXED_MODELS = ('linear-driver:', 'manufactured:')


def get_dynamics():
    from levyfbsde.models.additive import AdditiveDynamics
    from levyfbsde.models.multiplicative import MultiplicativeDynamics
    from levyfbsde.models.smooth2d import Smooth2dDynamics
    return {
        'additive': AdditiveDynamics,
        'multiplicative-1d': MultiplicativeDynamics,
        'smooth-2d': Smooth2dDynamics,
    }


def is_known_model(name: str) -> bool:
    return name in BASE_MODELS or any(name.startswith(p) for p in PREFIXED_MODELS)


def make_payoff(spec: Optional[Dict]):
    if not spec:
        return None
    spec = dict(spec)
    kind = spec.pop('kind')
    if kind == 'mollified':
        n = spec.pop('n')
        return MollifiedPayoff(make_payoff(spec.pop('base')), n)
    payoffs = {
        'constant': ConstantPayoff,
        'linear': LinearPayoff,
        'cosine': CosinePayoff,
        'kinked': KinkedPayoff,
    }
    if kind not in payoffs:
        raise DomainError(f"unknown payoff '{kind}'")
    return payoffs[kind](**spec)


def make_driver(spec: Optional[Dict]):
    if not spec:
        return None
    spec = dict(spec)
    kind = spec.pop('kind')
    drivers = {
        'zero': ZeroDriver,
        'constant': ConstantDriver,
        'linear': LinearDriver,
        'lipschitz': LipschitzDriver,
    }
    if kind not in drivers:
        raise DomainError(f"unknown driver '{kind}'")
    return drivers[kind](**spec)


def build_model(name: str, m, params: Optional[Dict] = None, payoff: Optional[Dict] = None,
                driver: Optional[Dict] = None, l_weight: str = 'first-coordinate',
                horizon: float = 1.0) -> ModelCoefficients:
    """
    Build ModelCoefficients for a registry name against measure m.
    Explicit payoff/driver specs override the model's defaults.
    """
    params = dict(params or {})
    dynamics_classes = get_dynamics()
    default_payoff, default_driver = LinearPayoff([1.0] + [0.0] * (m.dim - 1)), ZeroDriver()

    if name == 'additive':
        dynamics = dynamics_classes['additive'](dim=m.dim, **params)
    elif name == 'multiplicative-1d':
        dynamics = dynamics_classes['multiplicative-1d'](**params)
        default_payoff = CosinePayoff()
    elif name == 'smooth-2d':
        dynamics = dynamics_classes['smooth-2d'](**params)
        default_payoff = CosinePayoff()
    elif name == 'kinked-terminal':
        x0 = params.pop('x0', 0.0)
        dynamics = dynamics_classes['additive'](dim=m.dim, **params)
        default_payoff = KinkedPayoff(x0=x0)
    elif name.startswith('linear-driver:'):
        lam = float(name.split(':', 1)[1])
        dynamics = dynamics_classes['additive'](dim=m.dim, **params)
        default_payoff = CosinePayoff(level=2.0, amp=0.1)
        default_driver = LinearDriver(lam)
    elif name.startswith('manufactured:'):
        return build_manufactured(name, m, params, l_weight, horizon).coefficients
    else:
        raise DomainError(f"unknown model '{name}'")

    if dynamics.dim != m.dim:
        raise DomainError(f"model '{name}' has dim {dynamics.dim} but the measure has dim {m.dim}")
    return ModelCoefficients(
        dynamics=dynamics,
        driver=make_driver(driver) or default_driver,
        payoff=make_payoff(payoff) or default_payoff,
        l_weight=L_WEIGHTS[l_weight](),
        name=name,
    )


def build_manufactured(name: str, m, params: Optional[Dict] = None, l_weight: str = 'first-coordinate',
                       horizon: float = 1.0):
    """ManufacturedProblem for 'manufactured:<solution>' on the dynamics named by params['base']"""
    from levyfbsde.pde_solver import make_manufactured
    params = dict(params or {})
    base = params.pop('base', 'additive')
    dynamics_classes = get_dynamics()
    if base not in dynamics_classes:
        raise DomainError(f"unknown base dynamics '{base}' for a manufactured problem")
    dynamics = dynamics_classes[base](**({'dim': m.dim} if base == 'additive' else {}), **params)
    base_coeffs = ModelCoefficients(dynamics, l_weight=L_WEIGHTS[l_weight]())
    return make_manufactured(name.split(':', 1)[1], base_coeffs, m, horizon=horizon)
