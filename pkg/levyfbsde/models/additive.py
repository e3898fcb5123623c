"""
Additive dynamics: b(x) = -kappa * x, sigma = s0 * I.
With kappa = 0 the state is a pure-jump martingale and the Jacobian stays I.
"""
import numpy as np

from levyfbsde.model_coefficients import Dynamics


class AdditiveDynamics(Dynamics):
    """Constant jump coefficient, linear mean reversion"""

    def __init__(self, dim: int = 1, s0: float = 1.0, kappa: float = 0.0):
        super().__init__('additive', dim)
        self.s0 = float(s0)
        self.kappa = float(kappa)

    def drift(self, t, x):
        return -self.kappa * np.asarray(x, dtype=float)

    def sigma(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.s0 * np.eye(self.dim), x.shape + (self.dim,)).copy()

    def sigma_inv(self, t, x):
        if self.s0 == 0.0:
            return super().sigma_inv(t, x)
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.dim) / self.s0, x.shape + (self.dim,)).copy()

    def grad_drift(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(-self.kappa * np.eye(self.dim), x.shape + (self.dim,)).copy()

    def grad_sigma(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.dim, self.dim))

    def params(self):
        return {'s0': self.s0, 'kappa': self.kappa}
