"""
One-dimensional multiplicative dynamics.

sigma(x) = s0 * sqrt((1 + x^2) / (1 + x^2 / 9)): behaves like s0 * sqrt(1 + x^2) near the
origin and saturates at 3 * s0, so (FE) holds with C_FE = s0^2 and C_FB = 3 * s0.
"""
import numpy as np

from levyfbsde.model_coefficients import Dynamics


class MultiplicativeDynamics(Dynamics):

    def __init__(self, s0: float = 0.5, kappa: float = 0.2):
        super().__init__('multiplicative-1d', 1)
        self.s0 = float(s0)
        self.kappa = float(kappa)

    def _profile(self, x):
        x2 = x * x
        f = (1.0 + x2) / (1.0 + x2 / 9.0)
        df = (16.0 / 9.0) * x / (1.0 + x2 / 9.0) ** 2
        return f, df

    def drift(self, t, x):
        return -self.kappa * np.asarray(x, dtype=float)

    def sigma(self, t, x):
        x = np.asarray(x, dtype=float)
        f, _ = self._profile(x[..., 0])
        return (self.s0 * np.sqrt(f))[..., None, None]

    def sigma_inv(self, t, x):
        return 1.0 / self.sigma(t, x)

    def grad_drift(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1] + (1, 1), -self.kappa)

    def grad_sigma(self, t, x):
        x = np.asarray(x, dtype=float)
        f, df = self._profile(x[..., 0])
        return (self.s0 * df / (2.0 * np.sqrt(f)))[..., None, None, None]

    def params(self):
        return {'s0': self.s0, 'kappa': self.kappa}
