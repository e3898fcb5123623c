"""
Two-dimensional smooth dynamics with a state-dependent, non-diagonal sigma.

sigma(x) = s0 * [[1 + 0.25 sin x1, 0.1 cos x2],
                 [0.1 sin x1,      1 + 0.25 cos x2]]
stays invertible (det >= s0^2 * (0.75^2 - 0.01)).
"""
import numpy as np

from levyfbsde.model_coefficients import Dynamics


class Smooth2dDynamics(Dynamics):

    def __init__(self, s0: float = 0.5, kappa: float = 0.2):
        super().__init__('smooth-2d', 2)
        self.s0 = float(s0)
        self.kappa = float(kappa)

    def drift(self, t, x):
        return -self.kappa * np.asarray(x, dtype=float)

    def sigma(self, t, x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        s = np.empty(x.shape[:-1] + (2, 2))
        s[..., 0, 0] = 1.0 + 0.25 * np.sin(x1)
        s[..., 0, 1] = 0.1 * np.cos(x2)
        s[..., 1, 0] = 0.1 * np.sin(x1)
        s[..., 1, 1] = 1.0 + 0.25 * np.cos(x2)
        return self.s0 * s

    def sigma_inv(self, t, x):
        s = self.sigma(t, x)
        det = s[..., 0, 0] * s[..., 1, 1] - s[..., 0, 1] * s[..., 1, 0]
        inv = np.empty_like(s)
        inv[..., 0, 0] = s[..., 1, 1]
        inv[..., 0, 1] = -s[..., 0, 1]
        inv[..., 1, 0] = -s[..., 1, 0]
        inv[..., 1, 1] = s[..., 0, 0]
        return inv / det[..., None, None]

    def grad_drift(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(-self.kappa * np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def grad_sigma(self, t, x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        g = np.zeros(x.shape[:-1] + (2, 2, 2))
        g[..., 0, 0, 0] = 0.25 * np.cos(x1)
        g[..., 0, 1, 1] = -0.1 * np.sin(x2)
        g[..., 1, 0, 0] = 0.1 * np.cos(x1)
        g[..., 1, 1, 1] = -0.25 * np.sin(x2)
        return self.s0 * g

    def params(self):
        return {'s0': self.s0, 'kappa': self.kappa}
