"""
Value functions v(s, x) tabulated on a (time x rectangular space) grid.
Multilinear in space, piecewise-linear in time; outside the spatial box the
interpolant continues linearly from the boundary cells and the query is counted as an exit.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from levyfbsde.errors import InterpolationError

logger = logging.getLogger(__name__)

TIME_TOL = 1e-9


@dataclass(eq=False)
class ValueFunction:
    times: np.ndarray                 # ascending solve slices
    axes: Tuple[np.ndarray, ...]      # one grid per space dimension
    values: np.ndarray                # (n_times, *axis sizes)
    label: str = 'v'
    growth_degree: int = 1            # polynomial-growth tag for the extension
    stats: Dict[str, int] = field(default_factory=lambda: {'queries': 0, 'exits': 0})

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        self.values = np.asarray(self.values, dtype=float)
        if len(self.times) < 2:
            raise InterpolationError("a value function needs at least two time slices")
        expected = (len(self.times),) + tuple(len(a) for a in self.axes)
        if self.values.shape != expected:
            raise InterpolationError(f"values shape {self.values.shape} does not match grid {expected}")
        self._interp = RegularGridInterpolator((self.times,) + self.axes, self.values,
                                               method='linear', bounds_error=False, fill_value=None)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def box(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.array([a[0] for a in self.axes]), np.array([a[-1] for a in self.axes])

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    @property
    def exit_fraction(self) -> float:
        return self.stats['exits'] / max(self.stats['queries'], 1)

    def grid_points(self) -> np.ndarray:
        """Spatial nodes (G, d) in the C order of values[j].reshape(-1)"""
        mesh = np.meshgrid(*self.axes, indexing='ij')
        return np.stack([g.reshape(-1) for g in mesh], axis=-1)

    def slice_values(self, j: int) -> np.ndarray:
        return self.values[j].reshape(-1)

    def covers(self, s) -> bool:
        s = np.asarray(s, dtype=float)
        return bool(np.all((s >= self.times[0] - TIME_TOL) & (s <= self.times[-1] + TIME_TOL)))

    def __call__(self, s, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        s = np.asarray(s, dtype=float)
        if not self.covers(s):
            raise InterpolationError(
                f"{self.label} covers [{self.times[0]:.6g}, {self.times[-1]:.6g}], queried at "
                f"[{float(np.min(s)):.6g}, {float(np.max(s)):.6g}]")
        s = np.clip(np.broadcast_to(s, x.shape[:-1]), self.times[0], self.times[-1])
        lo, hi = self.box
        outside = np.any((x < lo) | (x > hi), axis=-1)
        self.stats['queries'] += int(outside.size)
        self.stats['exits'] += int(np.count_nonzero(outside))
        pts = np.concatenate([s[..., None], x], axis=-1)
        return self._interp(pts.reshape(-1, self.dim + 1)).reshape(x.shape[:-1])

    def with_values(self, values: np.ndarray, label: Optional[str] = None) -> 'ValueFunction':
        return ValueFunction(self.times, self.axes, values, label or self.label, self.growth_degree)

    def sup_diff(self, other: 'ValueFunction') -> float:
        return float(np.max(np.abs(self.values - other.values)))

    def restrict(self, t_lo: float, t_hi: float) -> 'ValueFunction':
        keep = (self.times >= t_lo - TIME_TOL) & (self.times <= t_hi + TIME_TOL)
        return ValueFunction(self.times[keep], self.axes, self.values[keep], self.label, self.growth_degree)


def make_grid(box: float, space_nodes: int, dim: int) -> Tuple[np.ndarray, ...]:
    """Uniform axes over [-box, box]^dim"""
    axis = np.linspace(-box, box, space_nodes)
    return tuple(axis.copy() for _ in range(dim))


def tabulate(fn: Callable, times: Sequence[float], axes: Tuple[np.ndarray, ...],
             label: str = 'v') -> ValueFunction:
    """ValueFunction with values fn(s, x) on the grid"""
    times = np.asarray(times, dtype=float)
    shell = ValueFunction(times, axes, np.zeros((len(times),) + tuple(len(a) for a in axes)), label)
    pts = shell.grid_points()
    values = np.stack([np.asarray(fn(s, pts), dtype=float).reshape(shell.values.shape[1:]) for s in times])
    return shell.with_values(values)


def stitch(parts: Sequence[ValueFunction], label: str = 'v') -> ValueFunction:
    """Join value functions on adjacent time spans (shared endpoints kept once)"""
    parts = sorted(parts, key=lambda vf: vf.times[0])
    times, values = [parts[0].times], [parts[0].values]
    for vf in parts[1:]:
        start = 1 if abs(vf.times[0] - times[-1][-1]) <= TIME_TOL else 0
        times.append(vf.times[start:])
        values.append(vf.values[start:])
    return ValueFunction(np.concatenate(times), parts[0].axes, np.concatenate(values), label,
                         parts[0].growth_degree)
