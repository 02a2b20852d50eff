"""
Synthetic data generation: target coefficients and the forward wave solver.

The solver works in scattered-field form. The incident field is the free-space
Green's function evaluated analytically, and only the scattered remainder
u_sc is stepped:

    u_sc_tt = Laplace(u_sc) + a (u_inc + u_sc),    u_sc = u_sc_t = 0 initially.

Because a vanishes before T_minus the scattered field is identically zero up to
that time, so stepping starts at T_minus.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator

from apps.core.exceptions import ConfigurationError, DataError, NumericalError
from apps.core.geometry import ProblemGeometry

logger = logging.getLogger(__name__)

KIND_BALL = "ball"
KIND_CYLINDER = "cylinder"
KIND_ROTATED = "rotated_cylinder"
KIND_STATIC = "static"
KIND_CUSTOM = "custom"
TARGET_KINDS = (KIND_BALL, KIND_CYLINDER, KIND_ROTATED, KIND_STATIC, KIND_CUSTOM)

CFL_MARGIN = 0.9
MIN_PADDING_CELLS = 8
FINITE_CHECK_EVERY = 50


@dataclass(frozen=True)
class CustomGrid:
    """Coefficient values sampled on a regular (x, y, z, t) grid."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    t: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class TargetModel:
    """
    Ground-truth coefficient a(x, t): a0 inside the moving shape, the background
    value elsewhere inside Q = {|x| < R} x [T_minus, T], and 0 outside Q.
    """

    kind: str = KIND_BALL
    a0: float = 2.0
    background: float = 1.0
    radius: float = 0.1
    height: float = 0.2
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    R: float = 0.5
    T_minus: float = 4.0
    T: float = 12.0
    custom_grid: Optional[CustomGrid] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in TARGET_KINDS:
            raise ConfigurationError(f"Unknown target kind: {self.kind}")
        if self.a0 < 0 or self.background < 0:
            raise ConfigurationError("Coefficient values must be non-negative")
        if self.kind != KIND_CUSTOM and self.a0 <= self.background:
            raise ConfigurationError(f"Target must be a positive inclusion: a0={self.a0} <= background={self.background}")
        if self.kind == KIND_CUSTOM and self.custom_grid is None:
            raise ConfigurationError("Custom target requires a sampled grid")

    @classmethod
    def for_geometry(cls, geometry: ProblemGeometry, **kwargs: Any) -> "TargetModel":
        return cls(R=geometry.R, T_minus=geometry.T_minus, T=geometry.T, **kwargs)

    @classmethod
    def background_only(cls, geometry: ProblemGeometry, background: float = 1.0) -> "TargetModel":
        """Homogeneous coefficient a = background inside Q (zero-size static target)."""
        return cls.for_geometry(geometry, kind=KIND_STATIC, a0=background + 1.0, background=background, radius=0.0)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("custom_grid", None)
        data["center"] = list(self.center)
        return data

    def center_at(self, t: Any) -> np.ndarray:
        """Shape center at time(s) t, shape t.shape + (3,)."""
        t = np.asarray(t, dtype=float)
        if self.kind == KIND_BALL:
            phase = (t - 4.0) * np.pi / 16.0
            return np.stack([0.2 * np.cos(phase), 0.2 * np.sin(phase), 0.05 * t - 0.4], axis=-1)
        if self.kind == KIND_CYLINDER:
            c = 0.05 * t - 0.4
            return np.stack([c, c, c], axis=-1)
        if self.kind == KIND_ROTATED:
            phase = (t - 4.0) * np.pi / 16.0
            return np.stack(
                [0.4 * np.sin(phase) - 0.2, 0.05 * t - 0.4, -0.4 * np.cos(phase) + 0.2], axis=-1
            )
        return np.broadcast_to(np.asarray(self.center, dtype=float), t.shape + (3,)).copy()

    def axis_at(self, t: Any) -> np.ndarray:
        """Unit cylinder axis; the rotated cylinder turns about the y-axis."""
        t = np.asarray(t, dtype=float)
        if self.kind == KIND_ROTATED:
            angle = t * np.pi / 48.0 + np.pi / 12.0
            return np.stack([np.sin(angle), np.zeros_like(angle), np.cos(angle)], axis=-1)
        return np.broadcast_to(np.array([0.0, 0.0, 1.0]), t.shape + (3,)).copy()

    def inside_shape(self, x: Any, t: Any) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.radius <= 0.0:
            return np.zeros(np.broadcast_shapes(x.shape[:-1], t.shape), dtype=bool)
        d = x - self.center_at(t)
        if self.kind in (KIND_BALL, KIND_STATIC):
            return np.sum(d * d, axis=-1) <= self.radius ** 2
        axis = self.axis_at(t)
        along = np.sum(d * axis, axis=-1)
        radial = d - along[..., None] * axis
        return (np.abs(along) <= self.height / 2.0) & (np.sum(radial * radial, axis=-1) <= self.radius ** 2)


def in_cylinder(model: TargetModel, x: np.ndarray, t: Any) -> np.ndarray:
    """Membership in Q = {|x| < R} x [T_minus, T]."""
    t = np.asarray(t, dtype=float)
    radius = np.sqrt(np.sum(x * x, axis=-1))
    return (radius < model.R) & (t >= model.T_minus) & (t <= model.T)


def eval_coefficient(model: TargetModel, x: Any, t: Any) -> np.ndarray:
    """
    Evaluate a(x, t).

    Args:
        model: Target model
        x: Points, shape (..., 3)
        t: Times broadcastable against x.shape[:-1]

    Returns:
        Coefficient values
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], t.shape)
    x = np.broadcast_to(x, shape + (3,))
    t = np.broadcast_to(t, shape)
    inside_q = in_cylinder(model, x, t)

    if model.kind == KIND_CUSTOM:
        grid = model.custom_grid
        interpolator = RegularGridInterpolator(
            (grid.x, grid.y, grid.z, grid.t), grid.values, method="linear", bounds_error=False, fill_value=0.0
        )
        points = np.concatenate([x, t[..., None]], axis=-1)
        values = interpolator(points.reshape(-1, 4)).reshape(shape)
        return np.where(inside_q, np.maximum(values, 0.0), 0.0)

    values = np.where(model.inside_shape(x, t), model.a0, model.background)
    return np.where(inside_q, values, 0.0)


def heaviside(value: Any) -> np.ndarray:
    """Unit step with H(0) = 1."""
    return np.heaviside(np.asarray(value, dtype=float), 1.0)


def analytic_free_space(x: Any, x0: Any, t: Any) -> np.ndarray:
    """
    Free-space Green's function H(t - r) / (4 pi r), r = |x - x0|.

    Raises:
        NumericalError: if any point coincides with the source
    """
    diff = np.asarray(x, dtype=float) - np.asarray(x0, dtype=float)
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    if np.any(r == 0.0):
        raise NumericalError("Green's function evaluated at the source point")
    return heaviside(np.asarray(t, dtype=float) - r) / (4.0 * np.pi * r)


def analytic_normal_derivative(x: Any, x0: Any, t: Any, normal: Any) -> np.ndarray:
    """Normal derivative of the Green's function behind the front."""
    diff = np.asarray(x, dtype=float) - np.asarray(x0, dtype=float)
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    if np.any(r == 0.0):
        raise NumericalError("Green's function evaluated at the source point")
    radial = np.sum(diff * np.asarray(normal, dtype=float), axis=-1)
    return heaviside(np.asarray(t, dtype=float) - r) * (-radial) / (4.0 * np.pi * r ** 3)


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform grid of the forward solver with a cosine-ramped sponge layer."""

    dx: float = 1.0 / 40.0
    dt: float = 1.0 / 160.0
    t_start: Optional[float] = None
    t_end: Optional[float] = None
    padding_cells: int = MIN_PADDING_CELLS
    sponge_cells: int = 12
    sponge_strength: float = 40.0
    record_every: int = 16

    def ball_cells(self, R: float) -> int:
        return int(math.ceil(R / self.dx - 1e-9))

    def half_cells(self, R: float) -> int:
        return self.ball_cells(R) + self.padding_cells + self.sponge_cells

    def box_half_width(self, R: float) -> float:
        return self.half_cells(R) * self.dx

    def window(self, geometry: ProblemGeometry) -> Tuple[float, float]:
        start = geometry.T_minus if self.t_start is None else self.t_start
        end = geometry.T if self.t_end is None else self.t_end
        return start, end

    def validate(self, R: float) -> None:
        """
        Raises:
            ConfigurationError: on CFL violation or insufficient padding
        """
        limit = CFL_MARGIN * self.dx / math.sqrt(3.0)
        if self.dt > limit:
            raise ConfigurationError(f"CFL violated: dt={self.dt:g} > 0.9 dx/sqrt(3)={limit:g}")
        if self.padding_cells < MIN_PADDING_CELLS:
            raise ConfigurationError(f"Need >= {MIN_PADDING_CELLS} padding cells, got {self.padding_cells}")
        if self.sponge_cells < 1 or self.record_every < 1:
            raise ConfigurationError("Sponge width and record stride must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def sponge_profile(grid: SpaceTimeGrid, n_half: int) -> np.ndarray:
    """Damping coefficient along one axis of the box (length 2 n_half + 1)."""
    index = np.abs(np.arange(-n_half, n_half + 1))
    inner = n_half - grid.sponge_cells
    depth = np.clip(index - inner, 0, grid.sponge_cells) / grid.sponge_cells
    return grid.sponge_strength * 0.5 * (1.0 - np.cos(np.pi * depth))


@dataclass
class WaveField:
    """Recorded scattered field on a sub-box around the ball."""

    axis: np.ndarray
    times: np.ndarray
    snapshots: np.ndarray
    source: np.ndarray
    dx: float

    def _time_weights(self, t: float) -> Tuple[int, int, float]:
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise DataError(f"Time {t:g} outside recorded window [{self.times[0]:g}, {self.times[-1]:g}]")
        position = float(np.interp(t, self.times, np.arange(self.times.size)))
        lower = min(int(math.floor(position)), self.times.size - 1)
        upper = min(lower + 1, self.times.size - 1)
        return lower, upper, position - lower

    def scattered(self, points: np.ndarray, t: float) -> np.ndarray:
        """Trilinear interpolation of u_sc at time t (linear in time between records)."""
        points = np.asarray(points, dtype=float)
        lower, upper, frac = self._time_weights(t)
        grid = (self.axis, self.axis, self.axis)
        try:
            low = RegularGridInterpolator(grid, self.snapshots[lower], method="linear")(points)
            if frac == 0.0:
                return low
            high = RegularGridInterpolator(grid, self.snapshots[upper], method="linear")(points)
        except ValueError as exc:
            raise DataError(f"Point outside the recorded sub-box: {exc}") from exc
        return (1.0 - frac) * low + frac * high

    def total(self, points: np.ndarray, t: float) -> np.ndarray:
        """u = u_inc + u_sc at the given points."""
        return analytic_free_space(points, self.source, t) + self.scattered(points, t)


def solve_forward(g: ProblemGeometry, model: TargetModel, s: float, grid: SpaceTimeGrid,
                  crop_margin_cells: int = 3) -> WaveField:
    """
    Solve the Cauchy problem for the source (s, 0, -2R).

    Leapfrog in time, 7-point Laplacian, the coefficient term at the current
    level, zero Dirichlet values on the box faces behind the sponge.

    Args:
        g: Problem geometry
        model: Target coefficient
        s: Source position on the line
        grid: Forward grid
        crop_margin_cells: Cells beyond R kept in the recorded sub-box

    Returns:
        Recorded scattered field

    Raises:
        ConfigurationError: on CFL violation
        NumericalError: if the field becomes non-finite
    """
    grid.validate(g.R)
    n_half = grid.half_cells(g.R)
    axis = np.arange(-n_half, n_half + 1) * grid.dx
    n_crop = grid.ball_cells(g.R) + crop_margin_cells
    crop = slice(n_half - n_crop, n_half + n_crop + 1)
    crop_axis = axis[crop]

    cx, cy, cz = np.meshgrid(crop_axis, crop_axis, crop_axis, indexing="ij")
    crop_points = np.stack([cx, cy, cz], axis=-1)
    x0 = g.source_point(s)
    r = np.linalg.norm(crop_points - x0, axis=-1)
    if np.any(r == 0.0):
        raise NumericalError("Source point lies on a recorded grid node")

    profile = sponge_profile(grid, n_half)
    damping = profile[:, None, None] + profile[None, :, None] + profile[None, None, :]
    half = 0.5 * grid.dt * damping
    plus = 1.0 / (1.0 + half)
    minus = 1.0 - half
    dt2 = grid.dt ** 2

    t_start, t_end = grid.window(g)
    n_steps = int(round((t_end - t_start) / grid.dt))
    shape = (axis.size,) * 3
    u_prev = np.zeros(shape)
    u = np.zeros(shape)
    snapshots = [u[crop, crop, crop].copy()]
    times = [t_start]

    logger.debug(f"Forward solve s={s:.4f}: box {shape}, {n_steps} steps")
    for step in range(n_steps):
        t = t_start + step * grid.dt
        incident = heaviside(t - r) / (4.0 * np.pi * r)
        coefficient = eval_coefficient(model, crop_points, t)
        rhs = ndimage.laplace(u, mode="constant", cval=0.0) / grid.dx ** 2
        rhs[crop, crop, crop] += coefficient * (incident + u[crop, crop, crop])

        u_next = (2.0 * u - minus * u_prev + dt2 * rhs) * plus
        u_next[0, :, :] = u_next[-1, :, :] = 0.0
        u_next[:, 0, :] = u_next[:, -1, :] = 0.0
        u_next[:, :, 0] = u_next[:, :, -1] = 0.0
        u_prev, u = u, u_next

        if (step + 1) % FINITE_CHECK_EVERY == 0 and not np.all(np.isfinite(u)):
            logger.error(f"Non-finite field at step {step + 1} (s={s:.4f})")
            raise NumericalError(f"Forward field became non-finite at step {step + 1}")
        if (step + 1) % grid.record_every == 0 or step + 1 == n_steps:
            snapshots.append(u[crop, crop, crop].copy())
            times.append(t_start + (step + 1) * grid.dt)

    if not np.all(np.isfinite(u)):
        raise NumericalError(f"Forward field became non-finite at step {n_steps}")

    return WaveField(axis=crop_axis, times=np.asarray(times), snapshots=np.asarray(snapshots), source=x0, dx=grid.dx)


def sample_fields(fields: Sequence[WaveField], points: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Total field at points for every source and time, shape (sources, points, times)."""
    out = np.empty((len(fields), points.shape[0], times.size))
    for i, wave in enumerate(fields):
        for j, t in enumerate(times):
            out[i, :, j] = wave.total(points, float(t))
    return out
