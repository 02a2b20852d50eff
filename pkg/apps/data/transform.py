"""
Data transform: logarithm of the traces, spline differentiation in the source
position s, and projection onto the basis psi_n(s).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline, RBFInterpolator, interp1d

from apps.core.basis import BasisSet, project_onto_basis
from apps.core.exceptions import DataError

from .containers import read_container, write_container
from .traces import CauchyTraces

logger = logging.getLogger(__name__)

STAGE_TRANSFORMED = "transformed"


@dataclass
class TransformedTraces:
    """p0 = ln g0, p1 = g1 / g0 per (source, node, time); q0, q1 per (k, node, time)."""

    nodes: np.ndarray
    times: np.ndarray
    sources: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    q0: np.ndarray
    q1: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.p0)):
            raise DataError("p0 contains non-finite values")
        if self.q0.shape != self.q1.shape:
            raise DataError(f"q0 {self.q0.shape} and q1 {self.q1.shape} differ in shape")

    @property
    def N(self) -> int:
        return self.q0.shape[0]


def log_traces(traces: CauchyTraces) -> Tuple[np.ndarray, np.ndarray]:
    """
    p0 = ln g0, p1 = g1 / g0 entrywise.

    Raises:
        DataError: with the index of the first g0 <= 0
    """
    traces.check_positive()
    return np.log(traces.g0), traces.g1 / traces.g0


def spline_grid(R: float, step: Optional[float] = None) -> np.ndarray:
    """Uniform s-grid on [-R, R], step R/100 by default."""
    step = R / 100.0 if step is None else step
    count = int(np.ceil(2.0 * R / step - 1e-9))
    return np.linspace(-R, R, count + 1)


def projection_grid(basis: BasisSet) -> np.ndarray:
    """Spline grid fine enough for the basis quadrature."""
    return spline_grid(basis.R, min(basis.R / 100.0, basis.max_sample_step))


def resample_sources(values: Any, sources: Any, s_grid: Any, axis: int = 0) -> np.ndarray:
    """
    Natural cubic spline through samples on the source grid, evaluated on `s_grid`.

    Beyond the outermost sources the spline is continued linearly, which is
    where a natural spline's curvature vanishes; at most one source step is
    bridged.

    Raises:
        DataError: on fewer than 4 samples, a non-uniform source grid or
            evaluation points further than one source step outside it
    """
    sources = np.asarray(sources, dtype=float)
    s_grid = np.asarray(s_grid, dtype=float)
    if sources.size < 4:
        raise DataError(f"At least 4 source samples are required, got {sources.size}")
    steps = np.diff(sources)
    if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-8, atol=1e-12):
        raise DataError("Source samples must lie on a uniform increasing s-grid")
    reach = steps[0] * (1.0 + 1e-9)
    if s_grid.min() < sources[0] - reach or s_grid.max() > sources[-1] + reach:
        raise DataError(
            f"Cannot extend source samples on [{sources[0]:.4g}, {sources[-1]:.4g}] "
            f"to [{s_grid.min():.4g}, {s_grid.max():.4g}]"
        )

    values = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    spline = CubicSpline(sources, values, axis=0, bc_type="natural", extrapolate=False)
    slope = spline.derivative()
    out = spline(s_grid)
    for end, mask in ((sources[0], s_grid < sources[0]), (sources[-1], s_grid > sources[-1])):
        if mask.any():
            offset = (s_grid[mask] - end).reshape((-1,) + (1,) * (values.ndim - 1))
            out[mask] = spline(end) + offset * slope(end)
    return np.moveaxis(out, 0, axis)


def project_source_samples(values: Any, sources: Any, basis: BasisSet, axis: int = 0) -> np.ndarray:
    """Project samples given on the source grid: resample to the projection grid, then integrate."""
    fine = projection_grid(basis)
    return project_onto_basis(resample_sources(values, sources, fine, axis=axis), basis, s_grid=fine, axis=axis)


def spline_s_derivative(values: Any, s_grid: Any, axis: int = 0, at: Optional[Any] = None) -> np.ndarray:
    """
    First derivative of the natural cubic spline through the samples.

    Args:
        values: Samples; the s-dependence runs along `axis`
        s_grid: Uniform s-grid of the samples
        axis: Axis of `values` carrying s
        at: Evaluation points (default: the sample points)

    Raises:
        DataError: on fewer than 4 samples or a non-uniform grid
    """
    s_grid = np.asarray(s_grid, dtype=float)
    if s_grid.size < 4:
        raise DataError(f"Spline differentiation needs >= 4 samples, got {s_grid.size}")
    steps = np.diff(s_grid)
    if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-8, atol=1e-12):
        raise DataError("Spline differentiation needs a uniform increasing s-grid")
    spline = CubicSpline(s_grid, np.asarray(values, dtype=float), axis=axis, bc_type="natural")
    return spline.derivative()(s_grid if at is None else np.asarray(at, dtype=float))


def assemble_boundary_coefficients(p0: np.ndarray, p1: np.ndarray, basis: BasisSet,
                                   sources: Any) -> Tuple[np.ndarray, np.ndarray]:
    """
    q_{i,k} = (p_i, psi_k) for every boundary node and time.

    The samples along the source grid are splined in s onto the projection
    grid before the integrals are taken.

    Returns:
        (q0, q1) shaped (k, node, time)
    """
    q0 = project_source_samples(p0, sources, basis, axis=0)
    q1 = project_source_samples(p1, sources, basis, axis=0)
    return q0, q1


def transform_traces(traces: CauchyTraces, basis: BasisSet) -> TransformedTraces:
    """Log transform followed by projection onto the basis."""
    p0, p1 = log_traces(traces)
    q0, q1 = assemble_boundary_coefficients(p0, p1, basis, traces.sources)
    logger.info(f"Projected {traces.sources.size} sources onto N={basis.N} basis functions")
    return TransformedTraces(
        nodes=traces.nodes,
        times=traces.times,
        sources=traces.sources,
        p0=p0,
        p1=p1,
        q0=q0,
        q1=q1,
        metadata={"N": basis.N, "R": basis.R, "source_stage": traces.stage, "noise": traces.noise},
    )


def s_derivative_discrepancy(data: TransformedTraces, basis: BasisSet, step: Optional[float] = None) -> Dict[str, float]:
    """
    Compare the spline s-derivative of p0 with sum_k q0_k psi_k' on the spline
    grid restricted to the span of the sources.
    """
    fine = spline_grid(basis.R, step)
    fine = fine[(fine >= data.sources[0]) & (fine <= data.sources[-1])]
    spline_values = spline_s_derivative(data.p0, data.sources, axis=0, at=fine)
    series_values = np.tensordot(basis.derivative(fine), data.q0, axes=(1, 0))
    diff = spline_values - series_values
    scale = float(np.sqrt(np.mean(spline_values ** 2))) or 1.0
    return {
        "rms_spline": scale,
        "rms_difference": float(np.sqrt(np.mean(diff ** 2))),
        "relative": float(np.sqrt(np.mean(diff ** 2)) / scale),
    }


def project_to_sphere(points: np.ndarray, R: float) -> np.ndarray:
    """Radial projection R x / |x|."""
    radius = np.linalg.norm(points, axis=-1, keepdims=True)
    if np.any(radius == 0.0):
        raise DataError("Cannot project the origin onto the sphere")
    return R * points / radius


def resample_boundary(q: np.ndarray, nodes: np.ndarray, times: np.ndarray, targets: np.ndarray,
                      target_times: np.ndarray, R: float, neighbors: Optional[int] = 32) -> np.ndarray:
    """
    Transfer (k, node, time) data to other points and times.

    Targets are projected radially onto the sphere; values come from a
    thin-plate RBF fit over the boundary nodes and linear interpolation in time.

    Returns:
        Array shaped (k, target, target_time)

    Raises:
        DataError: if a target time falls outside the data window
    """
    target_times = np.asarray(target_times, dtype=float)
    if target_times.min() < times[0] - 1e-9 or target_times.max() > times[-1] + 1e-9:
        raise DataError(
            f"Target times [{target_times.min():g}, {target_times.max():g}] exceed data window "
            f"[{times[0]:g}, {times[-1]:g}]"
        )
    in_time = interp1d(times, q, axis=2, kind="linear", assume_sorted=True)(np.clip(target_times, times[0], times[-1]))
    k, n_nodes, n_times = in_time.shape
    flat = np.moveaxis(in_time, 1, 0).reshape(n_nodes, k * n_times)
    neighbors = None if neighbors is None or neighbors >= n_nodes else neighbors
    interpolator = RBFInterpolator(nodes, flat, kernel="thin_plate_spline", neighbors=neighbors)
    values = interpolator(project_to_sphere(np.asarray(targets, dtype=float), R))
    return np.moveaxis(values.reshape(-1, k, n_times), 0, 1)


def save_transformed(data: TransformedTraces, path: Union[str, Path]) -> Path:
    arrays = {
        "nodes": data.nodes,
        "times": data.times,
        "sources": data.sources,
        "p0": data.p0,
        "p1": data.p1,
        "q0": data.q0,
        "q1": data.q1,
    }
    return write_container(path, STAGE_TRANSFORMED, arrays, data.metadata)


def load_transformed(path: Union[str, Path]) -> TransformedTraces:
    header, arrays = read_container(path)
    if header["stage"] != STAGE_TRANSFORMED:
        raise DataError(f"{path} holds '{header['stage']}' data, expected transformed traces")
    return TransformedTraces(metadata=header["metadata"], **arrays)
