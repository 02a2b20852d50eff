"""
Coefficient recovery from the minimising field and reconstruction metrics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from apps.core.basis import BasisSet, CouplingTensors, build_basis, coupling_tensors
from apps.core.exceptions import DataError, EmptyReconstructionError
from apps.core.geometry import ProblemGeometry
from apps.data.forward import TargetModel, eval_coefficient

from .grid import InversionGrid
from .inversion import CoefficientVectorField

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


@dataclass
class ReconstructedCoefficient:
    """a_comp on the inversion grid, zero outside Q."""

    grid: InversionGrid
    values: np.ndarray
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.values.shape != (self.grid.n_nodes,):
            raise DataError(f"Coefficient shape {self.values.shape} does not match {self.grid.n_nodes} nodes")
        if not np.all(np.isfinite(self.values)):
            raise DataError("Reconstructed coefficient has non-finite values")

    def time_index(self, t: float) -> int:
        index = int(np.argmin(np.abs(self.grid.times - t)))
        if abs(self.grid.times[index] - t) > 0.5 * self.grid.ht + 1e-12:
            raise DataError(f"Time {t:g} is not on the inversion grid")
        return index

    def at_time(self, t: float) -> np.ndarray:
        """Values at one time level, flattened over the spatial nodes."""
        index = self.time_index(t)
        n = self.grid.n_spatial
        return self.values[index * n:(index + 1) * n]


def q_mask(grid: InversionGrid, geometry: ProblemGeometry) -> np.ndarray:
    """Nodes in Q = {|x| < R} x [T_minus, T]."""
    radius = np.linalg.norm(grid.node_points, axis=1)
    times = grid.node_times
    return (radius < geometry.R) & (times >= geometry.T_minus - 1e-12) & (times <= geometry.T + 1e-12)


def recover_coefficient(field: CoefficientVectorField, tensors: CouplingTensors, basis: BasisSet,
                        g: ProblemGeometry, provenance: Optional[Dict[str, Any]] = None) -> ReconstructedCoefficient:
    """
    a = sum_n (v_n,tt - Laplace v_n) c_n + sum_{n,k} (v_n,t v_k,t - grad v_n . grad v_k) d_nk.
    """
    grid = field.grid
    V = field.values
    Vt = grid.dt @ V
    linear = (grid.wave_operator @ V) @ tensors.C1
    quadratic = np.einsum("in,nk,ik->i", Vt, tensors.C2, Vt)
    for op in grid.grad:
        Gd = op @ V
        quadratic = quadratic - np.einsum("in,nk,ik->i", Gd, tensors.C2, Gd)
    values = np.where(q_mask(grid, g), linear + quadratic, 0.0)
    return ReconstructedCoefficient(grid, values, dict(provenance or {}))


def recover_by_quadrature(field: CoefficientVectorField, basis: BasisSet, g: ProblemGeometry) -> np.ndarray:
    """Same integral by synthesising v(x, s, t) at the quadrature nodes."""
    grid = field.grid
    V = field.values
    psi = basis.evaluate(basis.nodes)
    weights = basis.weights / (2.0 * basis.R)
    linear = (grid.wave_operator @ V) @ psi.T
    vt = (grid.dt @ V) @ psi.T
    integrand = linear + vt * vt
    for op in grid.grad:
        gd = (op @ V) @ psi.T
        integrand = integrand - gd * gd
    return np.where(q_mask(grid, g), integrand @ weights, 0.0)


def target_mask(model: TargetModel, grid: InversionGrid) -> np.ndarray:
    """Nodes of the true target support inside Q."""
    points = grid.node_points
    times = grid.node_times
    radius = np.linalg.norm(points, axis=1)
    inside_q = (radius < model.R) & (times >= model.T_minus) & (times <= model.T)
    return inside_q & model.inside_shape(points, times)


def compute_contrast(rec: ReconstructedCoefficient, mask: np.ndarray, background: float = 1.0) -> float:
    """
    Peak of a_comp over the mask divided by the background.

    Raises:
        DataError: if the mask is empty
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("Contrast mask is empty")
    return float(rec.values[mask].max() / background)


def extract_center(rec: ReconstructedCoefficient, t: float, threshold: float = DEFAULT_THRESHOLD,
                   background: float = 1.0) -> np.ndarray:
    """
    Centroid of the background-subtracted excess above `threshold` of its peak.

    Raises:
        EmptyReconstructionError: if nothing exceeds the background at time t
    """
    excess = np.clip(rec.at_time(t) - background, 0.0, None)
    excess[~rec.grid.inside] = 0.0
    peak = float(excess.max())
    if peak <= 0.0:
        raise EmptyReconstructionError(f"No target detected at t={t:g}")
    selected = excess >= threshold * peak
    weights = excess[selected]
    return (rec.grid.points[selected] * weights[:, None]).sum(axis=0) / weights.sum()


def center_series(rec: ReconstructedCoefficient, model: Optional[TargetModel] = None,
                  times: Optional[Sequence[float]] = None, threshold: float = DEFAULT_THRESHOLD,
                  background: float = 1.0) -> pd.DataFrame:
    """Extracted centres per time slice; undetected slices carry NaN and detected=False."""
    times = rec.grid.times if times is None else np.asarray(times, dtype=float)
    rows = []
    for t in times:
        row: Dict[str, Any] = {"t": float(t)}
        try:
            center = extract_center(rec, float(t), threshold, background)
            row.update({"x": center[0], "y": center[1], "z": center[2], "detected": True})
        except EmptyReconstructionError:
            row.update({"x": math.nan, "y": math.nan, "z": math.nan, "detected": False})
        if model is not None:
            true = model.center_at(float(t))
            row.update({"true_x": true[0], "true_y": true[1], "true_z": true[2]})
            row["distance"] = (
                float(np.linalg.norm(true - np.array([row["x"], row["y"], row["z"]]))) if row["detected"] else math.nan
            )
        rows.append(row)
    return pd.DataFrame(rows)


def field_error(rec: ReconstructedCoefficient, model: TargetModel, geometry: ProblemGeometry,
                threshold: float = DEFAULT_THRESHOLD) -> Dict[str, Any]:
    """
    Relative L2 error over Q, max error on the target and the centre-distance series.
    """
    grid = rec.grid
    truth = eval_coefficient(model, grid.node_points, grid.node_times)
    in_q = q_mask(grid, geometry)
    diff = rec.values - truth
    denominator = float(np.sqrt(np.sum(truth[in_q] ** 2)))
    relative_l2 = float(np.sqrt(np.sum(diff[in_q] ** 2))) / denominator if denominator > 0 else math.nan

    support = target_mask(model, grid)
    max_error = float(np.abs(diff[support]).max()) if support.any() else math.nan

    centers = center_series(rec, model, threshold=threshold, background=model.background)
    detected = centers[centers["detected"]]
    mean_distance = float(detected["distance"].mean()) if len(detected) else math.nan
    missing = [float(t) for t in centers.loc[~centers["detected"], "t"]]
    if missing:
        logger.info(f"No target detected at {len(missing)} time levels")
    return {
        "relative_l2": relative_l2,
        "max_error_on_target": max_error,
        "mean_center_distance": mean_distance,
        "undetected_times": missing,
        "centers": centers,
    }


def truncation_consistency(N_values: Sequence[int], R: float) -> pd.DataFrame:
    """
    Fraction of an s-independent function captured by the first N basis
    functions: sum_n (int psi_n)^2 / 2R, which rises to 1 with N.
    """
    rows = []
    for N in N_values:
        tensors = coupling_tensors(build_basis(N, R))
        captured = float(2.0 * R * np.sum(tensors.C1 ** 2))
        rows.append({"N": N, "captured": captured})
    return pd.DataFrame(rows)
