"""
Plot-ready exports: CSV point lists, centre trajectories, iteration logs and
legacy VTK structured-points files, one per time slice.
"""

import logging
from pathlib import Path
from typing import List, Union

import numpy as np
import pandas as pd

from .recovery import ReconstructedCoefficient

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


def export_point_list(rec: ReconstructedCoefficient, path: Union[str, Path], only_inside: bool = True) -> Path:
    """CSV with columns x, y, z, t, value."""
    grid = rec.grid
    points = grid.node_points
    keep = grid.broadcast(grid.inside) if only_inside else np.ones(grid.n_nodes, dtype=bool)
    frame = pd.DataFrame({
        "x": points[keep, 0],
        "y": points[keep, 1],
        "z": points[keep, 2],
        "t": grid.node_times[keep],
        "value": rec.values[keep],
    })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def export_centers(centers: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Centre trajectory CSV (t, x, y, z); undetected slices are written as empty cells."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    centers[["t", "x", "y", "z"]].to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def export_iteration_log(log: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log.to_csv(path, index=False, float_format="%.12g")
    return path


def write_vtk_slice(rec: ReconstructedCoefficient, time_index: int, path: Union[str, Path],
                    name: str = "a_comp") -> Path:
    """ASCII legacy VTK STRUCTURED_POINTS file of one time level."""
    grid = rec.grid
    n = grid.axis.size
    t = grid.times[time_index]
    block = rec.values[time_index * grid.n_spatial:(time_index + 1) * grid.n_spatial].reshape(n, n, n)
    # VTK point order runs x fastest.
    ordered = block.transpose(2, 1, 0).ravel()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fd:
        fd.write("# vtk DataFile Version 3.0\n")
        fd.write(f"{name} at t={t:.6g}\n")
        fd.write("ASCII\n")
        fd.write("DATASET STRUCTURED_POINTS\n")
        fd.write(f"DIMENSIONS {n} {n} {n}\n")
        fd.write(f"ORIGIN {grid.axis[0]:.12g} {grid.axis[0]:.12g} {grid.axis[0]:.12g}\n")
        fd.write(f"SPACING {grid.hx:.12g} {grid.hx:.12g} {grid.hx:.12g}\n")
        fd.write(f"POINT_DATA {ordered.size}\n")
        fd.write(f"SCALARS {name} double 1\n")
        fd.write("LOOKUP_TABLE default\n")
        for start in range(0, ordered.size, n):
            fd.write(" ".join(f"{value:.10g}" for value in ordered[start:start + n]))
            fd.write("\n")
    return path


def export_vtk_series(rec: ReconstructedCoefficient, directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    paths = [
        write_vtk_slice(rec, index, directory / f"a_comp_{index:04d}.vtk")
        for index in range(rec.grid.times.size)
    ]
    logger.info(f"Wrote {len(paths)} VTK slices to {directory}")
    return paths
