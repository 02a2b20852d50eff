"""
Field and config builders shared by several test modules.
"""

import numpy as np

from apps.analytics.inversion import CoefficientVectorField
from apps.pipeline.config import PipelineConfig, deep_merge, desk_profile, scenario_preset


def random_field(grid, N, amplitude=0.05, seed=0, boundary_amplitude=None):
    """Random field; pinned entries optionally get their own amplitude."""
    rng = np.random.default_rng(seed)
    values = amplitude * rng.standard_normal((grid.n_nodes, N))
    if boundary_amplitude is not None:
        pinned = ~grid.free
        values[pinned] = boundary_amplitude * rng.standard_normal((int(pinned.sum()), N))
    return CoefficientVectorField(grid, values)


def smooth_field(grid, N, amplitude=0.05):
    """Low-order polynomial in (x, t) per component."""
    points = grid.node_points
    t = grid.node_times - grid.times.mean()
    values = np.empty((grid.n_nodes, N))
    for k in range(N):
        values[:, k] = amplitude * (1.0 + points[:, 0] + 0.5 * points[:, 1] * points[:, 2] + 0.3 * t) / (k + 1)
    return CoefficientVectorField(grid, values)


def zero_boundary(field):
    """Copy of the field with every pinned entry set to zero."""
    values = field.values.copy()
    values[~field.grid.free] = 0.0
    return field.with_values(values)


def tiny_config(output_dir, **sections):
    """Pipeline config small enough for an end-to-end test run."""
    data = deep_merge(desk_profile(), scenario_preset("static"))
    data = deep_merge(data, {
        "output_dir": str(output_dir),
        "threads": 2,
        "geometry": {"source_count": 10},
        "forward": {"dx": 0.1, "dt": 0.025, "record_every": 4, "boundary_nodes": 48},
        "basis": {"N": 2},
        "inversion": {
            "hx": 0.25,
            "ht": 0.2,
            "t_window": [7.6, 8.4],
            "max_iters": 3,
            "grad_tol": 0.0,
            "initial_guess": "boundary",
            "probe_pairs": 2,
            "probe_amplitude": 0.01,
            "checkpoint_every": 2,
        },
    })
    data = deep_merge(data, sections)
    return PipelineConfig.from_dict(data)
