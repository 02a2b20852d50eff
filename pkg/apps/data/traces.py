"""
Lateral Cauchy data on the sphere |x| = R: node layout, trace extraction,
parallel simulation over sources and the multiplicative noise model.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from apps.core.exceptions import DataError
from apps.core.geometry import ProblemGeometry

from .containers import read_container, write_container
from .forward import (
    SpaceTimeGrid,
    TargetModel,
    WaveField,
    analytic_free_space,
    analytic_normal_derivative,
    solve_forward,
)

logger = logging.getLogger(__name__)

STAGE_RAW = "raw"
STAGE_NOISY = "noisy"


def fibonacci_sphere(n: int, R: float) -> np.ndarray:
    """n nearly uniform points on the sphere of radius R (Fibonacci spiral)."""
    if n < 1:
        raise ValueError(f"Need at least one boundary node, got {n}")
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    rho = np.sqrt(1.0 - z * z)
    theta = np.pi * (1.0 + np.sqrt(5.0)) * i
    return R * np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])


@dataclass
class CauchyTraces:
    """Dirichlet (g0) and Neumann (g1) data indexed (source, node, time)."""

    nodes: np.ndarray
    normals: np.ndarray
    times: np.ndarray
    sources: np.ndarray
    g0: np.ndarray
    g1: np.ndarray
    stage: str = STAGE_RAW
    noise: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = (self.sources.size, self.nodes.shape[0], self.times.size)
        if self.g0.shape != expected or self.g1.shape != expected:
            raise DataError(f"Trace shapes {self.g0.shape}/{self.g1.shape} differ from {expected}")

    @property
    def shape(self):
        return self.g0.shape

    def check_positive(self) -> None:
        """
        Raises:
            DataError: naming the first entry with g0 <= 0
        """
        bad = np.argwhere(~(self.g0 > 0.0))
        if bad.size:
            index = tuple(int(i) for i in bad[0])
            raise DataError(f"g0 must be positive; g0{index} = {self.g0[index]:.3e} ({len(bad)} entries)")

    def metadata(self) -> Dict[str, Any]:
        return {"stage": self.stage, "noise": dict(self.noise), "shape": list(self.shape)}


def extract_traces(wave: WaveField, nodes: np.ndarray, times: Optional[np.ndarray] = None,
                   window: Optional[tuple] = None) -> Dict[str, np.ndarray]:
    """
    Dirichlet and Neumann traces of one forward solve.

    g0 is the analytic incident field plus the trilinearly interpolated
    scattered field; g1 is the centred difference along the outward normal
    with offsets +-dx.

    Args:
        wave: Recorded field of one source
        nodes: Points on |x| = R
        times: Output times (default: every recorded time)
        window: Closed (start, end) restricting the output times

    Returns:
        Dict with 'times', 'g0', 'g1'; arrays shaped (node, time)

    Raises:
        DataError: if a stencil point leaves the recorded sub-box
    """
    times = wave.times if times is None else np.asarray(times, dtype=float)
    if window is not None:
        keep = (times >= window[0] - 1e-12) & (times <= window[1] + 1e-12)
        times = times[keep]
    radius = np.linalg.norm(nodes, axis=1, keepdims=True)
    normals = nodes / radius
    outer = nodes + wave.dx * normals
    inner = nodes - wave.dx * normals

    g0 = np.empty((nodes.shape[0], times.size))
    g1 = np.empty_like(g0)
    for j, t in enumerate(times):
        g0[:, j] = wave.total(nodes, float(t))
        g1[:, j] = (wave.total(outer, float(t)) - wave.total(inner, float(t))) / (2.0 * wave.dx)
    return {"times": times, "g0": g0, "g1": g1}


def simulate_traces(g: ProblemGeometry, model: TargetModel, grid: SpaceTimeGrid, nodes: np.ndarray,
                    max_workers: int = 4, sources: Optional[np.ndarray] = None) -> CauchyTraces:
    """
    Forward-solve every source and assemble the traces.

    Solves run in a thread pool; each writes only its own source slice so the
    result does not depend on completion order.
    """
    sources = np.asarray(g.source_positions if sources is None else sources, dtype=float)
    window = grid.window(g)
    normals = nodes / np.linalg.norm(nodes, axis=1, keepdims=True)

    def run(s: float) -> Dict[str, np.ndarray]:
        wave = solve_forward(g, model, s, grid)
        return extract_traces(wave, nodes, window=window)

    results: Dict[int, Dict[str, np.ndarray]] = {}
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        future_to_index = {executor.submit(run, float(s)): i for i, s in enumerate(sources)}
        for future in as_completed(future_to_index):
            index = future_to_index[future]
            results[index] = future.result()
            logger.info(f"Source {index + 1}/{sources.size} done (s={sources[index]:+.4f})")

    times = results[0]["times"]
    g0 = np.empty((sources.size, nodes.shape[0], times.size))
    g1 = np.empty_like(g0)
    for index, result in results.items():
        g0[index] = result["g0"]
        g1[index] = result["g1"]

    traces = CauchyTraces(nodes=nodes, normals=normals, times=times, sources=sources, g0=g0, g1=g1)
    traces.check_positive()
    return traces


def analytic_traces(g: ProblemGeometry, nodes: np.ndarray, times: np.ndarray,
                    sources: Optional[np.ndarray] = None) -> CauchyTraces:
    """Exact traces of the a = 0 problem (free-space Green's function)."""
    sources = np.asarray(g.source_positions if sources is None else sources, dtype=float)
    normals = nodes / np.linalg.norm(nodes, axis=1, keepdims=True)
    g0 = np.empty((sources.size, nodes.shape[0], times.size))
    g1 = np.empty_like(g0)
    for i, s in enumerate(sources):
        x0 = g.source_point(s)
        g0[i] = analytic_free_space(nodes[:, None, :], x0, times[None, :])
        g1[i] = analytic_normal_derivative(nodes[:, None, :], x0, times[None, :], normals[:, None, :])
    return CauchyTraces(nodes=nodes, normals=normals, times=np.asarray(times, dtype=float), sources=sources, g0=g0, g1=g1)


def add_noise(traces: CauchyTraces, delta: float, seed: Union[int, np.random.SeedSequence, None],
              independent_sources: bool = False) -> CauchyTraces:
    """
    Multiplicative noise g (1 + delta xi), xi uniform on [-1, 1].

    xi is drawn per (node, time) and shared across sources unless
    `independent_sources`; g0 and g1 get independent draws.

    Raises:
        DataError: if delta < 0 or the noisy g0 is not positive
    """
    if delta < 0:
        raise DataError(f"Noise level must be non-negative, got {delta}")
    noise = noise_label(delta, seed, independent_sources)
    if delta == 0:
        return replace(traces, g0=traces.g0.copy(), g1=traces.g1.copy(), stage=STAGE_NOISY, noise=noise)

    rng = np.random.default_rng(seed)
    shape = traces.shape if independent_sources else traces.shape[1:]
    xi0 = rng.uniform(-1.0, 1.0, size=shape)
    xi1 = rng.uniform(-1.0, 1.0, size=shape)
    noisy = replace(
        traces,
        g0=traces.g0 * (1.0 + delta * xi0),
        g1=traces.g1 * (1.0 + delta * xi1),
        stage=STAGE_NOISY,
        noise=noise,
    )
    noisy.check_positive()
    logger.info(f"Added {delta:.1%} multiplicative noise to {traces.g0.size} trace entries")
    return noisy


def noise_label(delta: float, seed: Any, independent_sources: bool = False) -> Dict[str, Any]:
    """JSON-ready description of one noise draw."""
    return {"delta": float(delta), "seed": _seed_label(seed), "independent_sources": bool(independent_sources)}


def _seed_label(seed: Any) -> Any:
    if isinstance(seed, np.random.SeedSequence):
        entropy = seed.entropy
        if not isinstance(entropy, int):
            entropy = [int(e) for e in entropy]
        return {"entropy": entropy, "spawn_key": [int(k) for k in seed.spawn_key]}
    return seed


def export_source_csv(traces: CauchyTraces, source_index: int, path: Union[str, Path]) -> Path:
    """Long-format CSV of one source's traces for plotting."""
    nodes = traces.nodes
    n_nodes, n_times = traces.g0.shape[1:]
    frame = pd.DataFrame({
        "node": np.repeat(np.arange(n_nodes), n_times),
        "x": np.repeat(nodes[:, 0], n_times),
        "y": np.repeat(nodes[:, 1], n_times),
        "z": np.repeat(nodes[:, 2], n_times),
        "t": np.tile(traces.times, n_nodes),
        "g0": traces.g0[source_index].ravel(),
        "g1": traces.g1[source_index].ravel(),
    })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def export_all_sources(traces: CauchyTraces, directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    return [export_source_csv(traces, i, directory / f"source_{i:03d}.csv") for i in range(traces.sources.size)]


def save_traces(traces: CauchyTraces, path: Union[str, Path], geometry: Optional[ProblemGeometry] = None,
                extra: Optional[Dict[str, Any]] = None) -> Path:
    metadata = {"noise": traces.noise, "geometry": geometry.to_dict() if geometry else None}
    metadata.update(extra or {})
    arrays = {
        "nodes": traces.nodes,
        "normals": traces.normals,
        "times": traces.times,
        "sources": traces.sources,
        "g0": traces.g0,
        "g1": traces.g1,
    }
    return write_container(path, traces.stage, arrays, metadata)


def load_traces(path: Union[str, Path]) -> CauchyTraces:
    """
    Raises:
        DataError: if the container does not hold raw or noisy traces
    """
    header, arrays = read_container(path)
    if header["stage"] not in (STAGE_RAW, STAGE_NOISY):
        raise DataError(f"{path} holds '{header['stage']}' data, expected traces")
    return CauchyTraces(
        nodes=arrays["nodes"],
        normals=arrays["normals"],
        times=arrays["times"],
        sources=arrays["sources"],
        g0=arrays["g0"],
        g1=arrays["g1"],
        stage=header["stage"],
        noise=header["metadata"].get("noise") or {},
    )
