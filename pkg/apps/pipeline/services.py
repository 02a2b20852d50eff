"""
Pipeline service: runs the stages simulate -> noise -> transform -> invert ->
recover -> evaluate, writing every artifact under the run directory and a
JSON manifest with content hashes.
"""

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from django.conf import settings

from apps.analytics.exports import export_centers, export_iteration_log, export_point_list, export_vtk_series
from apps.analytics.grid import InversionGrid, build_grid
from apps.analytics.inversion import (
    CarlemanFunctional,
    CoefficientVectorField,
    InversionResult,
    boundary_field,
    convexity_survey,
    minimize,
)
from apps.analytics.recovery import (
    ReconstructedCoefficient,
    compute_contrast,
    field_error,
    recover_coefficient,
    target_mask,
)
from apps.core.basis import BasisSet, CouplingTensors, build_basis, coupling_tensors
from apps.core.exceptions import ConfigurationError, ConvexificationError, StageError
from apps.core.geometry import validate_geometry
from apps.data.containers import read_container, write_container
from apps.data.forward import TargetModel, solve_forward
from apps.data.traces import (
    add_noise,
    export_all_sources,
    fibonacci_sphere,
    load_traces,
    noise_label,
    save_traces,
    simulate_traces,
)
from apps.data.transform import (
    TransformedTraces,
    load_transformed,
    project_source_samples,
    resample_boundary,
    save_transformed,
    transform_traces,
)

from .config import PipelineConfig

logger = logging.getLogger(__name__)

STAGES = ("simulate", "noise", "transform", "invert", "recover", "evaluate")

ARTIFACTS = {
    "traces_raw": "traces_raw.cvxf",
    "traces_noisy": "traces_noisy.cvxf",
    "transformed": "transformed.cvxf",
    "coefficients": "coefficients.cvxf",
    "iterations": "iterations.csv",
    "a_comp": "a_comp.cvxf",
    "a_comp_csv": "a_comp.csv",
    "centers": "centers.csv",
    "metrics": "metrics.json",
    "manifest": "manifest.json",
    "report": "report.txt",
}
# Files whose content depends on wall-clock time.
LOG_ARTIFACTS = {"iterations", "report"}


def _get_settings() -> Dict[str, Any]:
    """Run defaults from Django settings."""
    return {
        "profile": getattr(settings, "CONVEX_PROFILE", "desk"),
        "output_dir": getattr(settings, "CONVEX_OUTPUT_DIR", "runs/default"),
        "threads": getattr(settings, "CONVEX_THREADS", 4),
        "seed": getattr(settings, "CONVEX_SEED", 20240917),
        "checkpoint_every": getattr(settings, "CONVEX_CHECKPOINT_EVERY", 50),
    }


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def normalize_stages(stages: Iterable[str]) -> List[str]:
    """Expand 'all' and order the requested stages."""
    requested = set()
    for stage in stages:
        if stage == "all":
            requested.update(STAGES)
        elif stage in STAGES:
            requested.add(stage)
        else:
            raise ConfigurationError(f"Unknown stage: {stage}")
    return [stage for stage in STAGES if stage in requested]


class PipelineService:
    """Stage runner for one configuration."""

    def __init__(self):
        self._basis_cache: Dict[Tuple[int, float], Tuple[BasisSet, CouplingTensors]] = {}

    # Helpers

    def basis_for(self, config: PipelineConfig) -> Tuple[BasisSet, CouplingTensors]:
        key = (config.basis.N, config.geometry.R)
        if key not in self._basis_cache:
            basis = build_basis(config.basis.N, config.geometry.R)
            self._basis_cache[key] = (basis, coupling_tensors(basis))
        return self._basis_cache[key]

    def inversion_grid(self, config: PipelineConfig) -> InversionGrid:
        g = config.geometry
        inv = config.inversion
        window = tuple(inv.t_window) if inv.t_window else None
        return build_grid(g.R, inv.hx, inv.ht, g.T_minus, g.T, inv.penalty_order, window)

    def _path(self, config: PipelineConfig, name: str) -> Path:
        return Path(config.output_dir) / ARTIFACTS[name]

    def _require(self, config: PipelineConfig, stage: str, name: str) -> Path:
        path = self._path(config, name)
        if not path.exists():
            raise StageError(stage, f"missing upstream artifact {path}")
        return path

    def validate(self, config: PipelineConfig):
        """
        Raises:
            ConfigurationError: if any admissibility check fails
        """
        config.validate()
        report = validate_geometry(config.problem_geometry(), config.carleman_params())
        if not report.passed:
            names = ", ".join(check.name for check in report.failures)
            raise ConfigurationError(f"Geometry validation failed: {names}")
        return report

    # Stages

    def simulate(self, config: PipelineConfig) -> Dict[str, Path]:
        g = config.problem_geometry()
        nodes = fibonacci_sphere(config.forward.boundary_nodes, g.R)
        traces = simulate_traces(g, config.target_model(), config.space_time_grid(), nodes, max_workers=config.threads)
        paths = {"traces_raw": save_traces(traces, self._path(config, "traces_raw"), g)}
        if config.forward.export_csv:
            export_all_sources(traces, Path(config.output_dir) / "traces_csv")
        return paths

    def noise_metadata(self, config: PipelineConfig, raw: Path) -> Dict[str, Any]:
        """Noise settings plus the hash of the raw traces they were applied to."""
        label = noise_label(config.noise.delta, config.stream_seed("noise"), config.noise.independent_sources)
        return {**label, "raw_sha256": sha256_file(raw)}

    def noise(self, config: PipelineConfig) -> Dict[str, Path]:
        raw = self._require(config, "noise", "traces_raw")
        noisy = add_noise(
            load_traces(raw), config.noise.delta, config.stream_seed("noise"), config.noise.independent_sources
        )
        noisy.noise = self.noise_metadata(config, raw)
        return {"traces_noisy": save_traces(noisy, self._path(config, "traces_noisy"), config.problem_geometry())}

    def transform(self, config: PipelineConfig) -> Dict[str, Path]:
        """
        Transform the noisy traces, or the raw ones when the noise level is zero.

        Noisy traces written for another noise level, seed or raw file are
        regenerated first.
        """
        raw = self._require(config, "transform", "traces_raw")
        paths: Dict[str, Path] = {}
        if config.noise.delta == 0:
            traces = load_traces(raw)
        else:
            noisy = self._path(config, "traces_noisy")
            traces = load_traces(noisy) if noisy.exists() else None
            if traces is None or traces.noise != self.noise_metadata(config, raw):
                logger.info(f"Noisy traces missing or written for other settings, regenerating {noisy.name}")
                paths.update(self.noise(config))
                traces = load_traces(noisy)
        basis, _ = self.basis_for(config)
        data = transform_traces(traces, basis)
        paths["transformed"] = save_transformed(data, self._path(config, "transformed"))
        return paths

    def pinned_values(self, config: PipelineConfig, grid: InversionGrid, data: TransformedTraces) -> np.ndarray:
        targets = grid.points[grid.fixed_spatial]
        q0 = resample_boundary(data.q0, data.nodes, data.times, targets, grid.times, config.geometry.R)
        q1 = resample_boundary(data.q1, data.nodes, data.times, targets, grid.times, config.geometry.R)
        return grid.extension_values(q0, q1)

    def background_guess(self, config: PipelineConfig, grid: InversionGrid, basis: BasisSet) -> np.ndarray:
        """Projected ln u of the homogeneous background at every grid node inside the ball."""
        g = config.problem_geometry()
        model = TargetModel.background_only(g, config.target.background)
        forward_grid = config.space_time_grid()
        inside = np.flatnonzero(grid.inside)
        points = grid.points[inside]

        def log_field(s: float) -> np.ndarray:
            wave = solve_forward(g, model, s, forward_grid)
            return np.log(np.stack([wave.total(points, float(t)) for t in grid.times]))

        with ThreadPoolExecutor(max_workers=config.threads) as executor:
            samples = np.stack(list(executor.map(log_field, g.source_positions)))
        coeffs = project_source_samples(samples, g.source_positions, basis, axis=0)
        interior = np.zeros((grid.times.size, grid.n_spatial, basis.N))
        interior[:, inside, :] = np.moveaxis(coeffs, 0, -1)
        return interior.reshape(grid.n_nodes, basis.N)

    def initial_field(self, config: PipelineConfig, grid: InversionGrid, fixed: np.ndarray,
                      basis: BasisSet) -> CoefficientVectorField:
        if config.inversion.initial_guess == "background":
            return boundary_field(grid, fixed, self.background_guess(config, grid, basis))
        return boundary_field(grid, fixed)

    def functional(self, config: PipelineConfig, grid: InversionGrid, lam: Optional[float] = None) -> CarlemanFunctional:
        _, tensors = self.basis_for(config)
        solver = config.inversion.solver_config()
        if lam is not None:
            solver = replace(solver, lam=lam)
        return CarlemanFunctional(grid, tensors, config.problem_geometry(), config.carleman_params(), solver)

    def invert(self, config: PipelineConfig) -> Tuple[Dict[str, Path], InversionResult]:
        data = load_transformed(self._require(config, "invert", "transformed"))
        basis, _ = self.basis_for(config)
        if data.N != basis.N:
            raise StageError("invert", f"transformed data has N={data.N}, config asks for N={basis.N}")
        grid = self.inversion_grid(config)
        fixed = self.pinned_values(config, grid, data)
        initial = self.initial_field(config, grid, fixed, basis)
        functional = self.functional(config, grid)
        checkpoint_dir = Path(config.output_dir) / "checkpoints"

        def checkpoint(iteration: int, field: CoefficientVectorField) -> None:
            write_container(checkpoint_dir / f"checkpoint_{iteration:05d}.cvxf", "checkpoint",
                            {"values": field.values}, {"iteration": iteration, "grid": grid.describe()})

        result = minimize(initial, functional, checkpoint=checkpoint)
        metadata = {
            "grid": grid.describe(),
            "iterations": result.iterations,
            "converged": result.converged,
            "gamma": result.gamma,
            "K": result.K,
            "config_hash": config.config_hash(),
        }
        paths = {
            "coefficients": write_container(
                self._path(config, "coefficients"), "coefficients",
                {"values": result.field.values, "initial": initial.values}, metadata,
            ),
            "iterations": export_iteration_log(result.log, self._path(config, "iterations")),
        }
        return paths, result

    def load_field(self, config: PipelineConfig, stage: str, key: str = "values") -> Tuple[CoefficientVectorField, Dict[str, Any]]:
        header, arrays = read_container(self._require(config, stage, "coefficients"))
        described = header["metadata"]["grid"]
        grid = InversionGrid(
            config.geometry.R, described["hx"], described["ht"], described["t_min"], described["t_max"],
            described["penalty_order"],
        )
        return CoefficientVectorField(grid, arrays[key]), header["metadata"]

    def recover(self, config: PipelineConfig) -> Dict[str, Path]:
        field, metadata = self.load_field(config, "recover")
        basis, tensors = self.basis_for(config)
        provenance = {"config_hash": metadata.get("config_hash"), "iterations": metadata.get("iterations")}
        rec = recover_coefficient(field, tensors, basis, config.problem_geometry(), provenance)
        paths = {
            "a_comp": write_container(
                self._path(config, "a_comp"), "reconstruction", {"values": rec.values},
                {"grid": metadata["grid"], "provenance": provenance},
            ),
            "a_comp_csv": export_point_list(rec, self._path(config, "a_comp_csv")),
        }
        for index, path in enumerate(export_vtk_series(rec, Path(config.output_dir) / "vtk")):
            paths[f"vtk_{index:04d}"] = path
        return paths

    def evaluate(self, config: PipelineConfig) -> Tuple[Dict[str, Path], Dict[str, Any]]:
        header, arrays = read_container(self._require(config, "evaluate", "a_comp"))
        field, _ = self.load_field(config, "evaluate")
        rec = ReconstructedCoefficient(field.grid, arrays["values"], header["metadata"].get("provenance", {}))
        model = config.target_model()
        errors = field_error(rec, model, config.problem_geometry(), config.inversion.center_threshold)
        mask = target_mask(model, rec.grid)
        computed = compute_contrast(rec, mask, model.background) if mask.any() else math.nan
        metrics: Dict[str, Any] = {
            "contrast_correct": model.a0 / model.background,
            "contrast_computed": computed,
            "relative_l2": errors["relative_l2"],
            "max_error_on_target": errors["max_error_on_target"],
            "mean_center_distance": errors["mean_center_distance"],
            "undetected_times": errors["undetected_times"],
            "centers": [
                {key: (None if isinstance(value, float) and math.isnan(value) else value) for key, value in row.items()}
                for row in errors["centers"].to_dict(orient="records")
            ],
        }
        if config.inversion.probe_pairs > 0:
            functional = self.functional(config, field.grid)
            survey = convexity_survey(field, functional, config.inversion.probe_pairs,
                                      config.inversion.probe_amplitude, seed=config.stream_seed("probe"))
            metrics["convexity_probe"] = {
                "pairs": int(len(survey)),
                "nonnegative": int((survey["probe"] >= 0).sum()),
                "min": float(survey["probe"].min()),
            }
        paths = {"centers": export_centers(errors["centers"], self._path(config, "centers"))}
        metrics_path = self._path(config, "metrics")
        metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True, default=float))
        paths["metrics"] = metrics_path
        return paths, metrics

    def probe_convexity(self, config: PipelineConfig, pairs: int = 100, amplitude: Optional[float] = None,
                        lambdas: Optional[Iterable[float]] = None) -> pd.DataFrame:
        """
        Convexity survey around the inverted field (or the pinned boundary-only
        field when no inversion has run) for each lambda.
        """
        self.validate(config)
        amplitude = config.inversion.probe_amplitude if amplitude is None else amplitude
        lambdas = [config.inversion.lam, 0.0] if lambdas is None else list(lambdas)
        if self._path(config, "coefficients").exists():
            base, _ = self.load_field(config, "probe_convexity")
        else:
            data = load_transformed(self._require(config, "probe_convexity", "transformed"))
            grid = self.inversion_grid(config)
            base = boundary_field(grid, self.pinned_values(config, grid, data))

        frames = []
        for lam in lambdas:
            try:
                survey = convexity_survey(base, self.functional(config, base.grid, lam), pairs, amplitude,
                                          seed=config.stream_seed("probe"))
            except ConvexificationError as exc:
                raise StageError("probe_convexity", str(exc), exc) from exc
            survey.insert(0, "lam", lam)
            frames.append(survey)
            logger.info(f"Convexity probe lambda={lam:g}: {(survey['probe'] >= 0).sum()}/{pairs} non-negative")
        result = pd.concat(frames, ignore_index=True)
        path = Path(config.output_dir) / "convexity.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        result.to_csv(path, index=False, float_format="%.12g")
        return result

    # Orchestration

    def run_pipeline(self, config: PipelineConfig, stages: Iterable[str] = ("all",)) -> Dict[str, Any]:
        """
        Run the requested stages in order and write the manifest.

        Returns:
            Manifest dict (also written to manifest.json)

        Raises:
            ConfigurationError: on invalid configuration
            StageError: naming the failing stage
        """
        ordered = normalize_stages(stages)
        self.validate(config)
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(config.to_json())

        produced: Dict[str, Path] = {"config": out_dir / "config.json"}
        timings: Dict[str, float] = {}
        metrics: Optional[Dict[str, Any]] = None
        summary: Dict[str, Any] = {}
        for stage in ordered:
            logger.info(f"Stage {stage} started")
            started = time.perf_counter()
            try:
                if stage == "invert":
                    paths, result = self.invert(config)
                    summary["inversion"] = {
                        "iterations": result.iterations,
                        "converged": result.converged,
                        "final_J": float(result.log["J"].iloc[-1]),
                        "final_grad_norm": float(result.log["grad_norm"].iloc[-1]),
                        "gamma": result.gamma,
                        "projections": result.projections,
                    }
                elif stage == "evaluate":
                    paths, metrics = self.evaluate(config)
                else:
                    paths = getattr(self, stage)(config)
            except (ConfigurationError, StageError):
                raise
            except ConvexificationError as exc:
                logger.error(f"Stage {stage} failed: {exc}")
                raise StageError(stage, str(exc), exc) from exc
            produced.update(paths)
            timings[stage] = time.perf_counter() - started
            logger.info(f"Stage {stage} finished in {timings[stage]:.1f}s")

        manifest = self.write_manifest(config, ordered, produced, timings, metrics, summary)
        return manifest

    def write_manifest(self, config: PipelineConfig, stages: List[str], produced: Dict[str, Path],
                       timings: Dict[str, float], metrics: Optional[Dict[str, Any]],
                       summary: Dict[str, Any]) -> Dict[str, Any]:
        out_dir = Path(config.output_dir)
        previous: Dict[str, Any] = {}
        manifest_path = self._path(config, "manifest")
        if manifest_path.exists():
            previous = json.loads(manifest_path.read_text()).get("files", {})
        files = dict(previous)
        for name, path in produced.items():
            files[name] = {
                "path": str(Path(path).relative_to(out_dir)) if Path(path).is_relative_to(out_dir) else str(path),
                "sha256": sha256_file(Path(path)),
                "kind": "log" if name in LOG_ARTIFACTS else "data",
            }
        manifest = {
            "config": config.to_dict(),
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "stages": stages,
            "files": files,
            "timings": timings,
            "summary": summary,
        }
        if metrics is not None:
            manifest["metrics"] = {key: value for key, value in metrics.items() if key != "centers"}
            manifest["centers"] = metrics["centers"]
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float))
        return manifest


# Global instance
_pipeline_service = None


def get_pipeline_service() -> PipelineService:
    """Get the global pipeline service instance."""
    global _pipeline_service
    if _pipeline_service is None:
        _pipeline_service = PipelineService()
    return _pipeline_service
