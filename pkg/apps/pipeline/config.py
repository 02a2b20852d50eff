"""
Pipeline configuration: built-in profiles, scenario presets, JSON documents
and dot-path overrides.

Resolution order: profile -> scenario -> JSON file -> dedicated flags ->
`--set dot.path=value` overrides.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from apps.core.exceptions import ConfigurationError
from apps.core.geometry import CHI_IDENTITY, CarlemanParams, ProblemGeometry
from apps.analytics.inversion import InversionConfig
from apps.data.forward import KIND_BALL, KIND_CYLINDER, KIND_ROTATED, KIND_STATIC, SpaceTimeGrid, TargetModel

logger = logging.getLogger(__name__)

PROFILES = ("full", "desk")
# CLI spellings accepted for the built-in profiles.
PROFILE_ALIASES = {"paper": "full"}
SCENARIOS = ("ball", "cylinder", "rotated", "static")
SEED_STREAMS = ("noise", "probe")


@dataclass
class GeometrySettings:
    R: float = 0.5
    T: float = 12.0
    T_minus: float = 4.0
    source_count: int = 16


@dataclass
class CarlemanSettings:
    sigma: float = 2.5
    h: float = 0.1
    eta: Optional[float] = None


@dataclass
class TargetSettings:
    kind: str = KIND_STATIC
    a0: float = 2.0
    background: float = 1.0
    radius: float = 0.1
    height: float = 0.2
    center: List[float] = field(default_factory=lambda: [0.1, 0.0, 0.0])


@dataclass
class ForwardSettings:
    dx: float = 1.0 / 40.0
    dt: float = 1.0 / 160.0
    padding_cells: int = 8
    sponge_cells: int = 12
    sponge_strength: float = 40.0
    record_every: int = 16
    boundary_nodes: int = 128
    export_csv: bool = False


@dataclass
class NoiseSettings:
    delta: float = 0.0
    independent_sources: bool = False


@dataclass
class BasisSettings:
    N: int = 5


@dataclass
class InversionSettings:
    """Inversion grid plus every InversionConfig field."""

    hx: float = 0.1
    ht: float = 0.2
    t_window: Optional[List[float]] = None
    lam: float = 3.0
    alpha: float = 0.01
    K: Optional[float] = None
    gamma: Optional[float] = None
    max_iters: int = 200
    grad_tol: float = 1e-2
    chi_mode: str = CHI_IDENTITY
    penalty_order: int = 2
    psi_shift: float = 0.0
    checkpoint_every: int = 50
    power_iterations: int = 20
    divergence_patience: int = 5
    K_factor: float = 10.0
    initial_guess: str = "background"
    center_threshold: float = 0.5
    probe_pairs: int = 10
    probe_amplitude: float = 0.1

    def solver_config(self) -> InversionConfig:
        names = {f.name for f in fields(InversionConfig)}
        return InversionConfig(**{key: value for key, value in asdict(self).items() if key in names})


SECTIONS = {
    "geometry": GeometrySettings,
    "carleman": CarlemanSettings,
    "target": TargetSettings,
    "forward": ForwardSettings,
    "noise": NoiseSettings,
    "basis": BasisSettings,
    "inversion": InversionSettings,
}


@dataclass
class PipelineConfig:
    """One declarative description of a run."""

    profile: str = "desk"
    scenario: str = "static"
    seed: int = 20240917
    threads: int = 4
    output_dir: str = "runs/default"
    geometry: GeometrySettings = field(default_factory=GeometrySettings)
    carleman: CarlemanSettings = field(default_factory=CarlemanSettings)
    target: TargetSettings = field(default_factory=TargetSettings)
    forward: ForwardSettings = field(default_factory=ForwardSettings)
    noise: NoiseSettings = field(default_factory=NoiseSettings)
    basis: BasisSettings = field(default_factory=BasisSettings)
    inversion: InversionSettings = field(default_factory=InversionSettings)

    # Serialisation

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        data = copy.deepcopy(data)
        kwargs: Dict[str, Any] = {}
        top = {f.name for f in fields(cls)}
        unknown = set(data) - top
        if unknown:
            raise ConfigurationError(f"Unknown config keys: {sorted(unknown)}")
        for key, value in data.items():
            section = SECTIONS.get(key)
            if section is None:
                kwargs[key] = value
                continue
            allowed = {f.name for f in fields(section)}
            extra = set(value) - allowed
            if extra:
                raise ConfigurationError(f"Unknown keys in '{key}': {sorted(extra)}")
            kwargs[key] = section(**value)
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"Config is not valid JSON: {exc}") from exc

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    # Domain objects

    def problem_geometry(self) -> ProblemGeometry:
        g = self.geometry
        return ProblemGeometry(R=g.R, T=g.T, T_minus=g.T_minus, source_count=g.source_count)

    def carleman_params(self) -> CarlemanParams:
        c = self.carleman
        return CarlemanParams.from_geometry(
            self.problem_geometry(), sigma=c.sigma, h=c.h, lam=self.inversion.lam, eta=c.eta
        )

    def target_model(self) -> TargetModel:
        t = self.target
        return TargetModel.for_geometry(
            self.problem_geometry(),
            kind=t.kind,
            a0=t.a0,
            background=t.background,
            radius=t.radius,
            height=t.height,
            center=tuple(t.center),
        )

    def space_time_grid(self) -> SpaceTimeGrid:
        f = self.forward
        return SpaceTimeGrid(
            dx=f.dx,
            dt=f.dt,
            padding_cells=f.padding_cells,
            sponge_cells=f.sponge_cells,
            sponge_strength=f.sponge_strength,
            record_every=f.record_every,
        )

    def stream_seed(self, name: str) -> np.random.SeedSequence:
        """Independent seed stream derived from the master seed."""
        if name not in SEED_STREAMS:
            raise ConfigurationError(f"Unknown seed stream: {name}")
        return np.random.SeedSequence([self.seed, SEED_STREAMS.index(name)])

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: on any invalid section
        """
        if self.profile not in PROFILES + ("custom",):
            raise ConfigurationError(f"Unknown profile: {self.profile}")
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"Unknown scenario: {self.scenario}")
        if self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")
        if self.basis.N < 1:
            raise ConfigurationError(f"Basis order must be >= 1, got {self.basis.N}")
        if self.noise.delta < 0:
            raise ConfigurationError(f"Noise level must be non-negative, got {self.noise.delta}")
        if self.forward.boundary_nodes < 4:
            raise ConfigurationError("Need at least 4 boundary nodes")
        self.target_model()
        self.space_time_grid().validate(self.geometry.R)
        self.inversion.solver_config().validate(self.carleman.h)


def full_profile() -> Dict[str, Any]:
    """Published full-scale constants."""
    return {
        "profile": "full",
        "geometry": {"R": 0.5, "T": 12.0, "T_minus": 4.0, "source_count": 100},
        "carleman": {"sigma": 2.5, "h": 0.1, "eta": 1107.0 / 1280.0},
        "forward": {"dx": 1.0 / 160.0, "dt": 1.0 / 640.0, "record_every": 64, "boundary_nodes": 1024},
        "noise": {"delta": 0.03},
        "basis": {"N": 5},
        "inversion": {"hx": 1.0 / 20.0, "ht": 1.0 / 10.0, "lam": 3.0, "alpha": 0.01, "grad_tol": 1e-2,
                      "penalty_order": 2, "chi_mode": CHI_IDENTITY},
    }


def desk_profile() -> Dict[str, Any]:
    """Reduced sizes that run on a workstation."""
    return {
        "profile": "desk",
        "geometry": {"R": 0.5, "T": 12.0, "T_minus": 4.0, "source_count": 16},
        "carleman": {"sigma": 2.5, "h": 0.1, "eta": None},
        "forward": {"dx": 1.0 / 40.0, "dt": 1.0 / 160.0, "record_every": 16, "boundary_nodes": 128},
        "noise": {"delta": 0.0},
        "basis": {"N": 5},
        "inversion": {"hx": 0.1, "ht": 0.2, "lam": 3.0, "alpha": 0.01, "grad_tol": 1e-2,
                      "penalty_order": 2, "chi_mode": CHI_IDENTITY},
    }


def scenario_preset(name: str) -> Dict[str, Any]:
    """Target section of the built-in scenarios."""
    presets = {
        "ball": {"kind": KIND_BALL, "radius": 0.1},
        "cylinder": {"kind": KIND_CYLINDER, "radius": 0.1, "height": 0.2},
        "rotated": {"kind": KIND_ROTATED, "radius": 0.1, "height": 0.1},
        "static": {"kind": KIND_STATIC, "radius": 0.1, "center": [0.1, 0.0, 0.0]},
    }
    if name not in presets:
        raise ConfigurationError(f"Unknown scenario: {name}")
    return {"scenario": name, "target": presets[name]}


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(expression: str) -> Tuple[List[str], Any]:
    """'a.b.c=value' -> (['a', 'b', 'c'], value); the value is JSON when it parses."""
    if "=" not in expression:
        raise ConfigurationError(f"Override must look like dot.path=value, got '{expression}'")
    path, raw = expression.split("=", 1)
    keys = [part for part in path.strip().split(".") if part]
    if not keys:
        raise ConfigurationError(f"Empty override path in '{expression}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def apply_overrides(data: Dict[str, Any], expressions: Iterable[str]) -> Dict[str, Any]:
    data = copy.deepcopy(data)
    for expression in expressions:
        keys, value = parse_override(expression)
        node = data
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise ConfigurationError(f"Override path '{'.'.join(keys)}' does not name a section")
            node = node[key]
        node[keys[-1]] = value
    return data


def resolve_config(profile: Optional[str] = None, scenario: Optional[str] = None,
                   config_path: Optional[Union[str, Path]] = None, flags: Optional[Dict[str, Any]] = None,
                   overrides: Iterable[str] = (), defaults: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    Build a validated PipelineConfig.

    Args:
        profile: Built-in profile name (falls back to the JSON document, then defaults)
        scenario: Scenario preset (falls back to the JSON document, then 'static')
        config_path: Optional JSON document
        flags: Dedicated flag values: noise, seed, threads, output_dir
        overrides: 'dot.path=value' expressions
        defaults: Top-level defaults (profile, seed, threads, output_dir) from settings

    Raises:
        ConfigurationError: on unknown names, malformed input or invalid values
    """
    defaults = defaults or {}
    document: Dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigurationError(f"Config file not found: {path}")
        try:
            document = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {exc}") from exc

    profile = profile or document.get("profile") or defaults.get("profile", "desk")
    profile = PROFILE_ALIASES.get(profile, profile)
    if profile == "full":
        data = full_profile()
    elif profile in ("desk", "custom"):
        data = desk_profile()
        data["profile"] = profile
    else:
        raise ConfigurationError(f"Unknown profile: {profile}")
    for key in ("seed", "threads", "output_dir"):
        if key in defaults:
            data[key] = defaults[key]
    if "checkpoint_every" in defaults:
        data["inversion"]["checkpoint_every"] = defaults["checkpoint_every"]

    data = deep_merge(data, scenario_preset(scenario or document.get("scenario") or "static"))
    data = deep_merge(data, document)
    if scenario:
        data = deep_merge(data, scenario_preset(scenario))
    data["profile"] = profile

    flags = flags or {}
    if flags.get("noise") is not None:
        data = deep_merge(data, {"noise": {"delta": float(flags["noise"])}})
    for key in ("seed", "threads", "output_dir"):
        if flags.get(key) is not None:
            data[key] = flags[key]

    data = apply_overrides(data, overrides)
    config = PipelineConfig.from_dict(data)
    config.validate()
    logger.info(f"Resolved config: profile={config.profile}, scenario={config.scenario}, hash={config.config_hash()[:12]}")
    return config
