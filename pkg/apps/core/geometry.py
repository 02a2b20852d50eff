"""
Domain, time window and Carleman weight parameters.

All functions are pure and vectorised: points are arrays whose last axis has
length 3 and times broadcast against the leading axes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .exceptions import NumericalError

logger = logging.getLogger(__name__)

GOLDEN_CONE_FACTOR = math.sqrt(5.0) + 1.0
SIGMA_FACTOR = 2.0 / (math.sqrt(2.0) - 1.0)
# Largest exponent that still fits in a float64.
MAX_EXPONENT = 709.0

CHI_IDENTITY = "identity"
CHI_CUTOFF = "cutoff"
CHI_MODES = (CHI_IDENTITY, CHI_CUTOFF)


@dataclass(frozen=True)
class ProblemGeometry:
    """Ball of radius R, observation window (T_minus, T) and the source line."""

    R: float = 0.5
    T: float = 12.0
    T_minus: float = 4.0
    source_count: int = 16
    T0: Optional[float] = None
    A: Optional[float] = None
    source_positions: Tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.T0 is None:
            object.__setattr__(self, "T0", (self.T + self.T_minus) / 2.0)
        if self.A is None:
            object.__setattr__(self, "A", (self.T - self.T_minus) / 6.0)
        if not self.source_positions:
            step = 2.0 * self.R / (self.source_count + 1)
            positions = tuple(-self.R + i * step for i in range(1, self.source_count + 1))
            object.__setattr__(self, "source_positions", positions)
        else:
            object.__setattr__(self, "source_positions", tuple(float(s) for s in self.source_positions))
            object.__setattr__(self, "source_count", len(self.source_positions))

    @property
    def source_step(self) -> float:
        """Spacing of the source grid on (-R, R)."""
        return 2.0 * self.R / (self.source_count + 1)

    @property
    def spline_step(self) -> float:
        """Step of the s-grid the cubic splines are evaluated on."""
        return self.R / 100.0

    def source_point(self, s: float) -> np.ndarray:
        return np.array([s, 0.0, -2.0 * self.R])

    @property
    def source_points(self) -> np.ndarray:
        s = np.asarray(self.source_positions, dtype=float)
        return np.column_stack([s, np.zeros_like(s), np.full_like(s, -2.0 * self.R)])

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["source_positions"] = list(self.source_positions)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProblemGeometry":
        data = dict(data)
        data["source_positions"] = tuple(data.get("source_positions") or ())
        return cls(**data)


@dataclass(frozen=True)
class CarlemanParams:
    """Parameters of the weight exponent |x - p|^2 - eta (t - T0)^2."""

    sigma: float
    h: float
    eta: float
    p: Tuple[float, float, float]
    lam: float = 3.0

    @classmethod
    def from_geometry(cls, geometry: ProblemGeometry, sigma: float = 2.5, h: float = 0.1,
                      lam: float = 3.0, eta: Optional[float] = None) -> "CarlemanParams":
        """Build parameters, deriving eta from sigma, h and A unless given."""
        if eta is None:
            eta = (sigma ** 2 - h) / (2.0 * geometry.A) ** 2
        return cls(sigma=sigma, h=h, eta=eta, p=(-geometry.R - sigma, 0.0, 0.0), lam=lam)

    def with_lambda(self, lam: float) -> "CarlemanParams":
        return CarlemanParams(sigma=self.sigma, h=self.h, eta=self.eta, p=self.p, lam=lam)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["p"] = list(self.p)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CarlemanParams":
        data = dict(data)
        data["p"] = tuple(data["p"])
        return cls(**data)


@dataclass(frozen=True)
class ValidationCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class ValidationReport:
    """Outcome of every admissibility condition, collected rather than raised."""

    checks: List[ValidationCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[ValidationCheck]:
        return [check for check in self.checks if not check.passed]

    def add(self, name: str, passed: bool, detail: str) -> None:
        self.checks.append(ValidationCheck(name=name, passed=bool(passed), detail=detail))

    def summary(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}" for c in self.checks]
        return "\n".join(lines)


def validate_geometry(g: ProblemGeometry, c: CarlemanParams) -> ValidationReport:
    """
    Check every admissibility condition on the geometry and weight parameters.

    Args:
        g: Problem geometry
        c: Carleman weight parameters

    Returns:
        Report with one entry per condition; the caller decides what is fatal
    """
    report = ValidationReport()
    values = [g.R, g.T, g.T_minus, g.T0, g.A, c.sigma, c.h, c.eta, c.lam, *c.p, *g.source_positions]
    if not all(math.isfinite(v) for v in values):
        report.add("finite_parameters", False, "parameters contain NaN or infinity")
        return report

    cone = g.R * GOLDEN_CONE_FACTOR
    report.add(
        "time_window_order",
        g.T > g.T_minus > cone,
        f"T={g.T:g} > T_minus={g.T_minus:g} > R(sqrt5+1)={cone:.6g}",
    )

    t0 = (g.T + g.T_minus) / 2.0
    a = (g.T - g.T_minus) / 6.0
    window_ok = math.isclose(g.T0, t0, rel_tol=1e-12, abs_tol=1e-12) and math.isclose(
        g.A, a, rel_tol=1e-12, abs_tol=1e-12
    )
    report.add("window_center_and_halfwidth", window_ok, f"T0={g.T0:g} (expect {t0:g}), A={g.A:g} (expect {a:g})")

    inside = all(-g.R < s < g.R for s in g.source_positions) and g.source_count > 0
    report.add("source_positions", inside, f"{g.source_count} sources in (-{g.R:g}, {g.R:g})")

    # |x - x0| <= |x0| + R over the closed ball
    farthest = max((math.hypot(s, 2.0 * g.R) + g.R for s in g.source_positions), default=math.inf)
    report.add(
        "cone_containment",
        farthest < cone + 1e-12 and cone <= g.T_minus,
        f"max |x - x0| = {farthest:.6g} < {cone:.6g} <= T_minus",
    )

    sigma_min = g.R * SIGMA_FACTOR
    report.add("sigma_lower_bound", c.sigma > sigma_min, f"sigma={c.sigma:g} > 2R/(sqrt2-1)={sigma_min:.6g}")

    report.add("level_h_range", 0.0 < c.h < c.sigma ** 2 / 5.0, f"h={c.h:g} in (0, {c.sigma ** 2 / 5.0:.6g})")

    eta_expected = (c.sigma ** 2 - c.h) / (2.0 * g.A) ** 2
    identity = math.isclose(c.eta * (2.0 * g.A) ** 2, c.sigma ** 2 - c.h, rel_tol=1e-12, abs_tol=1e-14)
    report.add(
        "eta_identity",
        identity and 0.0 < c.eta < 1.0,
        f"eta={c.eta:.12g} (expect {eta_expected:.12g}) in (0, 1)",
    )

    p_ok = np.allclose(c.p, (-g.R - c.sigma, 0.0, 0.0), rtol=0.0, atol=1e-12)
    report.add("weight_center", bool(p_ok), f"p={tuple(c.p)}")

    report.add("lambda_nonnegative", c.lam >= 0.0, f"lambda={c.lam:g}")

    if not report.passed:
        for failure in report.failures:
            logger.warning(f"Geometry check failed: {failure.name} ({failure.detail})")
    return report


def psi_weight(x: Any, t: Any, g: ProblemGeometry, c: CarlemanParams) -> np.ndarray:
    """Weight exponent |x - p|^2 - eta (t - T0)^2."""
    x = np.asarray(x, dtype=float)
    diff = x - np.asarray(c.p, dtype=float)
    return np.sum(diff * diff, axis=-1) - c.eta * (np.asarray(t, dtype=float) - g.T0) ** 2


def carleman_weight(x: Any, t: Any, g: ProblemGeometry, c: CarlemanParams) -> np.ndarray:
    """
    Carleman weight exp(lambda * psi).

    Raises:
        NumericalError: if the exponent would overflow a float64
    """
    exponent = c.lam * psi_weight(x, t, g, c)
    peak = float(np.max(exponent)) if np.size(exponent) else 0.0
    if peak > MAX_EXPONENT:
        logger.error(f"Carleman weight overflow: lambda * psi reaches {peak:.3g}")
        raise NumericalError(f"Carleman weight overflows: lambda*psi = {peak:.3g} > {MAX_EXPONENT}")
    return np.exp(exponent)


def level_domain_membership(x: Any, t: Any, g: ProblemGeometry, c: CarlemanParams, k: int) -> np.ndarray:
    """True where psi > k*h strictly and |x| < R."""
    if k not in (1, 2, 3, 4):
        raise ValueError(f"Level index must be one of 1..4, got {k}")
    x = np.asarray(x, dtype=float)
    radius = np.sqrt(np.sum(x * x, axis=-1))
    return (psi_weight(x, t, g, c) > k * c.h) & (radius < g.R)


def _quintic_step(tau: np.ndarray) -> np.ndarray:
    tau = np.clip(tau, 0.0, 1.0)
    return tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau ** 2)


def cutoff_chi(x: Any, t: Any, g: ProblemGeometry, c: CarlemanParams, mode: str = CHI_IDENTITY) -> np.ndarray:
    """
    Cut-off function of the level sets.

    In "cutoff" mode the value is 1 where psi >= 3h, 0 where psi <= 2h and a
    C2 quintic blend of (psi - 2h)/h in between; it also vanishes for |x| >= R.
    In "identity" mode it is identically 1.
    """
    x = np.asarray(x, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], np.shape(t))
    if mode == CHI_IDENTITY:
        return np.ones(shape)
    if mode != CHI_CUTOFF:
        raise ValueError(f"Unknown cut-off mode: {mode}")
    psi = psi_weight(x, t, g, c)
    radius = np.sqrt(np.sum(x * x, axis=-1))
    chi = _quintic_step((psi - 2.0 * c.h) / c.h)
    return np.broadcast_to(np.where(radius < g.R, chi, 0.0), shape).copy()


def cone_containment_margin(g: ProblemGeometry, points: np.ndarray, times: np.ndarray) -> float:
    """Smallest t - |x - x0| over the given nodes, times and every source."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    t_min = float(np.min(times))
    distances = np.linalg.norm(points[:, None, :] - g.source_points[None, :, :], axis=-1)
    return t_min - float(np.max(distances))
