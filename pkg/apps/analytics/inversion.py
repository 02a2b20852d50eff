"""
Carleman-weighted functional of the coupled coefficient system, its exact
discrete gradient and boundary-constrained gradient descent.

The unknown is V(x, t), an N-vector per node of the inversion grid, stored as
a (nodes, N) array. The residual at a node is

    r = chi (V_tt - Laplace V) + chi M^{-1} F(grad V, V_t) - offset,
    F_m = 2 sum_{n,k} b_mnk (dt v_n dt v_k - grad v_n . grad v_k),

and the functional is

    J(V) = exp(-8 lambda h) sum_nodes phi^2 |r|^2 vol + alpha ||V||^2.

Every expression in J avoids abs/conj so the functional is complex-analytic
and derivatives can be checked by complex step.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from apps.core.basis import CouplingTensors
from apps.core.exceptions import ConfigurationError, DataError, DivergenceError, NumericalError
from apps.core.geometry import (
    CHI_IDENTITY,
    CHI_MODES,
    MAX_EXPONENT,
    CarlemanParams,
    ProblemGeometry,
    cutoff_chi,
    psi_weight,
)

from .grid import InversionGrid

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["iter", "J", "grad_norm", "V_norm", "wall_ms"]
COMPLEX_STEP = 1e-20


@dataclass(frozen=True)
class InversionConfig:
    """Minimisation settings; K and gamma default to data-driven values."""

    lam: float = 3.0
    alpha: float = 0.01
    K: Optional[float] = None
    gamma: Optional[float] = None
    max_iters: int = 200
    grad_tol: float = 1e-2
    chi_mode: str = CHI_IDENTITY
    penalty_order: int = 2
    psi_shift: float = 0.0
    checkpoint_every: int = 0
    power_iterations: int = 20
    divergence_patience: int = 5
    K_factor: float = 10.0
    initial_guess: str = "background"

    def validate(self, h: Optional[float] = None) -> bool:
        """
        Check hard constraints and report the advisory alpha bound.

        Returns:
            Whether the advisory alpha >= 2 exp(-lambda h) holds

        Raises:
            ConfigurationError: on an invalid setting
        """
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be non-negative, got {self.lam}")
        if self.gamma is not None and self.gamma <= 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if self.K is not None and self.K <= 0:
            raise ConfigurationError(f"K must be positive, got {self.K}")
        if self.chi_mode not in CHI_MODES:
            raise ConfigurationError(f"Unknown cut-off mode: {self.chi_mode}")
        if self.penalty_order not in (2, 4):
            raise ConfigurationError(f"Penalty order must be 2 or 4, got {self.penalty_order}")
        if self.max_iters < 0 or self.grad_tol < 0:
            raise ConfigurationError("max_iters and grad_tol must be non-negative")
        if self.initial_guess not in ("background", "boundary"):
            raise ConfigurationError(f"Unknown initial guess mode: {self.initial_guess}")
        if h is None:
            return True
        bound = 2.0 * math.exp(-self.lam * h)
        advisory = self.alpha >= bound
        if not advisory:
            logger.warning(f"Advisory check: alpha={self.alpha:g} < 2 exp(-lambda h)={bound:.4g}")
        return advisory

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class CoefficientVectorField:
    """N-vector per grid node; boundary and ghost values are pinned."""

    grid: InversionGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.n_nodes:
            raise DataError(f"Field shape {self.values.shape} does not match {self.grid.n_nodes} nodes")

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def free(self) -> np.ndarray:
        return self.grid.free

    def copy(self) -> "CoefficientVectorField":
        return CoefficientVectorField(self.grid, self.values.copy())

    def with_values(self, values: np.ndarray) -> "CoefficientVectorField":
        return CoefficientVectorField(self.grid, values)

    def same_boundary(self, other: "CoefficientVectorField") -> bool:
        pinned = ~self.free
        return bool(np.array_equal(self.values[pinned], other.values[pinned]))

    def check_finite(self) -> None:
        bad = np.argwhere(~np.isfinite(self.values))
        if bad.size:
            raise NumericalError(f"Field has non-finite values at node {int(bad[0][0])}")


def boundary_field(grid: InversionGrid, fixed: np.ndarray, interior: Optional[np.ndarray] = None) -> CoefficientVectorField:
    """
    Field with pinned boundary/ghost values and the given (or zero) interior.

    Args:
        grid: Inversion grid
        fixed: Values (time, fixed node, N) at grid.fixed_spatial
        interior: Optional (nodes, N) array supplying the free values
    """
    N = fixed.shape[-1]
    base = np.zeros((grid.n_nodes, N)) if interior is None else np.array(interior, dtype=float)
    base[~grid.free] = 0.0
    return CoefficientVectorField(grid, grid.fill_fixed(base, fixed))


class CarlemanFunctional:
    """J and its gradient for one grid, tensor set and weight."""

    def __init__(self, grid: InversionGrid, tensors: CouplingTensors, geometry: ProblemGeometry,
                 carleman: CarlemanParams, config: InversionConfig, offset: Optional[np.ndarray] = None):
        self.grid = grid
        self.tensors = tensors
        self.config = config
        params = carleman.with_lambda(config.lam)
        points = grid.node_points
        times = grid.node_times

        self.chi = cutoff_chi(points, times, geometry, params, config.chi_mode)
        exponent = 2.0 * config.lam * (psi_weight(points, times, geometry, params) + config.psi_shift)
        peak = float(exponent.max())
        if peak > MAX_EXPONENT:
            node = int(np.argmax(exponent))
            logger.error(f"Carleman weight overflow at node {node}: exponent {peak:.3g}")
            raise NumericalError(f"Carleman weight overflows at node {node}: 2*lambda*psi = {peak:.3g}")
        inside = grid.broadcast(grid.inside).astype(float)
        self.omega = inside * np.exp(exponent) * grid.cell_volume
        self.scale = math.exp(-8.0 * config.lam * carleman.h)
        self.offset = offset
        self.B_sym = tensors.B_sym

    # Pieces of the residual

    def derivatives(self, V: np.ndarray):
        grid = self.grid
        return grid.dt @ V, [op @ V for op in grid.grad]

    def nonlinearity(self, Vt: np.ndarray, grads: Sequence[np.ndarray]) -> np.ndarray:
        """F1 = M^{-1} F at every node, shape (nodes, N)."""
        B = self.tensors.B
        F = np.einsum("mnk,in,ik->im", B, Vt, Vt)
        for Gd in grads:
            F = F - np.einsum("mnk,in,ik->im", B, Gd, Gd)
        return 2.0 * F @ self.tensors.M_inv.T

    def residual(self, V: np.ndarray) -> np.ndarray:
        Vt, grads = self.derivatives(V)
        r = self.chi[:, None] * (self.grid.wave_operator @ V + self.nonlinearity(Vt, grads))
        if self.offset is not None:
            r = r - self.offset
        return r

    def penalty(self, V: np.ndarray):
        return np.sum(V * (self.grid.penalty_matrix @ V))

    def value(self, V: np.ndarray):
        """
        Raises:
            NumericalError: naming the first node with a non-finite residual
        """
        r = self.residual(V)
        J = self.scale * np.sum(self.omega[:, None] * r * r) + self.config.alpha * self.penalty(V)
        if not np.isfinite(J):
            bad = np.argwhere(~np.isfinite(r))
            node = int(bad[0][0]) if bad.size else -1
            logger.error(f"Non-finite functional value (node {node})")
            raise NumericalError(f"Functional is non-finite at node {node}")
        return J if np.iscomplexobj(J) else float(J)

    def gradient(self, V: np.ndarray) -> np.ndarray:
        """Exact gradient of the discrete J; zero on pinned and ghost entries."""
        grid = self.grid
        Vt, grads = self.derivatives(V)
        r = self.chi[:, None] * (grid.wave_operator @ V + self.nonlinearity(Vt, grads))
        if self.offset is not None:
            r = r - self.offset
        weighted = self.chi[:, None] * (2.0 * self.scale * self.omega[:, None] * r)

        grad = grid.wave_operator.T @ weighted
        P = weighted @ self.tensors.M_inv
        Ht = 2.0 * np.einsum("ij,jnk,ik->in", P, self.B_sym, Vt)
        grad = grad + grid.dt.T @ Ht
        for op, Gd in zip(grid.grad, grads):
            Hd = -2.0 * np.einsum("ij,jnk,ik->in", P, self.B_sym, Gd)
            grad = grad + op.T @ Hd
        grad = grad + 2.0 * self.config.alpha * (grid.penalty_matrix @ V)
        grad[~grid.free] = 0.0
        if not np.all(np.isfinite(grad)):
            node = int(np.argwhere(~np.isfinite(grad))[0][0])
            raise NumericalError(f"Gradient is non-finite at node {node}")
        return grad

    def hessian_vector(self, V: np.ndarray, direction: np.ndarray) -> np.ndarray:
        """Complex-step directional derivative of the gradient."""
        return np.imag(self.gradient(V + 1j * COMPLEX_STEP * direction)) / COMPLEX_STEP

    def free_norm(self, grad: np.ndarray) -> float:
        return float(np.linalg.norm(grad[self.grid.free]))


def evaluate_F1(field: CoefficientVectorField, tensors: CouplingTensors, node: int) -> np.ndarray:
    """M^{-1} F(grad V, V_t) at one node from centred differences."""
    grid = field.grid
    Vt = (grid.dt @ field.values)[node:node + 1]
    grads = [(op @ field.values)[node:node + 1] for op in grid.grad]
    F = np.einsum("mnk,in,ik->im", tensors.B, Vt, Vt)
    for Gd in grads:
        F = F - np.einsum("mnk,in,ik->im", tensors.B, Gd, Gd)
    return (2.0 * F @ tensors.M_inv.T)[0]


def evaluate_functional(field: CoefficientVectorField, config: InversionConfig, g: ProblemGeometry,
                        c: CarlemanParams, tensors: CouplingTensors, offset: Optional[np.ndarray] = None) -> float:
    return CarlemanFunctional(field.grid, tensors, g, c, config, offset).value(field.values)


def evaluate_gradient(field: CoefficientVectorField, config: InversionConfig, g: ProblemGeometry,
                      c: CarlemanParams, tensors: CouplingTensors, offset: Optional[np.ndarray] = None) -> np.ndarray:
    return CarlemanFunctional(field.grid, tensors, g, c, config, offset).gradient(field.values)


def estimate_lipschitz(functional: CarlemanFunctional, V: np.ndarray, iterations: int = 20, seed: int = 0) -> float:
    """Power iteration on the Hessian at V, restricted to free entries."""
    free = functional.grid.free
    rng = np.random.default_rng(seed)
    direction = np.zeros_like(V, dtype=float)
    direction[free] = rng.standard_normal((int(free.sum()), V.shape[1]))
    direction /= np.linalg.norm(direction)
    estimate = 0.0
    for _ in range(max(1, iterations)):
        image = functional.hessian_vector(V, direction)
        estimate = float(np.linalg.norm(image))
        if estimate == 0.0 or not np.isfinite(estimate):
            break
        direction = image / estimate
    if estimate <= 0.0 or not np.isfinite(estimate):
        raise NumericalError(f"Lipschitz estimate failed: {estimate}")
    return estimate


def project_to_ball(field: CoefficientVectorField, K: float) -> CoefficientVectorField:
    """Scale the free part so that the discrete norm equals K; pinned values stay."""
    grid = field.grid
    free = grid.free
    fixed_part = field.values.copy()
    fixed_part[free] = 0.0
    free_part = field.values - fixed_part

    def excess(theta: float) -> float:
        return grid.sobolev_norm(fixed_part + theta * free_part) - K

    if excess(0.0) >= 0.0:
        logger.warning(f"Pinned values alone exceed K={K:g}; skipping projection")
        return field
    theta = brentq(excess, 0.0, 1.0, xtol=1e-12)
    return field.with_values(fixed_part + theta * free_part)


@dataclass
class InversionResult:
    field: CoefficientVectorField
    log: pd.DataFrame
    converged: bool
    iterations: int
    gamma: float
    lipschitz: Optional[float]
    K: float
    projections: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)


def minimize(initial: CoefficientVectorField, functional: CarlemanFunctional,
             checkpoint: Optional[Callable[[int, CoefficientVectorField], None]] = None) -> InversionResult:
    """
    Gradient descent V_n = V_{n-1} - gamma grad J(V_{n-1}) with pinned boundary.

    Args:
        initial: Starting field satisfying the boundary conditions
        functional: J and its gradient
        checkpoint: Called with (iteration, field) every `checkpoint_every` steps

    Returns:
        Final field and iteration log

    Raises:
        DivergenceError: if J increases for `divergence_patience` steps in a row
    """
    config = functional.config
    grid = functional.grid
    initial.check_finite()
    V = initial.values.astype(float).copy()
    pinned = V[~grid.free].copy()

    K = config.K if config.K is not None else config.K_factor * max(grid.sobolev_norm(V), 1e-12)
    lipschitz = None
    gamma = config.gamma
    if gamma is None:
        lipschitz = estimate_lipschitz(functional, V, config.power_iterations)
        gamma = 0.5 / lipschitz
        logger.info(f"Step size gamma={gamma:.4e} from Lipschitz estimate {lipschitz:.4e}")
    if grid.sobolev_norm(V) > K / 3.0:
        logger.warning(f"Initial field norm {grid.sobolev_norm(V):.4g} exceeds K/3={K / 3.0:.4g}")

    rows: List[Dict[str, float]] = []
    started = time.perf_counter()
    J = functional.value(V)
    grad = functional.gradient(V)
    grad_norm = functional.free_norm(grad)
    rows.append({"iter": 0, "J": J, "grad_norm": grad_norm, "V_norm": grid.sobolev_norm(V), "wall_ms": 0.0})

    converged = grad_norm < config.grad_tol
    increases = 0
    projections = 0
    iteration = 0
    while not converged and iteration < config.max_iters:
        iteration += 1
        V = V - gamma * grad
        norm = grid.sobolev_norm(V)
        if norm > K:
            V = project_to_ball(CoefficientVectorField(grid, V), K).values
            projections += 1
            logger.warning(f"Iteration {iteration}: norm {norm:.4g} > K={K:.4g}, projected")

        J_new = functional.value(V)
        grad = functional.gradient(V)
        grad_norm = functional.free_norm(grad)
        increases = increases + 1 if J_new > J else 0
        J = J_new
        rows.append({
            "iter": iteration,
            "J": J,
            "grad_norm": grad_norm,
            "V_norm": grid.sobolev_norm(V),
            "wall_ms": (time.perf_counter() - started) * 1000.0,
        })
        if increases >= config.divergence_patience:
            logger.error(f"J increased {increases} times in a row at iteration {iteration}")
            raise DivergenceError(
                f"J increased for {increases} consecutive iterations (gamma={gamma:.3e} too large?)"
            )
        if checkpoint is not None and config.checkpoint_every and iteration % config.checkpoint_every == 0:
            checkpoint(iteration, CoefficientVectorField(grid, V.copy()))
        converged = grad_norm < config.grad_tol

    if not np.array_equal(V[~grid.free], pinned):
        raise NumericalError("Pinned values changed during descent")
    final = CoefficientVectorField(grid, V)
    final.check_finite()
    logger.info(
        f"Descent {'converged' if converged else 'stopped'} after {iteration} iterations: "
        f"J={J:.6e}, |grad J|={grad_norm:.3e}"
    )
    return InversionResult(
        field=final,
        log=pd.DataFrame(rows, columns=LOG_COLUMNS),
        converged=converged,
        iterations=iteration,
        gamma=gamma,
        lipschitz=lipschitz,
        K=K,
        projections=projections,
    )


def convexity_probe(field1: CoefficientVectorField, field2: CoefficientVectorField,
                    functional: CarlemanFunctional) -> float:
    """
    J(V1) - J(V2) - <J'(V2), V1 - V2> - alpha/2 ||V1 - V2||^2.

    Raises:
        DataError: if the fields differ on pinned entries
    """
    if not field1.same_boundary(field2):
        raise DataError("Convexity probe requires identical boundary values")
    V1, V2 = field1.values, field2.values
    diff = V1 - V2
    J1 = functional.value(V1)
    J2 = functional.value(V2)
    grad = functional.gradient(V2)
    norm = field1.grid.sobolev_norm(diff)
    return float(J1 - J2 - np.sum(grad * diff) - 0.5 * functional.config.alpha * norm ** 2)


def convexity_survey(base: CoefficientVectorField, functional: CarlemanFunctional, pairs: int = 100,
                     amplitude: float = 1.0, seed: Union[int, np.random.SeedSequence] = 0) -> pd.DataFrame:
    """
    Probe random same-boundary pairs around `base`.

    Interior perturbations are uniform on [-amplitude, amplitude]; each pair
    has its own spawned seed, recorded with the result.
    """
    grid = base.grid
    free = grid.free
    rows = []
    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    for index, child in enumerate(sequence.spawn(pairs)):
        rng = np.random.default_rng(child)
        fields = []
        for _ in range(2):
            values = base.values.copy()
            values[free] = values[free] + amplitude * rng.uniform(-1.0, 1.0, size=(int(free.sum()), base.N))
            fields.append(base.with_values(values))
        value = convexity_probe(fields[0], fields[1], functional)
        if value < 0.0:
            logger.warning(f"Negative convexity probe {value:.4e} for pair {index} (seed {child.spawn_key})")
        rows.append({"pair": index, "spawn_key": child.spawn_key[-1], "probe": value})
    return pd.DataFrame(rows)


def stability_probe(initial: CoefficientVectorField, functional: CarlemanFunctional,
                    sizes: Sequence[float] = (1e-3, 3e-3, 1e-2)) -> pd.DataFrame:
    """
    Ratio ||Delta V_min||_H1 / ||Delta q||_H1 for relative boundary perturbations.

    The boundary data are scaled by (1 + size); each run starts from the same
    interior values.
    """
    grid = initial.grid
    free = grid.free
    reference = minimize(initial, functional).field.values
    rows = []
    for size in sizes:
        start = initial.values.copy()
        start[~free] = start[~free] * (1.0 + size)
        boundary_delta = start - initial.values
        result = minimize(initial.with_values(start), functional)
        delta_v = grid.h1_norm(result.field.values - reference)
        delta_q = grid.h1_norm(boundary_delta)
        ratio = delta_v / delta_q if delta_q > 0 else math.nan
        rows.append({"size": size, "delta_q": delta_q, "delta_v": delta_v, "ratio": ratio})
        logger.info(f"Stability probe size={size:g}: ratio {ratio:.4g}")
    return pd.DataFrame(rows)


def manufactured_offset(functional: CarlemanFunctional, exact: CoefficientVectorField) -> np.ndarray:
    """Residual of a known field; subtracting it makes that field a zero-residual minimiser."""
    saved, functional.offset = functional.offset, None
    try:
        return functional.residual(exact.values)
    finally:
        functional.offset = saved

