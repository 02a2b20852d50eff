"""
Coarse space-time grid of the inversion and its sparse difference operators.

Nodes are stored flattened in C order over (t, x, y, z). Spatial nodes are
classified as interior (free), boundary (inside the ball with a 6-neighbour
outside, pinned) or ghost (outside the ball, within reach of the widest
stencil, fixed); all remaining nodes are never touched by a weighted stencil.
"""

from __future__ import annotations

import logging
import math
from functools import cached_property
from itertools import combinations_with_replacement
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse

from apps.core.exceptions import ConfigurationError

logger = logging.getLogger(__name__)


def first_derivative_1d(n: int, h: float) -> sparse.csr_matrix:
    """Centred first difference, one-sided second order at both ends."""
    if n < 3:
        raise ConfigurationError(f"Need >= 3 points per axis, got {n}")
    op = sparse.lil_matrix((n, n))
    for i in range(1, n - 1):
        op[i, i - 1] = -0.5
        op[i, i + 1] = 0.5
    op[0, 0:3] = [-1.5, 2.0, -0.5]
    op[n - 1, n - 3:n] = [0.5, -2.0, 1.5]
    return (op / h).tocsr()


def second_derivative_1d(n: int, h: float) -> sparse.csr_matrix:
    """Centred second difference, one-sided second order at both ends."""
    if n < 4:
        raise ConfigurationError(f"Need >= 4 points per axis, got {n}")
    op = sparse.lil_matrix((n, n))
    for i in range(1, n - 1):
        op[i, i - 1] = 1.0
        op[i, i] = -2.0
        op[i, i + 1] = 1.0
    op[0, 0:4] = [2.0, -5.0, 4.0, -1.0]
    op[n - 1, n - 4:n] = [-1.0, 4.0, -5.0, 2.0]
    return (op / h ** 2).tocsr()


def _embed(op: sparse.spmatrix, axis: int, sizes: Tuple[int, ...]) -> sparse.csr_matrix:
    """Apply a 1D operator along one axis of the flattened C-order array."""
    before = int(np.prod(sizes[:axis])) if axis else 1
    after = int(np.prod(sizes[axis + 1:])) if axis + 1 < len(sizes) else 1
    return sparse.kron(sparse.kron(sparse.identity(before), op), sparse.identity(after)).tocsr()


class InversionGrid:
    """
    Cartesian grid covering the closed ball |x| <= R plus `layers` ghost layers,
    over the times [t_min, t_max].
    """

    def __init__(self, R: float, hx: float, ht: float, t_min: float, t_max: float, penalty_order: int = 2):
        if penalty_order not in (2, 4):
            raise ConfigurationError(f"Penalty order must be 2 or 4, got {penalty_order}")
        if hx <= 0 or ht <= 0 or t_max <= t_min:
            raise ConfigurationError(f"Invalid inversion grid: hx={hx}, ht={ht}, [{t_min}, {t_max}]")
        self.R = R
        self.hx = hx
        self.ht = ht
        self.penalty_order = penalty_order
        self.layers = penalty_order // 2

        m = int(math.ceil(R / hx - 1e-9))
        self.axis = np.arange(-m - self.layers, m + self.layers + 1) * hx
        nt = int(round((t_max - t_min) / ht))
        self.times = t_min + ht * np.arange(nt + 1)
        if self.times.size < 4:
            raise ConfigurationError(f"Need >= 4 time levels, got {self.times.size}")
        self._classify()
        logger.debug(
            f"Inversion grid: {self.axis.size}^3 x {self.times.size} nodes, "
            f"{int(self.interior.sum())} interior, {int(self.boundary.sum())} boundary, {int(self.ghost.sum())} ghost"
        )

    def _classify(self) -> None:
        x, y, z = np.meshgrid(self.axis, self.axis, self.axis, indexing="ij")
        self.points = np.stack([x, y, z], axis=-1).reshape(-1, 3)
        radius = np.sqrt(x * x + y * y + z * z)
        inside = radius <= self.R + 1e-12

        padded = np.pad(inside, 1, constant_values=False)
        all_neighbors_inside = np.ones_like(inside)
        for axis in range(3):
            for shift in (-1, 1):
                all_neighbors_inside &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
        boundary = inside & ~all_neighbors_inside

        reach = np.zeros_like(inside)
        k = self.layers
        padded = np.pad(inside, k, constant_values=False)
        n = inside.shape[0]
        for dx in range(-k, k + 1):
            for dy in range(-k, k + 1):
                for dz in range(-k, k + 1):
                    reach |= padded[k + dx:k + dx + n, k + dy:k + dy + n, k + dz:k + dz + n]

        self.inside = inside.ravel()
        self.boundary = boundary.ravel()
        self.interior = (inside & ~boundary).ravel()
        self.ghost = (reach & ~inside).ravel()

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        return (self.axis.size,) * 3

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return (self.times.size,) + self.spatial_shape

    @property
    def n_spatial(self) -> int:
        return self.axis.size ** 3

    @property
    def n_nodes(self) -> int:
        return self.times.size * self.n_spatial

    @property
    def cell_volume(self) -> float:
        return self.hx ** 3 * self.ht

    def broadcast(self, spatial: np.ndarray) -> np.ndarray:
        """Repeat a spatial array over every time level (flattened)."""
        return np.tile(spatial, self.times.size)

    @cached_property
    def free(self) -> np.ndarray:
        """Degrees of freedom: interior nodes at every time."""
        return self.broadcast(self.interior)

    @cached_property
    def fixed_spatial(self) -> np.ndarray:
        """Spatial indices of pinned boundary and ghost nodes."""
        return np.flatnonzero(self.boundary | self.ghost)

    @cached_property
    def node_points(self) -> np.ndarray:
        return np.tile(self.points, (self.times.size, 1))

    @cached_property
    def node_times(self) -> np.ndarray:
        return np.repeat(self.times, self.n_spatial)

    # Operators on the flattened (t, x, y, z) array.

    @cached_property
    def dt(self) -> sparse.csr_matrix:
        return _embed(first_derivative_1d(self.times.size, self.ht), 0, self.shape)

    @cached_property
    def dtt(self) -> sparse.csr_matrix:
        return _embed(second_derivative_1d(self.times.size, self.ht), 0, self.shape)

    @cached_property
    def grad(self) -> List[sparse.csr_matrix]:
        op = first_derivative_1d(self.axis.size, self.hx)
        return [_embed(op, axis, self.shape) for axis in (1, 2, 3)]

    @cached_property
    def second(self) -> List[sparse.csr_matrix]:
        op = second_derivative_1d(self.axis.size, self.hx)
        return [_embed(op, axis, self.shape) for axis in (1, 2, 3)]

    @cached_property
    def laplacian(self) -> sparse.csr_matrix:
        return (self.second[0] + self.second[1] + self.second[2]).tocsr()

    @cached_property
    def wave_operator(self) -> sparse.csr_matrix:
        """V_tt - Laplace(V)."""
        return (self.dtt - self.laplacian).tocsr()

    def axis_derivative(self, axis: int, order: int) -> sparse.csr_matrix:
        """d^order / d(axis)^order on the flattened array; axis 0 is time."""
        if order == 0:
            return sparse.identity(self.n_nodes, format="csr")
        n, h = (self.times.size, self.ht) if axis == 0 else (self.axis.size, self.hx)
        first, second = first_derivative_1d(n, h), second_derivative_1d(n, h)
        op = {1: first, 2: second, 3: first @ second, 4: second @ second}[order]
        return _embed(op.tocsr(), axis, self.shape)

    def derivative(self, counts: Tuple[int, int, int, int]) -> sparse.csr_matrix:
        """Mixed difference operator for the multi-index (t, x, y, z) counts."""
        op = sparse.identity(self.n_nodes, format="csr")
        for axis, order in enumerate(counts):
            if order:
                op = op @ self.axis_derivative(axis, order)
        return op.tocsr()

    def multi_indices(self) -> List[Tuple[int, int, int, int]]:
        """Every (t, x, y, z) multi-index of total order <= penalty_order."""
        indices = []
        for total in range(self.penalty_order + 1):
            for combo in combinations_with_replacement(range(4), total):
                indices.append(tuple(int(c) for c in np.bincount(np.asarray(combo, dtype=int), minlength=4)))
        return indices

    def penalty_terms(self) -> List[sparse.csr_matrix]:
        """Difference operators whose squares make up the discrete Sobolev norm."""
        return [self.derivative(counts) for counts in self.multi_indices()]

    @cached_property
    def penalty_matrix(self) -> sparse.csr_matrix:
        """Sum of D^T W D over the penalty terms, W = cell volume on inside nodes."""
        weight = sparse.diags(self.broadcast(self.inside).astype(float) * self.cell_volume)
        total = sparse.csr_matrix((self.n_nodes, self.n_nodes))
        for op in self.penalty_terms():
            total = total + op.T @ weight @ op
        return total.tocsr()

    def sobolev_norm(self, values: np.ndarray) -> float:
        """Discrete H^penalty_order norm of a (nodes, N) field."""
        return float(np.sqrt(max(np.sum(values * (self.penalty_matrix @ values)), 0.0)))

    def h1_norm(self, values: np.ndarray) -> float:
        """Discrete H1 norm over inside nodes."""
        weight = self.broadcast(self.inside).astype(float)[:, None] * self.cell_volume
        total = np.sum(weight * values ** 2)
        for op in [self.dt] + self.grad:
            total += np.sum(weight * (op @ values) ** 2)
        return float(np.sqrt(total))

    def extension_values(self, q0: np.ndarray, q1: np.ndarray) -> np.ndarray:
        """
        Values V = q0(xi) + (|x| - R) q1(xi) at the fixed nodes.

        Args:
            q0, q1: Boundary data resampled to (k, fixed node, time)

        Returns:
            Array (time, fixed node, k)
        """
        radius = np.linalg.norm(self.points[self.fixed_spatial], axis=1)
        offset = (radius - self.R)[None, :, None]
        return np.transpose(q0, (2, 1, 0)) + offset * np.transpose(q1, (2, 1, 0))

    def fill_fixed(self, values: np.ndarray, fixed: np.ndarray) -> np.ndarray:
        """Write (time, fixed node, k) values into a (nodes, N) field."""
        field = values.reshape(self.times.size, self.n_spatial, -1).copy()
        field[:, self.fixed_spatial, :] = fixed
        return field.reshape(self.n_nodes, -1)

    def describe(self) -> Dict[str, float]:
        return {
            "hx": self.hx,
            "ht": self.ht,
            "t_min": float(self.times[0]),
            "t_max": float(self.times[-1]),
            "spatial_points": int(self.axis.size),
            "time_levels": int(self.times.size),
            "interior": int(self.interior.sum()),
            "boundary": int(self.boundary.sum()),
            "ghost": int(self.ghost.sum()),
            "penalty_order": self.penalty_order,
        }


def build_grid(R: float, hx: float, ht: float, t_min: float, t_max: float,
               penalty_order: int = 2, t_window: Optional[Tuple[float, float]] = None) -> InversionGrid:
    """Grid over [t_min, t_max] or a sub-window of it."""
    if t_window is not None:
        lo, hi = t_window
        if lo < t_min - 1e-12 or hi > t_max + 1e-12:
            raise ConfigurationError(f"Time sub-window [{lo}, {hi}] outside [{t_min}, {t_max}]")
        t_min, t_max = lo, hi
    return InversionGrid(R, hx, ht, t_min, t_max, penalty_order)
