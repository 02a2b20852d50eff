"""
Orthonormal basis psi_n(s) = P_n(s) e^s on (-R, R) and its coupling tensors.

Polynomials are stored as monomial coefficients in the scaled variable s/R,
which keeps the coefficients O(1) for the orders used here (N <= 8).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from numpy.polynomial import legendre as npleg
from numpy.polynomial import polynomial as nppoly
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_triangular

from .exceptions import DataError, NumericalError

logger = logging.getLogger(__name__)

ORTHOGONALITY_TOL = 1e-8
QUADRATURE_DRIFT_TOL = 1e-10


def quadrature_size(N: int) -> int:
    """Gauss-Legendre node count for integrands of degree <= 3N - 3 times e^{3s}."""
    return 3 * N + 8


def gauss_legendre(n: int, R: float):
    """Gauss-Legendre nodes and weights mapped to (-R, R)."""
    x, w = npleg.leggauss(n)
    return R * x, R * w


@dataclass(frozen=True)
class BasisSet:
    """First N functions of the Gram-Schmidt orthonormalised system {s^n e^s}."""

    N: int
    R: float
    poly_coeffs: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray

    def _polynomials(self, s: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
        vander = nppoly.polyvander(np.asarray(s, dtype=float) / self.R, self.N - 1)
        return vander @ coeffs.T

    def evaluate(self, s: Any) -> np.ndarray:
        """Values psi_n(s) with shape (len(s), N)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return self._polynomials(s, self.poly_coeffs) * np.exp(s)[:, None]

    def derivative(self, s: Any) -> np.ndarray:
        """Values psi_n'(s) = (P_n' + P_n) e^s with shape (len(s), N)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        dcoeffs = np.zeros_like(self.poly_coeffs)
        for n in range(self.N):
            d = nppoly.polyder(self.poly_coeffs[n]) / self.R
            dcoeffs[n, : d.size] = d
        return (self._polynomials(s, dcoeffs) + self._polynomials(s, self.poly_coeffs)) * np.exp(s)[:, None]

    def synthesize(self, coeffs: np.ndarray, s: Any) -> np.ndarray:
        """Sum_n coeffs[..., n] psi_n(s); result has shape coeffs.shape[:-1] + (len(s),)."""
        return np.asarray(coeffs) @ self.evaluate(s).T

    @property
    def max_sample_step(self) -> float:
        """Widest uniform s-step giving 2 samples per quadrature node spacing."""
        return 0.5 * float(np.diff(np.sort(self.nodes)).min())

    def gram_matrix(self, nodes: Optional[np.ndarray] = None, weights: Optional[np.ndarray] = None) -> np.ndarray:
        nodes = self.nodes if nodes is None else nodes
        weights = self.weights if weights is None else weights
        values = self.evaluate(nodes)
        return values.T @ (values * weights[:, None])


@dataclass(frozen=True)
class CouplingTensors:
    """M (a_mk), its inverse, the triple tensor b_mnk and the averaging tensors."""

    M: np.ndarray
    M_inv: np.ndarray
    B: np.ndarray
    C1: np.ndarray
    C2: np.ndarray

    @property
    def N(self) -> int:
        return self.M.shape[0]

    @property
    def B_sym(self) -> np.ndarray:
        """b_mnk + b_mkn, the derivative kernel of the quadratic form."""
        return self.B + self.B.transpose(0, 2, 1)


def build_basis(N: int, R: float, quadrature_nodes: Optional[int] = None) -> BasisSet:
    """
    Orthonormalise {s^n e^s}, n = 0..N-1, on (-R, R).

    Classical Gram-Schmidt is applied twice to the coefficient vectors; the
    inner product is evaluated with Gauss-Legendre quadrature.

    Args:
        N: Truncation order (number of basis functions)
        R: Half-length of the interval
        quadrature_nodes: Override of the node count (default 3N + 8)

    Returns:
        Orthonormal basis

    Raises:
        NumericalError: if orthogonality is lost beyond 1e-8
    """
    if N < 1:
        raise ValueError(f"Basis order must be >= 1, got {N}")
    if R <= 0:
        raise ValueError(f"Interval half-length must be positive, got {R}")

    nodes, weights = gauss_legendre(quadrature_nodes or quadrature_size(N), R)
    vander = nppoly.polyvander(nodes / R, N - 1)
    e2s = np.exp(2.0 * nodes) * weights

    def inner(a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum((vander @ a) * (vander @ b) * e2s))

    coeffs = np.zeros((N, N))
    for n in range(N):
        v = np.zeros(N)
        v[n] = 1.0
        for _ in range(2):
            for m in range(n):
                v = v - inner(v, coeffs[m]) * coeffs[m]
        norm = np.sqrt(inner(v, v))
        if not np.isfinite(norm) or norm <= 0.0:
            raise NumericalError(f"Gram-Schmidt breakdown at n={n}")
        coeffs[n] = v / norm

    basis = BasisSet(N=N, R=R, poly_coeffs=coeffs, nodes=nodes, weights=weights)

    deviation = np.abs(basis.gram_matrix() - np.eye(N))
    if deviation.max() > ORTHOGONALITY_TOL:
        worst = int(np.unravel_index(np.argmax(deviation), deviation.shape)[0])
        logger.error(f"Orthogonality lost at n={worst}: deviation {deviation.max():.3e}")
        raise NumericalError(f"Basis lost orthogonality at n={worst} (deviation {deviation.max():.3e})")

    logger.debug(f"Built basis N={N}, R={R} with {nodes.size} quadrature nodes")
    return basis


def _tensors_on(basis: BasisSet, nodes: np.ndarray, weights: np.ndarray) -> Dict[str, np.ndarray]:
    psi = basis.evaluate(nodes)
    dpsi = basis.derivative(nodes)
    scale = 1.0 / (2.0 * basis.R)
    return {
        "M": psi.T @ (dpsi * weights[:, None]),
        "B": np.einsum("j,jm,jn,jk->mnk", weights, psi, psi, dpsi),
        "C1": scale * (weights @ psi),
        "C2": scale * (psi.T @ (psi * weights[:, None])),
    }


def coupling_tensors(basis: BasisSet) -> CouplingTensors:
    """
    Coupling matrix a_mk = (psi_k', psi_m), its inverse and derived tensors.

    Raises:
        NumericalError: if doubling the quadrature moves any entry by > 1e-10
    """
    base = _tensors_on(basis, basis.nodes, basis.weights)
    fine_nodes, fine_weights = gauss_legendre(2 * basis.nodes.size, basis.R)
    fine = _tensors_on(basis, fine_nodes, fine_weights)
    for name, values in base.items():
        drift = float(np.max(np.abs(values - fine[name])))
        if drift > QUADRATURE_DRIFT_TOL:
            logger.error(f"Quadrature drift in {name}: {drift:.3e}")
            raise NumericalError(f"Quadrature insufficient for {name}: drift {drift:.3e}")

    M = base["M"]
    # a_mk vanishes below the diagonal, so M is upper triangular.
    M_inv = solve_triangular(np.triu(M), np.eye(basis.N), lower=False)
    return CouplingTensors(M=M, M_inv=M_inv, B=base["B"], C1=base["C1"], C2=base["C2"])


def project_onto_basis(samples: Any, basis: BasisSet, s_grid: Optional[Any] = None,
                       axis: int = 0, bc_type: str = "natural") -> np.ndarray:
    """
    Coefficients (f, psi_k), k = 0..N-1, of s-dependent data.

    Args:
        samples: Values of f; the s-dependence runs along `axis`
        basis: Basis set
        s_grid: Uniform s-grid of the samples; None means the samples are
            given at the basis quadrature nodes
        axis: Axis of `samples` carrying s
        bc_type: Boundary condition of the interpolating cubic spline

    Returns:
        Array with the s-axis replaced by a leading basis axis of length N

    Raises:
        DataError: if the s-grid is too coarse, non-uniform or too short
    """
    samples = np.moveaxis(np.asarray(samples, dtype=float), axis, 0)
    if s_grid is None:
        if samples.shape[0] != basis.nodes.size:
            raise DataError(f"Expected {basis.nodes.size} samples at quadrature nodes, got {samples.shape[0]}")
        at_nodes = samples
    else:
        s_grid = np.asarray(s_grid, dtype=float)
        check_s_grid(s_grid, basis)
        if samples.shape[0] != s_grid.size:
            raise DataError(f"Sample count {samples.shape[0]} does not match s-grid size {s_grid.size}")
        at_nodes = CubicSpline(s_grid, samples, axis=0, bc_type=bc_type, extrapolate=False)(basis.nodes)

    kernel = basis.evaluate(basis.nodes) * basis.weights[:, None]
    return np.tensordot(kernel.T, at_nodes, axes=(1, 0))


def check_s_grid(s_grid: np.ndarray, basis: BasisSet) -> None:
    """Uniform grid spanning the quadrature nodes with 2 points per node spacing."""
    if s_grid.size < 4:
        raise DataError(f"At least 4 s-samples are required, got {s_grid.size}")
    steps = np.diff(s_grid)
    if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-8, atol=1e-12):
        raise DataError("Samples must lie on a uniform increasing s-grid")
    if steps[0] > basis.max_sample_step * (1.0 + 1e-9):
        raise DataError(
            f"s-grid too coarse: step {steps[0]:.4g} exceeds {basis.max_sample_step:.4g}, "
            f"half the smallest quadrature node spacing for N={basis.N}"
        )
    if s_grid[0] > basis.nodes.min() or s_grid[-1] < basis.nodes.max():
        raise DataError(
            f"s-grid [{s_grid[0]:.4g}, {s_grid[-1]:.4g}] does not cover the quadrature nodes "
            f"[{basis.nodes.min():.4g}, {basis.nodes.max():.4g}]"
        )


def dump_tensors_csv(tensors: CouplingTensors, path: Union[str, Path]) -> Path:
    """Write every tensor entry (row-major, 17 significant digits) to CSV."""
    rows: List[Dict[str, Any]] = []
    for name in ("M", "M_inv", "B", "C1", "C2"):
        values = getattr(tensors, name)
        for index in np.ndindex(values.shape):
            rows.append({"tensor": name, "index": ",".join(str(i) for i in index), "value": values[index]})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.17g")
    return path
