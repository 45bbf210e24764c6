"""Block operator B = d_I Δ - V(x, u0) and the basic reproduction number.

Unknowns are ordered block-major: entry ``i*N + k`` is infected compartment
``i`` at node ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from .dfe import DfeState
from .grid import Grid, apply_laplacian, laplacian
from .model import COOPERATIVITY_TOL, CompartmentModel, jacobian_fields
from .spectral import (
    SingularOperatorError,
    SpectralResult,
    factorize,
    spectral_bound_cooperative,
    spectral_radius_nonneg,
)

__all__ = [
    "BlockOperator",
    "CooperativityError",
    "PreconditionError",
    "SignReport",
    "assemble",
    "build_block_operator",
    "compute_R0",
    "sign_check",
    "dense_next_generation_matrix",
    "THRESHOLD_BAND",
]

THRESHOLD_BAND = 1e-12
DENSE_LIMIT = 64
REFINE_STIFFNESS = 1e4


class CooperativityError(ValueError):
    def __init__(self, message: str, node: int, entry: tuple[int, int]):
        self.node, self.entry = node, entry
        super().__init__(message)


class PreconditionError(ValueError):
    pass


@dataclass
class BlockOperator:
    grid: Grid
    m: int
    diffusion: tuple[float, ...]
    V: np.ndarray  # (N, m, m)
    F: np.ndarray  # (N, m, m)
    matrix: sp.csc_matrix
    Fmat: sp.csr_matrix

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def size(self) -> int:
        return self.m * self.grid.N

    @cached_property
    def lu(self):
        return factorize(self.matrix)

    @cached_property
    def stiffness(self) -> float:
        """Ratio of the diffusion scale ``d/h^2`` to the reaction scale."""
        react = float(np.max(np.abs(self.V))) if self.V.size else 0.0
        return max(self.diffusion) * self.grid.inv_h2 / max(react, 1e-300)

    def apply_F(self, v: np.ndarray) -> np.ndarray:
        return self.Fmat @ v

    def apply_B(self, v: np.ndarray) -> np.ndarray:
        """``B v`` with the diffusion part evaluated by stable differences."""
        z = np.asarray(v, dtype=float).reshape(self.m, self.N)
        out = apply_laplacian(self.grid, z, np.array(self.diffusion))
        out -= np.einsum("kij,jk->ik", self.V, z)
        return out.ravel()

    def solve(self, rhs: np.ndarray, check: bool = False) -> np.ndarray:
        """``B^{-1} rhs``; stiff operators get iterative refinement against
        the accurately evaluated residual."""
        rhs = np.asarray(rhs, dtype=float)
        z = self.lu.solve(rhs.ravel())
        if self.stiffness > REFINE_STIFFNESS:
            for _ in range(3):
                dz = self.lu.solve(rhs.ravel() - self.apply_B(z))
                z += dz
                if np.max(np.abs(dz)) <= 1e-16 * np.max(np.abs(z)):
                    break
        if check:
            if not np.all(np.isfinite(z)):
                raise SingularOperatorError("solve produced non-finite values")
            r = self.apply_B(z) - rhs.ravel()
            denom = self.norm * float(np.max(np.abs(z))) + float(np.max(np.abs(rhs)))
            if denom > 0 and float(np.max(np.abs(r))) > 1e-10 * denom:
                raise SingularOperatorError("block solve residual too large; operator may be singular")
        return z.reshape(rhs.shape)

    @cached_property
    def norm(self) -> float:
        return float(abs(self.matrix).sum(axis=1).max())

    def next_generation(self, v: np.ndarray) -> np.ndarray:
        """``-F B^{-1} v``."""
        return -(self.Fmat @ self.solve(v))

    def as_linear_operator(self) -> LinearOperator:
        n = self.size
        return LinearOperator((n, n), matvec=self.next_generation, dtype=float)

    def with_F(self, scale: float = 1.0) -> sp.csc_matrix:
        """``B + scale * F`` as a sparse matrix."""
        return (self.matrix + scale * self.Fmat).tocsc()


def _nodal_blocks(fields: np.ndarray) -> sp.csr_matrix:
    N, m, _ = fields.shape
    return sp.bmat([[sp.diags(fields[:, i, j]) for j in range(m)] for i in range(m)], format="csr")


def build_block_operator(grid: Grid, d_I: Sequence[float], V: np.ndarray, F: np.ndarray) -> BlockOperator:
    """Assemble from nodewise matrices ``V``, ``F`` of shape (N, m, m).

    Raises :class:`CooperativityError` when ``-V`` has a negative
    off-diagonal entry or ``F`` a negative entry beyond 1e-12.
    """
    V = np.asarray(V, dtype=float)
    F = np.asarray(F, dtype=float)
    N, m, _ = V.shape
    if N != grid.N or F.shape != V.shape:
        raise ValueError("nodewise matrices must have shape (N, m, m)")
    d_I = tuple(float(d) for d in d_I)
    if len(d_I) != m:
        raise ValueError(f"need {m} infected diffusion rates")
    off = ~np.eye(m, dtype=bool)
    negV = np.where(off, -V, np.inf)
    if negV.size and np.min(negV) < -COOPERATIVITY_TOL:
        k, i, j = np.unravel_index(np.argmin(negV), negV.shape)
        raise CooperativityError(
            f"-V is not cooperative at node {k} (x={grid.nodes[k]:.6g}): -V[{i + 1},{j + 1}] = {-V[k, i, j]:.3g}",
            int(k), (int(i), int(j)))
    if np.min(F) < -COOPERATIVITY_TOL:
        k, i, j = np.unravel_index(np.argmin(F), F.shape)
        raise CooperativityError(
            f"F has a negative entry at node {k} (x={grid.nodes[k]:.6g}): F[{i + 1},{j + 1}] = {F[k, i, j]:.3g}",
            int(k), (int(i), int(j)))
    # clamp rounding-level violations so the assembled operator is exactly cooperative
    V = np.where(off & (V > 0), 0.0, V)
    F = np.maximum(F, 0.0)
    L = laplacian(grid, 1.0)
    diff = sp.block_diag([d * L for d in d_I], format="csr")
    B = (diff - _nodal_blocks(V)).tocsc()
    B.eliminate_zeros()
    Fm = _nodal_blocks(F)
    Fm.eliminate_zeros()
    return BlockOperator(grid, m, d_I, V, F, B, Fm)


def assemble(model: CompartmentModel, grid: Grid, dfe: DfeState) -> BlockOperator:
    """B and F of the model linearized at the disease-free state ``dfe``."""
    F, V = jacobian_fields(model, grid.nodes, dfe.full_state(model), which="FV")
    d_I = model.diffusion_array()[: model.m]
    return build_block_operator(grid, d_I, V, F)


def _certify_stable(op: BlockOperator, tol: float) -> SpectralResult:
    sB = spectral_bound_cooperative(op.matrix, tol=tol, sign_only=True)
    if sB.sign >= 0:
        raise PreconditionError(
            f"s(B) = {sB.value:.6g} is not negative: -V at the DFE must be cooperative with a stable "
            "principal eigenvalue for R0 to be defined")
    return sB


def compute_R0(
    model: CompartmentModel,
    grid: Grid,
    dfe: DfeState,
    tol: float = 1e-10,
    op: Optional[BlockOperator] = None,
    max_iter: int = 200_000,
) -> SpectralResult:
    """R0 = r(-F B^{-1}) by power iteration with one cached factorization.

    Before iterating, ``s(B) < 0`` is certified; otherwise
    :class:`PreconditionError`. The returned vector is the eigen-density,
    sup-norm 1 and nonnegative.
    """
    if op is None:
        op = assemble(model, grid, dfe)
    _certify_stable(op, tol)
    return spectral_radius_nonneg(op.as_linear_operator(), tol=tol, max_iter=max_iter)


@dataclass
class SignReport:
    R0: float
    s_BF: float
    agree: bool
    indeterminate: bool
    R0_result: SpectralResult = field(repr=False)
    s_result: SpectralResult = field(repr=False)

    @property
    def status(self) -> str:
        if self.indeterminate:
            return "near-threshold, indeterminate"
        return "agree" if self.agree else "DISAGREE"

    def to_dict(self) -> dict:
        return {"R0": self.R0, "s_BF": self.s_BF, "agree": self.agree,
                "indeterminate": self.indeterminate, "status": self.status}


def sign_check(
    model: CompartmentModel,
    grid: Grid,
    dfe: DfeState,
    tol: float = 1e-10,
    op: Optional[BlockOperator] = None,
    R0: Optional[SpectralResult] = None,
) -> SignReport:
    """Compare sign(R0 - 1) with sign(s(B + F)), each computed independently."""
    if op is None:
        op = assemble(model, grid, dfe)
    if R0 is None:
        R0 = compute_R0(model, grid, dfe, tol=tol, op=op)
    s = spectral_bound_cooperative(
        op.with_F(), tol=tol, apply=(lambda z: op.apply_B(z) + op.Fmat @ z) if op.stiffness > REFINE_STIFFNESS else None)
    a, b = R0.value - 1.0, s.value
    indeterminate = abs(a) < THRESHOLD_BAND or abs(b) < THRESHOLD_BAND
    agree = indeterminate or (np.sign(a) == s.sign)
    return SignReport(R0.value, s.value, bool(agree), bool(indeterminate), R0, s)


def dense_next_generation_matrix(op: BlockOperator) -> np.ndarray:
    """Explicit ``-F B^{-1}``; only for small grids (N <= 64)."""
    if op.N > DENSE_LIMIT:
        raise ValueError(f"dense next-generation matrix limited to N <= {DENSE_LIMIT}")
    B = op.matrix.toarray()
    return -op.Fmat.toarray() @ np.linalg.inv(B)
