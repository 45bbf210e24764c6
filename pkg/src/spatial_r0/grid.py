"""Uniform node-centred 1-D grid with a reflecting (Neumann) Laplacian."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = ["Grid", "laplacian", "apply_laplacian", "integrate"]


@dataclass(frozen=True)
class Grid:
    """Nodes ``x_k = a + k*h``, ``k = 0..N-1``, with ``h = (b - a)/(N - 1)``."""

    a: float
    b: float
    N: int

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)) or not self.a < self.b:
            raise ValueError(f"invalid interval [{self.a}, {self.b}]")
        if int(self.N) != self.N or self.N < 3:
            raise ValueError(f"grid needs at least 3 nodes, got N={self.N}")

    @property
    def h(self) -> float:
        return (self.b - self.a) / (self.N - 1)

    @property
    def length(self) -> float:
        return self.b - self.a

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.a + self.h * np.arange(self.N)

    @cached_property
    def weights(self) -> np.ndarray:
        """Composite trapezoid weights."""
        w = np.full(self.N, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    @property
    def inv_h2(self) -> float:
        # (N-1)^2 / L^2 keeps integer-valued scalings exact
        return (self.N - 1) ** 2 / (self.b - self.a) ** 2


def laplacian(grid: Grid, d: float = 1.0) -> sp.csr_matrix:
    """Second-order Neumann Laplacian scaled by ``d``.

    Interior rows are ``d*(1, -2, 1)/h^2``; the boundary rows come from a
    mirrored ghost node and read ``d*(-2, 2)/h^2``. Every row sums to zero.
    """
    if not d > 0:
        raise ValueError(f"diffusion rate must be positive, got {d}")
    N = grid.N
    c = d * grid.inv_h2
    main = np.full(N, -2.0 * c)
    upper = np.full(N - 1, c)
    lower = np.full(N - 1, c)
    upper[0] = 2.0 * c
    lower[-1] = 2.0 * c
    return sp.diags([lower, main, upper], [-1, 0, 1], format="csr")


def apply_laplacian(grid: Grid, u: np.ndarray, d=1.0) -> np.ndarray:
    """``laplacian(grid, d) @ u`` along the last axis, evaluated as a
    difference of differences.

    Neighbouring values of a smooth field are close, so their differences
    are exact in floating point; the sparse product instead cancels terms of
    size ``d/h^2``, which loses most digits when ``d/h^2`` is large. ``d``
    may be an array broadcasting against ``u.shape[:-1]``.
    """
    u = np.asarray(u, dtype=float)
    du = np.diff(u, axis=-1)
    out = np.empty_like(u)
    out[..., 1:-1] = du[..., 1:] - du[..., :-1]
    out[..., 0] = 2.0 * du[..., 0]
    out[..., -1] = -2.0 * du[..., -1]
    scale = np.asarray(d, dtype=float) * grid.inv_h2
    return out * (scale[..., None] if scale.ndim else scale)


def integrate(grid: Grid, f) -> float:
    """Trapezoid integral of nodal values ``f`` (a scalar is broadcast)."""
    f = np.broadcast_to(np.asarray(f, dtype=float), (grid.N,))
    return float(grid.weights @ f)
