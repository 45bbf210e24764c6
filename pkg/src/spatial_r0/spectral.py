"""Spectral radius / spectral bound of nonnegative and cooperative operators.

Everything here is power iteration on a nonnegative operator:

* ``spectral_radius_nonneg`` iterates ``A`` itself (optionally ``A + cI``).
* ``spectral_bound_cooperative`` reduces ``s(A)`` to a spectral radius,
  either by the plain shift ``A + sigma*I`` or by the resolvent
  ``(sigma*I - A)^{-1}``, which is nonnegative once ``sigma`` exceeds the
  largest row sum of ``A``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

__all__ = [
    "SpectralResult",
    "SpectralError",
    "SingularOperatorError",
    "spectral_radius_nonneg",
    "spectral_radius_batch",
    "spectral_bound_cooperative",
    "is_irreducible",
    "solve_block_system",
    "factorize",
]

DECAY_FLOOR = 1e-300


class SpectralError(RuntimeError):
    """Power iteration did not converge; ``estimate`` holds the last value."""

    def __init__(self, message: str, estimate: float, iterations: int, residual: float):
        self.estimate = estimate
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"{message} (estimate {estimate:.12g}, residual {residual:.3g}, {iterations} iterations)")


class SingularOperatorError(RuntimeError):
    pass


@dataclass
class SpectralResult:
    value: float
    vector: np.ndarray
    iterations: int
    residual: float
    converged: bool = True
    decayed: bool = False
    lower: Optional[float] = None
    upper: Optional[float] = None
    shift: float = 0.0

    @property
    def sign(self) -> int:
        """Sign of ``value``, using the certified bracket when it decides."""
        if self.upper is not None and self.upper < 0:
            return -1
        if self.lower is not None and self.lower > 0:
            return 1
        return int(np.sign(self.value))


def _as_apply(A) -> tuple[Callable[[np.ndarray], np.ndarray], int]:
    if sp.issparse(A):
        A = A.tocsr()
        return A.__matmul__, A.shape[0]
    if isinstance(A, np.ndarray):
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        return A.__matmul__, A.shape[0]
    if hasattr(A, "matvec") and hasattr(A, "shape"):
        return A.matvec, A.shape[0]
    raise TypeError("expected a dense/sparse matrix or a LinearOperator")


def _alternating(history: list[float]) -> bool:
    """True when the last estimates oscillate without settling (periodic
    nonnegative operators, e.g. bipartite coupling)."""
    if len(history) < 10:
        return False
    d = np.diff(history[-10:])
    if np.any(d[1:] * d[:-1] >= 0):
        return False
    return abs(d[-1]) >= 0.8 * abs(d[-3]) and abs(d[-1]) > 0


def spectral_radius_nonneg(
    A,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    x0: Optional[np.ndarray] = None,
    shift: Optional[float] = None,
) -> SpectralResult:
    """Perron root of an entrywise-nonnegative operator by power iteration.

    Iterates ``v <- (A + c I) v / ||.||_inf`` from the all-ones vector and
    stops once ``||A v - r v||_inf <= tol * max(1, r)``. ``c`` is ``shift``
    when given; otherwise it starts at 0 and is raised to the running
    estimate if the iterates start to oscillate (periodic operators).
    Iterates decaying below 1e-300 give ``value == 0`` with ``decayed``.
    """
    apply, n = _as_apply(A)
    v = np.ones(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    nv = np.max(np.abs(v))
    if nv == 0:
        raise ValueError("starting vector is zero")
    v /= nv
    auto = shift is None
    c = 0.0 if shift is None else float(shift)
    history: list[float] = []
    lam = res = float("nan")
    for k in range(1, max_iter + 1):
        w = apply(v)
        if c:
            w = w + c * v
        nw = float(np.max(np.abs(w)))
        if not np.isfinite(nw):
            raise SpectralError("iterate overflowed", lam, k, res)
        if nw < DECAY_FLOOR:
            return SpectralResult(0.0, v, k, 0.0, converged=True, decayed=True, shift=c)
        lam = nw - c
        res = float(np.max(np.abs(w - nw * v)))
        if res <= tol * max(1.0, abs(lam)):
            return SpectralResult(lam, v, k, res, shift=c)
        v = w / nw
        if auto and c == 0.0:
            history.append(lam)
            if _alternating(history):
                c = 0.5 * (history[-1] + history[-2])
    raise SpectralError("power iteration did not converge", lam, max_iter, res)


def spectral_radius_batch(mats: np.ndarray, tol: float = 1e-13, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Perron roots of a stack of small nonnegative matrices, shape (K, m, m).

    Iterates ``A + c I`` with ``c`` the largest row sum of each matrix, which
    makes every irreducible matrix primitive. Returns (values, vectors).
    """
    mats = np.asarray(mats, dtype=float)
    K, m, _ = mats.shape
    if np.any(mats < 0):
        raise ValueError("matrices must be entrywise nonnegative")
    c = mats.sum(axis=2).max(axis=1)
    vals = np.zeros(K)
    vecs = np.ones((K, m))
    active = np.flatnonzero(c > 0)
    vecs[c == 0] = 1.0
    v = np.ones((active.size, m))
    A = mats[active]
    ca = c[active]
    for _ in range(max_iter):
        if active.size == 0:
            return vals, vecs
        w = np.einsum("kij,kj->ki", A, v) + ca[:, None] * v
        nw = np.max(w, axis=1)
        lam = nw - ca
        res = np.max(np.abs(w - nw[:, None] * v), axis=1)
        done = res <= tol * np.maximum(1.0, np.abs(lam))
        if np.any(done):
            vals[active[done]] = lam[done]
            vecs[active[done]] = v[done]
            keep = ~done
            active, A, ca = active[keep], A[keep], ca[keep]
            w, nw = w[keep], nw[keep]
        v = w / nw[:, None]
    raise SpectralError("batched power iteration did not converge", float("nan"), max_iter, float("nan"))


def factorize(A):
    """Sparse LU of a square matrix; raises SingularOperatorError."""
    A = sp.csc_matrix(A)
    try:
        lu = splu(A)
    except RuntimeError as err:
        raise SingularOperatorError(f"factorization failed: {err}") from err
    if np.any(lu.U.diagonal() == 0):
        raise SingularOperatorError("matrix is singular")
    return lu


def spectral_bound_cooperative(
    A,
    tol: float = 1e-10,
    shift: Optional[float] = None,
    method: str = "auto",
    max_iter: int = 100_000,
    sign_only: bool = False,
    apply: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> SpectralResult:
    """Spectral bound ``s(A)`` of a matrix with nonnegative off-diagonals.

    ``method="shift"`` computes ``r(A + sigma I) - sigma`` with
    ``sigma = 1 + max|A_ii|`` by default. ``method="invert"`` computes
    ``sigma - 1/r((sigma I - A)^{-1})`` with ``sigma`` one above the largest
    row sum; this is the practical route for stiff sparse operators such as
    discretized diffusion. ``auto`` picks ``shift`` for dense matrices of
    size <= 64 and ``invert`` otherwise.

    In invert mode, when the iterate is strictly positive the result carries
    a Collatz-Wielandt bracket ``lower <= s(A) <= upper``. With
    ``sign_only=True`` the iteration stops as soon as that bracket excludes
    zero (``converged`` is then False but ``sign`` is certain). ``apply``
    is an optional accurate evaluation of ``A v``; when given, each resolvent
    solve gets iterative refinement against it, which matters when the
    sparse product loses digits (stiff diffusion).
    """
    dense = isinstance(A, np.ndarray)
    n = A.shape[0]
    if method == "auto":
        method = "shift" if dense and n <= 64 else "invert"
    diag = np.asarray(A.diagonal(), dtype=float)
    off = (A - np.diag(diag)) if dense else (sp.csr_matrix(A) - sp.diags(diag))
    off_min = float(off.min()) if n > 1 else 0.0
    if off_min < -1e-12 * max(1.0, float(abs(off).max()) if n > 1 else 1.0):
        raise ValueError(f"operator is not cooperative (off-diagonal entry {off_min:.3g})")

    if method == "shift":
        sigma = 1.0 + float(np.max(np.abs(diag))) if shift is None else float(shift)
        if np.any(diag + sigma < 0):
            raise ValueError("shift too small: A + sigma*I has negative diagonal")
        res = spectral_radius_nonneg(A, tol=tol, max_iter=max_iter, shift=sigma)
        return SpectralResult(res.value, res.vector, res.iterations, res.residual, res.converged, res.decayed, shift=sigma)
    if method != "invert":
        raise ValueError(f"unknown method {method!r}")

    rowsum = np.asarray(A.sum(axis=1)).ravel()
    sigma = float(np.max(rowsum)) + 1.0 if shift is None else float(shift)
    if sigma <= float(np.max(rowsum)):
        raise ValueError("shift must exceed the largest row sum")
    M = sp.identity(n, format="csc") * sigma - sp.csc_matrix(A)
    lu = factorize(M)
    v = np.ones(n)
    rho = res = float("nan")
    lower = upper = None
    for k in range(1, max_iter + 1):
        w = lu.solve(v)
        if apply is not None:
            for _ in range(2):
                w += lu.solve(v - (sigma * w - apply(w)))
        rho = float(np.max(w))
        if not rho > 0:
            raise SpectralError("resolvent iterate lost positivity", float("nan"), k, float("nan"))
        s = sigma - 1.0 / rho
        vn = w / rho
        # A vn - s vn == (vn - v) / rho exactly, avoiding cancellation in A vn
        res = float(np.max(np.abs(vn - v))) / rho
        if np.all(v > 0) and np.all(w > 0):
            ratio = w / v
            lo_rho, hi_rho = float(ratio.min()), float(ratio.max())
            lower, upper = sigma - 1.0 / lo_rho, sigma - 1.0 / hi_rho
        else:
            lower = upper = None
        if res <= tol * max(1.0, abs(s)):
            return SpectralResult(s, vn, k, res, lower=lower, upper=upper, shift=sigma)
        if sign_only and lower is not None and (upper < 0 or lower > 0):
            return SpectralResult(s, vn, k, res, converged=False, lower=lower, upper=upper, shift=sigma)
        v = vn
    raise SpectralError("resolvent power iteration did not converge", sigma - 1.0 / rho, max_iter, res)


def is_irreducible(pattern) -> bool:
    """Strong connectivity of the digraph with an edge i->j for each true
    off-diagonal ``pattern[i][j]``."""
    P = np.asarray(pattern, dtype=bool)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("pattern must be square")
    if P.shape[0] <= 1:
        return True
    P = P & ~np.eye(P.shape[0], dtype=bool)
    ncomp, _ = connected_components(sp.csr_matrix(P), directed=True, connection="strong")
    return ncomp == 1


def solve_block_system(B, rhs: np.ndarray, check: bool = True, rtol: float = 1e-10) -> np.ndarray:
    """Solve ``B z = rhs`` with a cached sparse LU.

    ``B`` is either a sparse matrix or an object with ``matrix`` and ``lu``
    attributes (see :class:`~spatial_r0.r0.BlockOperator`). The normwise
    backward error ``||Bz - rhs|| / (||B|| ||z|| + ||rhs||)`` is checked
    against ``rtol``.
    """
    if hasattr(B, "lu"):
        matrix, lu = B.matrix, B.lu
    else:
        matrix = sp.csc_matrix(B)
        lu = factorize(matrix)
    rhs = np.asarray(rhs, dtype=float)
    z = lu.solve(rhs.ravel()).reshape(rhs.shape)
    if check:
        if not np.all(np.isfinite(z)):
            raise SingularOperatorError("solve produced non-finite values")
        r = matrix @ z.ravel() - rhs.ravel()
        normB = float(abs(matrix).sum(axis=1).max())
        denom = normB * float(np.max(np.abs(z))) + float(np.max(np.abs(rhs)))
        if denom > 0 and float(np.max(np.abs(r))) > rtol * denom:
            raise SingularOperatorError("block solve residual too large; operator may be singular")
    return z
