"""Implicit-Euler time stepping for linear cooperative systems and for the
full nonlinear models (method of lines)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import expr as ex
from .dfe import DfeState
from .grid import Grid, apply_laplacian, laplacian
from .model import COOPERATIVITY_TOL, CompartmentModel
from .spectral import SingularOperatorError, factorize

__all__ = [
    "Trajectory",
    "SimulationError",
    "ComparisonReport",
    "StabilityReport",
    "cooperative_operator",
    "evolve_linear",
    "comparison_test",
    "evolve_nonlinear",
    "dfe_stability_test",
]


class SimulationError(RuntimeError):
    pass


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), size)
    dt: float
    steps: int

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def cooperative_operator(grid: Grid, d_I: Sequence[float], P: np.ndarray) -> sp.csr_matrix:
    """``d_I Δ + P(x)`` for a nodewise matrix field ``P`` of shape (N, m, m)."""
    P = np.asarray(P, dtype=float)
    N, m, _ = P.shape
    d_I = np.broadcast_to(np.asarray(d_I, dtype=float), (m,))
    L = laplacian(grid, 1.0)
    blocks = sp.bmat([[sp.diags(P[:, i, j]) for j in range(m)] for i in range(m)], format="csr")
    return (sp.block_diag([d * L for d in d_I], format="csr") + blocks).tocsr()


def _generator(op) -> sp.csr_matrix:
    if hasattr(op, "matrix"):
        return sp.csr_matrix(op.matrix)
    if sp.issparse(op):
        return op.tocsr()
    return sp.csr_matrix(np.asarray(op, dtype=float))


def evolve_linear(op, phi0: np.ndarray, T: float, dt: Optional[float] = None, store_every: int = 1) -> Trajectory:
    """Implicit Euler ``(I - dt A) u_{k+1} = u_k`` on ``[0, T]``.

    ``op`` is a sparse/dense matrix or an object with a ``matrix`` attribute
    (e.g. a block operator). For cooperative ``A`` the step matrix is an
    M-matrix, so nonnegative data stay nonnegative. ``dt`` defaults to T/1000.
    """
    A = _generator(op)
    phi0 = np.asarray(phi0, dtype=float).ravel()
    if phi0.size != A.shape[0]:
        raise ValueError(f"initial state has {phi0.size} entries, operator needs {A.shape[0]}")
    if not T > 0:
        raise ValueError("T must be positive")
    dt = T / 1000.0 if dt is None else float(dt)
    if not dt > 0:
        raise ValueError("dt must be positive")
    steps = max(1, int(round(T / dt)))
    dt = T / steps
    lu = factorize(sp.identity(A.shape[0], format="csc") - dt * A.tocsc())
    times, states = [0.0], [phi0.copy()]
    u = phi0.copy()
    for k in range(1, steps + 1):
        u = lu.solve(u)
        if k % store_every == 0 or k == steps:
            times.append(k * dt)
            states.append(u.copy())
    return Trajectory(np.array(times), np.array(states), dt, steps)


@dataclass
class ComparisonReport:
    passed: bool
    min_slack: float
    first_violation: Optional[tuple[float, int]] = None
    times: int = 0


def comparison_test(
    P1: np.ndarray,
    P2: np.ndarray,
    grid: Grid,
    d_I: Sequence[float],
    phi0: np.ndarray,
    T: float,
    dt: Optional[float] = None,
    slack: float = 1e-12,
) -> ComparisonReport:
    """Evolve ``φ_t = d_I Δφ + P_k φ`` for k = 1, 2 from the same ``phi0``
    and check ``φ¹(t) >= φ²(t)`` entrywise at every stored time."""
    P1 = np.asarray(P1, dtype=float)
    P2 = np.asarray(P2, dtype=float)
    if P1.shape != P2.shape or P1.ndim != 3:
        raise ValueError("P1 and P2 must be matrix fields of equal shape (N, m, m)")
    m = P1.shape[1]
    off = ~np.eye(m, dtype=bool)
    for label, P in (("P1", P1), ("P2", P2)):
        if np.any(P[:, off] < -COOPERATIVITY_TOL):
            raise ValueError(f"{label} is not cooperative")
    if np.any(P1 < P2 - COOPERATIVITY_TOL):
        raise ValueError("P1 >= P2 must hold entrywise at every node")
    phi0 = np.asarray(phi0, dtype=float)
    if np.any(phi0 < 0):
        raise ValueError("phi0 must be nonnegative")
    t1 = evolve_linear(cooperative_operator(grid, d_I, P1), phi0, T, dt)
    t2 = evolve_linear(cooperative_operator(grid, d_I, P2), phi0, T, dt)
    diff = t1.states - t2.states
    scale = np.maximum(1.0, np.max(np.abs(t1.states), axis=1))
    rel = diff / scale[:, None]
    worst = float(rel.min())
    first = None
    if worst < -slack:
        k, i = np.argwhere(rel < -slack)[0]
        first = (float(t1.times[k]), int(i))
    return ComparisonReport(first is None, worst, first, len(t1.times))


# --------------------------------------------------------------- nonlinear


class _Reaction:
    def __init__(self, model: CompartmentModel, grid: Grid):
        self.model, self.grid = model, grid
        self.n, self.N = model.n, grid.N
        self.d = model.diffusion_array()
        L = laplacian(grid, 1.0)
        self.D = sp.block_diag([di * L for di in self.d], format="csr")

    def rhs(self, u: np.ndarray) -> np.ndarray:
        U = u.reshape(self.n, self.N)
        env = self.model.env(self.grid.nodes, U)
        f = np.empty_like(U)
        for i, e in enumerate(self.model.f):
            f[i] = ex.evaluate_env(e, env)
        return (apply_laplacian(self.grid, U, self.d) + f).ravel()

    def jacobian(self, u: np.ndarray) -> sp.csr_matrix:
        U = u.reshape(self.n, self.N)
        env = self.model.env(self.grid.nodes, U)
        shape = (self.N,)
        blocks = [[sp.diags(np.broadcast_to(ex.evaluate_env(e, env), shape).astype(float)) for e in row]
                  for row in self.model.df]
        return (self.D + sp.bmat(blocks, format="csr")).tocsr()


def evolve_nonlinear(
    model: CompartmentModel,
    grid: Grid,
    u0: np.ndarray,
    T: float,
    dt: Optional[float] = None,
    newton_tol: float = 1e-12,
    max_newton: int = 25,
    blowup: float = 1e12,
) -> Trajectory:
    """Implicit Euler for the full reaction-diffusion system, each step
    solved by Newton with the analytic Jacobian."""
    sysm = _Reaction(model, grid)
    u = np.asarray(u0, dtype=float).ravel().copy()
    if u.size != model.n * grid.N:
        raise ValueError("initial state must have shape (n, N)")
    dt = T / 1000.0 if dt is None else float(dt)
    steps = max(1, int(round(T / dt)))
    dt = T / steps
    I = sp.identity(u.size, format="csr")
    times, states = [0.0], [u.copy()]
    for k in range(1, steps + 1):
        prev = u.copy()
        for it in range(max_newton):
            try:
                G = u - prev - dt * sysm.rhs(u)
                scale = 1.0 + float(np.max(np.abs(u)))
                J = (I - dt * sysm.jacobian(u)).tocsc()
                du = factorize(J).solve(-G)
            except (ex.EvaluationError, SingularOperatorError) as err:
                raise SimulationError(f"step {k} (t={k * dt:.6g}): {err}") from None
            u = u + du
            if np.max(np.abs(du)) <= newton_tol * scale:
                break
        else:
            raise SimulationError(f"Newton did not converge at step {k} (t={k * dt:.6g})")
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > blowup:
            raise SimulationError(f"solution blew up at t={k * dt:.6g}")
        times.append(k * dt)
        states.append(u.copy())
    return Trajectory(np.array(times), np.array(states), dt, steps)


@dataclass
class StabilityReport:
    passed: bool
    mode: str
    initial_distance: float
    final_distance: float
    times: np.ndarray = field(repr=False)
    distances: np.ndarray = field(repr=False)
    infected_norms: np.ndarray = field(repr=False)
    decay_ratio: float = float("nan")
    tail_monotone: bool = False


def dfe_stability_test(
    model: CompartmentModel,
    grid: Grid,
    dfe: DfeState,
    amplitude: float = 1e-3,
    T: float = 20.0,
    dt: Optional[float] = None,
    mode: str = "decay",
    profile: Optional[np.ndarray] = None,
) -> StabilityReport:
    """Perturb the DFE and evolve the nonlinear system.

    The perturbation ``amplitude * max(u0) * profile`` (profile defaults to
    ones) is added to every infected compartment. For models with a
    conserved total the same amount is taken from the uninfected
    compartments, so the perturbed state keeps the DFE's mass.

    ``mode="decay"`` passes when the sup-norm distance to the DFE at ``T``
    is below its initial value and does not increase over the second half
    of the run. ``mode="growth"`` passes when the infected sup-norm at
    ``T`` exceeds its initial value.
    """
    if mode not in ("decay", "growth"):
        raise ValueError("mode must be 'decay' or 'growth'")
    m, n, N = model.m, model.n, grid.N
    u0 = dfe.full_state(model)
    scale = float(np.max(u0))
    shape = np.ones(N) if profile is None else np.broadcast_to(np.asarray(profile, dtype=float), (N,))
    if np.any(shape < 0):
        raise ValueError("perturbation profile must be nonnegative")
    delta = amplitude * scale * shape
    start = u0.copy()
    start[:m] += delta
    if model.conserved_total is not None:
        share = delta * m / (n - m)
        start[m:] -= share
        if np.any(start[m:] <= 0):
            raise ValueError("perturbation too large for the uninfected compartments")
    traj = evolve_nonlinear(model, grid, start, T, dt)
    diffs = traj.states.reshape(len(traj.times), n, N) - u0[None]
    dist = np.max(np.abs(diffs), axis=(1, 2))
    inf_norm = np.max(np.abs(traj.states.reshape(len(traj.times), n, N)[:, :m]), axis=(1, 2))
    half = len(dist) // 2
    tail = dist[half:]
    tail_monotone = bool(np.all(np.diff(tail) <= 1e-15 * max(1.0, scale)))
    ratio = float(dist[-1] / dist[0]) if dist[0] > 0 else 0.0
    if mode == "decay":
        passed = bool((dist[-1] < dist[0] or dist[0] == 0.0) and tail_monotone)
    else:
        passed = bool(inf_norm[-1] > inf_norm[0])
    return StabilityReport(passed, mode, float(dist[0]), float(dist[-1]), traj.times, dist, inf_norm, ratio, tail_monotone)
