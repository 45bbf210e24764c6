"""Disease-free steady state and its small/large-diffusion reference profiles."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import expr as ex
from .grid import Grid, apply_laplacian, integrate, laplacian
from .model import CompartmentModel, jacobian_fields
from .spectral import SingularOperatorError, factorize

__all__ = [
    "DfeState",
    "DfeError",
    "UnsupportedLimitError",
    "solve_dfe",
    "dfe_small_limit",
    "dfe_large_limit",
]

log = logging.getLogger(__name__)


class DfeError(RuntimeError):
    pass


class UnsupportedLimitError(ValueError):
    pass


@dataclass
class DfeState:
    """Uninfected profiles ``fields`` of shape (n - m, N) on ``grid``.

    ``residual`` is the sup-norm of ``d_S Δu_S + f_S``. ``relative_residual``
    divides it by ``1 + max(||d Δ|| |u| + |F| + |V+| + |V-|)``; when ``d/h^2``
    is large the absolute residual cannot drop below ``||d Δ||`` times the
    spacing of doubles near ``u``, so convergence is judged on the relative
    value.
    """

    grid: Grid
    fields: np.ndarray
    residual: float
    relative_residual: float
    iterations: int
    method: str
    diffusion: tuple[float, ...] = ()

    def full_state(self, model: CompartmentModel) -> np.ndarray:
        u = np.zeros((model.n, self.grid.N))
        u[model.m :] = self.fields
        return u


def dfe_small_limit(model: CompartmentModel, grid: Grid) -> np.ndarray:
    """Pointwise limit ``c(x)`` of the uninfected profiles as d_S -> 0."""
    if model.dfe_small is None:
        raise UnsupportedLimitError(f"model {model.name!r} provides no small-diffusion DFE profile (dfe_small)")
    x = grid.nodes
    out = np.empty((model.n - model.m, grid.N))
    for i, e in enumerate(model.dfe_small):
        out[i] = np.broadcast_to(ex.evaluate_env(e, {"x": x}), x.shape)
    if not np.all(out > 0):
        raise UnsupportedLimitError("small-diffusion DFE profile is not strictly positive")
    return out


def dfe_large_limit(model: CompartmentModel, grid: Grid) -> np.ndarray:
    """Constant limit of the uninfected profiles as d_S -> infinity."""
    if model.dfe_large is None:
        raise UnsupportedLimitError(f"model {model.name!r} provides no large-diffusion DFE limit (dfe_large)")
    x = grid.nodes
    out = np.empty(model.n - model.m)
    for i, lim in enumerate(model.dfe_large):
        num = np.broadcast_to(ex.evaluate_env(lim.num, {"x": x}), x.shape)
        if lim.den is None:
            if np.ptp(num) > 0:
                raise UnsupportedLimitError("dfe_large entry without a denominator must be constant")
            out[i] = num[0]
        else:
            den = np.broadcast_to(ex.evaluate_env(lim.den, {"x": x}), x.shape)
            out[i] = integrate(grid, num) / integrate(grid, den)
    if not np.all(out > 0):
        raise UnsupportedLimitError("large-diffusion DFE limit is not positive")
    return out


class _Subsystem:
    """Residual and Jacobian of the uninfected steady-state equations."""

    def __init__(self, model: CompartmentModel, grid: Grid):
        self.model, self.grid = model, grid
        self.m, self.k, self.N = model.m, model.n - model.m, grid.N
        d = model.diffusion_array()[self.m :]
        self.dS = tuple(float(v) for v in d)
        L = laplacian(grid, 1.0)
        self.L = sp.block_diag([di * L for di in d], format="csr")

    def state(self, uS: np.ndarray) -> np.ndarray:
        u = np.zeros((self.model.n, self.N))
        u[self.m :] = uS.reshape(self.k, self.N)
        return u

    def residual(self, uS: np.ndarray):
        model, x = self.model, self.grid.nodes
        env = model.env(x, self.state(uS))
        terms = np.zeros((self.k, self.N))
        f = np.empty((self.k, self.N))
        for i in range(self.k):
            j = self.m + i
            vp = np.broadcast_to(ex.evaluate_env(model.Vplus[j], env), x.shape)
            vm = np.broadcast_to(ex.evaluate_env(model.Vminus[j], env), x.shape)
            fi = np.broadcast_to(ex.evaluate_env(model.F[j], env), x.shape)
            f[i] = fi - vm + vp
            terms[i] = np.abs(fi) + np.abs(vm) + np.abs(vp)
        lap = apply_laplacian(self.grid, uS.reshape(self.k, self.N), np.array(self.dS))
        R = lap.ravel() + f.ravel()
        # normwise scale: ||d Δ|| |u| bounds the rounding floor of the diffusion term
        stencil = 4.0 * self.grid.inv_h2 * np.array(self.dS)[:, None] * np.abs(uS.reshape(self.k, self.N))
        scale = float(np.max(stencil + terms))
        return R, scale

    def jacobian(self, uS: np.ndarray) -> sp.csr_matrix:
        (M,) = jacobian_fields(self.model, self.grid.nodes, self.state(uS), which="M")
        k = self.k
        blocks = [[sp.diags(M[:, i, j]) for j in range(k)] for i in range(k)]
        return (self.L + sp.bmat(blocks, format="csr")).tocsr()


def _norm(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def solve_dfe(
    model: CompartmentModel,
    grid: Grid,
    initial: Optional[np.ndarray] = None,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> DfeState:
    """Disease-free steady state by damped Newton.

    Starts from ``initial`` (default: the small-diffusion profile, else ones).
    Models with a conserved total population get a bordered Newton system
    with the mass constraint ``Σ_k ∫u_k = conserved_total``. If Newton stalls,
    implicit-Euler pseudo-time stepping with doubling steps is run and Newton
    restarted.
    """
    sub = _Subsystem(model, grid)
    k, N = sub.k, sub.N
    if initial is None:
        try:
            initial = dfe_small_limit(model, grid)
        except UnsupportedLimitError:
            initial = np.ones((k, N))
    u = np.array(np.broadcast_to(initial, (k, N)), dtype=float).ravel()
    if not np.all(u > 0):
        raise DfeError("initial guess must be strictly positive")

    mass = None
    if model.conserved_total is not None:
        w = np.tile(grid.weights, k)
        mass = (w, float(model.conserved_total))
        u *= mass[1] / float(w @ u)

    try:
        u, its, method = _newton(sub, u, mass, tol, max_iter)
    except _NewtonFailure as fail:
        log.info("Newton failed for DFE (%s); trying pseudo-time continuation", fail)
        u = _pseudo_time(sub, fail.u, mass)
        try:
            u, its2, method = _newton(sub, u, mass, tol, max_iter)
        except _NewtonFailure as fail2:
            R, _ = sub.residual(fail2.u)
            node = int(np.argmax(np.abs(R)))
            name = model.uninfected[node // N]
            x = grid.nodes[node % N]
            raise DfeError(
                f"DFE solve failed: worst residual {abs(R[node]):.3g} in {name} at x={x:.6g} ({fail2})"
            ) from None
        its = fail.iterations + its2
        method = "pseudo-time+newton"

    R, scale = sub.residual(u)
    fields = u.reshape(k, N)
    if not np.all(fields > 0):
        idx = np.unravel_index(np.argmin(fields), fields.shape)
        raise DfeError(f"DFE not positive: {model.uninfected[idx[0]]} = {fields[idx]:.3g} at x={grid.nodes[idx[1]]:.6g}")
    return DfeState(grid, fields, _norm(R), _norm(R) / (1.0 + scale), its, method, sub.dS)


class _NewtonFailure(Exception):
    def __init__(self, message, u, iterations):
        super().__init__(message)
        self.u, self.iterations = u, iterations


def _step(sub: _Subsystem, u, R, mass):
    J = sub.jacobian(u)
    if mass is None:
        lu = factorize(J)
        return lu.solve(-R)
    w, total = mass
    e = np.ones((J.shape[0], 1))
    A = sp.bmat([[J, sp.csr_matrix(e)], [sp.csr_matrix(w[None, :]), None]], format="csc")
    rhs = np.concatenate([-R, [total - float(w @ u)]])
    return factorize(A).solve(rhs)[:-1]


def _newton(sub: _Subsystem, u, mass, tol, max_iter):
    R, scale = sub.residual(u)
    merit = _norm(R)
    for it in range(1, max_iter + 1):
        try:
            du = _step(sub, u, R, mass)
        except (SingularOperatorError, ex.EvaluationError) as err:
            raise _NewtonFailure(str(err), u, it) from None
        t = 1.0
        for _ in range(31):
            trial = u + t * du
            if np.all(trial > 0):
                try:
                    Rt, st = sub.residual(trial)
                except ex.EvaluationError:
                    Rt = None
                if Rt is not None and (_norm(Rt) < merit or _norm(Rt) <= tol * (1.0 + st)):
                    break
            t *= 0.5
        else:
            # no decrease: accept only if already at the rounding floor
            if merit <= tol * (1.0 + scale):
                return u, it, "newton"
            raise _NewtonFailure("line search failed", u, it)
        step = t * _norm(du)
        u, R, scale, merit = trial, Rt, st, _norm(Rt)
        if merit <= tol * (1.0 + scale) and step <= 1e-10 * (1.0 + _norm(u)):
            return u, it, "newton"
    raise _NewtonFailure(f"no convergence in {max_iter} iterations", u, max_iter)


def _pseudo_time(sub: _Subsystem, u, mass, dt: float = 1e-2, steps: int = 200):
    R, scale = sub.residual(u)
    I = sp.identity(u.size, format="csr")
    for _ in range(steps):
        J = sub.jacobian(u)
        try:
            du = factorize(I - dt * J).solve(dt * R)
        except SingularOperatorError:
            dt *= 0.5
            continue
        trial = u + du
        if mass is not None:
            trial *= mass[1] / float(mass[0] @ trial)
        ok = np.all(trial > 0)
        if ok:
            try:
                Rt, st = sub.residual(trial)
            except ex.EvaluationError:
                ok = False
        if ok:
            u, R, scale = trial, Rt, st
            dt *= 2.0
            if _norm(R) <= 1e-6 * (1.0 + scale) or dt > 1e12:
                break
        else:
            dt *= 0.25
    return u
