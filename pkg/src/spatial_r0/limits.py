"""Small- and large-diffusion limits of R0, envelope bounds and sweeps."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from . import expr as ex
from .dfe import DfeError, UnsupportedLimitError, dfe_large_limit, dfe_small_limit, solve_dfe
from .grid import Grid, apply_laplacian, integrate, laplacian
from .model import COOPERATIVITY_TOL, CompartmentModel, jacobian_fields
from .r0 import REFINE_STIFFNESS, assemble, compute_R0, sign_check
from .spectral import SpectralError, spectral_bound_cooperative, spectral_radius_batch, spectral_radius_nonneg

__all__ = [
    "LimitError",
    "LocalProfile",
    "AveragedLimit",
    "EnvelopeMatrices",
    "SweepPoint",
    "LimitReport",
    "local_R0_profile",
    "averaged_limit",
    "envelopes",
    "envelope_bounds",
    "auxiliary_lambda",
    "default_eps",
    "sweep",
    "normalize_diffusion",
]

log = logging.getLogger(__name__)

HYPOTHESIS_DENSE_LIMIT = 6


class LimitError(ValueError):
    pass


# ------------------------------------------------------------ local profile


@dataclass
class LocalProfile:
    values: np.ndarray
    max: float
    argmax: int
    x_max: float


def _uninfected_state(model: CompartmentModel, ref: np.ndarray, N: int) -> np.ndarray:
    u = np.zeros((model.n, N))
    u[model.m:] = np.broadcast_to(np.asarray(ref, dtype=float).reshape(model.n - model.m, -1), (model.n - model.m, N))
    return u


def local_R0_profile(model: CompartmentModel, grid: Grid, reference: Optional[np.ndarray] = None) -> LocalProfile:
    """Nodewise ``r(V^{-1} F)`` at the small-diffusion profile ``c(x)``.

    The maximum is reported with its node; ties go to the lowest index.
    """
    ref = dfe_small_limit(model, grid) if reference is None else reference
    u = _uninfected_state(model, ref, grid.N)
    F, V = jacobian_fields(model, grid.nodes, u, which="FV")
    _check_local_V(V, grid)
    try:
        K = np.linalg.solve(V, F)
    except np.linalg.LinAlgError:
        dets = np.abs(np.linalg.det(V))
        k = int(np.argmin(dets))
        raise LimitError(f"V is singular at node {k} (x={grid.nodes[k]:.6g})") from None
    K = np.where(K < 0, np.where(K < -1e-12 * max(1.0, np.max(np.abs(K))), K, 0.0), K)
    if np.any(K < 0):
        k = int(np.argwhere(K < 0)[0][0])
        raise LimitError(f"V^-1 F has negative entries at node {k} (x={grid.nodes[k]:.6g})")
    vals, _ = spectral_radius_batch(K)
    k = int(np.argmax(vals))
    return LocalProfile(vals, float(vals[k]), k, float(grid.nodes[k]))


def _check_local_V(V: np.ndarray, grid: Grid) -> None:
    m = V.shape[-1]
    off = ~np.eye(m, dtype=bool)
    negV = np.where(off, -V, np.inf)
    if negV.size and np.min(negV) < -COOPERATIVITY_TOL:
        k = int(np.unravel_index(np.argmin(negV), negV.shape)[0])
        raise LimitError(f"-V is not cooperative at node {k} (x={grid.nodes[k]:.6g})")
    s = np.max(np.linalg.eigvals(-V).real, axis=-1)
    if np.any(s >= 0):
        k = int(np.argmax(s))
        raise LimitError(f"s(-V) = {s[k]:.3g} is not negative at node {k} (x={grid.nodes[k]:.6g})")


# ---------------------------------------------------------- averaged limit


@dataclass
class AveragedLimit:
    value: float
    vector: np.ndarray
    Vcheck: np.ndarray
    Fcheck: np.ndarray
    hypothesis: str  # "verified", "violated" or "unverified"
    slow_convergence: bool = False
    iterations: int = 0


def _has_nonneg_eigenvector(K: np.ndarray, lam: float) -> bool:
    """LP feasibility of ``(K - lam I) v = 0, v >= 0, sum(v) = 1``."""
    m = K.shape[0]
    A = np.vstack([K - lam * np.eye(m), np.ones((1, m))])
    b = np.zeros(m + 1)
    b[-1] = 1.0
    scale = max(1.0, float(np.max(np.abs(K))))
    # equality up to rounding: |(K - lam I) v| <= tol
    tol = 1e-9 * scale
    A_ub = np.vstack([A[:-1], -A[:-1]])
    b_ub = np.full(2 * m, tol)
    res = linprog(np.zeros(m), A_ub=A_ub, b_ub=b_ub, A_eq=A[-1:], b_eq=b[-1:], bounds=[(0, None)] * m,
                  method="highs")
    return res.status == 0


def averaged_limit(model: CompartmentModel, grid: Grid, reference: Optional[np.ndarray] = None) -> AveragedLimit:
    """``r(V̌^{-1} F̌)`` with V̌, F̌ the trapezoid integrals of V, F at ``ũ``.

    For m <= 6 the full spectrum is inspected: the result is ``verified``
    when no other positive eigenvalue has a nonnegative eigenvector
    (checked by linear programming), ``violated`` otherwise. Larger systems
    report ``unverified``.
    """
    ref = dfe_large_limit(model, grid) if reference is None else reference
    u = _uninfected_state(model, ref, grid.N)
    F, V = jacobian_fields(model, grid.nodes, u, which="FV")
    w = grid.weights
    Vc = np.einsum("k,kij->ij", w, V)
    Fc = np.einsum("k,kij->ij", w, F)
    try:
        K = np.linalg.solve(Vc, Fc)
    except np.linalg.LinAlgError:
        raise LimitError("integrated matrix V̌ is singular") from None
    K = np.where(np.abs(K) < 1e-14 * max(1.0, np.max(np.abs(K))), 0.0, K)
    if np.any(K < 0):
        raise LimitError("V̌^-1 F̌ has negative entries; V̌ is not a nonsingular M-matrix")
    slow = False
    try:
        res = spectral_radius_nonneg(K, tol=1e-14, max_iter=20_000)
        value, vec, its = res.value, res.vector, res.iterations
    except SpectralError as err:
        # degenerate dominance: fall back to the dense spectrum and flag it
        slow = True
        evals, evecs = np.linalg.eig(K)
        k = int(np.argmax(evals.real))
        value = float(evals[k].real)
        vec = np.abs(evecs[:, k].real)
        vec /= vec.max()
        its = err.iterations
    m = K.shape[0]
    if m <= HYPOTHESIS_DENSE_LIMIT:
        hypothesis = "verified"
        evals = np.linalg.eigvals(K)
        cand = sorted({round(float(e.real), 12) for e in evals if abs(e.imag) <= 1e-10 * max(1.0, value)})
        for lam in cand:
            if lam <= 1e-12 * max(1.0, value) or abs(lam - value) <= 1e-9 * max(1.0, value):
                continue
            if _has_nonneg_eigenvector(K, lam):
                hypothesis = "violated"
                break
    else:
        hypothesis = "unverified"
    return AveragedLimit(float(value), vec, Vc, Fc, hypothesis, slow, its)


# --------------------------------------------------------------- envelopes


@dataclass
class EnvelopeMatrices:
    epsilon: float
    Vlow: np.ndarray
    Vhigh: np.ndarray
    Flow: np.ndarray
    Fhigh: np.ndarray
    Vlow_x: Optional[np.ndarray] = None
    Vhigh_x: Optional[np.ndarray] = None
    Flow_x: Optional[np.ndarray] = None
    Fhigh_x: Optional[np.ndarray] = None


def default_eps(reference: np.ndarray) -> float:
    """5% of the smallest reference value."""
    return 0.05 * float(np.min(reference))


def envelopes(
    model: CompartmentModel,
    grid: Grid,
    reference: np.ndarray,
    eps: float,
    nodewise: bool = False,
) -> EnvelopeMatrices:
    """Entrywise extrema of V and F over nodes and the ε-box around ``reference``.

    ``reference`` holds the uninfected values, either per node (shape
    (n - m, N)) or constant (shape (n - m,)). The box is sampled at its
    corners plus the center, which captures the extrema of entries that are
    monotone in each coordinate.
    """
    k = model.n - model.m
    ref = np.broadcast_to(np.asarray(reference, dtype=float).reshape(k, -1), (k, grid.N))
    if eps < 0:
        raise LimitError("eps must be nonnegative")
    if eps >= float(np.min(ref)):
        raise LimitError(f"eps = {eps:.3g} reaches below zero around the reference (min {np.min(ref):.3g})")
    offsets = [np.zeros(k)] + [np.array(c) for c in itertools.product((-eps, eps), repeat=k)] if eps > 0 else [np.zeros(k)]
    Fs, Vs = [], []
    for off in offsets:
        u = _uninfected_state(model, ref + off[:, None], grid.N)
        try:
            F, V = jacobian_fields(model, grid.nodes, u, which="FV")
        except ex.EvaluationError as err:
            raise LimitError(f"ε-box leaves the region where the model can be evaluated: {err}") from None
        Fs.append(F)
        Vs.append(V)
    Fs, Vs = np.stack(Fs), np.stack(Vs)
    Flx, Fhx = Fs.min(axis=0), Fs.max(axis=0)
    Vlx, Vhx = Vs.min(axis=0), Vs.max(axis=0)
    env = EnvelopeMatrices(float(eps), Vlx.min(axis=0), Vhx.max(axis=0), Flx.min(axis=0), Fhx.max(axis=0))
    if nodewise:
        env.Vlow_x, env.Vhigh_x, env.Flow_x, env.Fhigh_x = Vlx, Vhx, Flx, Fhx
    return env


def _stable_mmatrix(V: np.ndarray, label: str) -> None:
    m = V.shape[0]
    off = ~np.eye(m, dtype=bool)
    if np.any(-V[off] < -COOPERATIVITY_TOL) or np.max(np.linalg.eigvals(-V).real) >= 0:
        raise LimitError(f"envelope bound needs -{label} cooperative with negative spectral bound")


def _dense_radius(K: np.ndarray) -> float:
    K = np.maximum(K, 0.0)
    if not np.any(K):
        return 0.0
    return spectral_radius_nonneg(K, tol=1e-14, max_iter=50_000).value


def envelope_bounds(env: EnvelopeMatrices) -> tuple[float, float]:
    """``(r(Vhigh^{-1} Flow), r(Vlow^{-1} Fhigh))``."""
    _stable_mmatrix(env.Vhigh, "Vhigh")
    _stable_mmatrix(env.Vlow, "Vlow")
    low = _dense_radius(np.linalg.solve(env.Vhigh, env.Flow))
    high = _dense_radius(np.linalg.solve(env.Vlow, env.Fhigh))
    return low, high


def auxiliary_lambda(
    model: CompartmentModel,
    grid: Grid,
    a: float,
    eps: float,
    reference: Optional[np.ndarray] = None,
    d_I: Optional[Sequence[float]] = None,
    tol: float = 1e-12,
) -> float:
    """Principal eigenvalue of ``d_I Δ - Vlow(x) + a Fhigh(x)`` with nodewise
    ε-envelopes around ``reference`` (default ``c(x)``)."""
    if not a > 0:
        raise ValueError("a must be positive")
    ref = dfe_small_limit(model, grid) if reference is None else reference
    env = envelopes(model, grid, ref, eps, nodewise=True)
    d = model.diffusion_array()[: model.m] if d_I is None else np.broadcast_to(np.asarray(d_I, float), (model.m,))
    m, N = model.m, grid.N
    P = -env.Vlow_x + a * env.Fhigh_x
    L = laplacian(grid, 1.0)
    blocks = sp.bmat([[sp.diags(P[:, i, j]) for j in range(m)] for i in range(m)], format="csr")
    A = (sp.block_diag([di * L for di in d], format="csr") + blocks).tocsc()

    def apply(z):
        zz = z.reshape(m, N)
        return (apply_laplacian(grid, zz, np.asarray(d)) + np.einsum("kij,jk->ik", P, zz)).ravel()

    stiff = float(np.max(d)) * grid.inv_h2 / max(float(np.max(np.abs(P))), 1e-300)
    res = spectral_bound_cooperative(A, tol=tol, apply=apply if stiff > REFINE_STIFFNESS else None)
    return res.value


# ------------------------------------------------------------------ sweeps


def normalize_diffusion(model: CompartmentModel, d) -> tuple[float, ...]:
    """Full diffusion tuple from a sweep value.

    A scalar fills the model's ``sweep`` placeholders, or every compartment
    when there are none. A tuple of length m sets the infected rates and
    keeps the rest from the model; length n is taken as is. ``None``
    entries fall back to the model value.
    """
    n, m = model.n, model.m
    if not np.isscalar(d) and len(d) == 1:
        d = d[0]
    if np.isscalar(d):
        if any(v is None for v in model.diffusion):
            return tuple(float(d) if v is None else float(v) for v in model.diffusion)
        return (float(d),) * n
    d = list(d)
    if len(d) not in (m, n):
        raise ValueError(f"diffusion tuple needs 1, {m} or {n} entries, got {len(d)}")
    base = list(model.diffusion)
    base[: len(d)] = d
    out = []
    for nm, v in zip(model.names, base):
        if v is None:
            raise ValueError(f"no diffusion rate for {nm}")
        out.append(float(v))
    return tuple(out)


@dataclass
class SweepPoint:
    diffusion: tuple[float, ...]
    R0: float = float("nan")
    s_BF: float = float("nan")
    sign: str = ""
    env_low: float = float("nan")
    env_high: float = float("nan")
    env_ref: str = ""
    iterations: int = 0
    dfe_residual: float = float("nan")
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    @property
    def status(self) -> str:
        return "ok" if self.ok else "error: " + self.error

    @property
    def bracketed(self) -> bool:
        return self.ok and self.env_low <= self.R0 <= self.env_high


@dataclass
class LimitReport:
    model: str
    grid_n: int
    eps: float
    points: list[SweepPoint]
    small_limit: Optional[float] = None
    small_argmax: Optional[float] = None
    large_limit: Optional[float] = None
    large_hypothesis: str = ""
    profile: Optional[np.ndarray] = field(default=None, repr=False)
    oracle_small: Optional[float] = None
    oracle_large: Optional[float] = None
    notes: list[str] = field(default_factory=list)

    def abs_err_small(self, p: SweepPoint) -> float:
        return abs(p.R0 - self.small_limit) if self.small_limit is not None else float("nan")

    def abs_err_large(self, p: SweepPoint) -> float:
        return abs(p.R0 - self.large_limit) if self.large_limit is not None else float("nan")


def _bracket(model, grid, fields, eps_fraction, refs):
    """Envelope bounds from the first ε-box that contains the computed DFE."""
    for label, ref in refs:
        ref_full = np.broadcast_to(np.asarray(ref, float).reshape(fields.shape[0], -1), fields.shape)
        eps = eps_fraction * float(np.min(ref_full))
        if np.max(np.abs(fields - ref_full)) <= eps:
            env = envelopes(model, grid, ref_full, eps)
            low, high = envelope_bounds(env)
            return low, high, label
    raise LimitError("no ε-box contains the computed DFE")


def _sweep_point(model: CompartmentModel, grid: Grid, d, tol: float, eps_fraction: float,
                 initial: Optional[np.ndarray]):
    p = SweepPoint(tuple(d))
    fields = None
    try:
        md = model.with_diffusion(tuple(d))
        dfe = solve_dfe(md, grid, initial=initial)
        fields = dfe.fields
        p.dfe_residual = dfe.relative_residual
        op = assemble(md, grid, dfe)
        R0 = compute_R0(md, grid, dfe, tol=tol, op=op)
        sc = sign_check(md, grid, dfe, tol=tol, op=op, R0=R0)
        p.R0, p.s_BF, p.iterations, p.sign = R0.value, sc.s_BF, R0.iterations, sc.status
        refs = []
        for label, fn in (("c(x)", dfe_small_limit), ("u~", dfe_large_limit)):
            try:
                refs.append((label, fn(md, grid)))
            except UnsupportedLimitError:
                pass
        refs.append(("dfe", dfe.fields))
        try:
            p.env_low, p.env_high, p.env_ref = _bracket(md, grid, dfe.fields, eps_fraction, refs)
        except LimitError as err:
            p.env_ref = f"unavailable ({err})"
    except (DfeError, SpectralError, ValueError, ex.EvaluationError, RuntimeError) as err:
        p.error = str(err).replace("\n", " ").replace("\t", " ")
    return p, fields


def _sweep_worker(args):
    model, grid, d, tol, eps_fraction = args
    return _sweep_point(model, grid, d, tol, eps_fraction, None)[0]


def sweep(
    model: CompartmentModel,
    grid: Grid,
    schedule: Sequence[Union[float, Sequence[float]]],
    tol: float = 1e-10,
    eps_fraction: float = 0.05,
    jobs: int = 1,
    oracles: Optional[tuple[float, float]] = None,
) -> LimitReport:
    """R0 along a diffusion schedule, with both limits and envelope brackets.

    Each point re-solves the DFE. Serial sweeps warm-start from the previous
    point; parallel sweeps (``jobs > 1``) start every point from ``c(x)`` so
    the result does not depend on scheduling. Points that fail carry their
    error instead of aborting the sweep. ``eps_fraction`` sets the envelope
    half-width relative to the smallest reference value.
    """
    if len(schedule) == 0:
        raise ValueError("diffusion schedule is empty")
    tuples = [normalize_diffusion(model, d) for d in schedule]
    points: list[SweepPoint] = []
    if jobs > 1 and len(tuples) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(_sweep_worker, [(model, grid, d, tol, eps_fraction) for d in tuples]))
    else:
        warm = None
        for d in tuples:
            p, fields = _sweep_point(model, grid, d, tol, eps_fraction, warm)
            if fields is not None:
                warm = fields
            points.append(p)

    report = LimitReport(model.name, grid.N, eps_fraction, points)
    try:
        prof = local_R0_profile(model, grid)
        report.small_limit, report.small_argmax, report.profile = prof.max, prof.x_max, prof.values
    except (LimitError, UnsupportedLimitError, ex.EvaluationError) as err:
        report.notes.append(f"small-diffusion limit unavailable: {err}")
    try:
        avg = averaged_limit(model, grid)
        report.large_limit, report.large_hypothesis = avg.value, avg.hypothesis
    except (LimitError, UnsupportedLimitError, ex.EvaluationError) as err:
        report.notes.append(f"large-diffusion limit unavailable: {err}")
    if oracles is not None:
        report.oracle_small, report.oracle_large = oracles
    if report.small_limit is not None and report.large_limit is not None and report.large_limit > report.small_limit * (1 + 1e-12):
        report.notes.append("averaged limit exceeds the maximum local value")
    return report
