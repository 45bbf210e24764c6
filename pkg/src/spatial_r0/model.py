"""Compartmental reaction-diffusion models and their linearization.

A model has ``n`` compartments, the first ``m`` of which are infected. Each
compartment ``i`` carries three nonnegative rate expressions: ``F[i]`` (new
infections), ``Vplus[i]`` (transfer in by other means) and ``Vminus[i]``
(transfer out). The reaction term is ``f_i = F_i - (Vminus_i - Vplus_i)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional, Sequence

import numpy as np

from . import expr as ex
from .expr import Expression

__all__ = [
    "LargeLimit",
    "CompartmentModel",
    "JacobianSample",
    "JacobianEvaluationError",
    "AssumptionCheck",
    "AssumptionReport",
    "jacobians_at",
    "jacobian_fields",
    "check_assumptions",
    "COOPERATIVITY_TOL",
]

COOPERATIVITY_TOL = 1e-12


class JacobianEvaluationError(ex.EvaluationError):
    def __init__(self, matrix: str, i: int, j: int, cause: ex.EvaluationError):
        self.matrix, self.i, self.j, self.cause = matrix, i, j, cause
        super().__init__(cause.kind, f"{matrix}[{i + 1},{j + 1}]: {cause.detail}")


@dataclass(frozen=True)
class LargeLimit:
    """Large-diffusion limit of one uninfected compartment: ``∫num / ∫den``,
    or the constant ``num`` when ``den`` is None."""

    num: Expression
    den: Optional[Expression] = None


def _expr_tuple(values, vocab) -> tuple[Expression, ...]:
    return tuple(ex.as_expression(v, vocab) for v in values)


@dataclass(frozen=True)
class CompartmentModel:
    names: tuple[str, ...]
    m: int
    F: tuple[Expression, ...]
    Vplus: tuple[Expression, ...]
    Vminus: tuple[Expression, ...]
    diffusion: tuple[Optional[float], ...]
    domain: tuple[float, float] = (0.0, 1.0)
    name: str = "custom"
    params: Mapping[str, object] = field(default_factory=dict)
    conserved_total: Optional[float] = None
    dfe_small: Optional[tuple[Expression, ...]] = None
    dfe_large: Optional[tuple[LargeLimit, ...]] = None

    def __post_init__(self):
        names = tuple(self.names)
        n = len(names)
        if len(set(names)) != n:
            raise ValueError(f"duplicate compartment names in {names}")
        for nm in names:
            if nm == "x" or nm in ex.FUNCTIONS or nm in ("pi", "pow", "neg"):
                raise ValueError(f"reserved compartment name {nm!r}")
        if not 1 <= self.m < n:
            raise ValueError(f"need 1 <= m < n, got m={self.m}, n={n}")
        vocab = ["x", *names, *[f"u{i + 1}" for i in range(n)]]
        alias = {f"u{i + 1}": ex.Var(nm) for i, nm in enumerate(names)}
        canon = {}
        for key in ("F", "Vplus", "Vminus"):
            values = _expr_tuple(getattr(self, key), vocab)
            if len(values) != n:
                raise ValueError(f"{key} needs {n} expressions, got {len(values)}")
            for e in values:
                bad = ex.variables(e) - set(vocab)
                if bad:
                    raise ValueError(f"{key} uses unknown variables {sorted(bad)}")
            canon[key] = tuple(ex.substitute(e, alias) for e in values)
        diffusion = tuple(None if d is None else float(d) for d in self.diffusion)
        if len(diffusion) != n:
            raise ValueError(f"diffusion needs {n} entries, got {len(diffusion)}")
        for nm, d in zip(names, diffusion):
            if d is not None and not (np.isfinite(d) and d > 0):
                raise ValueError(f"diffusion rate of {nm} must be positive, got {d}")
        a, b = self.domain
        if not float(a) < float(b):
            raise ValueError(f"invalid domain {self.domain}")
        k = n - self.m
        small = self.dfe_small
        if small is not None:
            small = _expr_tuple(small, ["x"])
            if len(small) != k:
                raise ValueError(f"dfe_small needs {k} expressions")
        large = self.dfe_large
        if large is not None:
            large = tuple(
                v if isinstance(v, LargeLimit) else LargeLimit(ex.as_expression(v, ["x"])) for v in large
            )
            if len(large) != k:
                raise ValueError(f"dfe_large needs {k} entries")
        setattr_ = object.__setattr__
        setattr_(self, "names", names)
        setattr_(self, "F", canon["F"])
        setattr_(self, "Vplus", canon["Vplus"])
        setattr_(self, "Vminus", canon["Vminus"])
        setattr_(self, "diffusion", diffusion)
        setattr_(self, "domain", (float(a), float(b)))
        setattr_(self, "dfe_small", small)
        setattr_(self, "dfe_large", large)

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def infected(self) -> tuple[str, ...]:
        return self.names[: self.m]

    @property
    def uninfected(self) -> tuple[str, ...]:
        return self.names[self.m :]

    def diffusion_array(self) -> np.ndarray:
        missing = [nm for nm, d in zip(self.names, self.diffusion) if d is None]
        if missing:
            raise ValueError(f"no diffusion rate set for {', '.join(missing)}")
        return np.array(self.diffusion, dtype=float)

    def with_diffusion(self, d) -> "CompartmentModel":
        """Copy with new diffusion rates; a scalar applies to every compartment."""
        if np.isscalar(d):
            d = (float(d),) * self.n
        return dataclasses.replace(self, diffusion=tuple(d))

    # symbolic pieces, derived once per model

    @cached_property
    def V(self) -> tuple[Expression, ...]:
        return tuple(ex.sub(vm, vp) for vm, vp in zip(self.Vminus, self.Vplus))

    @cached_property
    def f(self) -> tuple[Expression, ...]:
        return tuple(ex.sub(F, V) for F, V in zip(self.F, self.V))

    @cached_property
    def dF(self) -> tuple[tuple[Expression, ...], ...]:
        I = self.infected
        return tuple(tuple(ex.differentiate(self.F[i], I[j]) for j in range(self.m)) for i in range(self.m))

    @cached_property
    def dV(self) -> tuple[tuple[Expression, ...], ...]:
        I = self.infected
        return tuple(tuple(ex.differentiate(self.V[i], I[j]) for j in range(self.m)) for i in range(self.m))

    @cached_property
    def dM(self) -> tuple[tuple[Expression, ...], ...]:
        m, S = self.m, self.uninfected
        k = self.n - m
        return tuple(tuple(ex.differentiate(self.f[m + i], S[j]) for j in range(k)) for i in range(k))

    @cached_property
    def df(self) -> tuple[tuple[Expression, ...], ...]:
        """Full Jacobian of the reaction terms, n x n."""
        return tuple(tuple(ex.differentiate(fi, nm) for nm in self.names) for fi in self.f)

    def env(self, x, u) -> dict:
        env = {"x": x}
        for i, nm in enumerate(self.names):
            env[nm] = u[i]
        return env


@dataclass(frozen=True)
class JacobianSample:
    x: float
    F: np.ndarray
    V: np.ndarray
    M: np.ndarray


def _eval_matrix(exprs, env, shape, label) -> np.ndarray:
    rows = len(exprs)
    cols = len(exprs[0]) if rows else 0
    out = np.empty(shape + (rows, cols))
    for i in range(rows):
        for j in range(cols):
            try:
                val = ex.evaluate_env(exprs[i][j], env)
            except ex.EvaluationError as err:
                raise JacobianEvaluationError(label, i, j, err) from err
            out[..., i, j] = val
    return out


def _eval_vector(exprs, env, shape, label) -> np.ndarray:
    out = np.empty((len(exprs),) + shape)
    for i, e in enumerate(exprs):
        try:
            out[i] = ex.evaluate_env(e, env)
        except ex.EvaluationError as err:
            raise JacobianEvaluationError(label, i, 0, err) from err
    return out


def jacobians_at(model: CompartmentModel, x: float, u: Sequence[float]) -> JacobianSample:
    """The matrices F, V (infected block) and M (uninfected block) at one point."""
    u = [float(v) for v in u]
    if len(u) != model.n:
        raise ValueError(f"state needs {model.n} entries")
    env = model.env(float(x), u)
    return JacobianSample(
        float(x),
        _eval_matrix(model.dF, env, (), "F"),
        _eval_matrix(model.dV, env, (), "V"),
        _eval_matrix(model.dM, env, (), "M"),
    )


def jacobian_fields(model: CompartmentModel, x: np.ndarray, u: np.ndarray, which: str = "FVM"):
    """Nodewise F, V, M for states ``u`` of shape (n, N); arrays (N, ., .)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    env = model.env(x, u)
    shape = x.shape
    out = []
    if "F" in which:
        out.append(_eval_matrix(model.dF, env, shape, "F"))
    if "V" in which:
        out.append(_eval_matrix(model.dV, env, shape, "V"))
    if "M" in which:
        out.append(_eval_matrix(model.dM, env, shape, "M"))
    return tuple(out)


# ----------------------------------------------------------- assumptions


@dataclass
class AssumptionCheck:
    key: str
    description: str
    passed: bool
    worst: float = 0.0
    where: str = ""
    gating: bool = False


@dataclass
class AssumptionReport:
    checks: list[AssumptionCheck]
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def gating_ok(self) -> bool:
        return all(c.passed for c in self.checks if c.gating)

    def failures(self) -> list[AssumptionCheck]:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, key: str) -> AssumptionCheck:
        for c in self.checks:
            if c.key == key:
                return c
        raise KeyError(key)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checks": [dataclasses.asdict(c) for c in self.checks],
            "notes": list(self.notes),
        }


def _worst_negative(values: np.ndarray, x: np.ndarray, label: str, mask=None):
    """Minimum entry of a (N, ...) array and a description of where it sits."""
    vals = np.where(mask, values, np.inf) if mask is not None else values
    if vals.size == 0 or not np.isfinite(vals).any():
        return 0.0, ""
    idx = np.unravel_index(np.argmin(vals), vals.shape)
    worst = float(vals[idx])
    where = f"node {idx[0]} (x={x[idx[0]]:.6g})"
    if len(idx) == 3:
        where += f", {label}[{idx[1] + 1},{idx[2] + 1}]"
    elif len(idx) == 2:
        where += f", {label}[{idx[1] + 1}]"
    return worst, where


def check_assumptions(model: CompartmentModel, dfe, samples: int = 4, seed: int = 0) -> AssumptionReport:
    """Spot-check the structural hypotheses at every grid node.

    ``dfe`` is a :class:`~spatial_r0.dfe.DfeState`. The report lists one
    entry per hypothesis; entries marked ``gating`` (cooperativity of -V
    and negative nodewise spectral bound of -V) must pass before R0 can be
    computed.
    """
    from .spectral import is_irreducible

    grid = dfe.grid
    x = grid.nodes
    N, n, m = grid.N, model.n, model.m
    u0 = dfe.full_state(model)
    tol = COOPERATIVITY_TOL
    checks: list[AssumptionCheck] = []
    notes: list[str] = []

    # (A3) structural zeros
    nonzero = [model.names[i] for i in range(m, n) if not ex.is_zero(model.F[i])]
    checks.append(AssumptionCheck(
        "A3", "F_i = 0 for uninfected compartments", not nonzero,
        where=", ".join(nonzero)))

    # sampled states: the DFE, plus seeded perturbations with small infected parts
    rng = np.random.default_rng(seed)
    scale = max(float(np.max(u0[m:])), 1.0)
    states = [u0]
    for _ in range(samples):
        u = u0.copy()
        u[m:] *= rng.uniform(0.5, 1.5, size=(n - m, N))
        u[:m] = rng.uniform(0.0, 0.5 * scale, size=(m, N))
        states.append(u)

    def rates(u):
        env = model.env(x, u)
        return (
            _eval_vector(model.F, env, x.shape, "F"),
            _eval_vector(model.Vplus, env, x.shape, "Vplus"),
            _eval_vector(model.Vminus, env, x.shape, "Vminus"),
        )

    # (A1) nonnegativity of the rates on the sampled region
    worst, where = 0.0, ""
    try:
        for u in states:
            for label, r in zip(("F", "Vplus", "Vminus"), rates(u)):
                w, loc = _worst_negative(r.T, x, label)
                if w < worst:
                    worst, where = w, loc
        checks.append(AssumptionCheck("A1", "F, Vplus, Vminus >= 0 on sampled states", worst >= -tol, worst, where))
    except ex.EvaluationError as err:
        checks.append(AssumptionCheck("A1", "F, Vplus, Vminus >= 0 on sampled states", False, float("nan"), str(err)))

    # (A2) V_i^- vanishes when u_i = 0
    # states outside the rates' domain (e.g. zero total for power-law terms) are skipped
    worst, where, tried, skipped = 0.0, "", 0, ""
    for u in states:
        for i in range(n):
            us = u.copy()
            us[i] = 0.0
            try:
                val = np.abs(np.broadcast_to(ex.evaluate_env(model.Vminus[i], model.env(x, us)), x.shape))
            except ex.EvaluationError as err:
                skipped = str(err)
                continue
            tried += 1
            k = int(np.argmax(val))
            if val[k] > abs(worst):
                worst, where = float(val[k]), f"node {k} (x={x[k]:.6g}), Vminus[{i + 1}]"
    if tried == 0:
        checks.append(AssumptionCheck("A2", "Vminus_i = 0 when u_i = 0 (sampled)", False, float("nan"), skipped))
    else:
        checks.append(AssumptionCheck("A2", "Vminus_i = 0 when u_i = 0 (sampled)", worst <= tol, worst, where))
        if skipped:
            notes.append(f"A2: some sampled states lie outside the rates' domain and were skipped ({skipped})")

    # (A4) no infection input at disease-free states
    worst, where = 0.0, ""
    try:
        for u in states:
            udf = u.copy()
            udf[:m] = 0.0
            F, Vp, _ = rates(udf)
            val = np.abs(np.concatenate([F[:m], Vp[:m]]))
            idx = np.unravel_index(np.argmax(val), val.shape)
            if val[idx] > worst:
                label = "F" if idx[0] < m else "Vplus"
                worst, where = float(val[idx]), f"node {idx[1]} (x={x[idx[1]]:.6g}), {label}[{idx[0] % m + 1}]"
        checks.append(AssumptionCheck("A4", "F_i = Vplus_i = 0 for infected i at disease-free states", worst <= tol, worst, where))
    except ex.EvaluationError as err:
        checks.append(AssumptionCheck("A4", "F_i = Vplus_i = 0 for infected i at disease-free states", False, float("nan"), str(err)))

    try:
        F, V, M = jacobian_fields(model, x, u0)
    except ex.EvaluationError as err:
        checks.append(AssumptionCheck("jacobian", "Jacobian blocks evaluable at the DFE", False, float("nan"), str(err), gating=True))
        return AssumptionReport(checks, notes)

    off_m = ~np.eye(m, dtype=bool)
    off_k = ~np.eye(n - m, dtype=bool)

    w, loc = _worst_negative(-V, x, "-V", np.broadcast_to(off_m, V.shape))
    checks.append(AssumptionCheck("A6-coop", "-V(x,u0) cooperative", w >= -tol, w, loc, gating=True))

    w, loc = _worst_negative(M, x, "M", np.broadcast_to(off_k, M.shape))
    checks.append(AssumptionCheck("A5-coop", "M(x,u0) cooperative", w >= -tol, w, loc))

    w, loc = _worst_negative(F, x, "F")
    checks.append(AssumptionCheck("F-pos", "F(x,u0) >= 0", w >= -tol, w, loc))

    pattern = (np.where(off_m, -V, 0.0) > tol) | (F > tol)
    bad = [k for k in range(N) if not is_irreducible(pattern[k])]
    checks.append(AssumptionCheck(
        "irreducible", "pattern of -V + aF strongly connected at every node", not bad,
        float(len(bad)), f"node {bad[0]} (x={x[bad[0]]:.6g}) and {len(bad) - 1} more" if bad else ""))

    s_local = np.max(np.linalg.eigvals(-V).real, axis=-1)
    k = int(np.argmax(s_local))
    checks.append(AssumptionCheck(
        "A6-bound", "s(-V(x,u0)) < 0 at every node", bool(s_local[k] < 0), float(s_local[k]),
        f"node {k} (x={x[k]:.6g})", gating=True))

    if model.conserved_total is not None:
        notes.append("conserved total population: uninfected subsystem has a zero spectral bound, DFE fixed by mass")
    if any("^" in ex.to_string(e) for e in model.f):
        notes.append("power-law terms are evaluated only where their base is positive (e.g. total population N > 0)")
    return AssumptionReport(checks, notes)
