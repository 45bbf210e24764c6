"""Built-in epidemic models with closed-form limits of R0.

Each constructor takes coefficient expressions in ``x`` (strings, numbers or
parsed expressions) and returns a :class:`BuiltinModel`. The oracles are
evaluated directly from the coefficients on a grid, independently of the
Jacobian / next-generation machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import expr as ex
from .expr import Expression
from .grid import Grid, integrate
from .model import CompartmentModel, LargeLimit

__all__ = [
    "BuiltinModel",
    "make_sis",
    "make_zika",
    "make_vector_host",
    "make_staged",
    "BUILTINS",
    "builtin",
]

Coef = Union[Expression, float, int, str]

POSITIVITY_SAMPLES = 257


@dataclass(frozen=True)
class BuiltinModel:
    """A model plus its closed-form small/large-diffusion limits.

    ``local`` maps nodal coefficient values to the local reproduction number
    at each node; ``small_oracle`` is its maximum over the grid and
    ``large_oracle`` the averaged formula built from trapezoid integrals.
    """

    model: CompartmentModel
    coefficients: Mapping[str, Expression]
    local: Callable[[Mapping[str, np.ndarray]], np.ndarray]
    averaged: Callable[[Mapping[str, np.ndarray], Callable[[np.ndarray], float]], float]

    @property
    def name(self) -> str:
        return self.model.name

    def coefficient_values(self, grid: Grid) -> dict[str, np.ndarray]:
        x = grid.nodes
        return {k: np.broadcast_to(ex.evaluate_env(e, {"x": x}), x.shape).astype(float)
                for k, e in self.coefficients.items()}

    def local_profile(self, grid: Grid) -> np.ndarray:
        return np.asarray(self.local(self.coefficient_values(grid)), dtype=float)

    def small_oracle(self, grid: Grid) -> float:
        return float(np.max(self.local_profile(grid)))

    def large_oracle(self, grid: Grid) -> float:
        return float(self.averaged(self.coefficient_values(grid), lambda f: integrate(grid, f)))

    def with_diffusion(self, d) -> "BuiltinModel":
        return BuiltinModel(self.model.with_diffusion(d), self.coefficients, self.local, self.averaged)


def _coefs(domain, **kwargs: Coef) -> dict[str, Expression]:
    a, b = domain
    xs = np.linspace(a, b, POSITIVITY_SAMPLES)
    out = {}
    for key, value in kwargs.items():
        e = ex.as_expression(value, ["x"])
        bad = ex.variables(e) - {"x"}
        if bad:
            raise ValueError(f"coefficient {key} may depend only on x, found {sorted(bad)}")
        try:
            vals = np.broadcast_to(ex.evaluate_env(e, {"x": xs}), xs.shape)
        except ex.EvaluationError as err:
            raise ValueError(f"coefficient {key} cannot be evaluated on {list(domain)}: {err}") from None
        if not np.all(vals > 0):
            k = int(np.argmin(vals))
            raise ValueError(f"coefficient {key} must be strictly positive; {key}({xs[k]:.6g}) = {vals[k]:.6g}")
        out[key] = e
    return out


def _build(template: Mapping[str, Sequence[str]], names, m, coefs, **kw) -> CompartmentModel:
    """Parse rate templates written in compartment and coefficient names,
    then inline the coefficient expressions."""
    vocab = ["x", *names, *coefs]
    rates = {}
    for key in ("F", "Vplus", "Vminus"):
        rates[key] = tuple(ex.substitute(ex.parse_expression(t, vocab), coefs) for t in template[key])
    diffusion = kw.pop("diffusion", None)
    if diffusion is None:
        diffusion = (1.0,) * len(names)
    elif np.isscalar(diffusion):
        diffusion = (float(diffusion),) * len(names)
    return CompartmentModel(names=tuple(names), m=m, diffusion=tuple(diffusion), **rates, **kw)


def _ratio(coefs, num: str, den: str) -> LargeLimit:
    return LargeLimit(coefs[num], coefs[den])


def make_sis(beta: Coef = "2 + cos(pi*x)", gamma: Coef = 1, Ntotal: float = 1.0,
             domain=(0.0, 1.0), diffusion=None) -> BuiltinModel:
    """SIS model with mass-action incidence; state (I, S).

    The total population ``Ntotal`` is conserved, so the disease-free state
    is the constant ``S = Ntotal/|Ω|`` and both limits scale by it.
    """
    if not Ntotal > 0:
        raise ValueError("Ntotal must be positive")
    c = _coefs(domain, beta=beta, gamma=gamma)
    S_hat = float(Ntotal) / (domain[1] - domain[0])
    model = _build(
        {"F": ["beta*S*I", "0"], "Vplus": ["0", "gamma*I"], "Vminus": ["gamma*I", "beta*S*I"]},
        ["I", "S"], 1, c, name="sis", domain=tuple(domain), diffusion=diffusion,
        params={"beta": ex.to_string(c["beta"]), "gamma": ex.to_string(c["gamma"]), "Ntotal": float(Ntotal)},
        conserved_total=float(Ntotal), dfe_small=(ex.const(S_hat),), dfe_large=(LargeLimit(ex.const(S_hat)),))
    return BuiltinModel(
        model, c,
        local=lambda v: S_hat * v["beta"] / v["gamma"],
        averaged=lambda v, I: S_hat * I(v["beta"]) / I(v["gamma"]))


def make_zika(lam: Coef = 1, sigma1: Coef = 1, Hu: Coef = 2, sigma2: Coef = 1, mu: Coef = 1, beta: Coef = 1,
              domain=(0.0, 1.0), diffusion=None) -> BuiltinModel:
    """Host-vector model with state (H_i, V_i, V_u); hosts H_u(x) are fixed."""
    c = _coefs(domain, lam=lam, sigma1=sigma1, Hu=Hu, sigma2=sigma2, mu=mu, beta=beta)
    model = _build(
        {
            "F": ["0", "sigma2*Vu*Hi", "0"],
            "Vplus": ["sigma1*Hu*Vi", "0", "beta*(Vu + Vi)"],
            "Vminus": ["lam*Hi", "mu*(Vu + Vi)*Vi", "sigma2*Vu*Hi + mu*(Vu + Vi)*Vu"],
        },
        ["Hi", "Vi", "Vu"], 2, c, name="zika", domain=tuple(domain), diffusion=diffusion,
        params={k: ex.to_string(e) for k, e in c.items()},
        dfe_small=(ex.div(c["beta"], c["mu"]),), dfe_large=(_ratio(c, "beta", "mu"),))
    return BuiltinModel(
        model, c,
        local=lambda v: v["sigma1"] * v["sigma2"] * v["Hu"] / (v["lam"] * v["mu"]),
        averaged=lambda v, I: I(v["sigma1"] * v["Hu"]) * I(v["sigma2"]) / (I(v["lam"]) * I(v["mu"])))


def make_vector_host(lambda1: Coef = 1, lambda2: Coef = 1, beta_s: Coef = 1, beta_m: Coef = 1,
                     b: Coef = 1, gamma: Coef = 1, c: Coef = 1,
                     domain=(0.0, 1.0), diffusion=None) -> BuiltinModel:
    """Vector-host model with state (I, V, S, M)."""
    k = _coefs(domain, lambda1=lambda1, lambda2=lambda2, beta_s=beta_s, beta_m=beta_m, b=b, gamma=gamma, c=c)
    model = _build(
        {
            "F": ["beta_s*S*V", "beta_m*M*I", "0", "0"],
            "Vplus": ["0", "0", "lambda1 + gamma*I", "lambda2"],
            "Vminus": ["(b + gamma)*I", "c*V", "b*S + beta_s*S*V", "c*M + beta_m*M*I"],
        },
        ["I", "V", "S", "M"], 2, k, name="vector_host", domain=tuple(domain), diffusion=diffusion,
        params={key: ex.to_string(e) for key, e in k.items()},
        dfe_small=(ex.div(k["lambda1"], k["b"]), ex.div(k["lambda2"], k["c"])),
        dfe_large=(_ratio(k, "lambda1", "b"), _ratio(k, "lambda2", "c")))

    def local(v):
        return np.sqrt(v["lambda1"] * v["lambda2"] * v["beta_s"] * v["beta_m"]
                       / (v["b"] * v["c"] ** 2 * (v["b"] + v["gamma"])))

    def averaged(v, I):
        return np.sqrt(I(v["lambda1"]) * I(v["lambda2"]) * I(v["beta_s"]) * I(v["beta_m"])
                       / (I(v["b"]) * I(v["c"]) ** 2 * I(v["b"] + v["gamma"])))

    return BuiltinModel(model, k, local, averaged)


def make_staged(m: int = 2, beta: Union[Coef, Sequence[Coef]] = 1, nu: Union[Coef, Sequence[Coef]] = 1,
                gamma: Union[Coef, Sequence[Coef]] = 1, lam: Coef = 1, b: Coef = 1, alpha: float = 0.0,
                domain=(0.0, 1.0), diffusion=None) -> BuiltinModel:
    """Staged-progression model with state (I_1, ..., I_m, S).

    Incidence ``h(N) S Σ β_k I_k`` with ``h(N) = N^(-alpha)`` and
    ``N = S + Σ I_k``; stage i moves on at rate ``nu_i`` and is removed at
    rate ``gamma_i``.
    """
    m = int(m)
    if m < 1:
        raise ValueError("need at least one infected stage")
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")

    def per_stage(v, label):
        if isinstance(v, (list, tuple)):
            if len(v) != m:
                raise ValueError(f"{label} needs {m} entries")
            return list(v)
        return [v] * m

    raw = {"lam": lam, "b": b}
    for label, vals in (("beta", beta), ("nu", nu), ("gamma", gamma)):
        for i, v in enumerate(per_stage(vals, label)):
            raw[f"{label}{i + 1}"] = v
    k = _coefs(domain, **raw)
    names = [f"I{i + 1}" for i in range(m)] + ["S"]
    incidence = " + ".join(f"beta{j + 1}*I{j + 1}" for j in range(m))
    total = " + ".join(["S"] + [f"I{j + 1}" for j in range(m)])
    h = "1" if alpha == 0.0 else f"({total})^(-{alpha!r})"
    inc = f"{h}*S*({incidence})"
    F = [inc] + ["0"] * m
    Vplus = ["0"] + [f"nu{i}*I{i}" for i in range(1, m)] + ["lam"]
    Vminus = [f"(nu{i + 1} + gamma{i + 1})*I{i + 1}" for i in range(m)] + [f"b*S + {inc}"]
    params = {key: ex.to_string(e) for key, e in k.items()}
    params.update(m=m, alpha=alpha)
    model = _build({"F": F, "Vplus": Vplus, "Vminus": Vminus}, names, m, k, name="staged",
                   domain=tuple(domain), diffusion=diffusion, params=params,
                   dfe_small=(ex.div(k["lam"], k["b"]),), dfe_large=(_ratio(k, "lam", "b"),))

    def h_of(s):
        return s ** (-alpha)

    def local(v):
        total = 0.0
        chain = 1.0
        for j in range(1, m + 1):
            chain = chain / (v[f"nu{j}"] + v[f"gamma{j}"])
            total = total + v[f"beta{j}"] * chain
            chain = chain * v[f"nu{j}"]
        s = v["lam"] / v["b"]
        return total * s * h_of(s)

    def averaged(v, I):
        total = 0.0
        chain = 1.0
        for j in range(1, m + 1):
            chain /= I(v[f"nu{j}"] + v[f"gamma{j}"])
            total += I(v[f"beta{j}"]) * chain
            chain *= I(v[f"nu{j}"])
        s = I(v["lam"]) / I(v["b"])
        return total * s * h_of(s)

    return BuiltinModel(model, k, local, averaged)


@dataclass(frozen=True)
class _Entry:
    factory: Callable[..., BuiltinModel]
    defaults: Mapping[str, object]
    description: str


BUILTINS: dict[str, _Entry] = {
    "sis": _Entry(make_sis, {"beta": "2 + cos(pi*x)", "gamma": 1, "Ntotal": 1.0},
                  "SIS with beta = 2 + cos(pi x), gamma = 1 on [0, 1]"),
    "zika": _Entry(make_zika, {"lam": 1, "sigma1": 1, "Hu": 2, "sigma2": 1, "mu": 1, "beta": 1},
                   "host-vector model, constant coefficients with H_u = 2"),
    "vector_host": _Entry(make_vector_host, {"lambda1": 1, "lambda2": 1, "beta_s": 1, "beta_m": 1,
                                             "b": 1, "gamma": 1, "c": 1},
                          "vector-host model, all coefficients 1"),
    "staged": _Entry(make_staged, {"m": 2, "beta": 1, "nu": 1, "gamma": 1, "lam": 1, "b": 1, "alpha": 0.0},
                     "staged progression, m = 2, all rates 1"),
}


def builtin(name: str, overrides: Optional[Mapping[str, object]] = None, **kwargs) -> BuiltinModel:
    """Construct a registered built-in with its defaults, updated by ``overrides``."""
    key = name.replace("-", "_")
    if key not in BUILTINS:
        raise KeyError(f"unknown built-in model {name!r}; choose from {', '.join(BUILTINS)}")
    entry = BUILTINS[key]
    args = dict(entry.defaults)
    for k, v in dict(overrides or {}).items():
        if k not in args and k not in ("domain", "diffusion"):
            raise KeyError(f"model {key!r} has no parameter {k!r}; known: {', '.join(args)}")
        args[k] = v
    args.update(kwargs)
    return entry.factory(**args)
