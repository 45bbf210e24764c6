import numpy as np
import pytest

from spatial_r0 import expr as ex
from spatial_r0.dfe import solve_dfe
from spatial_r0.grid import Grid
from spatial_r0.model import CompartmentModel, check_assumptions, jacobian_fields, jacobians_at
from spatial_r0.models import builtin


def _two_stage(F1="0", F2="S*I1"):
    return CompartmentModel(
        names=("I1", "I2", "S"), m=2,
        F=(F1, F2, "0"), Vplus=("0", "0", "1"), Vminus=("I1", "I2", "S"),
        diffusion=(1.0, 1.0, 1.0), dfe_small=("1",))


def test_zika_jacobians():
    bm = builtin("zika", {"lam": "1 + x", "sigma1": 2, "Hu": "3 - x", "sigma2": 0.5, "mu": 1.5})
    x, u3 = 0.25, 0.8
    J = jacobians_at(bm.model, x, [0.0, 0.0, u3])
    lam, s1, Hu, s2, mu = 1 + x, 2.0, 3 - x, 0.5, 1.5
    np.testing.assert_allclose(J.V, [[lam, -s1 * Hu], [0.0, mu * u3]], atol=1e-15)
    np.testing.assert_allclose(J.F, [[0.0, 0.0], [s2 * u3, 0.0]], atol=1e-15)
    assert J.M.shape == (1, 1)


def test_vector_host_jacobians_at_dfe():
    bm = builtin("vector_host", {"lambda1": 2, "lambda2": 3, "beta_s": 1.5, "beta_m": 0.7, "b": 1, "gamma": 0.5, "c": 2})
    S, M = 2.0, 1.5
    J = jacobians_at(bm.model, 0.3, [0.0, 0.0, S, M])
    np.testing.assert_allclose(J.F, [[0.0, 1.5 * S], [0.7 * M, 0.0]], atol=1e-15)
    np.testing.assert_allclose(J.V, np.diag([1.5, 2.0]), atol=1e-15)


def test_zero_F_model():
    model = CompartmentModel(("I", "S"), 1, ("0", "0"), ("0", "1"), ("I", "S"), (1.0, 1.0))
    J = jacobians_at(model, 0.0, [0.0, 1.0])
    np.testing.assert_array_equal(J.F, [[0.0]])
    np.testing.assert_array_equal(J.V, [[1.0]])


def test_jacobian_domain_error_names_entry():
    model = CompartmentModel(("I", "S"), 1, ("S*I/(S - 1)", "0"), ("0", "1"), ("I", "S"), (1.0, 1.0))
    with pytest.raises(ex.EvaluationError) as info:
        jacobians_at(model, 0.0, [0.0, 1.0])
    assert "F[1,1]" in str(info.value)


@pytest.mark.parametrize("name, overrides", [
    ("sis", {}),
    ("zika", {"Hu": "1 + x"}),
    ("vector_host", {"lambda1": "2 + sin(x)"}),
    ("staged", {"m": 3, "alpha": 0.5}),
])
def test_jacobians_match_finite_differences(name, overrides, rng):
    model = builtin(name, overrides).model
    m, n = model.m, model.n
    h = 1e-6
    for _ in range(5):
        x = rng.uniform()
        u = rng.uniform(0.2, 2.0, n)
        J = jacobians_at(model, x, u)

        def rates(v):
            env = model.env(x, list(v))
            F = np.array([float(ex.evaluate_env(e, env)) for e in model.F])
            V = np.array([float(ex.evaluate_env(e, env)) for e in model.V])
            f = np.array([float(ex.evaluate_env(e, env)) for e in model.f])
            return F, V, f

        for j in range(n):
            up, dn = u.copy(), u.copy()
            up[j] += h
            dn[j] -= h
            (Fu, Vu, fu), (Fd, Vd, fd) = rates(up), rates(dn)
            dF, dV, df = (Fu - Fd) / (2 * h), (Vu - Vd) / (2 * h), (fu - fd) / (2 * h)
            if j < m:
                np.testing.assert_allclose(J.F[:, j], dF[:m], rtol=1e-6, atol=1e-6)
                np.testing.assert_allclose(J.V[:, j], dV[:m], rtol=1e-6, atol=1e-6)
            else:
                np.testing.assert_allclose(J.M[:, j - m], df[m:], rtol=1e-6, atol=1e-6)


def test_fields_match_pointwise():
    model = builtin("zika", {"beta": "1 + 0.5*cos(pi*x)"}).model
    x = np.linspace(0, 1, 7)
    u = np.vstack([np.zeros((2, 7)), 1 + x])
    F, V, M = jacobian_fields(model, x, u)
    for k in range(7):
        J = jacobians_at(model, x[k], u[:, k])
        np.testing.assert_allclose(F[k], J.F)
        np.testing.assert_allclose(V[k], J.V)
        np.testing.assert_allclose(M[k], J.M)


def test_model_validation():
    with pytest.raises(ValueError):
        CompartmentModel(("I", "S"), 2, ("0", "0"), ("0", "0"), ("0", "0"), (1, 1))
    with pytest.raises(ValueError):
        CompartmentModel(("I", "S"), 1, ("0", "0"), ("0", "0"), ("0", "0"), (1, -1))
    with pytest.raises(ValueError):
        CompartmentModel(("I", "I"), 1, ("0", "0"), ("0", "0"), ("0", "0"), (1, 1))
    with pytest.raises(ValueError):
        CompartmentModel(("I", "S"), 1, ("q", "0"), ("0", "0"), ("0", "0"), (1, 1))


def test_u_aliases():
    model = CompartmentModel(("I", "S"), 1, ("u2*u1", "0"), ("0", "1"), ("u1", "S"), (1, 1))
    assert ex.to_string(model.F[0]) == "S*I"


# ------------------------------------------------------------- assumptions


def _report(model, N=33):
    g = Grid(*model.domain, N)
    return check_assumptions(model, solve_dfe(model, g))


def test_staged_irreducible_everywhere():
    rep = _report(builtin("staged", {"m": 3, "nu": [1, 2, 3], "lam": "1 + x"}).model)
    assert rep["irreducible"].passed
    assert rep.ok


def test_reducible_pattern_detected():
    rep = _report(_two_stage())
    assert not rep["irreducible"].passed
    assert "node 0" in rep["irreducible"].where
    assert rep.gating_ok


def test_sis_scalar_bound():
    bm = builtin("sis", {"gamma": "1 + x"})
    rep = _report(bm.model)
    assert rep.ok
    assert rep["A6-bound"].worst == pytest.approx(-1.0)
    assert rep["A6-coop"].passed


def test_structural_violations():
    # F nonzero in an uninfected compartment and an infection input at the DFE
    model = CompartmentModel(("I", "S"), 1, ("S*I + 0.1*S", "0.2*S"), ("0", "1"), ("I", "S"), (1, 1), dfe_small=("1",))
    rep = _report(model)
    assert not rep["A3"].passed and "S" in rep["A3"].where
    assert not rep["A4"].passed


def test_A2_violation():
    model = CompartmentModel(("I", "S"), 1, ("S*I", "0"), ("0", "1"), ("I + 0.5", "S"), (1, 1), dfe_small=("1",))
    assert not _report(model)["A2"].passed


@pytest.mark.parametrize("name, overrides", [
    ("sis", {}),
    ("zika", {}),
    ("zika", {"beta": "1 + 0.5*cos(pi*x)", "Hu": "1 + x"}),
    ("vector_host", {}),
    ("staged", {"m": 3}),
    ("staged", {"alpha": 1.0, "lam": "1 + x"}),
])
def test_builtins_pass(name, overrides):
    rep = _report(builtin(name, overrides).model)
    assert rep.ok, rep.failures()
