import numpy as np
import pytest

from spatial_r0.grid import Grid
from spatial_r0.limits import averaged_limit, local_R0_profile
from spatial_r0.model import jacobian_fields
from spatial_r0.models import BUILTINS, builtin, make_sis, make_staged, make_vector_host, make_zika

G = Grid(0, 1, 1025)


def test_sis_oracles():
    assert (make_sis().small_oracle(G), make_sis().large_oracle(G)) == pytest.approx((3.0, 2.0), abs=1e-6)
    bm = make_sis(beta="1 + x", gamma="1 + x")
    assert bm.small_oracle(G) == pytest.approx(1.0) and bm.large_oracle(G) == pytest.approx(1.0)
    bm = make_sis(beta=2, gamma=1)
    assert bm.small_oracle(G) == 2.0 and bm.large_oracle(G) == 2.0


def test_sis_mass_scaling():
    bm = make_sis(Ntotal=3.0, domain=(0.0, 2.0))
    g = Grid(0, 2, 1025)
    # S = 3/2 on an interval of length 2
    assert bm.small_oracle(g) == pytest.approx(1.5 * 3.0)
    assert local_R0_profile(bm.model, g).max == pytest.approx(4.5)


def test_zika_oracles():
    bm = make_zika()
    assert bm.small_oracle(G) == 2.0 and bm.large_oracle(G) == 2.0
    bm = make_zika(Hu="1 + x")
    assert bm.small_oracle(G) == pytest.approx(2.0) and bm.large_oracle(G) == pytest.approx(1.5, abs=1e-12)
    assert local_R0_profile(bm.model, G).x_max == 1.0


def test_zika_rejects_zero_coefficient():
    with pytest.raises(ValueError):
        make_zika(sigma1=0)
    with pytest.raises(ValueError):
        make_zika(sigma1="x")  # vanishes at x = 0


def test_vector_host_oracles():
    bm = make_vector_host()
    assert bm.small_oracle(G) == pytest.approx(1 / np.sqrt(2), abs=1e-15)
    assert bm.large_oracle(G) == pytest.approx(1 / np.sqrt(2), abs=1e-15)
    assert make_vector_host(lambda1=2).small_oracle(G) == pytest.approx(1.0, abs=1e-15)


def test_staged_oracles():
    bm = make_staged(m=2)
    assert bm.small_oracle(G) == pytest.approx(0.75) and bm.large_oracle(G) == pytest.approx(0.75)
    bm1 = make_staged(m=1, beta=3, nu=0.5, gamma=1.5, lam=2, b=1, alpha=0.5)
    assert bm1.small_oracle(G) == pytest.approx(3 / 2.0 * 2 * 2**-0.5)
    for alpha in (0.0, 0.4, 1.0):
        assert make_staged(m=3, alpha=alpha, lam=1.5, b=1.5).small_oracle(G) == pytest.approx(
            make_staged(m=3, alpha=0.0, lam=1.5, b=1.5).small_oracle(G))


def test_staged_validation():
    with pytest.raises(ValueError):
        make_staged(m=0)
    with pytest.raises(ValueError):
        make_staged(alpha=1.5)
    with pytest.raises(ValueError):
        make_staged(m=3, nu=[1, 2])


def test_staged_F_has_single_row():
    bm = make_staged(m=3, beta=[1, 2, 3], alpha=0.7, lam="1 + x")
    x = G.nodes
    u = np.zeros((4, G.N))
    u[3] = 1 + x
    F, V = jacobian_fields(bm.model, x, u, which="FV")
    assert np.all(F[:, 1:, :] == 0)
    s = 1 + x
    np.testing.assert_allclose(F[:, 0, :], np.outer(s * s**-0.7, [1, 2, 3]), rtol=1e-14)
    np.testing.assert_allclose(V[:, 1, 0], -1.0)
    np.testing.assert_allclose(V[:, 0, 0], 2.0)


@pytest.mark.parametrize("m", [1, 2, 3, 4, 5])
def test_staged_inverse_matches_closed_form(m):
    rng = np.random.default_rng(m)
    nu = [f"{rng.uniform(0.5, 2):.3f} + {rng.uniform(0, 0.4):.3f}*x" for _ in range(m)]
    gamma = [f"{rng.uniform(0.5, 2):.3f} + {rng.uniform(0, 0.4):.3f}*cos(pi*x)" for _ in range(m)]
    bm = make_staged(m=m, nu=nu, gamma=gamma)
    avg = averaged_limit(bm.model, G)
    Vinv = np.linalg.inv(avg.Vcheck)
    v = bm.coefficient_values(G)
    from spatial_r0.grid import integrate
    Inu = [integrate(G, v[f"nu{k + 1}"]) for k in range(m)]
    Isum = [integrate(G, v[f"nu{k + 1}"] + v[f"gamma{k + 1}"]) for k in range(m)]
    want = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1):
            want[i, j] = np.prod(Inu[j:i]) / np.prod(Isum[j:i + 1])
    np.testing.assert_allclose(Vinv, want, rtol=0, atol=1e-12)


def _random_overrides(name, rng):
    def coef():
        return f"{rng.uniform(0.5, 2):.6f} + {rng.uniform(0, 0.45):.6f}*cos({rng.uniform(0.5, 3):.4f}*pi*x)"

    if name == "sis":
        return {"beta": coef(), "gamma": coef(), "Ntotal": float(rng.uniform(0.5, 2))}
    if name == "staged":
        m = int(rng.integers(1, 5))
        return {"m": m, "beta": [coef() for _ in range(m)], "nu": [coef() for _ in range(m)],
                "gamma": [coef() for _ in range(m)], "lam": coef(), "b": coef(), "alpha": float(rng.uniform(0, 1))}
    return {k: coef() for k, v in BUILTINS[name].defaults.items()}


@pytest.mark.parametrize("name", list(BUILTINS))
@pytest.mark.parametrize("seed", range(5))
def test_oracle_identity(name, seed):
    rng = np.random.default_rng(1000 + seed)
    bm = builtin(name, _random_overrides(name, rng))
    g = Grid(0, 1, 513)
    assert local_R0_profile(bm.model, g).max == pytest.approx(bm.small_oracle(g), abs=1e-10)
    assert averaged_limit(bm.model, g).value == pytest.approx(bm.large_oracle(g), abs=1e-10)


def test_registry():
    with pytest.raises(KeyError):
        builtin("nope")
    with pytest.raises(KeyError):
        builtin("sis", {"delta": 1})
    assert builtin("vector-host").name == "vector_host"
    assert builtin("staged", {"m": 4}).model.m == 4
