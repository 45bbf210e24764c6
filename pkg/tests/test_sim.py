import numpy as np
import pytest
import scipy.sparse as sp

from spatial_r0.dfe import solve_dfe
from spatial_r0.grid import Grid, integrate, laplacian
from spatial_r0.models import builtin
from spatial_r0.r0 import compute_R0
from spatial_r0.sim import (
    comparison_test,
    cooperative_operator,
    dfe_stability_test,
    evolve_linear,
    evolve_nonlinear,
)

G = Grid(0, 1, 65)


def test_heat_keeps_constants():
    traj = evolve_linear(laplacian(G), np.ones(G.N), T=1.0)
    np.testing.assert_allclose(traj.states, 1.0, atol=1e-12)
    assert np.all(np.diff(traj.times) > 0) and traj.steps == 1000


def test_scalar_decay():
    traj = evolve_linear(-sp.identity(G.N), np.ones(G.N), T=1.0, dt=1e-3)
    assert abs(traj.final[0] - np.exp(-1)) <= 1e-3
    # implicit Euler has the exact discrete value (1 + dt)^-n
    assert traj.final[0] == pytest.approx((1 + 1e-3) ** -1000, rel=1e-12)


def test_mass_conservation():
    u0 = np.exp(-30 * (G.nodes - 0.3) ** 2)
    traj = evolve_linear(laplacian(G, 0.5), u0, T=0.5, dt=1e-3, store_every=50)
    masses = [integrate(G, s) for s in traj.states]
    np.testing.assert_allclose(masses, masses[0], rtol=0, atol=1e-12)


def test_linear_validation():
    with pytest.raises(ValueError):
        evolve_linear(laplacian(G), np.ones(3), 1.0)
    with pytest.raises(ValueError):
        evolve_linear(laplacian(G), np.ones(G.N), 0.0)


def _random_pair(seed, m=2, N=G.N):
    rng = np.random.default_rng(seed)
    P2 = rng.uniform(0, 1, (N, m, m))
    P2[:, np.arange(m), np.arange(m)] = rng.uniform(-3, 0, (N, m))
    P1 = P2 + rng.uniform(0, 0.5, (N, m, m)) * (rng.uniform(size=(N, m, m)) < 0.5)
    phi0 = rng.uniform(0, 1, m * N)
    d = rng.uniform(0.01, 1, m)
    return P1, P2, phi0, d


def test_comparison_examples():
    m, N = 1, G.N
    phi0 = np.ones(N)
    rep = comparison_test(np.zeros((N, 1, 1)), -np.ones((N, 1, 1)), G, [1.0], phi0, T=1.0)
    assert rep.passed and rep.first_violation is None
    P = _random_pair(0)[1]
    rep = comparison_test(P, P, G, [0.1, 0.2], np.ones(2 * N), T=1.0)
    assert rep.passed and abs(rep.min_slack) <= 1e-15


@pytest.mark.parametrize("seed", range(10))
def test_comparison_random(seed):
    P1, P2, phi0, d = _random_pair(seed)
    rep = comparison_test(P1, P2, G, d, phi0, T=2.0, dt=0.01)
    assert rep.passed and rep.min_slack >= -1e-12


def test_comparison_detects_swapped_order():
    P1, P2, phi0, d = _random_pair(1)
    with pytest.raises(ValueError):
        comparison_test(P2, P1, G, d, phi0, T=1.0)
    bad = P2.copy()
    bad[3, 0, 1] = -1.0
    with pytest.raises(ValueError):
        comparison_test(P1, bad, G, d, phi0, T=1.0)
    with pytest.raises(ValueError):
        comparison_test(P1, P2, G, d, -phi0, T=1.0)


@pytest.mark.parametrize("seed", range(5))
def test_positivity_preserved(seed):
    _, P, phi0, d = _random_pair(seed)
    traj = evolve_linear(cooperative_operator(G, d, P), phi0, T=3.0, dt=0.03)
    assert traj.states.min() >= -1e-12


def test_sis_decay_below_threshold():
    model = builtin("sis", {"beta": 0.5, "gamma": 1}).model
    g = Grid(0, 1, 33)
    dfe = solve_dfe(model, g)
    assert compute_R0(model, g, dfe).value == pytest.approx(0.5, abs=1e-9)
    rep = dfe_stability_test(model, g, dfe, amplitude=1e-3, T=20.0)
    assert rep.passed and rep.tail_monotone
    assert rep.final_distance <= 0.5 * rep.initial_distance


def test_sis_growth_above_threshold():
    model = builtin("sis", {"beta": 2, "gamma": 1}).model
    g = Grid(0, 1, 33)
    rep = dfe_stability_test(model, g, solve_dfe(model, g), T=5.0, mode="growth")
    assert rep.passed and rep.infected_norms[-1] > 10 * rep.infected_norms[0]


def test_zero_perturbation_stays():
    model = builtin("sis", {"beta": 0.5}).model
    g = Grid(0, 1, 33)
    rep = dfe_stability_test(model, g, solve_dfe(model, g), amplitude=0.0, T=20.0)
    assert rep.passed and np.max(rep.distances) <= 1e-10


def test_perturbation_keeps_mass():
    model = builtin("sis", {"beta": 0.5}).model
    g = Grid(0, 1, 33)
    dfe = solve_dfe(model, g)
    u0 = dfe.full_state(model).copy()
    u0[0] += 1e-3
    u0[1] -= 1e-3
    traj = evolve_nonlinear(model, g, u0, T=2.0, dt=0.02)
    mass = [integrate(g, s.reshape(2, -1).sum(axis=0)) for s in traj.states]
    np.testing.assert_allclose(mass, 1.0, atol=1e-12)


def test_stability_mode_validation():
    model = builtin("sis").model
    g = Grid(0, 1, 9)
    with pytest.raises(ValueError):
        dfe_stability_test(model, g, solve_dfe(model, g), mode="sideways")
