import numpy as np
import pytest

from spatial_r0.dfe import solve_dfe
from spatial_r0.grid import Grid, laplacian
from spatial_r0.model import CompartmentModel
from spatial_r0.models import builtin
from spatial_r0.r0 import (
    CooperativityError,
    PreconditionError,
    assemble,
    build_block_operator,
    compute_R0,
    dense_next_generation_matrix,
    sign_check,
)


def _setup(name, overrides, d, N):
    model = builtin(name, overrides).model.with_diffusion(d)
    g = Grid(*model.domain, N)
    return model, g, solve_dfe(model, g)


def test_sis_assembly():
    model, g, dfe = _setup("sis", {"beta": "2 + cos(pi*x)", "gamma": "1 + x", "Ntotal": 2.0}, 0.1, 17)
    op = assemble(model, g, dfe)
    x = g.nodes
    want = 0.1 * laplacian(g).toarray() - np.diag(1 + x)
    np.testing.assert_allclose(op.matrix.toarray(), want, atol=1e-12)
    np.testing.assert_allclose(op.Fmat.diagonal(), (2 + np.cos(np.pi * x)) * 2.0, atol=1e-14)


def test_zika_coupling_block():
    model, g, dfe = _setup("zika", {"sigma1": "1 + x", "Hu": 2}, 1.0, 9)
    op = assemble(model, g, dfe)
    B = op.matrix.toarray()
    N = g.N
    np.testing.assert_allclose(np.diag(B[:N, N:]), 2 * (1 + g.nodes), atol=1e-14)
    np.testing.assert_allclose(B[N:, :N], 0.0)
    F = op.Fmat.toarray()
    np.testing.assert_allclose(np.diag(F[N:, :N]), 1.0)


def test_decoupled_test_operator():
    g = Grid(0, 1, 11)
    op = build_block_operator(g, (0.5,), np.ones((11, 1, 1)), np.zeros((11, 1, 1)))
    np.testing.assert_allclose(op.matrix.toarray(), laplacian(g, 0.5).toarray() - np.eye(11))
    assert op.Fmat.nnz == 0


def test_assembly_refuses_non_cooperative():
    g = Grid(0, 1, 5)
    V = np.tile(np.array([[1.0, 0.3], [0.0, 1.0]]), (5, 1, 1))  # -V has a negative off-diagonal
    with pytest.raises(CooperativityError) as info:
        build_block_operator(g, (1, 1), V, np.zeros_like(V))
    assert info.value.entry == (0, 1)
    F = np.zeros_like(V)
    F[3, 1, 0] = -0.1
    with pytest.raises(CooperativityError) as info:
        build_block_operator(g, (1, 1), np.tile(np.eye(2), (5, 1, 1)), F)
    assert info.value.node == 3


@pytest.mark.parametrize("d", [1e-3, 1.0, 1e3])
def test_sis_constant_R0(d):
    model, g, dfe = _setup("sis", {"beta": 2, "gamma": 1}, d, 129)
    res = compute_R0(model, g, dfe, tol=1e-12)
    assert res.value == pytest.approx(2.0, abs=1e-10)
    assert res.vector.min() >= 0 and res.vector.max() == 1.0


def test_sis_large_diffusion():
    model, g, dfe = _setup("sis", {}, 1e3, 2049)
    assert compute_R0(model, g, dfe).value == pytest.approx(2.0, abs=1e-2)


def test_unstable_B_refused():
    model = CompartmentModel(("I", "S"), 1, ("S*I", "0"), ("0", "1"), ("0*I", "S"), (1, 1), dfe_small=("1",))
    g = Grid(0, 1, 17)
    with pytest.raises(PreconditionError):
        compute_R0(model, g, solve_dfe(model, g))


@pytest.mark.parametrize("seed", range(3))
def test_dense_oracle_zika(seed):
    rng = np.random.default_rng(seed)
    p = {k: f"{rng.uniform(0.5, 2):.4f} + {rng.uniform(0, 0.4):.4f}*cos(pi*x)" for k in ("lam", "sigma1", "Hu", "sigma2", "mu", "beta")}
    model, g, dfe = _setup("zika", p, float(rng.uniform(0.01, 1)), 32)
    op = assemble(model, g, dfe)
    K = dense_next_generation_matrix(op)
    want = np.max(np.abs(np.linalg.eigvals(K)))
    got = compute_R0(model, g, dfe, tol=1e-12, op=op).value
    assert got == pytest.approx(want, rel=1e-8)


def test_dense_path_limited():
    model, g, dfe = _setup("sis", {}, 1.0, 65)
    with pytest.raises(ValueError):
        dense_next_generation_matrix(assemble(model, g, dfe))


@pytest.mark.parametrize("beta, R0, s", [(2, 2.0, 1.0), (0.5, 0.5, -0.5)])
def test_sign_check_constants(beta, R0, s):
    model, g, dfe = _setup("sis", {"beta": beta, "gamma": 1}, 1.0, 65)
    rep = sign_check(model, g, dfe, tol=1e-12)
    assert rep.R0 == pytest.approx(R0, abs=1e-10)
    assert rep.s_BF == pytest.approx(s, abs=1e-10)
    assert rep.agree and not rep.indeterminate and rep.status == "agree"


def test_sign_check_sweep():
    for d in (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e2, 1e3):
        model, g, dfe = _setup("sis", {"beta": "2 + cos(pi*x)", "gamma": 2}, d, 257)
        rep = sign_check(model, g, dfe)
        assert rep.agree and not rep.indeterminate, (d, rep)


def test_near_threshold_flag():
    model, g, dfe = _setup("sis", {"beta": 1, "gamma": 1}, 1.0, 33)
    rep = sign_check(model, g, dfe, tol=1e-13)
    assert rep.indeterminate and rep.status.startswith("near-threshold")


def test_second_order_grid_convergence():
    vals = []
    for N in (65, 129, 257, 513):
        model, g, dfe = _setup("sis", {}, 0.05, N)
        vals.append(compute_R0(model, g, dfe, tol=1e-13).value)
    diffs = np.abs(np.diff(vals))
    ratios = diffs[:-1] / diffs[1:]
    assert np.all(ratios > 3.0) and np.all(ratios < 5.0), ratios


def test_stiff_operator_accuracy():
    # constant vector-host: exact R0 = 1/sqrt(2), s(B+F) = (sqrt(5) - 3)/2 at any d
    model, g, dfe = _setup("vector_host", {}, 1e4, 2049)
    rep = sign_check(model, g, dfe)
    assert rep.R0 == pytest.approx(1 / np.sqrt(2), abs=1e-10)
    assert rep.s_BF == pytest.approx((np.sqrt(5) - 3) / 2, abs=1e-10)
