import numpy as np
import pytest

from snopt_kit import vector_field as vf
from snopt_kit.adjoint import adjoint_gradient
from snopt_kit.curvature import (apply_weight_decay, assemble_quu, dense_sweep,
                                 lowrank_sweep)
from snopt_kit.kfac import KroneckerFactors
from snopt_kit.loss import TerminalCurvature
from snopt_kit.odesolve import SolverConfig
from snopt_kit.oracle import fd_flow_jacobian

TIGHT = SolverConfig(method="dopri5", rtol=1e-10, atol=1e-10)


def tiny_net(seed, dims=(2, 3, 2)):
    acts = ("tanh",) * (len(dims) - 2) + ("identity",)
    spec = vf.MlpSpec(dims=dims, activations=acts)
    return spec, vf.init_params(spec, seed)


def rel_fro(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestDenseSweep:
    def test_zero_terminal_data_gives_zero(self):
        spec, theta = tiny_net(0)
        curv = TerminalCurvature(grad=np.zeros(2), factors=[np.zeros(2)], mode="exact_rank")
        out = dense_sweep(spec, theta, np.array([0.3, 0.1]), curv, 0.0, 1.0, TIGHT)
        for block in (out.qx, out.qu, out.qxx, out.qxu, out.quu):
            assert np.allclose(block, 0.0)

    def test_scalar_linear_closed_form(self):
        # dx/dt = theta x, Phi = x^2, theta = 0: curvature 2 e^{2 theta} = 2
        spec = vf.MlpSpec(dims=(1, 1), activations=("identity",), bias=False)
        theta = np.zeros(1)
        x1 = np.array([1.0])
        curv = TerminalCurvature(grad=np.array([2.0]),
                                 factors=[np.array([np.sqrt(2.0)])], mode="exact_rank")
        out = dense_sweep(spec, theta, x1, curv, 0.0, 1.0, TIGHT)
        assert out.quu[0, 0] == pytest.approx(2.0, abs=1e-6)
        assert out.qu[0] == pytest.approx(2.0, abs=1e-8)

    def test_matches_fd_flow_jacobian_reference(self):
        spec, theta = tiny_net(3, dims=(2, 4, 2))
        x0 = np.array([0.4, -0.2])
        fld = lambda t, y: vf.eval(spec, theta, t, y)[0]
        from snopt_kit.odesolve import odesolve
        x1 = odesolve(x0, 0.0, 1.0, fld, TIGHT).terminal_state
        rng = np.random.default_rng(0)
        ys = [rng.normal(size=2) for _ in range(2)]
        curv = TerminalCurvature(grad=rng.normal(size=2), factors=ys, mode="exact_rank")
        out = dense_sweep(spec, theta, x1, curv, 0.0, 1.0, TIGHT)
        jac = fd_flow_jacobian(spec, theta, x0, 0.0, 1.0, TIGHT)
        phi_xx = curv.hessian()
        assert rel_fro(out.quu, jac.T @ phi_xx @ jac) < 1e-3

    def test_symmetry_and_transpose_invariants(self):
        spec, theta = tiny_net(5)
        rng = np.random.default_rng(1)
        curv = TerminalCurvature(grad=rng.normal(size=2),
                                 factors=[rng.normal(size=2)], mode="exact_rank")
        out = dense_sweep(spec, theta, np.array([0.2, 0.6]), curv, 0.0, 1.0, TIGHT)
        assert np.allclose(out.qxx, out.qxx.T)
        assert np.allclose(out.quu, out.quu.T)
        assert np.array_equal(out.qux, out.qxu.T)

    def test_agrees_with_adjoint_gradient(self):
        spec, theta = tiny_net(7)
        rng = np.random.default_rng(2)
        x1 = rng.uniform(-1, 1, size=2)
        grad_vec = rng.normal(size=2)
        curv = TerminalCurvature(grad=grad_vec, factors=[rng.normal(size=2)],
                                 mode="exact_rank")
        out = dense_sweep(spec, theta, x1, curv, 0.0, 1.0, TIGHT)
        g_adj, _, a0, _ = adjoint_gradient(spec, theta, x1, grad_vec, 0.0, 1.0, TIGHT)
        assert np.max(np.abs(out.qu - g_adj)) < 1e-8
        assert np.max(np.abs(out.qx - a0)) < 1e-8


class TestLowRankSweep:
    def test_zero_factors_stay_zero(self):
        spec, theta = tiny_net(0)
        curv = TerminalCurvature(grad=np.zeros(2),
                                 factors=[np.zeros(2), np.zeros(2)], mode="exact_rank")
        out = lowrank_sweep(spec, theta, np.array([0.1, 0.9]), curv, 0.0, 1.0, TIGHT)
        for q in out.qs:
            assert np.allclose(q, 0.0)
        for p in out.ps:
            assert np.allclose(p, 0.0)

    def test_adjoint_aliasing(self):
        # seeding the rank vector with the terminal adjoint makes q track the
        # adjoint trajectory and p accumulate the gradient path
        spec, theta = tiny_net(9)
        rng = np.random.default_rng(3)
        x1 = rng.uniform(-1, 1, size=2)
        a1 = rng.normal(size=2)
        curv = TerminalCurvature(grad=a1, factors=[a1], mode="exact_rank")
        out = lowrank_sweep(spec, theta, x1, curv, 0.0, 1.0, TIGHT)
        assert np.max(np.abs(out.qs[0][0] - out.qx[0])) < 1e-10
        assert np.max(np.abs(out.ps[0] - out.qu)) < 1e-10

    def test_reconstructions_match_dense(self):
        for seed in range(5):
            spec, theta = tiny_net(seed + 20, dims=(3, 4, 3))
            rng = np.random.default_rng(seed)
            x1 = rng.uniform(-1, 1, size=3)
            for rank in (1, 2, 3):
                ys = [rng.normal(size=3) for _ in range(rank)]
                curv = TerminalCurvature(grad=rng.normal(size=3), factors=ys,
                                         mode="exact_rank")
                dense = dense_sweep(spec, theta, x1, curv, 0.0, 1.0, TIGHT)
                low = lowrank_sweep(spec, theta, x1, curv, 0.0, 1.0, TIGHT)
                assert rel_fro(low.recon_qxx(), dense.qxx) < 1e-6
                assert rel_fro(low.recon_qxu(), dense.qxu) < 1e-6
                assert rel_fro(low.recon_quu(), dense.quu) < 1e-6

    def test_state_length(self):
        spec, theta = tiny_net(11)
        n = vf.num_params(spec)
        rng = np.random.default_rng(4)
        curv = TerminalCurvature(grad=rng.normal(size=2),
                                 factors=[rng.normal(size=2) for _ in range(2)],
                                 mode="exact_rank")
        out = lowrank_sweep(spec, theta, rng.normal(size=2), curv, 0.0, 1.0, TIGHT)
        flat = out.report.terminal_state
        assert flat.size == 2 * (2 + 2) + n * (1 + 2)

    def test_requires_a_factor(self):
        spec, theta = tiny_net(12)
        curv = TerminalCurvature(grad=np.zeros(2), factors=[], mode="exact_rank")
        with pytest.raises(ValueError):
            lowrank_sweep(spec, theta, np.zeros(2), curv, 0.0, 1.0, TIGHT)


class TestAssembleQuu:
    def test_zero(self):
        spec, theta = tiny_net(0)
        curv = TerminalCurvature(grad=np.zeros(2), factors=[np.zeros(2)], mode="exact_rank")
        out = lowrank_sweep(spec, theta, np.zeros(2), curv, 0.0, 1.0, TIGHT)
        assert np.allclose(assemble_quu(out), 0.0)

    def test_rank_one_outer_product(self):
        spec, theta = tiny_net(0)
        curv = TerminalCurvature(grad=np.zeros(2), factors=[np.zeros(2)], mode="exact_rank")
        out = lowrank_sweep(spec, theta, np.zeros(2), curv, 0.0, 1.0, TIGHT)
        e1 = np.zeros_like(out.ps[0])
        e1[0] = 1.0
        out.ps[0] = e1
        quu = assemble_quu(out)
        want = np.zeros_like(quu)
        want[0, 0] = 1.0
        assert np.array_equal(quu, want)

    def test_psd(self):
        spec, theta = tiny_net(13)
        rng = np.random.default_rng(5)
        curv = TerminalCurvature(grad=rng.normal(size=2),
                                 factors=[rng.normal(size=2) for _ in range(2)],
                                 mode="exact_rank")
        out = lowrank_sweep(spec, theta, rng.normal(size=2), curv, 0.0, 1.0, TIGHT)
        assert np.linalg.eigvalsh(assemble_quu(out)).min() >= -1e-10


class TestApplyWeightDecay:
    def test_zero_decay_is_identity(self):
        grad = np.array([1.0, 2.0])
        quu = np.eye(2)
        g2, q2 = apply_weight_decay(grad, quu, 0.0, np.array([5.0, -5.0]))
        assert np.array_equal(g2, grad)
        assert np.array_equal(q2, quu)

    def test_gradient_shift(self):
        g2, _ = apply_weight_decay(np.zeros(2), None, 1.0, np.array([1.0, 0.0]))
        assert np.array_equal(g2, [1.0, 0.0])

    def test_eigenvalue_shift(self):
        rng = np.random.default_rng(6)
        m = rng.normal(size=(4, 4))
        quu = m @ m.T
        _, shifted = apply_weight_decay(np.zeros(4), quu, 1e-3, np.zeros(4))
        before = np.linalg.eigvalsh(quu)
        after = np.linalg.eigvalsh(shifted)
        assert np.allclose(after - before, 1e-3, atol=1e-12)

    def test_kronecker_factor_damping(self):
        factors = KroneckerFactors(a_factors=[np.eye(2)], b_factors=[np.eye(2)],
                                   dt=0.1, grid=np.array([1.0, 0.0]))
        g2, f2 = apply_weight_decay(np.ones(4), factors, 1e-3, np.full(4, 2.0))
        assert np.allclose(g2, 1.0 + 2e-3)
        assert f2.extra_damping == pytest.approx(1e-3)
        assert factors.extra_damping == 0.0

    def test_negative_decay_rejected(self):
        with pytest.raises(ValueError):
            apply_weight_decay(np.zeros(1), None, -0.1, np.zeros(1))
