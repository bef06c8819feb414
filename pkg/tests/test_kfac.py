import numpy as np
import pytest

from snopt_kit import vector_field as vf
from snopt_kit.adjoint import adjoint_gradient
from snopt_kit.kfac import (BadInterval, accumulate_factors, factor_terms,
                            make_grid)
from snopt_kit.loss import TerminalCurvature
from snopt_kit.numerics import kron
from snopt_kit.odesolve import SolverConfig

RK4 = SolverConfig(method="rk4", fixed_step=1e-2)


def tanh_net(seed, dims=(2, 3, 2)):
    acts = ("tanh",) * (len(dims) - 2) + ("identity",)
    spec = vf.MlpSpec(dims=dims, activations=acts)
    return spec, vf.init_params(spec, seed)


class TestMakeGrid:
    def test_two_points(self):
        grid = make_grid(0.0, 1.0, 2)
        assert np.array_equal(grid, [1.0, 0.0])

    def test_paper_scale_spacing(self):
        grid = make_grid(0.0, 1.0, 101)
        assert grid[0] == 1.0 and grid[-1] == 0.0
        assert np.allclose(np.diff(grid), -0.01)

    def test_scaled_interval(self):
        grid = make_grid(0.0, 0.5, 51)
        assert np.allclose(np.diff(grid), -0.01)

    def test_bad_interval(self):
        with pytest.raises(BadInterval):
            make_grid(1.0, 0.0, 10)
        with pytest.raises(BadInterval):
            make_grid(0.0, 1.0, 1)


class TestFactorTerms:
    def test_rank_one_kron_exactness(self):
        # one sample, one rank vector: kron(A_n, B_n) equals the exact outer
        # product of the layer gradient, with zero factorization error
        spec, theta = tanh_net(1)
        x = np.array([0.4, -0.7])
        q = np.array([0.9, -0.3])
        a_terms, b_terms = factor_terms(spec, theta, 0.7, x, [q])
        _, trace = vf.eval(spec, theta, 0.7, x)
        gs, _ = vf.layer_cotangents(spec, theta, trace, q[None, :][None, :])
        for k in range(spec.n_layers):
            zbar = np.concatenate([trace.zs[k][0], [1.0]])
            g = gs[k][0, 0]
            seg = np.kron(zbar, g)
            assert np.max(np.abs(kron(a_terms[k], b_terms[k]) - np.outer(seg, seg))) < 1e-10

    def test_psd(self):
        spec, theta = tanh_net(2)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 2))
        qs = [rng.normal(size=(8, 2)) for _ in range(2)]
        a_terms, b_terms = factor_terms(spec, theta, 0.3, x, qs)
        for mat in a_terms + b_terms:
            assert np.linalg.eigvalsh(mat).min() >= -1e-12


class TestAccumulateFactors:
    def test_zero_factors_zero_b(self):
        spec, theta = tanh_net(3)
        x1 = np.array([[0.5, -0.5]])
        curv = TerminalCurvature(grad=np.zeros((1, 2)), factors=[np.zeros((1, 2))],
                                 mode="exact_rank")
        factors, grad, _ = accumulate_factors(spec, theta, x1, curv,
                                              make_grid(0.0, 1.0, 5), RK4)
        for b in factors.b_factors:
            assert np.allclose(b, 0.0)
        # activation factors remain nonzero PSD
        for a in factors.a_factors:
            assert np.linalg.eigvalsh(a).min() >= -1e-12
            assert np.linalg.norm(a) > 0
        assert np.allclose(grad, 0.0)

    def test_riemann_sum_replay(self):
        # scripted replay: integrate the same grid by hand and compare
        spec, theta = tanh_net(4)
        rng = np.random.default_rng(1)
        x1 = rng.uniform(-1, 1, size=(2, 2))
        a1 = rng.normal(size=(2, 2))
        curv = TerminalCurvature(grad=a1, factors=[a1], mode="gauss_newton_scaled")
        grid = make_grid(0.0, 1.0, 3)
        factors, _, _ = accumulate_factors(spec, theta, x1, curv, grid, RK4)

        # replay: separately solve to each grid point, evaluate terms, sum
        from snopt_kit.curvature import lowrank_sweep
        dt = 0.5
        a_sum = [np.zeros_like(a) for a in factors.a_factors]
        b_sum = [np.zeros_like(b) for b in factors.b_factors]
        for t_j in grid:
            if t_j == 1.0:
                x_j, qs_j = x1, [np.broadcast_to(curv.factors[0], x1.shape)]
            else:
                seg = lowrank_sweep(spec, theta, x1, curv, t_j, 1.0, RK4)
                x_j, qs_j = seg.x0, [q for q in seg.qs]
            a_t, b_t = factor_terms(spec, theta, t_j, x_j, qs_j)
            for k in range(spec.n_layers):
                a_sum[k] += a_t[k] * dt
                b_sum[k] += b_t[k] * dt
        for k in range(spec.n_layers):
            assert np.max(np.abs(a_sum[k] - factors.a_factors[k])) < 1e-8
            assert np.max(np.abs(b_sum[k] - factors.b_factors[k])) < 1e-8

    def test_gradient_matches_adjoint(self):
        spec, theta = tanh_net(5)
        rng = np.random.default_rng(2)
        x1 = rng.uniform(-1, 1, size=(4, 2))
        a1 = rng.normal(size=(4, 2))
        curv = TerminalCurvature(grad=a1, factors=[a1], mode="gauss_newton_scaled")
        factors, grad, _ = accumulate_factors(spec, theta, x1, curv,
                                              make_grid(0.0, 1.0, 101), RK4)
        g_adj, _, _, _ = adjoint_gradient(spec, theta, x1, a1, 0.0, 1.0, RK4)
        assert np.max(np.abs(grad - g_adj)) < 1e-8

    def test_single_point_grid_needs_dt(self):
        spec, theta = tanh_net(6)
        curv = TerminalCurvature(grad=np.zeros((1, 2)), factors=[np.zeros((1, 2))],
                                 mode="exact_rank")
        with pytest.raises(BadInterval):
            accumulate_factors(spec, theta, np.zeros((1, 2)), curv,
                               np.array([1.0]), RK4)
        factors, _, _ = accumulate_factors(spec, theta, np.zeros((1, 2)), curv,
                                           np.array([1.0]), RK4, dt=0.25)
        assert factors.dt == 0.25

    def test_single_point_dt_squared_scaling(self):
        # one grid point, batch 1, rank 1: kron(Abar, Bbar) = dt^2 * exact outer
        spec, theta = tanh_net(7)
        x1 = np.array([[0.4, -0.7]])
        q = np.array([[0.9, -0.3]])
        curv = TerminalCurvature(grad=q, factors=[q], mode="gauss_newton_scaled")
        dt = 0.3
        factors, _, _ = accumulate_factors(spec, theta, x1, curv, np.array([1.0]),
                                           RK4, dt=dt)
        _, trace = vf.eval(spec, theta, 1.0, x1)
        gs, _ = vf.layer_cotangents(spec, theta, trace, q[None, :])
        for k in range(spec.n_layers):
            zbar = np.concatenate([trace.zs[k][0], [1.0]])
            seg = np.kron(zbar, gs[k][0, 0])
            got = kron(factors.a_factors[k], factors.b_factors[k])
            assert np.max(np.abs(got - dt ** 2 * np.outer(seg, seg))) < 1e-10

    def test_psd_preserved_under_accumulation(self):
        spec, theta = tanh_net(8)
        rng = np.random.default_rng(3)
        x1 = rng.uniform(-1, 1, size=(4, 2))
        a1 = rng.normal(size=(4, 2))
        curv = TerminalCurvature(grad=a1, factors=[a1], mode="gauss_newton_scaled")
        factors, _, _ = accumulate_factors(spec, theta, x1, curv,
                                           make_grid(0.0, 1.0, 9), RK4)
        for mat in factors.a_factors + factors.b_factors:
            assert np.linalg.eigvalsh(mat).min() >= -1e-12

    def test_nfe_counts_grid_and_segments(self):
        spec, theta = tanh_net(9)
        x1 = np.array([[0.1, 0.1]])
        curv = TerminalCurvature(grad=np.ones((1, 2)), factors=[np.ones((1, 2))],
                                 mode="gauss_newton_scaled")
        grid = make_grid(0.0, 1.0, 11)
        cfg = SolverConfig(method="rk4", fixed_step=0.1)
        _, _, report = accumulate_factors(spec, theta, x1, curv, grid, cfg)
        # 11 grid evaluations plus 10 segments of one rk4 step each
        assert report.accepted_steps == 10
        assert report.nfe == 11 + 10 * 4
