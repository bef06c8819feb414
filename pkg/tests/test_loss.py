import numpy as np
import pytest

from snopt_kit import loss as ls


def fd_grad(fn, x, h=1e-6):
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return out


def fd_hessian(fn, x, h=1e-4):
    d = x.size
    hess = np.empty((d, d))
    for i in range(d):
        e = np.zeros_like(x)
        e[i] = h
        gp = fd_grad(fn, x + e, h)
        gm = fd_grad(fn, x - e, h)
        hess[i] = (gp - gm) / (2 * h)
    return 0.5 * (hess + hess.T)


class TestLossValue:
    def test_mse_zero_at_target(self):
        lf = ls.TerminalLoss(kind="mse", target=np.array([1.0, -2.0]))
        assert ls.loss_value(lf, np.array([1.0, -2.0])) == 0.0

    def test_mse_unit_perturbation(self):
        lf = ls.TerminalLoss(kind="mse", target=np.array([1.0, -2.0]))
        assert ls.loss_value(lf, np.array([2.0, -2.0])) == pytest.approx(0.5)

    def test_softmax_uniform_logits(self):
        lf = ls.TerminalLoss(kind="softmax_ce", target=np.array([0]))
        assert ls.loss_value(lf, np.array([0.0, 0.0])) == pytest.approx(np.log(2.0))

    def test_bad_label(self):
        lf = ls.TerminalLoss(kind="softmax_ce", target=np.array([5]))
        with pytest.raises(ls.BadLabel):
            ls.loss_value(lf, np.array([0.0, 0.0]))

    def test_float_labels_rejected(self):
        with pytest.raises(ls.BadLabel):
            ls.TerminalLoss(kind="softmax_ce", target=np.array([0.5]))

    def test_batch_mean(self):
        lf = ls.TerminalLoss(kind="mse", target=np.zeros(2))
        x = np.array([[1.0, 0.0], [0.0, 2.0]])
        assert ls.loss_value(lf, x) == pytest.approx(0.5 * (1.0 + 4.0) / 2)


class TestGrad:
    def test_mse_grad(self):
        lf = ls.TerminalLoss(kind="mse", target=np.array([1.0, 0.0]))
        x = np.array([2.0, 3.0])
        assert np.allclose(ls.grad_x1(lf, x), [1.0, 3.0])

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(0)
        readout = ls.Readout(weight=rng.normal(size=(3, 2)), bias=rng.normal(size=3))
        lf = ls.TerminalLoss(kind="softmax_ce", target=np.array([1]), readout=readout)
        x = rng.normal(size=2)
        got = ls.grad_x1(lf, x)
        want = fd_grad(lambda v: ls.loss_value(lf, v), x)
        assert np.linalg.norm(got - want) < 1e-6 * max(1.0, np.linalg.norm(want))

    def test_readout_grads_match_fd(self):
        rng = np.random.default_rng(1)
        readout = ls.Readout(weight=rng.normal(size=(2, 2)), bias=np.zeros(2))
        lf = ls.TerminalLoss(kind="softmax_ce", target=np.array([0, 1]), readout=readout)
        x = rng.normal(size=(2, 2))
        dw, db = ls.readout_grads(lf, x)
        h = 1e-6
        for i in range(2):
            for j in range(2):
                readout.weight[i, j] += h
                up = ls.loss_value(lf, x)
                readout.weight[i, j] -= 2 * h
                dn = ls.loss_value(lf, x)
                readout.weight[i, j] += h
                assert dw[i, j] == pytest.approx((up - dn) / (2 * h), abs=1e-6)


class TestTerminalCurvature:
    def test_mse_exact_rank_is_identity(self):
        lf = ls.TerminalLoss(kind="mse", target=np.zeros(3))
        curv = ls.terminal_curvature(lf, np.array([1.0, 2.0, 3.0]), 0.0, 1.0, "exact_rank")
        assert len(curv.factors) == 3
        assert np.allclose(curv.hessian(), np.eye(3))

    def test_gauss_newton_unit_interval(self):
        lf = ls.TerminalLoss(kind="mse", target=np.zeros(2))
        x = np.array([0.5, -0.5])
        curv = ls.terminal_curvature(lf, x, 0.0, 1.0, "gauss_newton_scaled")
        assert len(curv.factors) == 1
        assert np.allclose(curv.factors[0], curv.grad)

    def test_gauss_newton_interval_scaling(self):
        lf = ls.TerminalLoss(kind="mse", target=np.zeros(2))
        x = np.array([0.5, -0.5])
        curv = ls.terminal_curvature(lf, x, 0.0, 4.0, "gauss_newton_scaled")
        assert np.allclose(curv.factors[0], curv.grad / 2.0)

    def test_softmax_exact_rank_matches_fd_hessian(self):
        rng = np.random.default_rng(2)
        readout = ls.Readout(weight=rng.normal(size=(3, 2)), bias=rng.normal(size=3))
        lf = ls.TerminalLoss(kind="softmax_ce", target=np.array([2]), readout=readout)
        x = rng.normal(size=2)
        curv = ls.terminal_curvature(lf, x, 0.0, 1.0, "exact_rank")
        want = fd_hessian(lambda v: ls.loss_value(lf, v), x)
        rel = np.linalg.norm(curv.hessian() - want) / np.linalg.norm(want)
        assert rel < 1e-5

    def test_factors_psd(self):
        rng = np.random.default_rng(3)
        readout = ls.Readout(weight=rng.normal(size=(4, 3)), bias=np.zeros(4))
        for mode in ("exact_rank", "gauss_newton_scaled"):
            lf = ls.TerminalLoss(kind="softmax_ce", target=np.array([1]), readout=readout)
            curv = ls.terminal_curvature(lf, rng.normal(size=3), 0.0, 1.0, mode)
            assert np.linalg.eigvalsh(curv.hessian()).min() >= -1e-10

    def test_requires_forward_interval(self):
        lf = ls.TerminalLoss(kind="mse", target=np.zeros(2))
        with pytest.raises(ValueError):
            ls.terminal_curvature(lf, np.zeros(2), 1.0, 1.0)


def test_accuracy():
    readout = ls.Readout(weight=np.eye(2), bias=np.zeros(2))
    lf = ls.TerminalLoss(kind="softmax_ce", target=np.array([0, 1, 1]), readout=readout)
    x = np.array([[2.0, 0.0], [0.0, 2.0], [3.0, 0.0]])
    assert ls.accuracy(lf, x) == pytest.approx(2.0 / 3.0)
