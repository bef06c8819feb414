"""Second-order backward sweeps.

Two routes to the same curvature:

* :func:`dense_sweep` integrates the full matrix system — gradient pieces,
  the state-state block, the state-parameter block, and the
  parameter-parameter block — jointly with the state replay.  It is the
  desk-scale reference: exact for the linearized dynamics, quadratic in
  the problem sizes, single sample only.

* :func:`lowrank_sweep` replaces the matrix system with independent vector
  pairs ``(q_i, p_i)`` seeded by a rank factorization of the terminal
  Hessian.  Each ``q_i`` obeys the same backward ODE as the adjoint and
  each ``p_i`` accumulates the parameter coupling, so the reconstructions
  ``sum q q^T``, ``sum q p^T``, ``sum p p^T`` reproduce the dense blocks.

Running costs (the intermediate penalty) are restricted to weight decay,
which is applied after the sweep as two additive corrections rather than
inside the integrals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import vector_field as vf
from .kfac import KroneckerFactors
from .loss import TerminalCurvature
from .odesolve import SolveReport, SolverConfig, odesolve
from .adjoint import backward_config


def _triu_pack(mat: np.ndarray) -> np.ndarray:
    i, j = np.triu_indices(mat.shape[0])
    return mat[i, j]


def _triu_unpack(flat: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros((d, d))
    i, j = np.triu_indices(d)
    out[i, j] = flat
    out[j, i] = flat
    return out


@dataclass
class DenseCurvatureState:
    """All cost-to-go derivatives at t0 from the matrix sweep."""

    x0: np.ndarray
    qx: np.ndarray      # (m,)
    qu: np.ndarray      # (n,) gradient
    qxx: np.ndarray     # (m, m) symmetric
    qxu: np.ndarray     # (m, n)
    quu: np.ndarray     # (n, n) symmetric
    report: SolveReport

    @property
    def qux(self) -> np.ndarray:
        return self.qxu.T


def _single_sample(x1, grad):
    x1 = np.asarray(x1, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if x1.ndim == 2:
        if x1.shape[0] != 1:
            raise ValueError("dense_sweep handles a single sample")
        x1, grad = x1[0], np.atleast_2d(grad)[0]
    return x1, grad


def dense_sweep(spec: vf.MlpSpec, theta: np.ndarray, x1: np.ndarray,
                curv: TerminalCurvature, t0: float, t1: float,
                cfg: SolverConfig) -> DenseCurvatureState:
    """Backward matrix sweep seeded by the terminal gradient and Hessian.

    Only the upper triangles of the two symmetric blocks are carried;
    they are symmetrized on read.  The off-diagonal parameter-state block
    is the transpose of the state-parameter block throughout, so only one
    is integrated.
    """
    m, n = spec.state_dim, vf.num_params(spec)
    x1v, gradv = _single_sample(x1, curv.grad)
    phi_xx = sum(np.outer(np.atleast_2d(y)[0], np.atleast_2d(y)[0]) for y in curv.factors)

    txx = m * (m + 1) // 2
    tuu = n * (n + 1) // 2
    sizes = [m, m, n, txx, m * n, tuu]
    offsets = np.cumsum([0] + sizes)

    def pack(x, qx, qu, qxx, qxu, quu):
        return np.concatenate([x, qx, qu, _triu_pack(qxx), qxu.ravel(), _triu_pack(quu)])

    def unpack(y):
        parts = [y[offsets[i]:offsets[i + 1]] for i in range(6)]
        return (parts[0], parts[1], parts[2], _triu_unpack(parts[3], m),
                parts[4].reshape(m, n), _triu_unpack(parts[5], n))

    def field(t, y):
        x, qx, qu, qxx, qxu, _ = unpack(y)
        f, fx, fu = vf.jacobians(spec, theta, t, x)
        dqx = -(fx.T @ qx)
        dqu = -(fu.T @ qx)
        dqxx = -(fx.T @ qxx + qxx @ fx)
        dqxu = -(qxx @ fu + fx.T @ qxu)
        fuqxu = fu.T @ qxu
        dquu = -(fuqxu + fuqxu.T)
        return pack(f, dqx, dqu, dqxx, dqxu, dquu)

    y1 = pack(x1v, gradv, np.zeros(n), phi_xx, np.zeros((m, n)), np.zeros((n, n)))
    report = odesolve(y1, t1, t0, field, cfg)
    x0, qx, qu, qxx, qxu, quu = unpack(report.terminal_state)
    return DenseCurvatureState(x0=x0.copy(), qx=qx.copy(), qu=qu.copy(),
                               qxx=qxx, qxu=qxu.copy(), quu=quu, report=report)


@dataclass
class LowRankCurvatureState:
    """Vector-pair representation of the curvature at t0.

    ``qs[i]`` keeps the batch axis; ``ps[i]`` and the gradient are
    batch-mean reduced, mirroring the expectation in the gradient
    integral.  Flattened, the carried state has ``batch*m*(2+R) +
    n*(1+R)`` entries — no matrix ever rides along.
    """

    x0: np.ndarray
    qx: np.ndarray
    qu: np.ndarray
    qs: list[np.ndarray]
    ps: list[np.ndarray]
    report: SolveReport

    def _sample_qs(self) -> list[np.ndarray]:
        qs = [np.atleast_2d(q) for q in self.qs]
        if any(q.shape[0] != 1 for q in qs):
            raise ValueError("reconstructions are defined per sample")
        return [q[0] for q in qs]

    def recon_qxx(self) -> np.ndarray:
        return sum(np.outer(q, q) for q in self._sample_qs())

    def recon_qxu(self) -> np.ndarray:
        return sum(np.outer(q, p) for q, p in zip(self._sample_qs(), self.ps))

    def recon_quu(self) -> np.ndarray:
        return assemble_quu(self)


def lowrank_sweep(spec: vf.MlpSpec, theta: np.ndarray, x1: np.ndarray,
                  curv: TerminalCurvature, t0: float, t1: float,
                  cfg: SolverConfig, use_semi: bool = False) -> LowRankCurvatureState:
    """Backward sweep of R independent vector pairs plus the gradient path."""
    if len(curv.factors) < 1:
        raise ValueError("need at least one terminal factor")
    m, n = spec.state_dim, vf.num_params(spec)
    x1b = np.atleast_2d(np.asarray(x1, dtype=float))
    a1 = np.broadcast_to(np.atleast_2d(curv.grad), x1b.shape)
    ys = [np.broadcast_to(np.atleast_2d(y), x1b.shape) for y in curv.factors]
    batch, rank = x1b.shape[0], len(ys)
    bm = batch * m

    def pack(x, a, g, qs, ps):
        return np.concatenate([x.ravel(), a.ravel(), g]
                              + [q.ravel() for q in qs] + list(ps))

    def unpack(y):
        x = y[:bm].reshape(batch, m)
        a = y[bm:2 * bm].reshape(batch, m)
        g = y[2 * bm:2 * bm + n]
        off = 2 * bm + n
        qs = [y[off + i * bm:off + (i + 1) * bm].reshape(batch, m) for i in range(rank)]
        off += rank * bm
        ps = [y[off + i * n:off + (i + 1) * n] for i in range(rank)]
        return x, a, g, qs, ps

    weights = vf.unpack_params(spec, theta)

    def field(t, y):
        x, a, g, qs, ps = unpack(y)
        trace = vf._forward(spec, weights, t, x)
        # one traversal serves the adjoint and every rank vector
        stacked = np.stack([a] + qs, axis=0)  # (1+R, batch, m)
        gs, r = vf._cotangents(spec, weights, trace, stacked)
        r = r[..., :m] if spec.time_input == "concat" else r
        flats = vf.grouped_param_grads(spec, trace, gs)
        da = -r[0]
        dqs = [-r[i + 1] for i in range(rank)]
        dg = -flats[0]
        dps = [-flats[i + 1] for i in range(rank)]
        return pack(trace.zs[-1], da, dg, dqs, dps)

    y1 = pack(x1b, a1, np.zeros(n), ys, [np.zeros(n)] * rank)
    bcfg = backward_config(cfg, bm, use_semi)
    report = odesolve(y1, t1, t0, field, bcfg)
    x0, a0, g, qs, ps = unpack(report.terminal_state)
    return LowRankCurvatureState(x0=x0.copy(), qx=a0.copy(), qu=g.copy(),
                                 qs=[q.copy() for q in qs], ps=[p.copy() for p in ps],
                                 report=report)


def assemble_quu(state: LowRankCurvatureState) -> np.ndarray:
    """Parameter-space curvature ``sum_i p_i p_i^T`` (symmetric PSD)."""
    n = state.ps[0].shape[0]
    out = np.zeros((n, n))
    for p in state.ps:
        out += np.outer(p, p)
    return out


def apply_weight_decay(grad: np.ndarray, quu, gamma: float, theta: np.ndarray):
    """Fold the decay penalty in after the sweep: grad += γθ, curvature += γI.

    ``quu`` may be a dense matrix, Kronecker factors (where the identity
    shift lands as extra diagonal damping in the update's eigenbasis), or
    ``None`` for first-order paths.
    """
    if gamma < 0:
        raise ValueError("weight decay must be nonnegative")
    new_grad = grad + gamma * theta
    if quu is None:
        return new_grad, None
    if isinstance(quu, KroneckerFactors):
        return new_grad, quu.with_damping(gamma)
    quu = np.asarray(quu, dtype=float)
    return new_grad, quu + gamma * np.eye(quu.shape[0])
