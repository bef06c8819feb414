"""First-order backward pass at O(1) memory.

One backward solve carries the state replay, the adjoint vector, and the
flat gradient accumulator.  The augmented vector has length
``2 * batch * m + n`` regardless of how many steps the solver takes, and
each solver stage costs exactly one field evaluation plus one reverse
traversal (which yields both the state and parameter VJPs).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import vector_field as vf
from .odesolve import SolveReport, SolverConfig, odesolve


@dataclass
class AdjointState:
    """Unpacked view of the augmented backward vector."""

    x: np.ndarray      # (batch, m) state replay
    a: np.ndarray      # (batch, m) adjoint
    g: np.ndarray      # (n,) gradient accumulator

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.x.ravel(), self.a.ravel(), self.g])

    @classmethod
    def unflatten(cls, y: np.ndarray, batch: int, m: int, n: int) -> "AdjointState":
        bm = batch * m
        return cls(x=y[:bm].reshape(batch, m),
                   a=y[bm:2 * bm].reshape(batch, m),
                   g=y[2 * bm:2 * bm + n])


def _normalize(x1, a1, m):
    x1 = np.asarray(x1, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    single = x1.ndim == 1
    if single:
        x1, a1 = x1[None, :], a1[None, :]
    if x1.shape != a1.shape or x1.shape[1] != m:
        raise ValueError(f"state/adjoint shapes {x1.shape}/{a1.shape} do not match width {m}")
    return x1, a1, single


def make_adjoint_field(spec: vf.MlpSpec, theta: np.ndarray, batch: int):
    """Forward-time derivative of [x, a, g] for the backward solve."""
    m, n = spec.state_dim, vf.num_params(spec)
    weights = vf.unpack_params(spec, theta)

    def field(t, y):
        s = AdjointState.unflatten(y, batch, m, n)
        trace = vf._forward(spec, weights, t, s.x)
        gs, r = vf._cotangents(spec, weights, trace, s.a)
        da = -(r[:, :m] if spec.time_input == "concat" else r)
        dg = -vf._param_grad_from_cotangents(spec, trace, gs)
        return np.concatenate([trace.zs[-1].ravel(), da.ravel(), dg])

    return field


def backward_config(cfg: SolverConfig, x_len: int, use_semi: bool = True) -> SolverConfig:
    """Adaptive backward solves score the error norm on the state prefix only."""
    if use_semi and cfg.method == "dopri5":
        return replace(cfg, error_norm="semi", semi_prefix=x_len)
    return cfg


def adjoint_gradient(spec: vf.MlpSpec, theta: np.ndarray, x1: np.ndarray, a1: np.ndarray,
                     t0: float, t1: float, cfg: SolverConfig, use_semi: bool = True,
                     probe: dict | None = None,
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray, SolveReport]:
    """Loss gradient by integrating the adjoint system from t1 back to t0.

    ``a1`` is the terminal-loss gradient at ``x1`` (per sample).  Returns
    the flat parameter gradient, the reconstructed initial state, the
    adjoint at t0, and the solve report.
    """
    m, n = spec.state_dim, vf.num_params(spec)
    x1b, a1b, single = _normalize(x1, a1, m)
    batch = x1b.shape[0]

    y1 = AdjointState(x=x1b, a=a1b, g=np.zeros(n)).flatten()
    if probe is not None:
        probe["state_elements"] = int(y1.size)
    bcfg = backward_config(cfg, batch * m, use_semi)
    report = odesolve(y1, t1, t0, make_adjoint_field(spec, theta, batch), bcfg)
    s0 = AdjointState.unflatten(report.terminal_state, batch, m, n)
    x0, a0 = (s0.x[0], s0.a[0]) if single else (s0.x, s0.a)
    return s0.g.copy(), x0, a0, report
