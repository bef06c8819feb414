"""Kronecker-factor accumulation along the backward time grid.

The production backward pass carries ``[x, adjoint, gradient, q_1..q_R]``
between the points of a uniform grid running from t1 down to t0.  At each
grid point the layer activations and backpropagated signals are read off a
fresh field evaluation and folded into per-layer second-moment matrices:

    A_n(t) = mean_b zbar^n zbar^nT          (activation side)
    B_n(t) = mean_b sum_i g^n_i g^n_iT      (signal side)

accumulated as ``Abar_n += A_n(t) dt`` (left-Riemann weights at every grid
point, endpoints included).  ``kron(Abar_n, Bbar_n)`` then approximates the
layer's parameter-space curvature block, and the same sweep also delivers
the exact first-order gradient.

Biases share their layer's block through the homogeneous coordinate: the
activation vector gets a constant 1 appended, matching the flat parameter
layout ``vec([W, b])``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import vector_field as vf
from .loss import TerminalCurvature
from .odesolve import SolveReport, SolverConfig, odesolve
from .adjoint import backward_config


class BadInterval(ValueError):
    pass


@dataclass
class KroneckerFactors:
    """Time-integrated per-layer factors plus the grid that produced them."""

    a_factors: list[np.ndarray]   # per layer: (pbar, pbar)
    b_factors: list[np.ndarray]   # per layer: (l, l)
    dt: float
    grid: np.ndarray
    extra_damping: float = 0.0    # weight decay folded into the update's eigenbasis

    def with_damping(self, gamma: float) -> "KroneckerFactors":
        return replace(self, extra_damping=self.extra_damping + gamma)


def make_grid(t0: float, t1: float, samples: int) -> np.ndarray:
    """Uniform grid from t1 down to t0 inclusive."""
    if not t1 > t0:
        raise BadInterval(f"need t1 > t0, got [{t0}, {t1}]")
    if samples < 2:
        raise BadInterval("need at least 2 grid samples")
    return np.linspace(t1, t0, samples)


def factor_terms(spec: vf.MlpSpec, theta: np.ndarray, t: float, x: np.ndarray,
                 qs: list[np.ndarray]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Instantaneous factor matrices A_n(t), B_n(t) at one grid point."""
    return _factor_terms(spec, vf.unpack_params(spec, theta), t, x, qs)


def _factor_terms(spec: vf.MlpSpec, weights: vf.Weights, t: float, x: np.ndarray,
                  qs) -> tuple[list[np.ndarray], list[np.ndarray]]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    batch = x.shape[0]
    trace = vf._forward(spec, weights, t, x)
    if isinstance(qs, np.ndarray) and qs.ndim == 3:
        stacked = qs
    else:
        stacked = np.stack([np.broadcast_to(np.atleast_2d(q), x.shape) for q in qs], axis=0)
    gs, _ = vf._cotangents(spec, weights, trace, stacked)

    a_terms, b_terms = [], []
    zbars = vf.trace_zbars(spec, trace)
    for k in range(spec.n_layers):
        zb = zbars[k]
        a_terms.append(zb.T @ zb / batch)
        g = gs[k].reshape(-1, gs[k].shape[-1])  # (R*batch, l)
        b_terms.append(g.T @ g / batch)
    return a_terms, b_terms


def accumulate_factors(spec: vf.MlpSpec, theta: np.ndarray, x1: np.ndarray,
                       curv: TerminalCurvature, grid: np.ndarray, cfg: SolverConfig,
                       use_semi: bool = True, dt: float | None = None,
                       probe: dict | None = None,
                       ) -> tuple[KroneckerFactors, np.ndarray, SolveReport]:
    """Backward sweep over the grid, returning factors and the gradient.

    Between consecutive grid points the augmented state ``[x, adjoint,
    gradient, q_i]`` is advanced by the configured solver (the adaptive
    step is warm-started across segments); at every grid point a fresh
    field evaluation feeds the factor matrices.  NFE in the returned
    report counts both the segment solves and the grid evaluations.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1:
        raise BadInterval("grid must hold at least one time point")
    if dt is None:
        if grid.size < 2:
            raise BadInterval("single-point grids need an explicit dt")
        dt = float(abs(grid[0] - grid[-1]) / (grid.size - 1))

    m, n = spec.state_dim, vf.num_params(spec)
    x1b = np.atleast_2d(np.asarray(x1, dtype=float))
    a1 = np.broadcast_to(np.atleast_2d(curv.grad), x1b.shape)
    ys = [np.broadcast_to(np.atleast_2d(y), x1b.shape) for y in curv.factors]
    batch, rank = x1b.shape[0], len(ys)
    bm = batch * m

    # layout: [x | a,q_1..q_R (one contiguous cotangent block) | g]
    def pack(x, cot, g):
        return np.concatenate([x.ravel(), cot.ravel(), g])

    def unpack(y):
        x = y[:bm].reshape(batch, m)
        cot = y[bm:bm + (1 + rank) * bm].reshape(1 + rank, batch, m)
        g = y[bm + (1 + rank) * bm:]
        return x, cot, g

    weights = vf.unpack_params(spec, theta)

    def field(t, y):
        x, cot, g = unpack(y)
        trace = vf._forward(spec, weights, t, x)
        gs, r = vf._cotangents(spec, weights, trace, cot)
        r = r[..., :m] if spec.time_input == "concat" else r
        # only the adjoint group feeds the gradient accumulator
        dg = vf._param_grad_from_cotangents(spec, trace, [g_k[0] for g_k in gs])
        return pack(trace.zs[-1], -r, -dg)

    a_bar = [np.zeros((spec.dims[k] + (1 if spec.bias else 0),) * 2)
             for k in range(spec.n_layers)]
    b_bar = [np.zeros((spec.dims[k + 1],) * 2) for k in range(spec.n_layers)]

    state = pack(x1b, np.concatenate([a1[None], np.stack(ys)], axis=0), np.zeros(n))
    if probe is not None:
        probe["state_elements"] = int(state.size)
        probe["factor_elements"] = int(sum(a.size for a in a_bar) + sum(b.size for b in b_bar))
    bcfg = backward_config(cfg, bm, use_semi)
    nfe = accepted = rejected = 0
    h_carry = None
    f_carry = None
    for j, t_j in enumerate(grid):
        x, cot, _ = unpack(state)
        a_terms, b_terms = _factor_terms(spec, weights, t_j, x, cot[1:])
        nfe += 1
        for k in range(spec.n_layers):
            a_bar[k] += a_terms[k] * dt
            b_bar[k] += b_terms[k] * dt
        if j + 1 < grid.size:
            seg = odesolve(state, t_j, grid[j + 1], field, bcfg,
                           first_step=h_carry, f_start=f_carry)
            state = seg.terminal_state
            nfe += seg.nfe
            accepted += seg.accepted_steps
            rejected += seg.rejected_steps
            h_carry, f_carry = seg.next_step, seg.terminal_field

    _, _, g = unpack(state)
    report = SolveReport(terminal_state=state, nfe=nfe,
                         accepted_steps=accepted, rejected_steps=rejected)
    factors = KroneckerFactors(a_factors=a_bar, b_factors=b_bar, dt=dt, grid=grid)
    return factors, g.copy(), report
