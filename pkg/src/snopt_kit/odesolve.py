"""Initial-value-problem solvers over flat state vectors.

Fixed-step Euler and RK4, plus the adaptive Dormand-Prince 5(4) pair with
FSAL and a PI step-size controller (safety 0.9, growth clamped to
[0.2, 10]).  Integration direction follows the sign of ``t_end - t_start``;
backward solves negate the internal step rather than rewriting the field.

The solvers retain no per-step history: the only output is the terminal
state plus step counters, so memory is independent of the number of
accepted or rejected steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

METHODS = ("euler", "rk4", "dopri5")


class MaxStepsExceeded(RuntimeError):
    """The solve did not reach ``t_end`` within ``max_steps`` attempts."""


class NonFiniteState(RuntimeError):
    """A state component became NaN or infinite during the solve."""


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    rtol: float = 1e-6
    atol: float = 1e-6
    fixed_step: float | None = None
    max_steps: int = 100_000
    error_norm: str = "full"          # "full" | "semi"
    semi_prefix: int | None = None    # state prefix scored by the semi norm
    max_step: float | None = None     # optional cap on the adaptive step

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.method in ("euler", "rk4"):
            if self.fixed_step is None or self.fixed_step <= 0:
                raise ValueError(f"{self.method} requires fixed_step > 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.error_norm not in ("full", "semi"):
            raise ValueError(f"unknown error_norm {self.error_norm!r}")
        if self.error_norm == "semi" and (self.semi_prefix is None or self.semi_prefix < 1):
            raise ValueError("semi error norm needs a positive semi_prefix")
        if self.max_step is not None and self.max_step <= 0:
            raise ValueError("max_step must be positive")


@dataclass
class SolveReport:
    terminal_state: np.ndarray
    nfe: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0
    # adaptive-solve handoff for chained segment solves
    terminal_field: np.ndarray | None = None
    next_step: float | None = None


Field = Callable[[float, np.ndarray], np.ndarray]

# Dormand-Prince 5(4) tableau.  Row 7 equals the 5th-order weights (FSAL).
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# 5th-order minus embedded 4th-order weights: local error coefficients.
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
# Hairer-style PI exponents for a 5th-order error estimate.
_BETA = 0.04
_EXPO = 0.2 - 0.75 * _BETA


def _check_finite(y: np.ndarray, t: float):
    if not np.all(np.isfinite(y)):
        raise NonFiniteState(f"non-finite state encountered at t={t:.6g}")


def _error_ratio(err: np.ndarray, y0: np.ndarray, y1: np.ndarray, cfg: SolverConfig) -> float:
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y0), np.abs(y1))
    if cfg.error_norm == "semi":
        k = min(cfg.semi_prefix, err.size)
        err, scale = err[:k], scale[:k]
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _solve_fixed(y0, t_start, t_end, fn: Field, cfg: SolverConfig) -> SolveReport:
    span = t_end - t_start
    direction = 1.0 if span >= 0 else -1.0
    total = abs(span)
    h = cfg.fixed_step
    n_steps = max(1, int(np.ceil(total / h - 1e-12))) if total > 0 else 0
    if n_steps > cfg.max_steps:
        raise MaxStepsExceeded(f"{n_steps} fixed steps exceed max_steps={cfg.max_steps}")

    y = np.array(y0, dtype=float)
    t = t_start
    nfe = 0
    for i in range(n_steps):
        hs = direction * min(h, abs(t_end - t))
        if i == n_steps - 1:
            hs = t_end - t  # land on the boundary exactly
        if cfg.method == "euler":
            y = y + hs * fn(t, y)
            nfe += 1
        else:  # rk4
            k1 = fn(t, y)
            k2 = fn(t + hs / 2, y + hs / 2 * k1)
            k3 = fn(t + hs / 2, y + hs / 2 * k2)
            k4 = fn(t + hs, y + hs * k3)
            y = y + hs / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            nfe += 4
        t = t + hs
        _check_finite(y, t)
    return SolveReport(terminal_state=y, nfe=nfe, accepted_steps=n_steps, rejected_steps=0)


def _initial_step(f0, y0, total, cfg: SolverConfig) -> float:
    """First-step guess from the field magnitude at the start point.

    Clipped to a hundredth of the interval so the controller starts
    conservative and grows into the right scale.
    """
    cap = total / 100.0
    scale = cfg.atol + cfg.rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    if d1 > 1e-12 and d0 > 1e-12:
        h = 0.01 * d0 / d1
    else:
        h = cap
    h = min(h, cap)
    if cfg.max_step is not None:
        h = min(h, cfg.max_step)
    return max(h, 1e-14 * total)


def _solve_dopri5(y0, t_start, t_end, fn: Field, cfg: SolverConfig,
                  first_step: float | None, f_start) -> SolveReport:
    span = t_end - t_start
    direction = 1.0 if span >= 0 else -1.0
    total = abs(span)

    y = np.array(y0, dtype=float)
    t = t_start
    k = np.empty((7, y.size))
    nfe = 0
    if f_start is not None:
        k[0] = np.asarray(f_start, dtype=float)
    else:
        k[0] = fn(t, y)
        nfe = 1
    if first_step is not None:
        h = abs(first_step)
    else:
        h = _initial_step(k[0], y, total, cfg)

    accepted = rejected = 0
    err_old = 1e-4
    while abs(t_end - t) > 1e-14 * max(1.0, total):
        if accepted + rejected >= cfg.max_steps:
            raise MaxStepsExceeded(f"dopri5 exceeded max_steps={cfg.max_steps}")
        remaining = abs(t_end - t)
        h_prop = min(h, cfg.max_step) if cfg.max_step is not None else h
        h_eff = min(h_prop, remaining)
        hs = direction * h_eff
        last = h_eff >= remaining - 1e-14 * max(1.0, total)

        for i in range(1, 6):
            k[i] = fn(t + _DP_C[i] * hs, y + hs * (_DP_A[i] @ k[:i]))
        # stage 7's combination row equals the 5th-order weights, so its
        # evaluation point is the candidate state itself (FSAL)
        y_new = y + hs * (_DP_A[6] @ k[:6])
        k[6] = fn(t + hs, y_new)
        nfe += 6
        err_vec = hs * (_DP_E @ k)

        _check_finite(y_new, t + hs)
        err = _error_ratio(err_vec, y, y_new, cfg)
        if not np.isfinite(err):
            raise NonFiniteState(f"non-finite error estimate at t={t:.6g}")

        if err <= 1.0:
            accepted += 1
            t = t_end if last else t + hs
            y = y_new
            k[0] = k[6]
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * err ** (-_EXPO) * err_old ** _BETA
            h_next = h_eff * min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            # a boundary-clipped step says nothing against the proposed h
            h = max(h_next, h_prop) if h_eff < h_prop else h_next
            err_old = max(err, 1e-10)
        else:
            rejected += 1
            # stage 1 is still f(t, y): no new evaluation needed on retry
            h = h_eff * min(1.0, max(_MIN_FACTOR, _SAFETY * err ** (-0.2)))
    return SolveReport(terminal_state=y, nfe=nfe, accepted_steps=accepted,
                       rejected_steps=rejected, terminal_field=k[0].copy(), next_step=h)


def odesolve(y0: np.ndarray, t_start: float, t_end: float, fn: Field,
             cfg: SolverConfig, first_step: float | None = None,
             f_start: np.ndarray | None = None) -> SolveReport:
    """Integrate ``dy/dt = fn(t, y)`` from ``t_start`` to ``t_end``.

    ``t_end < t_start`` integrates backward.  ``first_step`` seeds the
    adaptive controller and ``f_start`` supplies an already-computed
    ``fn(t_start, y0)`` — both let chained segment solves hand the FSAL
    stage and step size across the boundary.  Fixed-step methods ignore
    them.
    """
    y0 = np.asarray(y0, dtype=float)
    _check_finite(y0, t_start)
    if t_start == t_end:
        return SolveReport(terminal_state=y0.copy(), nfe=0, accepted_steps=0, rejected_steps=0)
    if cfg.method in ("euler", "rk4"):
        return _solve_fixed(y0, t_start, t_end, fn, cfg)
    return _solve_dopri5(y0, t_start, t_end, fn, cfg, first_step, f_start)


def nfe_of(report: SolveReport) -> int:
    """Number of vector-field evaluations consumed by a solve."""
    return report.nfe
