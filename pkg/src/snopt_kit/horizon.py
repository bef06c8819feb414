"""Free optimization of the integration bound t1.

Lengthening the integration costs solver time, so the bound is treated as
a trainable quantity with a quadratic penalty (c/2) T^2 on top of the
terminal loss.  With the rank-1 surrogate for the terminal Hessian the
derivative terms collapse to scalars built from one extra field
evaluation at the terminal point:

    s      = mean_b <phi_grad_b, F(T, x1_b)>      (loss sensitivity to T)
    Q_T    = c T + s
    Q_TT   = c + s^2
    Q_Tu   = s * grad

Both scalar terms are constant along the backward pass, so nothing is
added to the backward solve.  The update is a damped Newton step with a
feedback term that accounts for the parameter update applied in the same
iteration:

    dT = (avg Q_TT)^{-1} (avg Q_T + avg(s) * <grad, dtheta>)
    T <- clamp(T - eta_T * dT)

applied once every ``period`` iterations from exponential moving averages
of the per-iteration terms.  The first-order baseline drops the curvature
scaling and the feedback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import vector_field as vf


class NonFiniteUpdate(RuntimeError):
    pass


@dataclass
class HorizonTerms:
    qt: float
    qtt: float
    qtu: np.ndarray
    s: float
    grad: np.ndarray


@dataclass
class HorizonState:
    t_bar: float
    penalty: float            # c > 0
    lr: float                 # eta_T
    period: int = 75          # iterations between bound updates
    t_min: float = 0.05
    t_max: float = 2.0
    ema: float = 0.9
    avg_qt: float | None = None
    avg_qtt: float | None = None
    avg_s: float | None = None
    updates: int = 0

    def observe(self, terms: HorizonTerms):
        """Fold one iteration's terms into the moving averages."""
        if self.avg_qt is None:
            self.avg_qt, self.avg_qtt, self.avg_s = terms.qt, terms.qtt, terms.s
        else:
            w = self.ema
            self.avg_qt = w * self.avg_qt + (1 - w) * terms.qt
            self.avg_qtt = w * self.avg_qtt + (1 - w) * terms.qtt
            self.avg_s = w * self.avg_s + (1 - w) * terms.s


def horizon_terms(spec: vf.MlpSpec, theta: np.ndarray, x1: np.ndarray,
                  phi_grad: np.ndarray, grad: np.ndarray, t_bar: float,
                  penalty: float) -> HorizonTerms:
    """Derivative terms of the penalized objective w.r.t. the bound."""
    x1b = np.atleast_2d(np.asarray(x1, dtype=float))
    pg = np.broadcast_to(np.atleast_2d(phi_grad), x1b.shape)
    f_bar, _ = vf.eval(spec, theta, t_bar, x1b)
    s = float(np.mean(np.sum(pg * f_bar, axis=1)))
    return HorizonTerms(qt=penalty * t_bar + s, qtt=penalty + s * s,
                        qtu=s * np.asarray(grad), s=s, grad=np.asarray(grad))


def horizon_step(state: HorizonState, terms: HorizonTerms,
                 dtheta: np.ndarray) -> float:
    """Second-order feedback update of the bound; mutates the state."""
    if state.avg_qtt is None or state.avg_qtt <= 0:
        raise NonFiniteUpdate("moving averages not populated")
    feedback = state.avg_s * float(np.dot(terms.grad, np.asarray(dtheta)))
    dt = (state.avg_qt + feedback) / state.avg_qtt
    if not np.isfinite(dt):
        raise NonFiniteUpdate(f"non-finite bound update {dt}")
    state.t_bar = float(np.clip(state.t_bar - state.lr * dt, state.t_min, state.t_max))
    state.updates += 1
    return state.t_bar


def first_order_horizon_step(state: HorizonState, qt: float) -> float:
    """Plain gradient step on the bound (comparison baseline)."""
    if not np.isfinite(qt):
        raise NonFiniteUpdate(f"non-finite bound gradient {qt}")
    state.t_bar = float(np.clip(state.t_bar - state.lr * qt, state.t_min, state.t_max))
    state.updates += 1
    return state.t_bar
