"""Terminal objectives, their gradients, and rank-factorized Hessians.

Two objectives: ``mse`` uses the half-scaled convention ``0.5 * ||pred -
target||^2`` so its Hessian is exactly the identity, and ``softmax_ce``
goes through an optional affine readout (trained by a plain first-order
rule in the training loop; its curvature is never Kronecker-tracked).

``terminal_curvature`` produces the terminal Hessian as a list of factor
vectors ``y_i`` with ``Hessian = sum_i y_i y_i^T``:

* ``exact_rank`` gives an exact symmetric factorization (identity columns
  for mse; the Gauss-Newton factorization of ``diag(p) - p p^T`` pushed
  through the readout for cross entropy).
* ``gauss_newton_scaled`` gives the single factor ``grad / sqrt(t1 - t0)``,
  the cheap rank-1 surrogate used in production training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BadLabel(ValueError):
    pass


@dataclass
class Readout:
    """Affine map from terminal states to logits: ``logits = x V^T + c``."""

    weight: np.ndarray  # (classes, state_dim)
    bias: np.ndarray    # (classes,)

    def logits(self, x1: np.ndarray) -> np.ndarray:
        return x1 @ self.weight.T + self.bias

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


def init_readout(state_dim: int, n_classes: int, seed: int) -> Readout:
    rng = np.random.Generator(np.random.Philox(seed))
    bound = np.sqrt(6.0 / (state_dim + n_classes))
    return Readout(weight=rng.uniform(-bound, bound, size=(n_classes, state_dim)),
                   bias=np.zeros(n_classes))


@dataclass
class TerminalLoss:
    kind: str                      # "mse" | "softmax_ce"
    target: np.ndarray             # vectors for mse, integer labels for softmax_ce
    readout: Readout | None = None

    def __post_init__(self):
        if self.kind not in ("mse", "softmax_ce"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        self.target = np.asarray(self.target)
        if self.kind == "softmax_ce" and not np.issubdtype(self.target.dtype, np.integer):
            raise BadLabel("softmax_ce expects integer class labels")


@dataclass
class TerminalCurvature:
    """Gradient and factor vectors of the terminal Hessian.

    ``factors`` is a list of arrays shaped like the per-sample gradient;
    the reconstruction ``sum_i y_i y_i^T`` is symmetric PSD by build.
    """

    grad: np.ndarray
    factors: list[np.ndarray]
    mode: str

    def hessian(self) -> np.ndarray:
        """Dense reconstruction for a single sample."""
        ys = [np.atleast_2d(y) for y in self.factors]
        if any(y.shape[0] != 1 for y in ys):
            raise ValueError("dense reconstruction is defined per sample")
        return sum(np.outer(y[0], y[0]) for y in ys)


def _as_batch(x1: np.ndarray) -> tuple[np.ndarray, bool]:
    x1 = np.asarray(x1, dtype=float)
    single = x1.ndim == 1
    return (x1[None, :] if single else x1), single


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, n_classes: int, batch: int):
    labels = np.asarray(labels)
    if labels.ndim == 0:
        labels = labels[None]
    if labels.shape[0] not in (1, batch):
        raise BadLabel(f"{labels.shape[0]} labels for batch of {batch}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise BadLabel(f"label out of range for {n_classes} classes")
    return np.broadcast_to(labels, (batch,))


def _predictions(lossfn: TerminalLoss, x1b: np.ndarray) -> np.ndarray:
    return lossfn.readout.logits(x1b) if lossfn.readout is not None else x1b


def loss_value(lossfn: TerminalLoss, x1: np.ndarray) -> float:
    """Batch-mean objective at the terminal state."""
    x1b, _ = _as_batch(x1)
    pred = _predictions(lossfn, x1b)
    if lossfn.kind == "mse":
        target = np.broadcast_to(np.atleast_2d(lossfn.target), pred.shape)
        return float(0.5 * np.mean(np.sum((pred - target) ** 2, axis=1)))
    labels = _check_labels(lossfn.target, pred.shape[1], pred.shape[0])
    z = pred - pred.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return float(-np.mean(log_probs[np.arange(pred.shape[0]), labels]))


def grad_x1(lossfn: TerminalLoss, x1: np.ndarray) -> np.ndarray:
    """Per-sample gradient of the per-sample objective w.r.t. the state."""
    x1b, single = _as_batch(x1)
    pred = _predictions(lossfn, x1b)
    if lossfn.kind == "mse":
        target = np.broadcast_to(np.atleast_2d(lossfn.target), pred.shape)
        resid = pred - target
    else:
        labels = _check_labels(lossfn.target, pred.shape[1], pred.shape[0])
        resid = _softmax(pred)
        resid[np.arange(pred.shape[0]), labels] -= 1.0
    g = resid @ lossfn.readout.weight if lossfn.readout is not None else resid
    return g[0] if single else g


def readout_grads(lossfn: TerminalLoss, x1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch-mean gradients of the readout weight and bias."""
    if lossfn.readout is None:
        raise ValueError("loss has no readout")
    x1b, _ = _as_batch(x1)
    pred = _predictions(lossfn, x1b)
    if lossfn.kind == "mse":
        target = np.broadcast_to(np.atleast_2d(lossfn.target), pred.shape)
        resid = pred - target
    else:
        labels = _check_labels(lossfn.target, pred.shape[1], pred.shape[0])
        resid = _softmax(pred)
        resid[np.arange(pred.shape[0]), labels] -= 1.0
    batch = x1b.shape[0]
    return resid.T @ x1b / batch, resid.mean(axis=0)


def terminal_curvature(lossfn: TerminalLoss, x1: np.ndarray, t0: float, t1: float,
                       mode: str = "gauss_newton_scaled") -> TerminalCurvature:
    """Terminal gradient plus factor vectors of the terminal Hessian."""
    if not t1 > t0:
        raise ValueError("terminal_curvature requires t1 > t0")
    if mode not in ("exact_rank", "gauss_newton_scaled"):
        raise ValueError(f"unknown curvature mode {mode!r}")
    x1b, single = _as_batch(x1)
    grad = grad_x1(lossfn, x1b)

    if mode == "gauss_newton_scaled":
        factors = [grad / np.sqrt(t1 - t0)]
    elif lossfn.kind == "mse":
        m = x1b.shape[1]
        if lossfn.readout is None:
            # Hessian is the identity: factors are the unit vectors
            factors = [np.broadcast_to(np.eye(m)[i], x1b.shape).copy() for i in range(m)]
        else:
            # Hessian is V^T V: one factor per readout row
            factors = [np.broadcast_to(row, x1b.shape).copy() for row in lossfn.readout.weight]
    else:
        pred = _predictions(lossfn, x1b)
        _check_labels(lossfn.target, pred.shape[1], pred.shape[0])
        probs = _softmax(pred)
        n_cls = pred.shape[1]
        factors = []
        for k in range(n_cls):
            # column k of diag(sqrt(p)) - p sqrt(p)^T, pushed through the readout
            bk = np.sqrt(probs[:, k:k + 1]) * (np.eye(n_cls)[k] - probs)
            factors.append(bk @ lossfn.readout.weight if lossfn.readout is not None else bk.copy())

    if single:
        grad = grad[0]
        factors = [y[0] if y.ndim == 2 else y for y in factors]
    return TerminalCurvature(grad=grad, factors=factors, mode=mode)


def accuracy(lossfn: TerminalLoss, x1: np.ndarray) -> float:
    """Fraction of correct argmax predictions; NaN for vector targets."""
    if lossfn.kind != "softmax_ce":
        return float("nan")
    x1b, _ = _as_batch(x1)
    pred = _predictions(lossfn, x1b)
    labels = _check_labels(lossfn.target, pred.shape[1], pred.shape[0])
    return float(np.mean(pred.argmax(axis=1) == labels))
