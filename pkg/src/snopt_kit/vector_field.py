"""Parametric MLP vector field with analytic VJPs.

The field is a plain fully-connected stack: ``h^k = W_k z^k + b_k`` and
``z^{k+1} = act_k(h^k)``, optionally with the scalar time appended to the
input.  Parameters live in one flat vector; the per-layer segment is the
column-major ``vec`` of ``[W_k, b_k]``, so the parameter gradient of layer
``k`` seeded with a cotangent ``q`` is exactly ``zbar^k ⊗ g^k`` where
``zbar`` is the activation with a homogeneous 1 appended and
``g^k = (dF/dh^k)^T q``.  That identity is what the Kronecker factorization
downstream rests on, so it is asserted in the tests rather than assumed.

Evaluation is batched over a leading axis (1-D inputs are promoted and
squeezed back), and cotangents may carry an extra leading group axis on
top of the batch.  Backward-solve hot loops unpack the flat parameters
once via :func:`unpack_params` and call the underscored variants.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

ACTIVATIONS = ("tanh", "relu", "softplus", "identity")

Weights = tuple[tuple[np.ndarray, np.ndarray | None], ...]


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths, per-layer activations, and time handling.

    ``dims[0]`` is the network input width: the state dimension plus one
    when ``time_input == "concat"``.  ``dims[-1]`` must equal the state
    dimension, since the field maps states to state derivatives.
    """

    dims: tuple[int, ...]
    activations: tuple[str, ...]
    time_input: str = "none"
    bias: bool = True

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ValueError("need at least one layer")
        if len(self.activations) != len(self.dims) - 1:
            raise ValueError("one activation per layer required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.time_input not in ("none", "concat"):
            raise ValueError(f"unknown time_input {self.time_input!r}")
        expected_in = self.dims[-1] + (1 if self.time_input == "concat" else 0)
        if self.dims[0] != expected_in:
            raise ValueError(
                f"input width {self.dims[0]} does not match state dim "
                f"{self.dims[-1]} with time_input={self.time_input!r}"
            )

    @property
    def state_dim(self) -> int:
        return self.dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1


@lru_cache(maxsize=None)
def layer_slices(spec: MlpSpec) -> tuple[tuple[slice, int, int], ...]:
    """Per-layer ``(slice, out_dim, in_dim)`` into the flat parameter vector.

    The slices partition ``[0, num_params)`` exactly.
    """
    out = []
    offset = 0
    for k in range(spec.n_layers):
        p, l = spec.dims[k], spec.dims[k + 1]
        size = l * p + (l if spec.bias else 0)
        out.append((slice(offset, offset + size), l, p))
        offset += size
    return tuple(out)


def num_params(spec: MlpSpec) -> int:
    sl, _, _ = layer_slices(spec)[-1]
    return sl.stop


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """Uniform ±sqrt(6/(fan_in+fan_out)) weights, zero biases, Philox-seeded."""
    rng = np.random.Generator(np.random.Philox(seed))
    theta = np.zeros(num_params(spec))
    for sl, l, p in layer_slices(spec):
        bound = np.sqrt(6.0 / (p + l))
        w = rng.uniform(-bound, bound, size=(l, p))
        theta[sl.start:sl.start + l * p] = w.reshape(-1, order="F")
    return theta


def unpack_params(spec: MlpSpec, theta: np.ndarray) -> Weights:
    """Per-layer ``(W, b)`` views; unpack once per backward solve."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (num_params(spec),):
        raise DimensionMismatch(
            f"parameter vector has shape {theta.shape}, expected ({num_params(spec)},)")
    out = []
    for sl, l, p in layer_slices(spec):
        w = theta[sl.start:sl.start + l * p].reshape(l, p, order="F")
        b = theta[sl.start + l * p:sl.stop] if spec.bias else None
        out.append((w, b))
    return tuple(out)


def unpack_layer(spec: MlpSpec, theta: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray | None]:
    return unpack_params(spec, theta)[k]


def pack_layer_grads(spec: MlpSpec, mats: list[np.ndarray]) -> np.ndarray:
    """Flatten per-layer ``[dW, db]`` matrices back into one vector."""
    flat = np.empty(num_params(spec))
    for (sl, _, _), mat in zip(layer_slices(spec), mats):
        flat[sl] = mat.reshape(-1, order="F")
    return flat


def _act(name: str, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(h)
    if name == "relu":
        return np.maximum(h, 0.0)
    if name == "softplus":
        # split at |h| > 30 to avoid exp overflow
        return np.where(h > 30.0, h, np.log1p(np.exp(np.minimum(h, 30.0))))
    return h


def _act_deriv(name: str, h: np.ndarray, z_next: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - z_next ** 2
    if name == "relu":
        # subgradient 0 at exactly zero
        return (h > 0.0).astype(float)
    if name == "softplus":
        return np.where(h > 30.0, 1.0, 1.0 / (1.0 + np.exp(-np.minimum(h, 30.0))))
    return np.ones_like(h)


@dataclass
class LayerTrace:
    """Forward intermediates at one evaluation point.

    ``zs[k]`` is the input to layer ``k`` (``zs[0]`` includes the time
    column when concatenated), ``hs[k]`` its pre-activation, ``zs[-1]``
    the field value.  Replaying the affine/activation chain from any
    ``zs[k]`` reproduces the suffix bit-exactly.
    """

    t: float
    zs: list[np.ndarray]
    hs: list[np.ndarray]
    single: bool
    _zbars: list[np.ndarray] | None = None

    @property
    def value(self) -> np.ndarray:
        out = self.zs[-1]
        return out[0] if self.single else out


def _as_batch(x: np.ndarray, width: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim < 2 or x.shape[-1] != width:
        raise DimensionMismatch(f"{what} must have width {width}, got shape {x.shape}")
    return x, single


def _forward(spec: MlpSpec, weights: Weights, t: float, x: np.ndarray,
             single: bool = False) -> LayerTrace:
    if spec.time_input == "concat":
        z = np.concatenate([x, np.full((x.shape[0], 1), float(t))], axis=1)
    else:
        z = x
    zs, hs = [z], []
    for k, (w, b) in enumerate(weights):
        h = z @ w.T
        if b is not None:
            h += b
        hs.append(h)
        z = _act(spec.activations[k], h)
        zs.append(z)
    return LayerTrace(t=float(t), zs=zs, hs=hs, single=single)


def eval(spec: MlpSpec, theta: np.ndarray, t: float, x: np.ndarray) -> tuple[np.ndarray, LayerTrace]:
    """Evaluate the field, returning the value and the full layer trace."""
    xb, single = _as_batch(x, spec.state_dim, "state")
    trace = _forward(spec, unpack_params(spec, theta), t, xb, single)
    return trace.value, trace


def _cotangents(spec: MlpSpec, weights: Weights, trace: LayerTrace,
                q: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse traversal: per-layer ``g^k = (dF/dh^k)^T q`` plus input grad.

    ``q`` may carry leading axes broadcastable against the trace batch;
    one traversal serves both the state and parameter VJPs.
    """
    r = np.asarray(q, dtype=float)
    gs: list[np.ndarray] = [None] * spec.n_layers  # type: ignore[list-item]
    for k in reversed(range(spec.n_layers)):
        g = r * _act_deriv(spec.activations[k], trace.hs[k], trace.zs[k + 1])
        gs[k] = g
        r = g @ weights[k][0]
    return gs, r


def layer_cotangents(spec: MlpSpec, theta: np.ndarray, trace: LayerTrace,
                     q: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    return _cotangents(spec, unpack_params(spec, theta), trace, q)


def _zbar(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    if not spec.bias:
        return z
    return np.concatenate([z, np.ones(z.shape[:-1] + (1,))], axis=-1)


def trace_zbars(spec: MlpSpec, trace: LayerTrace) -> list[np.ndarray]:
    """Per-layer homogeneous activations, computed once per trace."""
    if trace._zbars is None:
        trace._zbars = [_zbar(spec, trace.zs[k]) for k in range(spec.n_layers)]
    return trace._zbars


def _param_grad_from_cotangents(spec: MlpSpec, trace: LayerTrace,
                                gs: list[np.ndarray]) -> np.ndarray:
    """Batch-mean flat parameter gradient from 2-D per-layer cotangents."""
    zbars = trace_zbars(spec, trace)
    batch = max(zbars[0].shape[0], gs[0].shape[0])
    flat = np.empty(num_params(spec))
    for k, g in enumerate(gs):
        zb = zbars[k]
        if zb.shape[0] != batch:
            zb = np.broadcast_to(zb, (batch, zb.shape[-1]))
        if g.shape[0] != batch:
            g = np.broadcast_to(g, (batch, g.shape[-1]))
        sl, _, _ = layer_slices(spec)[k]
        # (zb^T g).ravel() is the column-major vec of the (l, pbar) gradient
        flat[sl] = (zb.T @ g).ravel()
    flat /= batch
    return flat


def grouped_param_grads(spec: MlpSpec, trace: LayerTrace,
                        gs: list[np.ndarray]) -> np.ndarray:
    """Batch-mean flat gradients for cotangents with a leading group axis.

    ``gs`` comes from the reverse traversal seeded with a (groups, batch,
    m) stack; returns one flat gradient row per group.
    """
    groups = gs[0].shape[0]
    zbars = trace_zbars(spec, trace)
    out = np.empty((groups, num_params(spec)))
    for k, g in enumerate(gs):
        zb = zbars[k]  # (batch, pbar)
        sl, _, _ = layer_slices(spec)[k]
        # (zb^T g).ravel() per group is the column-major vec of the gradient
        out[:, sl] = np.matmul(zb.T, g).reshape(groups, -1)
    out /= zbars[0].shape[0]
    return out


def vjp_state(spec: MlpSpec, theta: np.ndarray, t: float, x: np.ndarray,
              q: np.ndarray) -> np.ndarray:
    """``(dF/dx)^T q`` by reverse traversal of a fresh forward trace."""
    _, trace = eval(spec, theta, t, x)
    return vjp_state_from_trace(spec, theta, trace, q)


def vjp_state_from_trace(spec: MlpSpec, theta: np.ndarray, trace: LayerTrace,
                         q: np.ndarray) -> np.ndarray:
    qb, single = _as_batch(q, spec.state_dim, "cotangent")
    _, r = layer_cotangents(spec, theta, trace, qb)
    out = r[..., :spec.state_dim] if spec.time_input == "concat" else r
    return out[0] if single else out


def vjp_param(spec: MlpSpec, theta: np.ndarray, t: float, x: np.ndarray,
              q: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """``(dF/dtheta)^T q`` (batch-mean) plus per-layer cotangents ``g^k``."""
    _, trace = eval(spec, theta, t, x)
    return vjp_param_from_trace(spec, theta, trace, q)


def vjp_param_from_trace(spec: MlpSpec, theta: np.ndarray, trace: LayerTrace,
                         q: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    qb, single = _as_batch(q, spec.state_dim, "cotangent")
    gs, _ = layer_cotangents(spec, theta, trace, qb)
    flat = _param_grad_from_cotangents(spec, trace, gs)
    if single:
        gs = [g[0] for g in gs]
    return flat, gs


def jacobians(spec: MlpSpec, theta: np.ndarray, t: float,
              x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Field value plus dense Jacobians ``dF/dx`` and ``dF/dtheta``.

    Single-sample only; the identity matrix is pushed through the reverse
    traversal in one shot.  Meant for the dense curvature sweep where the
    state is a handful of components.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatch("jacobians expects a single state vector")
    weights = unpack_params(spec, theta)
    trace = _forward(spec, weights, t, x[None, :], single=True)
    m = spec.state_dim
    fu = np.empty((m, num_params(spec)))
    r = np.eye(m)
    for k in reversed(range(spec.n_layers)):
        g = r * _act_deriv(spec.activations[k], trace.hs[k], trace.zs[k + 1])  # (m, l)
        zb = _zbar(spec, trace.zs[k])[0]  # (pbar,)
        sl, _, _ = layer_slices(spec)[k]
        # row j of the segment is vec_F(g_j zbar^T) = zbar ⊗ g_j
        fu[:, sl] = (g[:, None, :] * zb[None, :, None]).reshape(m, -1)
        r = g @ weights[k][0]
    fx = r[:, :m] if spec.time_input == "concat" else r
    return trace.value, fx, fu
