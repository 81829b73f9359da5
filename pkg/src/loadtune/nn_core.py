"""Dense, multi-head attention, layer-norm and dropout layers with hand-written
backward passes, plus MSE loss and a plain gradient-descent step.

Every forward function returns ``(output, cache)``; the matching backward
function consumes the cache and returns ``(d_input, grads)`` where ``grads``
maps parameter field names to arrays of the parameter's shape. All math is
float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, UsageError

ACTIVATIONS = ("relu", "linear")


# ----------------------------------------------------------------------
# Parameter bundles
# ----------------------------------------------------------------------


@dataclass
class DenseParams:
    W: np.ndarray
    b: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise DimensionError(
                f"dense weight {self.W.shape} and bias {self.b.shape} disagree"
            )

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}


@dataclass
class AttentionParams:
    Wq: np.ndarray
    bq: np.ndarray
    Wk: np.ndarray
    bk: np.ndarray
    Wv: np.ndarray
    bv: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    head_count: int
    head_dim: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.head_count < 1 or self.head_dim < 1:
            raise ConfigError("head_count and head_dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        width = self.head_count * self.head_dim
        model_dim = self.Wq.shape[0]
        for name in ("Wq", "Wk", "Wv"):
            if getattr(self, name).shape != (model_dim, width):
                raise DimensionError(f"{name} must be ({model_dim}, {width})")
        for name in ("bq", "bk", "bv"):
            if getattr(self, name).shape != (width,):
                raise DimensionError(f"{name} must have length {width}")
        if self.Wo.shape != (width, model_dim) or self.bo.shape != (model_dim,):
            raise DimensionError(f"output projection must be ({width}, {model_dim})")

    @property
    def model_dim(self) -> int:
        return self.Wq.shape[0]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {
            "Wq": self.Wq, "bq": self.bq,
            "Wk": self.Wk, "bk": self.bk,
            "Wv": self.Wv, "bv": self.bv,
            "Wo": self.Wo, "bo": self.bo,
        }


@dataclass
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("layer norm epsilon must be positive")
        if self.gain.ndim != 1 or self.gain.shape != self.bias.shape:
            raise DimensionError("layer norm gain and bias must be equal-length vectors")

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"gain": self.gain, "bias": self.bias}


# ----------------------------------------------------------------------
# Initialisation
# ----------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_dense(rng, in_dim, out_dim, activation="linear") -> DenseParams:
    return DenseParams(glorot_uniform(rng, in_dim, out_dim), np.zeros(out_dim), activation)


def init_attention(rng, model_dim, head_count, head_dim, dropout_rate=0.0) -> AttentionParams:
    width = head_count * head_dim
    return AttentionParams(
        Wq=glorot_uniform(rng, model_dim, width), bq=np.zeros(width),
        Wk=glorot_uniform(rng, model_dim, width), bk=np.zeros(width),
        Wv=glorot_uniform(rng, model_dim, width), bv=np.zeros(width),
        Wo=glorot_uniform(rng, width, model_dim), bo=np.zeros(model_dim),
        head_count=head_count, head_dim=head_dim, dropout_rate=dropout_rate,
    )


def init_layer_norm(dim, epsilon=1e-5) -> LayerNormParams:
    return LayerNormParams(np.ones(dim), np.zeros(dim), epsilon)


# ----------------------------------------------------------------------
# Activations
# ----------------------------------------------------------------------


def relu(x):
    """max(0, x), elementwise for arrays."""
    if np.isscalar(x):
        return x if x > 0 else 0.0 * x
    return np.maximum(x, 0.0)


def relu_grad(x):
    # subgradient at 0 is taken as 0
    return (np.asarray(x) > 0).astype(float)


# ----------------------------------------------------------------------
# Dense (works on any leading shape; last axis is the feature axis)
# ----------------------------------------------------------------------


def dense_forward(x: np.ndarray, p: DenseParams):
    if x.shape[-1] != p.in_dim:
        raise DimensionError(f"dense expects last dim {p.in_dim}, got {x.shape}")
    z = x @ p.W + p.b
    y = relu(z) if p.activation == "relu" else z
    return y, (x, z)


def dense_backward(dy: np.ndarray, cache, p: DenseParams):
    x, z = cache
    dz = dy * relu_grad(z) if p.activation == "relu" else dy
    x2 = x.reshape(-1, p.in_dim)
    dz2 = dz.reshape(-1, p.out_dim)
    grads = {"W": x2.T @ dz2, "b": dz2.sum(axis=0)}
    return dz @ p.W.T, grads


# ----------------------------------------------------------------------
# Dropout
# ----------------------------------------------------------------------


def dropout_apply(x: np.ndarray, rate: float, training: bool, rng=None):
    """Inverted dropout. Returns ``(output, mask)``; mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise UsageError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


# ----------------------------------------------------------------------
# Multi-head self-attention
# ----------------------------------------------------------------------


def softmax(s: np.ndarray, axis=-1) -> np.ndarray:
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _split_heads(t, h, d):
    b, n, _ = t.shape
    return t.reshape(b, n, h, d).transpose(0, 2, 1, 3)


def _merge_heads(t):
    b, h, n, d = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def attention_forward(x: np.ndarray, p: AttentionParams, training=False, rng=None):
    """Scaled dot-product self-attention over ``x`` of shape (batch, time, model_dim).

    The cache carries the post-softmax weights under ``cache["weights"]``.
    """
    if x.ndim != 3 or x.shape[-1] != p.model_dim:
        raise DimensionError(f"attention expects (batch, time, {p.model_dim}), got {x.shape}")
    if x.shape[1] < 1:
        raise DimensionError("attention needs at least one timestep")
    h, d = p.head_count, p.head_dim
    q = _split_heads(x @ p.Wq + p.bq, h, d)
    k = _split_heads(x @ p.Wk + p.bk, h, d)
    v = _split_heads(x @ p.Wv + p.bv, h, d)
    scale = 1.0 / np.sqrt(d)
    weights = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    dropped, mask = dropout_apply(weights, p.dropout_rate, training, rng)
    heads = _merge_heads(dropped @ v)
    y = heads @ p.Wo + p.bo
    # a NaN/Inf anywhere makes the sum non-finite
    if not np.isfinite(y.sum()):
        raise NumericError("non-finite value in multi-head attention output")
    cache = {"x": x, "q": q, "k": k, "v": v, "weights": weights,
             "dropped": dropped, "mask": mask, "heads": heads, "scale": scale}
    return y, cache


def attention_backward(dy: np.ndarray, cache, p: AttentionParams):
    x, q, k, v = cache["x"], cache["q"], cache["k"], cache["v"]
    weights, dropped, mask, heads = cache["weights"], cache["dropped"], cache["mask"], cache["heads"]
    scale = cache["scale"]
    md, width = p.model_dim, p.head_count * p.head_dim

    dy2 = dy.reshape(-1, md)
    grads = {"Wo": heads.reshape(-1, width).T @ dy2, "bo": dy2.sum(axis=0)}
    dheads = _split_heads(dy @ p.Wo.T, p.head_count, p.head_dim)

    ddropped = dheads @ v.transpose(0, 1, 3, 2)
    dv = dropped.transpose(0, 1, 3, 2) @ dheads
    dweights = ddropped if mask is None else ddropped * mask
    dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    x2 = x.reshape(-1, md)
    dx = np.zeros_like(x)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        dflat = _merge_heads(dproj)
        W = getattr(p, "W" + name)
        grads["W" + name] = x2.T @ dflat.reshape(-1, width)
        grads["b" + name] = dflat.reshape(-1, width).sum(axis=0)
        dx += dflat @ W.T
    return dx, grads


# ----------------------------------------------------------------------
# Layer normalisation
# ----------------------------------------------------------------------


def layer_norm_forward(x: np.ndarray, p: LayerNormParams):
    if x.shape[-1] != p.gain.shape[0]:
        raise DimensionError(f"layer norm expects last dim {p.gain.shape[0]}, got {x.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = centered * inv_std
    return p.gain * xhat + p.bias, (xhat, inv_std)


def layer_norm_backward(dy: np.ndarray, cache, p: LayerNormParams):
    xhat, inv_std = cache
    n = xhat.shape[-1]
    grads = {
        "gain": (dy * xhat).reshape(-1, n).sum(axis=0),
        "bias": dy.reshape(-1, n).sum(axis=0),
    }
    dxhat = dy * p.gain
    dx = inv_std / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, grads


# ----------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise DimensionError("mse of empty arrays")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ----------------------------------------------------------------------
# Gradient bookkeeping and the update rule
# ----------------------------------------------------------------------


def pack_flat(arrays: Mapping[str, np.ndarray]) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Copy ``arrays`` into one contiguous buffer; return it with same-shaped views."""
    flat = np.empty(sum(a.size for a in arrays.values()))
    views, offset = {}, 0
    for name, a in arrays.items():
        view = flat[offset:offset + a.size].reshape(a.shape)
        view[...] = a
        views[name] = view
        offset += a.size
    return flat, views


@dataclass
class GradientTape:
    """Per-parameter gradient buffers keyed by parameter name.

    Buffers created by :meth:`like` are views into one flat array (``flat``).
    """

    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    flat: Optional[np.ndarray] = None

    @classmethod
    def like(cls, params: Mapping[str, np.ndarray]) -> "GradientTape":
        flat, views = pack_flat(params)
        flat.fill(0.0)
        return cls(views, flat)

    def zero(self) -> None:
        if self.flat is not None:
            self.flat.fill(0.0)
        else:
            for g in self.grads.values():
                g.fill(0.0)

    def accumulate(self, name: str, g: np.ndarray) -> None:
        buf = self.grads[name]
        if buf.shape != g.shape:
            raise DimensionError(f"gradient for {name}: {g.shape} vs {buf.shape}")
        buf += g

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.grads)

    def items(self) -> Iterable[Tuple[str, np.ndarray]]:
        return self.grads.items()


def optimizer_step(params: Mapping[str, np.ndarray], tape: GradientTape, lr: float) -> None:
    """In-place gradient descent: theta <- theta - lr * grad.

    Nothing is modified if any updated value would be non-finite.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    updated = {}
    for name, theta in params.items():
        g = tape[name]
        if g.shape != theta.shape:
            raise DimensionError(f"gradient for {name}: {g.shape} vs {theta.shape}")
        new = theta - lr * g
        # cheap sum test first; the full scan only runs when it trips
        if not np.isfinite(new.sum()) and not np.all(np.isfinite(new)):
            raise NumericError(f"non-finite update for parameter {name}")
        updated[name] = new
    for name, new in updated.items():
        params[name][...] = new
