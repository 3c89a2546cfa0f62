"""Minimal dense neural-network kernel with hand-derived gradients.

Tensors are plain numpy arrays (row-major, float32 for training or
float64 for gradient verification). Layers are parameter holders; the
``*_forward`` / ``*_backward`` functions are pure given those parameters,
and every operation verifies that its output stays finite.

Backward functions take the forward pass's cached input explicitly, so a
caller composes graphs by keeping whatever it needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InsufficientBatchError,
    InvalidLabelError,
    NonFiniteTensorError,
    ShapeMismatchError,
)

Array = np.ndarray

_MODES = ("train", "eval")


def _require_finite(name: str, arr: Array) -> Array:
    # cheap screen first: any NaN/Inf makes the sum non-finite
    if not np.isfinite(arr.sum()):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteTensorError(f"{name} produced NaN or Inf")
    return arr


def _check_mode(mode: str):
    if mode not in _MODES:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


# -- dense (shared MLP when applied over a points axis) ------------------------


@dataclass
class DenseLayer:
    """Affine map ``y = x @ weights + bias`` over the trailing dimension."""

    weights: Array  # (fan_in, fan_out)
    bias: Array  # (fan_out,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeMismatchError(
                f"dense weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )


def he_dense(fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> DenseLayer:
    """Dense layer with He-normal weights, std sqrt(2/fan_in)."""
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)).astype(dtype)
    return DenseLayer(w, np.zeros(fan_out, dtype=dtype))


def identity_head_dense(fan_in: int, d: int, dtype=np.float32) -> DenseLayer:
    """Zero-weight dense whose bias is a flattened identity matrix.

    Used as the final layer of transform-regression heads so the predicted
    transform is exactly the identity at initialization.
    """
    w = np.zeros((fan_in, d * d), dtype=dtype)
    b = np.eye(d, dtype=dtype).reshape(-1)
    return DenseLayer(w, b)


def dense_forward(layer: DenseLayer, x: Array) -> Array:
    if x.shape[-1] != layer.weights.shape[0]:
        raise ShapeMismatchError(
            f"input width {x.shape[-1]} != layer fan_in {layer.weights.shape[0]}"
        )
    return _require_finite("dense_forward", x @ layer.weights + layer.bias)


def dense_backward(layer: DenseLayer, x: Array, upstream: Array) -> tuple[Array, Array, Array]:
    """Gradients of ``dense_forward``: returns (dx, dweights, dbias)."""
    if upstream.shape != x.shape[:-1] + (layer.weights.shape[1],):
        raise ShapeMismatchError(
            f"upstream shape {upstream.shape} inconsistent with input {x.shape}"
        )
    dx = upstream @ layer.weights.T
    x2 = x.reshape(-1, x.shape[-1])
    up2 = upstream.reshape(-1, upstream.shape[-1])
    dw = x2.T @ up2
    db = up2.sum(axis=0)
    return dx, dw, db


# -- ReLU ----------------------------------------------------------------------


def relu_forward(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(x: Array, upstream: Array) -> Array:
    if upstream.shape != x.shape:
        raise ShapeMismatchError("relu upstream shape mismatch")
    return np.where(x > 0.0, upstream, 0.0)


# -- batch normalization ---------------------------------------------------------


@dataclass
class BatchNormLayer:
    """Per-feature normalization over all leading axes jointly.

    For per-point tensors of shape (batch, points, features) the statistics
    pool batch and points together, which keeps weight sharing consistent.
    Variance is biased (divide by m). Running statistics follow
    ``running = momentum * running + (1 - momentum) * batch_stat``.
    """

    gamma: Array
    beta: Array
    running_mean: Array
    running_var: Array
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        shapes = {self.gamma.shape, self.beta.shape, self.running_mean.shape, self.running_var.shape}
        if len(shapes) != 1 or self.gamma.ndim != 1:
            raise ShapeMismatchError("batch-norm parameter shapes disagree")
        if np.any(self.running_var < 0.0):
            raise ValueError("running_var must be nonnegative")


def batchnorm_init(features: int, dtype=np.float32) -> BatchNormLayer:
    return BatchNormLayer(
        gamma=np.ones(features, dtype=dtype),
        beta=np.zeros(features, dtype=dtype),
        running_mean=np.zeros(features, dtype=dtype),
        running_var=np.ones(features, dtype=dtype),
    )


def _bn_check(layer: BatchNormLayer, x: Array):
    if x.shape[-1] != layer.gamma.shape[0]:
        raise ShapeMismatchError(
            f"feature dim {x.shape[-1]} != batch-norm width {layer.gamma.shape[0]}"
        )


def batchnorm_forward(
    layer: BatchNormLayer, x: Array, mode: str, return_cache: bool = False
):
    """Normalize features; in train mode also update running statistics.

    With ``return_cache=True`` also returns the ``(input, mean, inv_std)``
    tuple that ``batchnorm_backward`` consumes.
    """
    _check_mode(mode)
    _bn_check(layer, x)
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        m = int(np.prod(x.shape[:-1]))
        if m < 2:
            raise InsufficientBatchError(f"batch statistics need >= 2 samples, got {m}")
        mean, var = _batch_stats(x, axes)
        mom = layer.momentum
        layer.running_mean = (mom * layer.running_mean + (1.0 - mom) * mean).astype(
            layer.running_mean.dtype
        )
        layer.running_var = (mom * layer.running_var + (1.0 - mom) * var).astype(
            layer.running_var.dtype
        )
    else:
        mean = layer.running_mean.astype(x.dtype)
        var = layer.running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + np.asarray(layer.epsilon, dtype=x.dtype))
    out = (x - mean) * (layer.gamma * inv) + layer.beta
    _require_finite("batchnorm_forward", out)
    if return_cache:
        return out, (x, mean, inv)
    return out


def _batch_stats(x: Array, axes) -> tuple[Array, Array]:
    # accumulate in float64 and round once, so the statistics (and thus the
    # training loss) do not depend on the order of rows within the batch
    mean = x.mean(axis=axes, dtype=np.float64)
    var = np.maximum((x * x).mean(axis=axes, dtype=np.float64) - mean * mean, 0.0)
    return mean.astype(x.dtype), var.astype(x.dtype)  # biased variance


def batchnorm_backward(layer: BatchNormLayer, cache, upstream: Array) -> tuple[Array, Array, Array]:
    """Gradients of train-mode batchnorm through the batch statistics.

    ``cache`` is the ``(input, mean, inv_std)`` tuple from the forward pass.
    """
    x, mean, inv = cache
    _bn_check(layer, x)
    if upstream.shape != x.shape:
        raise ShapeMismatchError("batchnorm upstream shape mismatch")
    axes = tuple(range(x.ndim - 1))
    m = float(np.prod(x.shape[:-1]))
    xhat = (x - mean) * inv

    dgamma = (upstream * xhat).sum(axis=axes)
    dbeta = upstream.sum(axis=axes)
    dxhat = upstream * layer.gamma
    # chain through the batch mean and variance, fused to limit temporaries
    correction = dxhat.sum(axis=axes) / m + xhat * ((dxhat * xhat).sum(axis=axes) / m)
    dxhat -= correction
    dxhat *= inv
    return dxhat, dgamma, dbeta


# -- max pooling over the points axis -------------------------------------------


def maxpool_points_forward(x: Array) -> tuple[Array, Array]:
    """Per-(batch, feature) maximum over axis 1; ties go to the lowest index.

    Returns ``(pooled, argmax)`` with shapes (batch, features).
    """
    if x.ndim != 3:
        raise ShapeMismatchError(f"maxpool expects (batch, points, features), got {x.shape}")
    argmax = x.argmax(axis=1)
    pooled = np.take_along_axis(x, argmax[:, None, :], axis=1)[:, 0, :]
    return pooled, argmax


def maxpool_points_backward(argmax: Array, upstream: Array, num_points: int) -> Array:
    """Route upstream gradient to the argmax positions, zero elsewhere."""
    if upstream.shape != argmax.shape:
        raise ShapeMismatchError("maxpool upstream shape mismatch")
    b, f = upstream.shape
    dx = np.zeros((b, num_points, f), dtype=upstream.dtype)
    np.put_along_axis(dx, argmax[:, None, :], upstream[:, None, :], axis=1)
    return dx


# -- softmax cross entropy -------------------------------------------------------


def softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Array, labels) -> tuple[float, Array]:
    """Mean negative log-likelihood over the batch and its logit gradient."""
    if logits.ndim != 2:
        raise ShapeMismatchError(f"logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise ShapeMismatchError(f"{labels.shape[0]} labels for batch of {b}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise InvalidLabelError(f"labels must be in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    # float64 reduction: the scalar loss must not depend on row order
    loss = float(np.mean(logsumexp - z[np.arange(b), labels], dtype=np.float64))
    grad = softmax(logits)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, _require_finite("softmax_cross_entropy", grad.astype(logits.dtype))


# -- dropout -----------------------------------------------------------------------


def dropout_forward(
    x: Array, keep_prob: float, mode: str, rng: np.random.Generator | None = None
) -> tuple[Array, Array | None]:
    """Inverted dropout. Returns ``(output, mask)``; mask is None in eval.

    Survivors are scaled by 1/keep_prob so eval mode is the identity.
    """
    _check_mode(mode)
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if mode == "eval" or keep_prob == 1.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout requires an rng")
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype)
    return x * mask / np.asarray(keep_prob, dtype=x.dtype), mask


def dropout_backward(mask: Array | None, keep_prob: float, upstream: Array) -> Array:
    if mask is None:
        return upstream
    return upstream * mask / np.asarray(keep_prob, dtype=upstream.dtype)


# -- Adam ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam optimizer state for a fixed parameter list."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moments: list[Array] = field(default_factory=list)
    second_moments: list[Array] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Array], lr: float = 0.001) -> "AdamState":
        return cls(
            lr=lr,
            first_moments=[np.zeros_like(p) for p in params],
            second_moments=[np.zeros_like(p) for p in params],
        )


def adam_step(state: AdamState, params: list[Array], grads: list[Array]) -> None:
    """One in-place Adam update of ``params`` (single-writer contract)."""
    if len(params) != len(grads):
        raise ShapeMismatchError(f"{len(params)} params but {len(grads)} grads")
    if not state.first_moments:
        state.first_moments = [np.zeros_like(p) for p in params]
        state.second_moments = [np.zeros_like(p) for p in params]
    if len(state.first_moments) != len(params):
        raise ShapeMismatchError("optimizer state does not match parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"param {p.shape} vs grad {g.shape}")
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.epsilon)
        _require_finite("adam_step", p)
