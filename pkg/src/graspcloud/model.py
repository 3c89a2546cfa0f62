"""The point-cloud classifier: shared MLPs, transform nets, max-pool, head.

Input is a batch of clouds shaped (batch, points, 3) for the basic variant
or (batch, points, 6) with unit normals appended for the extended variant.
A small transform net regresses a 3x3 matrix from the xyz block and applies
it to coordinates and normals alike; a second one aligns the 64-d point
features. Max pooling over the points axis produces a 1024-d global
descriptor consumed by the fully connected head.

All gradients are assembled by hand in :func:`backward`, mirroring
:func:`forward_with_cache` step for step.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .cloud import PointCloud
from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    InvalidConfigError,
    MissingNormalsError,
    ShapeMismatchError,
    VersionMismatchError,
    WrongPointCountError,
)
from .labels import GraspLabel

Array = np.ndarray

_CHECKPOINT_MAGIC = b"GCPN1"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PointNetConfig:
    """Architecture hyperparameters.

    ``use_normals`` selects the extended (n x 6) input; everything else
    defaults to the classic classification architecture.
    """

    use_normals: bool = False
    num_classes: int = 4
    points_per_cloud: int = 2048
    use_input_tnet: bool = True
    use_feature_tnet: bool = True
    tnet_reg_weight: float = 0.001
    dropout_keep: float = 0.7
    mlp1: tuple[int, ...] = (64, 64)
    mlp2: tuple[int, ...] = (64, 128, 1024)
    head: tuple[int, ...] = (512, 256, 4)
    tnet_mlp: tuple[int, ...] = (64, 128, 1024)
    tnet_head: tuple[int, ...] = (512, 256)

    def __post_init__(self):
        object.__setattr__(self, "mlp1", tuple(self.mlp1))
        object.__setattr__(self, "mlp2", tuple(self.mlp2))
        object.__setattr__(self, "head", tuple(self.head))
        object.__setattr__(self, "tnet_mlp", tuple(self.tnet_mlp))
        object.__setattr__(self, "tnet_head", tuple(self.tnet_head))
        widths = self.mlp1 + self.mlp2 + self.head + self.tnet_mlp + self.tnet_head
        if not all(isinstance(w, int) and w > 0 for w in widths):
            raise InvalidConfigError("all layer widths must be positive integers")
        if not (self.mlp1 and self.mlp2 and len(self.head) >= 1 and self.tnet_mlp):
            raise InvalidConfigError("mlp1, mlp2, head, and tnet_mlp must be non-empty")
        if self.num_classes < 2:
            raise InvalidConfigError("need at least two classes")
        if self.head[-1] != self.num_classes:
            raise InvalidConfigError(
                f"head must end in num_classes={self.num_classes}, got {self.head[-1]}"
            )
        if not 0.0 < self.dropout_keep <= 1.0:
            raise InvalidConfigError("dropout_keep must be in (0, 1]")
        if self.points_per_cloud < 1:
            raise InvalidConfigError("points_per_cloud must be positive")
        if self.tnet_reg_weight < 0.0:
            raise InvalidConfigError("tnet_reg_weight must be nonnegative")

    @property
    def input_width(self) -> int:
        return 6 if self.use_normals else 3


@dataclass
class DenseBNBlock:
    dense: nn.DenseLayer
    bn: nn.BatchNormLayer


@dataclass
class TNet:
    """Mini point network regressing a d x d transform matrix.

    The final dense layer starts at zero weights with an identity bias, so
    the regressed transform is exactly the identity at initialization.
    """

    d: int
    mlps: list[DenseBNBlock]
    head: list[DenseBNBlock]
    out: nn.DenseLayer


@dataclass
class Model:
    config: PointNetConfig
    dtype: np.dtype
    input_tnet: TNet | None
    mlp1: list[DenseBNBlock]
    feature_tnet: TNet | None
    mlp2: list[DenseBNBlock]
    head_hidden: list[DenseBNBlock]
    head_out: nn.DenseLayer
    global_step: int = 0


def _dense_bn_chain(widths, fan_in, rng, dtype) -> list[DenseBNBlock]:
    blocks = []
    for w in widths:
        blocks.append(DenseBNBlock(nn.he_dense(fan_in, w, rng, dtype), nn.batchnorm_init(w, dtype)))
        fan_in = w
    return blocks


def _build_tnet(d: int, config: PointNetConfig, rng, dtype) -> TNet:
    mlps = _dense_bn_chain(config.tnet_mlp, d, rng, dtype)
    head = _dense_bn_chain(config.tnet_head, config.tnet_mlp[-1], rng, dtype)
    head_in = config.tnet_head[-1] if config.tnet_head else config.tnet_mlp[-1]
    return TNet(d=d, mlps=mlps, head=head, out=nn.identity_head_dense(head_in, d, dtype))


def build(config: PointNetConfig, rng: np.random.Generator, dtype=np.float32) -> Model:
    """Fresh model: He-normal dense weights, identity transforms at init."""
    input_tnet = _build_tnet(3, config, rng, dtype) if config.use_input_tnet else None
    mlp1 = _dense_bn_chain(config.mlp1, config.input_width, rng, dtype)
    feature_tnet = (
        _build_tnet(config.mlp1[-1], config, rng, dtype) if config.use_feature_tnet else None
    )
    mlp2 = _dense_bn_chain(config.mlp2, config.mlp1[-1], rng, dtype)
    head_hidden = _dense_bn_chain(config.head[:-1], config.mlp2[-1], rng, dtype)
    head_in = config.head[-2] if len(config.head) > 1 else config.mlp2[-1]
    head_out = nn.he_dense(head_in, config.num_classes, rng, dtype)
    return Model(
        config=config,
        dtype=np.dtype(dtype),
        input_tnet=input_tnet,
        mlp1=mlp1,
        feature_tnet=feature_tnet,
        mlp2=mlp2,
        head_hidden=head_hidden,
        head_out=head_out,
    )


# -- parameter bookkeeping -----------------------------------------------------


def _named_blocks(model: Model):
    if model.input_tnet is not None:
        yield from _tnet_blocks("input_tnet", model.input_tnet)
    for i, blk in enumerate(model.mlp1):
        yield f"mlp1.{i}", blk
    if model.feature_tnet is not None:
        yield from _tnet_blocks("feature_tnet", model.feature_tnet)
    for i, blk in enumerate(model.mlp2):
        yield f"mlp2.{i}", blk
    for i, blk in enumerate(model.head_hidden):
        yield f"head.{i}", blk


def _tnet_blocks(prefix: str, tnet: TNet):
    for i, blk in enumerate(tnet.mlps):
        yield f"{prefix}.mlps.{i}", blk
    for i, blk in enumerate(tnet.head):
        yield f"{prefix}.head.{i}", blk


def _param_items(model: Model) -> list[tuple[str, Array]]:
    items = []
    for name, blk in _named_blocks(model):
        items.append((f"{name}.weights", blk.dense.weights))
        items.append((f"{name}.bias", blk.dense.bias))
        items.append((f"{name}.gamma", blk.bn.gamma))
        items.append((f"{name}.beta", blk.bn.beta))
    for tnet, prefix in ((model.input_tnet, "input_tnet"), (model.feature_tnet, "feature_tnet")):
        if tnet is not None:
            items.append((f"{prefix}.out.weights", tnet.out.weights))
            items.append((f"{prefix}.out.bias", tnet.out.bias))
    items.append(("head_out.weights", model.head_out.weights))
    items.append(("head_out.bias", model.head_out.bias))
    return items


def _state_items(model: Model) -> list[tuple[str, Array]]:
    """Trainable parameters plus batch-norm running statistics."""
    items = list(_param_items(model))
    for name, blk in _named_blocks(model):
        items.append((f"{name}.running_mean", blk.bn.running_mean))
        items.append((f"{name}.running_var", blk.bn.running_var))
    return items


def parameters(model: Model) -> list[Array]:
    """Trainable arrays in a stable order (shared with gradients())."""
    return [arr for _, arr in _param_items(model)]


# -- forward / backward ----------------------------------------------------------


def _block_forward(blk: DenseBNBlock, x: Array, mode: str):
    pre = nn.dense_forward(blk.dense, x)
    normed, bn_cache = nn.batchnorm_forward(blk.bn, pre, mode, return_cache=True)
    return nn.relu_forward(normed), (x, bn_cache, normed)


def _block_backward(blk: DenseBNBlock, cache, upstream, grads: dict, name: str) -> Array:
    x, bn_cache, normed = cache
    dnormed = nn.relu_backward(normed, upstream)
    dpre, dgamma, dbeta = nn.batchnorm_backward(blk.bn, bn_cache, dnormed)
    dx, dw, db = nn.dense_backward(blk.dense, x, dpre)
    grads[f"{name}.weights"] = dw
    grads[f"{name}.bias"] = db
    grads[f"{name}.gamma"] = dgamma
    grads[f"{name}.beta"] = dbeta
    return dx


def tnet_forward(tnet: TNet, x: Array, mode: str = "eval"):
    """Regress one d x d transform per cloud from (batch, points, d) input."""
    t, cache = _tnet_forward(tnet, x, mode)
    return t


def _tnet_forward(tnet: TNet, x: Array, mode: str):
    mlp_caches = []
    t = x
    for blk in tnet.mlps:
        t, c = _block_forward(blk, t, mode)
        mlp_caches.append(c)
    pooled, argmax = nn.maxpool_points_forward(t)
    head_caches = []
    h = pooled
    for blk in tnet.head:
        h, c = _block_forward(blk, h, mode)
        head_caches.append(c)
    flat = nn.dense_forward(tnet.out, h)
    transform = flat.reshape(x.shape[0], tnet.d, tnet.d)
    cache = {
        "mlp_caches": mlp_caches,
        "argmax": argmax,
        "num_points": x.shape[1],
        "head_caches": head_caches,
        "out_in": h,
    }
    return transform, cache


def _tnet_backward(tnet: TNet, prefix: str, cache, dtransform: Array, grads: dict) -> Array:
    b = dtransform.shape[0]
    dflat = dtransform.reshape(b, tnet.d * tnet.d)
    dh, dw, dbias = nn.dense_backward(tnet.out, cache["out_in"], dflat)
    grads[f"{prefix}.out.weights"] = dw
    grads[f"{prefix}.out.bias"] = dbias
    for i in reversed(range(len(tnet.head))):
        dh = _block_backward(tnet.head[i], cache["head_caches"][i], dh, grads, f"{prefix}.head.{i}")
    dt = nn.maxpool_points_backward(cache["argmax"], dh, cache["num_points"])
    for i in reversed(range(len(tnet.mlps))):
        dt = _block_backward(tnet.mlps[i], cache["mlp_caches"][i], dt, grads, f"{prefix}.mlps.{i}")
    return dt


def forward_with_cache(
    model: Model, batch: Array, mode: str, rng: np.random.Generator | None = None
):
    """Full forward pass; returns (logits, feature_transform, cache).

    ``rng`` drives dropout and is required only in train mode with
    ``dropout_keep < 1``.
    """
    cfg = model.config
    x = np.ascontiguousarray(batch, dtype=model.dtype)
    if x.ndim != 3:
        raise ShapeMismatchError(f"batch must be (batch, points, features), got {x.shape}")
    if x.shape[1] != cfg.points_per_cloud:
        raise WrongPointCountError(
            f"model expects {cfg.points_per_cloud} points per cloud, got {x.shape[1]}"
        )
    if x.shape[2] != cfg.input_width:
        raise ShapeMismatchError(
            f"model expects {cfg.input_width} input features, got {x.shape[2]}"
        )
    cache = {}

    if model.input_tnet is not None:
        xyz = x[:, :, :3]
        t_in, cache["input_tnet"] = _tnet_forward(model.input_tnet, xyz, mode)
        parts = [np.matmul(xyz, t_in)]
        if cfg.use_normals:
            parts.append(np.matmul(x[:, :, 3:], t_in))
        cache["input_transform_in"] = x
        h = np.concatenate(parts, axis=-1)
    else:
        h = x

    cache["mlp1"] = []
    for blk in model.mlp1:
        h, c = _block_forward(blk, h, mode)
        cache["mlp1"].append(c)

    feature_transform = None
    if model.feature_tnet is not None:
        feature_transform, cache["feature_tnet"] = _tnet_forward(model.feature_tnet, h, mode)
        cache["feature_transform_in"] = h
        cache["feature_transform"] = feature_transform
        h = np.matmul(h, feature_transform)

    cache["mlp2"] = []
    for blk in model.mlp2:
        h, c = _block_forward(blk, h, mode)
        cache["mlp2"].append(c)

    pooled, argmax = nn.maxpool_points_forward(h)
    cache["pool_argmax"] = argmax
    cache["num_points"] = h.shape[1]

    h = pooled
    cache["head"] = []
    for blk in model.head_hidden:
        h, c = _block_forward(blk, h, mode)
        cache["head"].append(c)

    h, mask = nn.dropout_forward(h, cfg.dropout_keep, mode, rng)
    cache["dropout_mask"] = mask
    cache["head_out_in"] = h
    logits = nn.dense_forward(model.head_out, h)
    return logits, feature_transform, cache


def forward(
    model: Model, batch: Array, mode: str = "eval", rng: np.random.Generator | None = None
):
    """Forward pass returning ``(logits, feature_transform)``."""
    logits, feature_transform, _ = forward_with_cache(model, batch, mode, rng)
    return logits, feature_transform


def backward(model: Model, cache, dlogits: Array, dfeature_transform: Array | None = None):
    """Parameter gradients for a cached train-mode forward pass.

    ``dfeature_transform`` carries the regularizer's direct gradient on the
    feature transform; the matmul route is added here. Returns gradients
    aligned with :func:`parameters`.
    """
    cfg = model.config
    grads: dict[str, Array] = {}

    dh, dw, db = nn.dense_backward(model.head_out, cache["head_out_in"], dlogits)
    grads["head_out.weights"] = dw
    grads["head_out.bias"] = db
    dh = nn.dropout_backward(cache["dropout_mask"], cfg.dropout_keep, dh)

    for i in reversed(range(len(model.head_hidden))):
        dh = _block_backward(model.head_hidden[i], cache["head"][i], dh, grads, f"head.{i}")

    dt = nn.maxpool_points_backward(cache["pool_argmax"], dh, cache["num_points"])

    for i in reversed(range(len(model.mlp2))):
        dt = _block_backward(model.mlp2[i], cache["mlp2"][i], dt, grads, f"mlp2.{i}")

    if model.feature_tnet is not None:
        t_in = cache["feature_transform_in"]
        transform = cache["feature_transform"]
        dtransform = np.matmul(t_in.transpose(0, 2, 1), dt)
        if dfeature_transform is not None:
            dtransform = dtransform + dfeature_transform
        dt = np.matmul(dt, transform.transpose(0, 2, 1))
        dt = dt + _tnet_backward(
            model.feature_tnet, "feature_tnet", cache["feature_tnet"], dtransform, grads
        )

    for i in reversed(range(len(model.mlp1))):
        dt = _block_backward(model.mlp1[i], cache["mlp1"][i], dt, grads, f"mlp1.{i}")

    if model.input_tnet is not None:
        x = cache["input_transform_in"]
        xyz = x[:, :, :3]
        dtrans = np.matmul(xyz.transpose(0, 2, 1), dt[:, :, :3])
        if cfg.use_normals:
            dtrans += np.matmul(x[:, :, 3:].transpose(0, 2, 1), dt[:, :, 3:])
        _tnet_backward(model.input_tnet, "input_tnet", cache["input_tnet"], dtrans, grads)

    names = [name for name, _ in _param_items(model)]
    missing = set(names) - set(grads)
    if missing:
        raise ShapeMismatchError(f"gradients missing for {sorted(missing)}")
    return [grads[name] for name in names]


def loss(
    logits: Array,
    labels,
    feature_transform: Array | None,
    reg_weight: float,
) -> tuple[float, tuple[Array, Array | None]]:
    """Cross entropy plus the transform orthogonality regularizer.

    The penalty is ``reg_weight * mean_b ||I - A A^T||_F^2`` over the batch;
    it is exactly zero for orthogonal transforms. Returns the scalar loss
    and gradients ``(dlogits, dfeature_transform)``.
    """
    ce, dlogits = nn.softmax_cross_entropy(logits, labels)
    if feature_transform is None or reg_weight == 0.0:
        return ce, (dlogits, None)
    a = feature_transform
    b, d, _ = a.shape
    eye = np.eye(d, dtype=a.dtype)
    residual = eye - np.matmul(a, a.transpose(0, 2, 1))
    reg = reg_weight * float(np.mean(np.sum(residual**2, axis=(1, 2))))
    dtransform = (reg_weight / b) * (-4.0) * np.matmul(residual, a)
    return ce + reg, (dlogits, dtransform.astype(a.dtype))


# -- prediction -------------------------------------------------------------------


def cloud_features(cloud: PointCloud, use_normals: bool, dtype=np.float32) -> Array:
    """A cloud's (points, 3 or 6) feature matrix for the chosen variant."""
    if use_normals:
        if not cloud.has_normals:
            raise MissingNormalsError("extended model requires normals on the cloud")
        return np.hstack([cloud.points, cloud.normals]).astype(dtype)
    return cloud.points.astype(dtype)


def predict(model: Model, cloud: PointCloud) -> tuple[GraspLabel, Array]:
    """Classify one preprocessed cloud; ties go to the lowest class code."""
    cfg = model.config
    if len(cloud) != cfg.points_per_cloud:
        raise WrongPointCountError(
            f"cloud has {len(cloud)} points, model expects {cfg.points_per_cloud}"
        )
    feats = cloud_features(cloud, cfg.use_normals, model.dtype)
    logits, _ = forward(model, feats[None], "eval")
    probs = nn.softmax(logits.astype(np.float64))[0]
    return GraspLabel(int(np.argmax(probs))), probs


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(model: Model) -> bytes:
    """Serialize config, parameters, and running statistics.

    Layout: magic ``GCPN1``, u16 format version, JSON config block, then
    named little-endian float32 arrays in declaration order, and a CRC32
    trailer over everything before it.
    """
    cfg = asdict(model.config)
    meta = {"config": cfg, "global_step": model.global_step}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += _CHECKPOINT_MAGIC
    out += struct.pack("<H", _CHECKPOINT_VERSION)
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    items = _state_items(model)
    out += struct.pack("<I", len(items))
    for name, arr in items:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BadMagicError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(data: bytes, expected_config: PointNetConfig | None = None) -> Model:
    """Rebuild a model from checkpoint bytes.

    With ``expected_config`` given, the stored configuration must match it
    exactly; otherwise the stored configuration is used as-is.
    """
    if len(data) < len(_CHECKPOINT_MAGIC) + 6 or not data.startswith(_CHECKPOINT_MAGIC):
        raise BadMagicError("not a model checkpoint")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumMismatchError("checkpoint payload does not match its checksum")

    reader = _Reader(data[:-4])
    reader.take(len(_CHECKPOINT_MAGIC))
    (version,) = reader.unpack("<H")
    if version != _CHECKPOINT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    (meta_len,) = reader.unpack("<I")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
        cfg_fields = dict(meta["config"])
        for key in ("mlp1", "mlp2", "head", "tnet_mlp", "tnet_head"):
            cfg_fields[key] = tuple(cfg_fields[key])
        config = PointNetConfig(**cfg_fields)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise BadMagicError(f"unreadable checkpoint config: {exc}") from None
    if expected_config is not None and config != expected_config:
        raise ShapeMismatchError(
            "checkpoint configuration does not match the expected configuration"
        )

    model = build(config, np.random.default_rng(0), dtype=np.float32)
    model.global_step = int(meta.get("global_step", 0))
    expected = _state_items(model)
    (count,) = reader.unpack("<I")
    if count != len(expected):
        raise ShapeMismatchError(
            f"checkpoint stores {count} arrays, model needs {len(expected)}"
        )
    for name, arr in expected:
        (name_len,) = reader.unpack("<H")
        stored_name = reader.take(name_len).decode("utf-8")
        if stored_name != name:
            raise ShapeMismatchError(f"expected array {name!r}, found {stored_name!r}")
        (ndim,) = reader.unpack("<B")
        shape = tuple(reader.unpack("<" + "I" * ndim)) if ndim else ()
        if shape != arr.shape:
            raise ShapeMismatchError(f"array {name!r} has shape {shape}, expected {arr.shape}")
        raw = reader.take(int(np.prod(shape, dtype=np.int64)) * 4)
        arr[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return model
