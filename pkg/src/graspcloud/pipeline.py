"""Dataset splitting, the training loop, metrics, and cross-validation.

Training consumes preprocessed clouds (normalized, resampled to the model's
point count, normals attached for the extended variant) and applies fresh
rotation/jitter augmentation per sample per epoch. All randomness flows
through explicitly passed generators, so fixed seeds reproduce runs bit
for bit.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .cloud import (
    AugmentationParams,
    NormalEstimationParams,
    PointCloud,
    augment,
    estimate_normals,
    normalize_unit_sphere,
    sample_uniform,
)
from .errors import (
    BatchTooSmallError,
    ClassTooSmallError,
    EmptyManifestError,
    InvalidConfigError,
    MissingNormalsError,
)
from .formats import DatasetIndex
from .labels import LABEL_NAMES, NUM_CLASSES
from .model import (
    Model,
    PointNetConfig,
    _state_items,
    backward,
    build,
    cloud_features,
    forward,
    forward_with_cache,
    loss,
    parameters,
    predict,
)


@dataclass
class TrainConfig:
    """Training hyperparameters. ``augmentation=None`` disables augmentation."""

    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    augmentation: AugmentationParams | None = field(default_factory=AugmentationParams)
    model: PointNetConfig = field(default_factory=PointNetConfig)
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_granularity: str = "cloud"

    def __post_init__(self):
        if self.batch_size < 2:
            raise BatchTooSmallError("batch_size must be at least 2 for batch norm")
        if self.epochs < 0:
            raise InvalidConfigError("epochs must be nonnegative")
        if self.lr < 0:
            raise InvalidConfigError("lr must be nonnegative")
        s = tuple(float(x) for x in self.split)
        if len(s) != 3 or any(x < 0 for x in s) or abs(sum(s) - 1.0) > 1e-9:
            raise InvalidConfigError(f"split must be 3 nonnegative ratios summing to 1, got {s}")
        self.split = s
        if self.split_granularity not in ("cloud", "object"):
            raise InvalidConfigError("split_granularity must be 'cloud' or 'object'")


@dataclass
class Metrics:
    """Evaluation results plus (for training runs) per-epoch histories."""

    per_class_accuracy: np.ndarray
    overall_accuracy: float
    confusion: np.ndarray  # rows = true class, cols = predicted
    loss_history: list[float] = field(default_factory=list)
    accuracy_history: list[float] = field(default_factory=list)
    val_loss_history: list[float] = field(default_factory=list)
    val_accuracy_history: list[float] = field(default_factory=list)


@dataclass
class CrossValSummary:
    """Per-class and overall accuracy, mean and sample standard deviation."""

    per_class_mean: np.ndarray
    per_class_std: np.ndarray
    overall_mean: float
    overall_std: float


# -- partitioning -----------------------------------------------------------------


def _units(index: DatasetIndex, granularity: str) -> dict[int, list[list[int]]]:
    """Row-index units per class; an object's views form one unit."""
    by_class: dict[int, list[list[int]]] = {c: [] for c in range(NUM_CLASSES)}
    if granularity == "cloud":
        for i, row in enumerate(index.rows):
            by_class[int(row.label)].append([i])
    else:
        groups: dict[str, list[int]] = {}
        order: list[str] = []
        for i, row in enumerate(index.rows):
            if row.object_id not in groups:
                groups[row.object_id] = []
                order.append(row.object_id)
            groups[row.object_id].append(i)
        for key in order:
            rows = groups[key]
            by_class[int(index.rows[rows[0]].label)].append(rows)
    return by_class


def _largest_remainder(n: int, ratios) -> list[int]:
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    remainder = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in order[:remainder]:
        counts[i] += 1
    # every part with a positive ratio gets at least one unit when possible
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donor = int(np.argmax(counts))
            if counts[donor] > 1:
                counts[donor] -= 1
                counts[i] += 1
    return counts


def _subindex(index: DatasetIndex, rows: list[int]) -> DatasetIndex:
    return DatasetIndex([index.rows[i] for i in sorted(rows)])


def _partition_rows(
    index: DatasetIndex,
    ratios,
    granularity: str,
    rng: np.random.Generator,
    min_units: int,
) -> list[list[int]]:
    """Stratified row-index partition; parts may be empty for zero ratios."""
    by_class = _units(index, granularity)
    parts: list[list[int]] = [[] for _ in ratios]
    for cls in range(NUM_CLASSES):
        units = by_class[cls]
        if not units:
            continue
        if len(units) < min_units:
            raise ClassTooSmallError(
                f"class {LABEL_NAMES[cls]!r} has {len(units)} units, "
                f"need at least {min_units}"
            )
        perm = rng.permutation(len(units))
        counts = _largest_remainder(len(units), ratios)
        offset = 0
        for part, count in zip(parts, counts):
            for u in perm[offset : offset + count]:
                part.extend(units[u])
            offset += count
    return parts


def split(
    index: DatasetIndex, config: TrainConfig
) -> tuple[DatasetIndex, DatasetIndex, DatasetIndex]:
    """Disjoint stratified train/val/test partition of the manifest.

    With ``object`` granularity, all views of an object land in the same
    part. Deterministic under ``config.seed``.
    """
    if not index.rows:
        raise EmptyManifestError("cannot split an empty index")
    rng = np.random.default_rng(config.seed)
    parts = _partition_rows(index, config.split, config.split_granularity, rng, min_units=3)
    return tuple(_subindex(index, part) for part in parts)


def make_folds(
    index: DatasetIndex, k: int, config: TrainConfig
) -> list[tuple[DatasetIndex, DatasetIndex]]:
    """k stratified (train, test) pairs whose test folds partition the index."""
    if k < 2:
        raise InvalidConfigError("need at least 2 folds")
    rng = np.random.default_rng(config.seed)
    by_class = _units(index, config.split_granularity)
    fold_rows: list[list[int]] = [[] for _ in range(k)]
    for cls in range(NUM_CLASSES):
        units = by_class[cls]
        if not units:
            continue
        if len(units) < k:
            raise ClassTooSmallError(
                f"class {LABEL_NAMES[cls]!r} has {len(units)} units, need at least k={k}"
            )
        perm = rng.permutation(len(units))
        for j, u in enumerate(perm):
            fold_rows[j % k].extend(units[u])
    pairs = []
    for j in range(k):
        test = fold_rows[j]
        train_rows = [i for other in range(k) if other != j for i in fold_rows[other]]
        pairs.append((_subindex(index, train_rows), _subindex(index, test)))
    return pairs


# -- preprocessing -----------------------------------------------------------------


def preprocess(
    cloud: PointCloud,
    model_config: PointNetConfig,
    normal_params: NormalEstimationParams | None = None,
    rng: np.random.Generator | None = None,
) -> PointCloud:
    """Sensor cloud to model input: normals (extended), unit sphere, resample.

    Normals are estimated before normalization and sampling so neighborhoods
    reflect the true sensor geometry.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if model_config.use_normals:
        cloud = estimate_normals(cloud, normal_params or NormalEstimationParams())
    elif cloud.has_normals:
        cloud = PointCloud(cloud.points, label=cloud.label)
    cloud, _, _ = normalize_unit_sphere(cloud)
    return sample_uniform(cloud, model_config.points_per_cloud, rng)


# -- training ------------------------------------------------------------------------


def _labels_of(clouds: list[PointCloud]) -> np.ndarray:
    labels = []
    for i, c in enumerate(clouds):
        if c.label is None:
            raise InvalidConfigError(f"cloud {i} has no grasp label")
        labels.append(int(c.label))
    return np.asarray(labels, dtype=np.int64)


def _features_of(clouds: list[PointCloud], use_normals: bool, dtype) -> np.ndarray:
    return np.stack([cloud_features(c, use_normals, dtype) for c in clouds])


def _eval_stats(model: Model, feats: np.ndarray, labels: np.ndarray, batch_size: int):
    """Eval-mode cross-entropy and accuracy, batched for speed."""
    total_loss = 0.0
    correct = 0
    for start in range(0, len(feats), batch_size):
        xb = feats[start : start + batch_size]
        yb = labels[start : start + batch_size]
        logits, ftrans = forward(model, xb, "eval")
        batch_loss, _ = loss(logits, yb, ftrans, model.config.tnet_reg_weight)
        total_loss += batch_loss * len(xb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return total_loss / len(feats), correct / len(feats)


def _snapshot(model: Model) -> list[np.ndarray]:
    return [arr.copy() for _, arr in _state_items(model)]


def _restore(model: Model, snapshot: list[np.ndarray]) -> None:
    for (_, arr), saved in zip(_state_items(model), snapshot):
        arr[...] = saved


def train(
    model: Model,
    train_clouds: list[PointCloud],
    val_clouds: list[PointCloud],
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Model, Metrics]:
    """Mini-batch training with per-sample augmentation and best-val snapshot.

    Returns the model carrying the parameters of the epoch with the best
    validation accuracy (earliest epoch on ties) and metrics holding the
    per-epoch histories plus the final validation confusion matrix.
    """
    if not train_clouds or not val_clouds:
        raise InvalidConfigError("train and validation sets must be non-empty")
    cfg = model.config
    if cfg.use_normals:
        for group in (train_clouds, val_clouds):
            if any(not c.has_normals for c in group):
                raise MissingNormalsError("extended model requires normals on every cloud")

    y_train = _labels_of(train_clouds)
    y_val = _labels_of(val_clouds)
    val_feats = _features_of(val_clouds, cfg.use_normals, model.dtype)
    static_feats = None
    if config.augmentation is None:
        static_feats = _features_of(train_clouds, cfg.use_normals, model.dtype)

    params = parameters(model)
    adam = nn.AdamState.for_params(params, lr=config.lr)
    metrics = Metrics(
        per_class_accuracy=np.zeros(NUM_CLASSES),
        overall_accuracy=0.0,
        confusion=np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64),
    )
    best_acc = -1.0
    best_state = _snapshot(model)

    n = len(train_clouds)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        seen = 0
        for start in range(0, n, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            if len(batch_idx) < 2:
                continue  # a lone sample cannot feed the head batch norm
            if static_feats is not None:
                xb = static_feats[batch_idx]
            else:
                augmented = [
                    augment(train_clouds[i], config.augmentation, rng) for i in batch_idx
                ]
                xb = _features_of(augmented, cfg.use_normals, model.dtype)
            yb = y_train[batch_idx]
            logits, ftrans, cache = forward_with_cache(model, xb, "train", rng)
            batch_loss, (dlogits, dftrans) = loss(logits, yb, ftrans, cfg.tnet_reg_weight)
            grads = backward(model, cache, dlogits, dftrans)
            nn.adam_step(adam, params, grads)
            model.global_step += 1
            epoch_loss += batch_loss * len(batch_idx)
            epoch_correct += int(np.sum(np.argmax(logits, axis=1) == yb))
            seen += len(batch_idx)
        metrics.loss_history.append(epoch_loss / max(seen, 1))
        metrics.accuracy_history.append(epoch_correct / max(seen, 1))
        val_loss, val_acc = _eval_stats(model, val_feats, y_val, config.batch_size)
        metrics.val_loss_history.append(val_loss)
        metrics.val_accuracy_history.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_state = _snapshot(model)

    _restore(model, best_state)
    final = evaluate(model, val_clouds)
    metrics.per_class_accuracy = final.per_class_accuracy
    metrics.overall_accuracy = final.overall_accuracy
    metrics.confusion = final.confusion
    return model, metrics


def evaluate(model: Model, test_clouds: list[PointCloud]) -> Metrics:
    """Confusion matrix and accuracies from per-cloud predictions."""
    if not test_clouds:
        raise InvalidConfigError("test set must be non-empty")
    labels = _labels_of(test_clouds)
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for cloud, true in zip(test_clouds, labels):
        predicted, _ = predict(model, cloud)
        confusion[true, int(predicted)] += 1
    support = confusion.sum(axis=1)
    per_class = np.divide(
        np.diag(confusion).astype(np.float64),
        support,
        out=np.zeros(NUM_CLASSES),
        where=support > 0,
    )
    overall = float(np.trace(confusion) / confusion.sum())
    return Metrics(per_class_accuracy=per_class, overall_accuracy=overall, confusion=confusion)


def cross_validate(
    clouds: list[PointCloud],
    index: DatasetIndex,
    k: int,
    config: TrainConfig,
) -> tuple[list[Metrics], CrossValSummary]:
    """k-fold cross-validation over raw clouds aligned with the manifest.

    Preprocesses once, trains a fresh model per fold (carving a stratified
    tenth of each fold's training part for validation snapshots), and
    reports mean and sample standard deviation per class and overall.
    """
    if len(clouds) != len(index.rows):
        raise InvalidConfigError("clouds and manifest rows differ in length")
    pre_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    prepped = [preprocess(c, config.model, rng=pre_rng) for c in clouds]
    for cloud, row in zip(prepped, index.rows):
        cloud.label = row.label
    row_pos = {row.path: i for i, row in enumerate(index.rows)}

    folds = make_folds(index, k, config)
    fold_metrics = []
    for j, (train_index, test_index) in enumerate(folds):
        fold_cfg = replace(config, seed=config.seed + 1000 * (j + 1))
        inner = _partition_rows(
            train_index,
            (0.9, 0.1),
            config.split_granularity,
            np.random.default_rng(fold_cfg.seed),
            min_units=2,
        )
        train_set = [prepped[row_pos[train_index.rows[i].path]] for i in inner[0]]
        val_set = [prepped[row_pos[train_index.rows[i].path]] for i in inner[1]]
        test_set = [prepped[row_pos[r.path]] for r in test_index.rows]
        mdl = build(config.model, np.random.default_rng(fold_cfg.seed))
        mdl, _ = train(mdl, train_set, val_set, fold_cfg, np.random.default_rng(fold_cfg.seed))
        fold_metrics.append(evaluate(mdl, test_set))

    return fold_metrics, summarize_folds(fold_metrics)


def summarize_folds(fold_metrics: list[Metrics]) -> CrossValSummary:
    """Mean and sample standard deviation (n-1) across folds."""
    per_class = np.stack([m.per_class_accuracy for m in fold_metrics])
    overall = np.array([m.overall_accuracy for m in fold_metrics])
    ddof = 1 if len(fold_metrics) > 1 else 0
    return CrossValSummary(
        per_class_mean=per_class.mean(axis=0),
        per_class_std=per_class.std(axis=0, ddof=ddof),
        overall_mean=float(overall.mean()),
        overall_std=float(overall.std(ddof=ddof)),
    )


# -- metric export ---------------------------------------------------------------------


def metrics_to_json(metrics: Metrics) -> bytes:
    payload = {
        "per_class_accuracy": metrics.per_class_accuracy.tolist(),
        "overall_accuracy": metrics.overall_accuracy,
        "confusion": metrics.confusion.tolist(),
        "loss_history": metrics.loss_history,
        "accuracy_history": metrics.accuracy_history,
        "val_loss_history": metrics.val_loss_history,
        "val_accuracy_history": metrics.val_accuracy_history,
        "class_names": list(LABEL_NAMES),
    }
    return json.dumps(payload, indent=2, sort_keys=True).encode("utf-8")


def metrics_from_json(data: bytes) -> Metrics:
    payload = json.loads(data.decode("utf-8"))
    return Metrics(
        per_class_accuracy=np.asarray(payload["per_class_accuracy"], dtype=np.float64),
        overall_accuracy=float(payload["overall_accuracy"]),
        confusion=np.asarray(payload["confusion"], dtype=np.int64),
        loss_history=list(payload.get("loss_history", [])),
        accuracy_history=list(payload.get("accuracy_history", [])),
        val_loss_history=list(payload.get("val_loss_history", [])),
        val_accuracy_history=list(payload.get("val_accuracy_history", [])),
    )


def confusion_to_csv(metrics: Metrics) -> bytes:
    """Confusion matrix CSV: one row per true class, predicted classes as header."""
    out = io.StringIO()
    header = ["true\\predicted"] + [name.replace(" ", "_") for name in LABEL_NAMES]
    out.write(",".join(header) + "\n")
    for cls in range(NUM_CLASSES):
        row = [LABEL_NAMES[cls].replace(" ", "_")] + [
            str(int(v)) for v in metrics.confusion[cls]
        ]
        out.write(",".join(row) + "\n")
    return out.getvalue().encode("utf-8")
