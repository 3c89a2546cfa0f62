"""Splits, training loop behavior, metrics, and cross-validation."""

import numpy as np
import pytest

from graspcloud import errors
from graspcloud.cloud import PointCloud
from graspcloud.formats import DatasetIndex, ManifestRow, class_histogram
from graspcloud.labels import NUM_CLASSES, GraspLabel
from graspcloud.model import PointNetConfig, build, parameters
from graspcloud.pipeline import (
    CrossValSummary,
    Metrics,
    TrainConfig,
    confusion_to_csv,
    cross_validate,
    evaluate,
    make_folds,
    metrics_from_json,
    metrics_to_json,
    preprocess,
    split,
    summarize_folds,
    train,
)
from graspcloud.synth import SynthConfig, generate_dataset


def make_index(per_class, views_per_object=1):
    rows = []
    for label in GraspLabel:
        for i in range(per_class):
            for v in range(views_per_object):
                rows.append(
                    ManifestRow(
                        f"{label.token}_{i}_{v}.pcd", label, f"{label.token}_obj{i}", f"v{v}", "s"
                    )
                )
    return DatasetIndex(rows)


def tiny_model_config(use_normals=False, points=64):
    return PointNetConfig(
        use_normals=use_normals,
        points_per_cloud=points,
        mlp1=(8, 8),
        mlp2=(8, 16),
        head=(16, 8, 4),
        tnet_mlp=(4, 8),
        tnet_head=(8,),
        dropout_keep=1.0,
    )


def tiny_train_config(**overrides):
    kwargs = dict(model=tiny_model_config(), epochs=5, batch_size=8, seed=0)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def labeled_cloud(rng, label, points=64):
    # distinct, learnable geometry per class: anisotropic gaussian blobs
    scales = {
        GraspLabel.PINCH: (1.0, 0.05, 1.0),
        GraspLabel.PALMAR_WRIST_NEUTRAL: (0.2, 1.0, 0.2),
        GraspLabel.TRIPOD: (0.5, 0.5, 0.5),
        GraspLabel.PALMAR_WRIST_PRONATED: (1.0, 0.2, 0.2),
    }[label]
    pts = rng.standard_normal((points, 3)) * scales
    pts /= max(1.0, np.linalg.norm(pts, axis=1).max())
    return PointCloud(pts, label=label)


def labeled_set(rng, per_class, points=64):
    clouds = []
    for label in GraspLabel:
        clouds.extend(labeled_cloud(rng, label, points) for _ in range(per_class))
    return clouds


class TestSplit:
    def test_forty_rows_exact_arithmetic(self):
        index = make_index(10)
        tr, va, te = split(index, tiny_train_config())
        assert (len(tr), len(va), len(te)) == (32, 4, 4)
        np.testing.assert_array_equal(class_histogram(tr), [8, 8, 8, 8])
        np.testing.assert_array_equal(class_histogram(va), [1, 1, 1, 1])
        np.testing.assert_array_equal(class_histogram(te), [1, 1, 1, 1])

    def test_object_granularity_keeps_views_together(self):
        index = make_index(5, views_per_object=12)
        cfg = tiny_train_config(split_granularity="object")
        tr, va, te = split(index, cfg)
        for part in (tr, va, te):
            objects = {}
            for row in part.rows:
                objects.setdefault(row.object_id, 0)
                objects[row.object_id] += 1
            for obj, count in objects.items():
                assert count == 12, f"object {obj} split across parts"

    def test_partition_property_random_manifests(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            per_class = int(rng.integers(3, 20))
            index = make_index(per_class)
            cfg = tiny_train_config(seed=trial)
            tr, va, te = split(index, cfg)
            paths = lambda ix: {r.path for r in ix.rows}
            assert paths(tr) | paths(va) | paths(te) == paths(index)
            assert not paths(tr) & paths(va)
            assert not paths(tr) & paths(te)
            assert not paths(va) & paths(te)

    def test_deterministic(self):
        index = make_index(10)
        a = split(index, tiny_train_config(seed=5))
        b = split(index, tiny_train_config(seed=5))
        assert [r.path for r in a[0].rows] == [r.path for r in b[0].rows]

    def test_class_too_small(self):
        rows = [ManifestRow(f"p{i}.pcd", GraspLabel.PINCH, f"o{i}", "v", "s") for i in range(2)]
        rows += [
            ManifestRow(f"q{i}.pcd", GraspLabel.TRIPOD, f"t{i}", "v", "s") for i in range(5)
        ]
        with pytest.raises(errors.ClassTooSmallError):
            split(DatasetIndex(rows), tiny_train_config())


class TestMakeFolds:
    def test_five_folds_on_hundred_rows(self):
        index = make_index(25)  # 100 rows
        folds = make_folds(index, 5, tiny_train_config())
        assert len(folds) == 5
        all_paths = {r.path for r in index.rows}
        seen = []
        for tr, te in folds:
            assert len(te) == 20
            te_paths = {r.path for r in te.rows}
            tr_paths = {r.path for r in tr.rows}
            assert te_paths | tr_paths == all_paths
            assert not te_paths & tr_paths
            seen.append(te_paths)
        union = set().union(*seen)
        assert union == all_paths
        assert sum(len(s) for s in seen) == len(all_paths)  # pairwise disjoint

    def test_stratification_within_one(self):
        index = make_index(13)  # 52 rows, 13 per class
        folds = make_folds(index, 5, tiny_train_config())
        for _, te in folds:
            hist = class_histogram(te)
            assert hist.min() >= 2 and hist.max() <= 3

    def test_class_too_small_for_k(self):
        index = make_index(3)
        with pytest.raises(errors.ClassTooSmallError):
            make_folds(index, 5, tiny_train_config())


class TestPreprocess:
    def test_output_point_count(self):
        rng = np.random.default_rng(1)
        cfg = tiny_model_config(points=256)
        for n in (300, 256, 100):
            cloud = PointCloud(rng.uniform(-1, 1, (n, 3)))
            out = preprocess(cloud, cfg, rng=np.random.default_rng(0))
            assert len(out) == 256

    def test_basic_has_no_normals(self):
        rng = np.random.default_rng(2)
        dirs = rng.standard_normal((300, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cloud = PointCloud(rng.uniform(-1, 1, (300, 3)), normals=dirs)
        out = preprocess(cloud, tiny_model_config(points=64), rng=np.random.default_rng(0))
        assert not out.has_normals

    def test_extended_estimates_normals(self):
        rng = np.random.default_rng(3)
        cloud = PointCloud(rng.uniform(-1, 1, (300, 3)))
        cfg = tiny_model_config(use_normals=True, points=64)
        out = preprocess(cloud, cfg, rng=np.random.default_rng(0))
        assert out.has_normals
        np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-6)

    def test_normalized_output(self):
        rng = np.random.default_rng(4)
        cloud = PointCloud(rng.uniform(3.0, 9.0, (400, 3)))
        out = preprocess(cloud, tiny_model_config(points=64), rng=np.random.default_rng(0))
        assert np.linalg.norm(out.points, axis=1).max() <= 1.0

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        cloud = PointCloud(rng.uniform(-1, 1, (300, 3)))
        a = preprocess(cloud, tiny_model_config(points=64), rng=np.random.default_rng(9))
        b = preprocess(cloud, tiny_model_config(points=64), rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a.points, b.points)


class TestTrainConfig:
    def test_batch_too_small(self):
        with pytest.raises(errors.BatchTooSmallError):
            TrainConfig(batch_size=1)

    def test_split_must_sum_to_one(self):
        with pytest.raises(errors.InvalidConfigError):
            TrainConfig(split=(0.8, 0.1, 0.2))


class TestTrain:
    def test_overfits_tiny_set(self):
        rng = np.random.default_rng(6)
        clouds = labeled_set(rng, 2)
        cfg = tiny_train_config(epochs=200, augmentation=None)
        model = build(cfg.model, np.random.default_rng(0))
        model, metrics = train(model, clouds, clouds, cfg, np.random.default_rng(0))
        assert metrics.accuracy_history[-1] == 1.0

    def test_lr_zero_is_noop(self):
        rng = np.random.default_rng(7)
        clouds = labeled_set(rng, 2)
        cfg = tiny_train_config(lr=0.0, epochs=6, augmentation=None, batch_size=8)
        model = build(cfg.model, np.random.default_rng(1))
        before = [p.copy() for p in parameters(model)]
        model, metrics = train(model, clouds, clouds, cfg, np.random.default_rng(0))
        for p, b in zip(parameters(model), before):
            np.testing.assert_array_equal(p, b)
        losses = np.asarray(metrics.loss_history)
        assert np.abs(losses - losses[0]).max() < 1e-7

    def test_fixed_seed_bit_identical_history(self):
        rng = np.random.default_rng(8)
        clouds = labeled_set(rng, 2)

        def run():
            cfg = tiny_train_config(epochs=4, seed=3)
            model = build(cfg.model, np.random.default_rng(3))
            _, metrics = train(model, clouds, clouds, cfg, np.random.default_rng(3))
            return metrics.loss_history

        assert run() == run()

    def test_loss_decreases_for_most_seeds(self):
        decreased = 0
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            clouds = labeled_set(rng, 4)
            cfg = tiny_train_config(epochs=10, seed=seed)
            model = build(cfg.model, np.random.default_rng(seed))
            _, metrics = train(model, clouds, clouds, cfg, np.random.default_rng(seed))
            if metrics.loss_history[9] < metrics.loss_history[0]:
                decreased += 1
        assert decreased >= 4

    def test_missing_normals_rejected(self):
        rng = np.random.default_rng(9)
        clouds = labeled_set(rng, 2)
        cfg = tiny_train_config(model=tiny_model_config(use_normals=True))
        model = build(cfg.model, np.random.default_rng(0))
        with pytest.raises(errors.MissingNormalsError):
            train(model, clouds, clouds, cfg, np.random.default_rng(0))

    def test_histories_have_epoch_length(self):
        rng = np.random.default_rng(10)
        clouds = labeled_set(rng, 2)
        cfg = tiny_train_config(epochs=3)
        model = build(cfg.model, np.random.default_rng(0))
        _, metrics = train(model, clouds, clouds, cfg, np.random.default_rng(0))
        assert len(metrics.loss_history) == 3
        assert len(metrics.val_accuracy_history) == 3


class TestEvaluate:
    def test_perfect_predictor_diagonal(self):
        rng = np.random.default_rng(11)
        clouds = labeled_set(rng, 2)
        cfg = tiny_train_config(epochs=200, augmentation=None)
        model = build(cfg.model, np.random.default_rng(0))
        model, _ = train(model, clouds, clouds, cfg, np.random.default_rng(0))
        metrics = evaluate(model, clouds)
        assert metrics.overall_accuracy == 1.0
        assert np.trace(metrics.confusion) == len(clouds)
        np.testing.assert_array_equal(metrics.per_class_accuracy, np.ones(4))

    def test_constant_predictor_single_column(self):
        rng = np.random.default_rng(12)
        clouds = labeled_set(rng, 3)
        model = build(tiny_model_config(), np.random.default_rng(0))
        model.head_out.weights[...] = 0.0
        model.head_out.bias[...] = np.array([0, 0, 50.0, 0], dtype=np.float32)
        metrics = evaluate(model, clouds)
        assert metrics.confusion[:, [0, 1, 3]].sum() == 0
        assert metrics.confusion[:, 2].sum() == len(clouds)
        assert metrics.overall_accuracy == pytest.approx(0.25)

    def test_overall_matches_recount(self):
        rng = np.random.default_rng(13)
        clouds = labeled_set(rng, 3)
        model = build(tiny_model_config(), np.random.default_rng(1))
        metrics = evaluate(model, clouds)
        assert metrics.confusion.sum() == len(clouds)
        assert metrics.overall_accuracy == pytest.approx(
            np.trace(metrics.confusion) / metrics.confusion.sum()
        )
        support = metrics.confusion.sum(axis=1)
        np.testing.assert_array_equal(support, class_histogram_of(clouds))


def class_histogram_of(clouds):
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for c in clouds:
        counts[int(c.label)] += 1
    return counts


class TestSummarizeFolds:
    def test_identical_folds_zero_std(self):
        m = Metrics(
            per_class_accuracy=np.array([0.5, 0.6, 0.7, 0.8]),
            overall_accuracy=0.65,
            confusion=np.zeros((4, 4), dtype=np.int64),
        )
        summary = summarize_folds([m, m, m])
        assert summary.overall_std <= 1e-12
        assert summary.per_class_std.max() <= 1e-12

    def test_hand_arithmetic(self):
        folds = [
            Metrics(np.full(4, 0.8), 0.8, np.zeros((4, 4), dtype=np.int64)),
            Metrics(np.full(4, 0.9), 0.9, np.zeros((4, 4), dtype=np.int64)),
        ]
        summary = summarize_folds(folds)
        assert summary.overall_mean == pytest.approx(0.85)
        assert summary.overall_std == pytest.approx(0.070710678, abs=1e-9)


class TestCrossValidate:
    @pytest.mark.slow
    def test_small_cross_validation_run(self):
        config = SynthConfig(per_class=6, seed=21)
        clouds, index = generate_dataset(config)
        cfg = TrainConfig(
            model=tiny_model_config(points=64),
            epochs=2,
            batch_size=8,
            seed=4,
        )
        fold_metrics, summary = cross_validate(clouds, index, 2, cfg)
        assert len(fold_metrics) == 2
        # test folds partition the index
        total = sum(m.confusion.sum() for m in fold_metrics)
        assert total == len(index.rows)
        assert summary.per_class_mean.shape == (4,)
        assert 0.0 <= summary.overall_mean <= 1.0

    @pytest.mark.slow
    def test_deterministic(self):
        config = SynthConfig(per_class=4, seed=22)
        clouds, index = generate_dataset(config)
        cfg = TrainConfig(model=tiny_model_config(points=64), epochs=1, batch_size=8, seed=9)
        a = cross_validate(clouds, index, 2, cfg)
        b = cross_validate(clouds, index, 2, cfg)
        for ma, mb in zip(a[0], b[0]):
            np.testing.assert_array_equal(ma.confusion, mb.confusion)
        assert a[1].overall_mean == b[1].overall_mean


class TestMetricsExport:
    def test_json_round_trip(self):
        m = Metrics(
            per_class_accuracy=np.array([0.5, 0.6, 0.7, 0.8]),
            overall_accuracy=0.65,
            confusion=np.arange(16, dtype=np.int64).reshape(4, 4),
            loss_history=[1.5, 1.2],
            accuracy_history=[0.4, 0.6],
            val_loss_history=[1.6, 1.3],
            val_accuracy_history=[0.3, 0.5],
        )
        back = metrics_from_json(metrics_to_json(m))
        np.testing.assert_array_equal(back.confusion, m.confusion)
        np.testing.assert_array_equal(back.per_class_accuracy, m.per_class_accuracy)
        assert back.loss_history == m.loss_history
        assert back.overall_accuracy == m.overall_accuracy

    def test_confusion_csv_layout(self):
        m = Metrics(
            per_class_accuracy=np.zeros(4),
            overall_accuracy=0.0,
            confusion=np.eye(4, dtype=np.int64) * 5,
        )
        text = confusion_to_csv(m).decode()
        lines = text.strip().split("\n")
        assert len(lines) == 5
        assert lines[0].startswith("true\\predicted,")
        assert lines[1].split(",")[0] == "pinch"
        assert lines[1].split(",")[1] == "5"
