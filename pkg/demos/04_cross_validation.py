"""Cross-validated accuracy with per-class mean and standard deviation.

Each fold trains a fresh model; the report lists one row per grasp class
plus an overall row, each as mean +- sample standard deviation across
folds, followed by the pooled confusion matrix.
"""

from graspcloud.cli import report
from graspcloud.model import PointNetConfig
from graspcloud.pipeline import TrainConfig, cross_validate
from graspcloud.synth import SynthConfig, generate_dataset

clouds, index = generate_dataset(SynthConfig(per_class=20, seed=11))

config = TrainConfig(
    model=PointNetConfig(use_normals=False, points_per_cloud=128),
    epochs=5,
    batch_size=16,
    seed=2,
)

fold_metrics, summary = cross_validate(clouds, index, 3, config)

for j, m in enumerate(fold_metrics):
    print(f"fold {j}: overall accuracy {m.overall_accuracy:.3f}")
print(f"\nsummary: {summary.overall_mean:.3f} +- {summary.overall_std:.3f}\n")
print(report(fold_metrics, "text").decode())
