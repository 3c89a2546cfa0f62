"""Training the classifier end to end on synthetic data.

Small-scale run: generate labeled clouds, preprocess them (normals for the
extended variant, unit-sphere normalization, fixed-size resampling), train
with rotation/jitter augmentation, and read the confusion matrix. Expect a
couple of minutes on one CPU core.
"""

import numpy as np

from graspcloud.cli import report
from graspcloud.model import PointNetConfig, build
from graspcloud.pipeline import TrainConfig, evaluate, preprocess, split, train
from graspcloud.synth import SynthConfig, generate_dataset

clouds, index = generate_dataset(SynthConfig(per_class=40, seed=3))
print(f"dataset: {len(clouds)} clouds")

config = TrainConfig(
    model=PointNetConfig(use_normals=True, points_per_cloud=128),
    epochs=8,
    batch_size=32,
    lr=0.001,
    seed=0,
)

pre_rng = np.random.default_rng(1)
prepped = [preprocess(c, config.model, rng=pre_rng) for c in clouds]
for cloud, row in zip(prepped, index.rows):
    cloud.label = row.label

train_idx, val_idx, test_idx = split(index, config)
pos = {r.path: i for i, r in enumerate(index.rows)}
pick = lambda ix: [prepped[pos[r.path]] for r in ix.rows]
train_set, val_set, test_set = pick(train_idx), pick(val_idx), pick(test_idx)
print(f"split: {len(train_set)} train / {len(val_set)} val / {len(test_set)} test")

model = build(config.model, np.random.default_rng(0))
model, metrics = train(model, train_set, val_set, config, np.random.default_rng(0))

print("\nepoch  train-loss  train-acc  val-acc")
for e, (l, a, v) in enumerate(
    zip(metrics.loss_history, metrics.accuracy_history, metrics.val_accuracy_history)
):
    print(f"{e:>5d}  {l:>10.4f}  {a:>9.3f}  {v:>7.3f}")

test_metrics = evaluate(model, test_set)
print("\nheld-out test metrics:")
print(report(test_metrics, "text").decode())
