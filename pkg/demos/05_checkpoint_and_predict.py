"""Saving a model, loading it back, and classifying a single capture.

Checkpoints carry the configuration, all weights, and the batch-norm
running statistics, so a restored model reproduces the original's outputs
bit for bit. Single-cloud prediction (preprocessing included) runs in a
fraction of a second on a CPU.
"""

import time

import numpy as np

from graspcloud.model import (
    PointNetConfig,
    build,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from graspcloud.labels import LABEL_NAMES
from graspcloud.pipeline import preprocess
from graspcloud.synth import SynthConfig, generate_dataset

config = PointNetConfig(use_normals=True, points_per_cloud=2048)
model = build(config, np.random.default_rng(0))

data = save_checkpoint(model)
print(f"checkpoint size: {len(data) / 1e6:.1f} MB")

restored = load_checkpoint(data)
probe = np.random.default_rng(1).standard_normal((2, 2048, 6)).astype(np.float32)
a, _ = forward(model, probe, "eval")
b, _ = forward(restored, probe, "eval")
print(f"restored forward bit-identical: {np.array_equal(a, b)}")

# classify one synthetic capture, preprocessing included
clouds, _ = generate_dataset(SynthConfig(per_class=1, seed=5))
cloud = clouds[2]  # a tall palmar-wrist-neutral shape

prepped = preprocess(cloud, config, rng=np.random.default_rng(0))
predict(model, prepped)  # warm the BLAS kernels

start = time.time()
prepped = preprocess(cloud, config, rng=np.random.default_rng(0))
label, probs = predict(model, prepped)
elapsed = time.time() - start

print(f"\npredicted grasp: {label.token}  ({elapsed * 1e3:.0f} ms end to end)")
for name, p in zip(LABEL_NAMES, probs):
    print(f"  {name:<22s} {p:.4f}")
print("(an untrained model guesses; see demo 03 for a trained one)")
