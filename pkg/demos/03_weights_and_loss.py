"""
Class-balanced loss
===================

Road pixels vastly outnumber vehicle pixels. Each batch gets per-class
weights N / (2 c n_i), clamped to [0.1, 10], so rare classes count for more.
"""
import numpy as np

from laneseg import training as tr
from laneseg.datapipe import synthetic_dataset

batch = synthetic_dataset(4, 64, 64, seed=3)
labels = np.stack([s.labels for s in batch]).astype(np.int64)
cw = tr.class_weights(labels)
for name, n, w in zip(("background", "road", "vehicle"), cw.n, cw.w):
    print(f"{name:<10} {n:6d} px  weight {w:.3f}")

# a class missing from the batch keeps weight 1
print("road-only batch:", tr.class_weights(np.ones((1, 4, 4), int)).w)

# the loss compares colour scores against colour-coded targets
target = tr.color_targets(labels, np.float64)
pred = target + np.random.default_rng(0).normal(0, 20, size=target.shape)
loss, grad = tr.weighted_loss(pred, target, labels, cw)
print(f"weighted loss {loss:.1f}, gradient shape {grad.shape}")
