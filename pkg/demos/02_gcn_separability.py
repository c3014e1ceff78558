"""
Large kernels from two thin ones
================================

A GCN branch runs a k x 1 convolution followed by a 1 x k one. For a single
channel this is exactly one dense k x k convolution whose kernel is the
outer product of the two 1-D kernels, at a cost of 2k instead of k^2
multiplies per pixel.
"""
import numpy as np
from scipy.signal import correlate2d

from laneseg import network, tensor as T

rng = np.random.default_rng(1)
k = 7
u, v = rng.normal(size=(2, k))

col = T.ConvParams(u.reshape(1, 1, k, 1), np.zeros(1), padding=(k // 2, 0))
row = T.ConvParams(v.reshape(1, 1, 1, k), np.zeros(1), padding=(0, k // 2))

x = rng.normal(size=(1, 1, 20, 24))
separable = T.conv2d(T.conv2d(x, col), row)[0, 0]
dense = correlate2d(x[0, 0], np.outer(u, v), mode="same")
print(f"k={k}: max |separable - dense| = {np.abs(separable - dense).max():.2e}")
print(f"weights: {2 * k} separable vs {k * k} dense")

# the full block sums the (k x 1, 1 x k) and (1 x k, k x 1) branches
model = network.build_model(filters=(8, 16), gcn_k=k, rng=rng)
feats = rng.normal(size=(1, 16, 8, 8)).astype(np.float32)
print("gcn block on the bottleneck:", feats.shape, "->", network.gcn_block(feats, model.gcn).shape)
