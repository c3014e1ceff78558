"""
Layers and their hand-written gradients
=======================================

Every layer in laneseg has a forward function and a matching backward
function. Here we push a small tensor through each one and compare the
backward pass with central finite differences.
"""
import numpy as np

from laneseg import tensor as T

rng = np.random.default_rng(0)

# NCHW layout throughout; float64 makes the finite differences clean
x = rng.normal(size=(2, 3, 6, 6))
conv = T.ConvParams(rng.normal(size=(4, 3, 3, 3)), np.zeros(4), padding=1)
y = T.conv2d(x, conv)
print("conv2d", x.shape, "->", y.shape)

pooled, argmax = T.maxpool2(y)
print("maxpool2", y.shape, "->", pooled.shape, "winner index per window in 0..3:", np.unique(argmax))

up = T.upsample_nearest2(pooled)
print("upsample", pooled.shape, "->", up.shape)

# batch-norm in training mode returns updated running statistics
out, bn, cache = T.batchnorm(up, T.BatchNormParams.fresh(4, dtype=np.float64), training=True)
print("batchnorm per-channel mean after normalising:", np.round(out.mean(axis=(0, 2, 3)), 6))
print("running mean moved to", np.round(bn.running_mean, 4))


def numeric(f, arr, step=1e-3):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        fp = f()
        arr[i] = old - step
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


# a random projection R turns the layer output into a scalar loss
R = rng.normal(size=y.shape)
f = lambda: float((R * T.conv2d(x, conv)).sum())
gx, gw, gb = T.conv2d_backward(x, conv, R)
for name, analytic, arr in (("input", gx, x), ("weights", gw, conv.weights), ("bias", gb, conv.bias)):
    num = numeric(f, arr)
    err = np.abs(analytic - num).max() / np.abs(num).max()
    print(f"conv2d grad wrt {name:<8} max relative error {err:.1e}")
