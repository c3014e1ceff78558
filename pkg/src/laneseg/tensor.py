"""Differentiable primitive layers over rank-4 (n, c, h, w) arrays.

Every layer has an explicit forward and backward function. Tensors are plain
numpy arrays; float32 is the working precision, but every primitive preserves
the dtype of its input so gradient checks can run in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError

DTYPE = np.float32
AXES = ("n", "c", "h", "w")


def as_tensor(values, dtype=DTYPE) -> np.ndarray:
    """Coerce ``values`` to a contiguous rank-4 array of ``dtype``."""
    arr = np.ascontiguousarray(values, dtype=dtype)
    if arr.ndim != 4:
        raise DimensionError(f"expected a rank-4 (n, c, h, w) tensor, got rank {arr.ndim}", axis="rank")
    return arr


def _check4(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}", axis="rank")


def _check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"{op} produced non-finite values")
    return x


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass
class ConvParams:
    """Weights (c_out, c_in, k_h, k_w), bias (c_out,), stride and per-side padding.

    ``padding`` is either one int or a ``(pad_h, pad_w)`` pair; the separable
    GCN kernels need different padding along each axis.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int | tuple[int, int] = 0

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4:
            raise DimensionError(f"conv weights must be (c_out, c_in, k_h, k_w), got {w.shape}", axis="rank")
        b = np.asarray(self.bias)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"bias shape {b.shape} does not match c_out={w.shape[0]}", axis="c_out")
        if min(w.shape[2:]) < 1:
            raise DimensionError("kernel extents must be >= 1", axis="k")
        if self.stride < 1:
            raise DimensionError("stride must be >= 1", axis="stride")
        ph, pw = _pair(self.padding)
        if ph < 0 or pw < 0:
            raise DimensionError("padding must be >= 0", axis="padding")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


def conv_output_hw(h: int, w: int, params: ConvParams) -> tuple[int, int]:
    kh, kw = params.kernel
    ph, pw = _pair(params.padding)
    s = params.stride
    out = []
    for axis, size, k, p in (("h", h, kh, ph), ("w", w, kw, pw)):
        span = size + 2 * p - k
        if span < 0 or span % s:
            raise DimensionError(
                f"axis {axis}: (size {size} + 2*{p} - {k}) is not a non-negative multiple of stride {s}",
                axis=axis,
            )
        out.append(span // s + 1)
    return out[0], out[1]


def _windows(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """(n, c, h_out, w_out, k_h, k_w) view of padded sliding windows."""
    ph, pw = _pair(params.padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, params.kernel, axis=(2, 3))
    s = params.stride
    return win[:, :, ::s, ::s]


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Cross-correlation of ``x`` with ``params.weights`` plus per-channel bias."""
    _check4(x)
    if x.shape[1] != params.c_in:
        raise DimensionError(f"axis c: input has {x.shape[1]} channels, kernel expects {params.c_in}", axis="c")
    conv_output_hw(x.shape[2], x.shape[3], params)
    win = _windows(x.astype(np.float64, copy=False), params)
    out = np.tensordot(win, params.weights.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + params.bias.astype(np.float64)[None, :, None, None]
    return _check_finite(np.ascontiguousarray(out, dtype=x.dtype), "conv2d")


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Gradients of ``sum(grad_out * conv2d(x, params))``.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    _check4(x)
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], params)
    expected = (x.shape[0], params.c_out, ho, wo)
    if grad_out.shape != expected:
        bad = next(a for a, e, g in zip(AXES, expected, grad_out.shape) if e != g) if grad_out.ndim == 4 else "rank"
        raise DimensionError(f"axis {bad}: grad_out shape {grad_out.shape} != conv output {expected}", axis=bad)
    g = grad_out.astype(np.float64, copy=False)
    w = params.weights.astype(np.float64)
    win = _windows(x.astype(np.float64, copy=False), params)

    grad_w = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = g.sum(axis=(0, 2, 3))

    # cols[n, h, w, c, i, j]: contribution to padded input at window offset (i, j)
    cols = np.tensordot(g, w, axes=([1], [0]))
    ph, pw = _pair(params.padding)
    kh, kw = params.kernel
    s = params.stride
    n, c, h, wid = x.shape
    gxp = np.zeros((n, c, h + 2 * ph, wid + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, ph:ph + h, pw:pw + wid]
    return (
        np.ascontiguousarray(gx, dtype=x.dtype),
        grad_w.astype(params.weights.dtype),
        grad_b.astype(params.bias.dtype),
    )


def maxpool2(x: np.ndarray):
    """2x2 non-overlapping max pooling.

    Returns ``(output, argmax)`` where ``argmax`` holds, per output cell, the
    row-major index 0..3 of the winning element inside its window. Ties go to
    the first index.
    """
    _check4(x)
    n, c, h, w = x.shape
    for axis, size in (("h", h), ("w", w)):
        if size % 2:
            raise DimensionError(f"axis {axis}: maxpool2 needs an even size, got {size}", axis=axis)
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return _check_finite(np.ascontiguousarray(out), "maxpool2"), idx


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    if grad_out.shape != argmax.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != pooled shape {argmax.shape}", axis="h")
    n, c, ho, wo = grad_out.shape
    blocks = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    gx = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    return np.ascontiguousarray(gx)


def upsample_nearest2(x: np.ndarray) -> np.ndarray:
    _check4(x)
    return _check_finite(np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), "upsample_nearest2")


def upsample_nearest2_backward(grad_out: np.ndarray) -> np.ndarray:
    _check4(grad_out, "grad_out")
    n, c, h, w = grad_out.shape
    for axis, size in (("h", h), ("w", w)):
        if size % 2:
            raise DimensionError(f"axis {axis}: upsampled gradient must have even size, got {size}", axis=axis)
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        c = np.asarray(self.gamma).shape
        for name in ("beta", "running_mean", "running_var"):
            if np.asarray(getattr(self, name)).shape != c:
                raise DimensionError(f"batchnorm {name} shape does not match gamma {c}", axis="c")
        if self.eps <= 0:
            raise ValueError("batchnorm eps must be > 0")
        if not 0 < self.momentum < 1:
            raise ValueError("batchnorm momentum must lie in (0, 1)")
        if (np.asarray(self.running_var) < 0).any():
            raise ValueError("batchnorm running_var must be >= 0")

    @classmethod
    def fresh(cls, c: int, eps: float = 1e-5, momentum: float = 0.9, dtype=DTYPE) -> "BatchNormParams":
        return cls(
            gamma=np.ones(c, dtype), beta=np.zeros(c, dtype),
            running_mean=np.zeros(c, dtype), running_var=np.ones(c, dtype),
            eps=eps, momentum=momentum,
        )


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool
    dtype: np.dtype = field(default=np.dtype(DTYPE))


def batchnorm(x: np.ndarray, params: BatchNormParams, training: bool):
    """Per-channel batch normalization.

    Returns ``(output, new_params, cache)``. In training mode the batch
    statistics normalize the input and ``new_params`` carries running stats
    updated as ``momentum * running + (1 - momentum) * batch`` (biased batch
    variance). In inference mode ``new_params is params``.
    """
    _check4(x)
    if x.shape[1] != params.gamma.shape[0]:
        raise DimensionError(f"axis c: input has {x.shape[1]} channels, batchnorm has {params.gamma.shape[0]}", axis="c")
    xd = x.astype(np.float64, copy=False)
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = params.momentum
        rdt = params.running_mean.dtype
        new_params = replace(
            params,
            running_mean=(m * params.running_mean + (1 - m) * mean).astype(rdt),
            running_var=(m * params.running_var + (1 - m) * var).astype(rdt),
        )
    else:
        mean = params.running_mean.astype(np.float64)
        var = params.running_var.astype(np.float64)
        new_params = params
    inv_std = 1.0 / np.sqrt(var + params.eps)
    x_hat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    gamma = params.gamma.astype(np.float64)
    out = gamma[None, :, None, None] * x_hat + params.beta.astype(np.float64)[None, :, None, None]
    cache = BatchNormCache(x_hat=x_hat, inv_std=inv_std, gamma=gamma, training=training, dtype=x.dtype)
    return _check_finite(out.astype(x.dtype), "batchnorm"), new_params, cache


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    if grad_out.shape != cache.x_hat.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != batchnorm input {cache.x_hat.shape}", axis="c")
    g = grad_out.astype(np.float64, copy=False)
    axes = (0, 2, 3)
    grad_beta = g.sum(axis=axes)
    grad_gamma = (g * cache.x_hat).sum(axis=axes)
    g_hat = g * cache.gamma[None, :, None, None]
    inv_std = cache.inv_std[None, :, None, None]
    if cache.training:
        m = g.shape[0] * g.shape[2] * g.shape[3]
        gx = inv_std / m * (
            m * g_hat
            - g_hat.sum(axis=axes, keepdims=True)
            - cache.x_hat * (g_hat * cache.x_hat).sum(axis=axes, keepdims=True)
        )
    else:
        gx = g_hat * inv_std
    return gx.astype(cache.dtype), grad_gamma.astype(cache.dtype), grad_beta.astype(cache.dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != relu input {x.shape}", axis="c")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)
