"""GCN + boundary-refinement encoder-decoder segmentation model.

Layout of :func:`forward`::

    encoder:  [conv3x3 -> batchnorm -> relu -> maxpool2] * len(filters)
    gcn:      (k x 1 -> 1 x k) + (1 x k -> k x 1)
    decoder:  [upsample2 -> conv3x3 -> batchnorm -> relu] * len(filters)
    br:       x + conv3x3(relu(conv3x3(x)))
    head:     conv1x1 -> 3 colour channels, multiplied by ``output_scale``

The head regresses colour-coded label images in 0..255 space, so the last
layer is scaled by a fixed ``output_scale`` (255 by default) and the network
itself works in unit-scale activations.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, StateError
from .tensor import BatchNormParams, ConvParams


@dataclass
class GcnBlockParams:
    """Two separable branches. ``branch_a`` is (k x 1, 1 x k), ``branch_b`` is (1 x k, k x 1)."""

    branch_a: tuple[ConvParams, ConvParams]
    branch_b: tuple[ConvParams, ConvParams]

    @property
    def k(self) -> int:
        return self.branch_a[0].kernel[0]

    def __post_init__(self):
        (a1, a2), (b1, b2) = self.branch_a, self.branch_b
        k = a1.kernel[0]
        if k % 2 == 0:
            raise DimensionError(f"GCN kernel extent must be odd, got {k}", axis="k")
        want = [(k, 1), (1, k), (1, k), (k, 1)]
        for conv, kern in zip((a1, a2, b1, b2), want):
            if conv.kernel != kern:
                raise DimensionError(f"GCN conv kernel {conv.kernel} != expected {kern}", axis="k")
        if a2.c_out != b2.c_out:
            raise DimensionError("GCN branches must produce the same channel count", axis="c")


@dataclass
class BrBlockParams:
    w1: ConvParams
    w2: ConvParams
    post_relu: bool = False

    def __post_init__(self):
        c = self.w1.c_in
        for conv in (self.w1, self.w2):
            if conv.c_in != c or conv.c_out != c or conv.kernel != (3, 3):
                raise DimensionError("BR convolutions must be channel-preserving 3x3", axis="c")


@dataclass
class ModelParams:
    encoder: list[tuple[ConvParams, BatchNormParams]]
    gcn: GcnBlockParams
    decoder: list[tuple[ConvParams, BatchNormParams]]
    br: BrBlockParams
    head: ConvParams
    output_scale: float = 255.0

    def __post_init__(self):
        if len(self.encoder) != len(self.decoder):
            raise DimensionError("encoder and decoder must have the same number of blocks", axis="depth")
        filters = [conv.c_out for conv, _ in self.encoder]
        if any(b < a for a, b in zip(filters, filters[1:])):
            raise ConfigError(f"encoder filter counts must be non-decreasing, got {filters}")

    @property
    def depth(self) -> int:
        return len(self.encoder)

    def named_arrays(self, trainable_only: bool = False) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view, in a fixed order.

        With ``trainable_only`` the batch-norm running statistics are left out.
        """
        out: dict[str, np.ndarray] = {}

        def conv(prefix, p: ConvParams):
            out[prefix + ".w"] = p.weights
            out[prefix + ".b"] = p.bias

        def bn(prefix, p: BatchNormParams):
            out[prefix + ".gamma"] = p.gamma
            out[prefix + ".beta"] = p.beta
            if not trainable_only:
                out[prefix + ".running_mean"] = p.running_mean
                out[prefix + ".running_var"] = p.running_var

        for i, (c, b) in enumerate(self.encoder):
            conv(f"enc{i}.conv", c)
            bn(f"enc{i}.bn", b)
        for name, p in zip(("a1", "a2"), self.gcn.branch_a):
            conv(f"gcn.{name}", p)
        for name, p in zip(("b1", "b2"), self.gcn.branch_b):
            conv(f"gcn.{name}", p)
        for i, (c, b) in enumerate(self.decoder):
            conv(f"dec{i}.conv", c)
            bn(f"dec{i}.bn", b)
        conv("br.w1", self.br.w1)
        conv("br.w2", self.br.w2)
        conv("head", self.head)
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        """Copy of ``self`` with any named arrays in ``arrays`` swapped in."""

        def conv(prefix, p: ConvParams):
            return replace(p, weights=arrays.get(prefix + ".w", p.weights), bias=arrays.get(prefix + ".b", p.bias))

        def bn(prefix, p: BatchNormParams):
            return replace(
                p,
                **{f: arrays.get(f"{prefix}.{f}", getattr(p, f)) for f in ("gamma", "beta", "running_mean", "running_var")},
            )

        return replace(
            self,
            encoder=[(conv(f"enc{i}.conv", c), bn(f"enc{i}.bn", b)) for i, (c, b) in enumerate(self.encoder)],
            gcn=GcnBlockParams(
                branch_a=(conv("gcn.a1", self.gcn.branch_a[0]), conv("gcn.a2", self.gcn.branch_a[1])),
                branch_b=(conv("gcn.b1", self.gcn.branch_b[0]), conv("gcn.b2", self.gcn.branch_b[1])),
            ),
            decoder=[(conv(f"dec{i}.conv", c), bn(f"dec{i}.bn", b)) for i, (c, b) in enumerate(self.decoder)],
            br=replace(self.br, w1=conv("br.w1", self.br.w1), w2=conv("br.w2", self.br.w2)),
            head=conv("head", self.head),
        )


def decoder_channels(filters) -> list[int]:
    """Decoder output channels mirroring the encoder: 8,16,20,32 -> 20,16,8,8."""
    filters = list(filters)
    return filters[-2::-1] + [filters[0]]


def build_model(
    filters=(8, 16, 20, 32),
    gcn_k: int = 7,
    in_channels: int = 3,
    out_channels: int = 3,
    *,
    rng: np.random.Generator,
    bn_eps: float = 1e-5,
    bn_momentum: float = 0.9,
    br_post_relu: bool = False,
    output_scale: float = 255.0,
) -> ModelParams:
    """Xavier-initialized model. Biases start at zero, batch-norm at identity."""
    from .training import xavier_init

    if gcn_k < 1 or gcn_k % 2 == 0:
        raise ConfigError(f"gcn_k must be a positive odd integer, got {gcn_k}")
    filters = [int(f) for f in filters]
    if not filters:
        raise ConfigError("at least one encoder block is required")
    # stored as float32-representable values so checkpoints roundtrip exactly
    bn_eps = float(np.float32(bn_eps))
    bn_momentum = float(np.float32(bn_momentum))
    output_scale = float(np.float32(output_scale))

    def conv(c_in, c_out, kh, kw):
        return ConvParams(
            xavier_init((c_out, c_in, kh, kw), rng),
            np.zeros(c_out, T.DTYPE),
            padding=(kh // 2, kw // 2),
        )

    def bn(c):
        return BatchNormParams.fresh(c, eps=bn_eps, momentum=bn_momentum)

    encoder = []
    c = in_channels
    for f in filters:
        encoder.append((conv(c, f, 3, 3), bn(f)))
        c = f
    k = gcn_k
    gcn = GcnBlockParams(
        branch_a=(conv(c, c, k, 1), conv(c, c, 1, k)),
        branch_b=(conv(c, c, 1, k), conv(c, c, k, 1)),
    )
    decoder = []
    for f in decoder_channels(filters):
        decoder.append((conv(c, f, 3, 3), bn(f)))
        c = f
    br = BrBlockParams(conv(c, c, 3, 3), conv(c, c, 3, 3), post_relu=br_post_relu)
    head = conv(c, out_channels, 1, 1)
    return ModelParams(encoder, gcn, decoder, br, head, output_scale=output_scale)


# ---------------------------------------------------------------- blocks


def _two_convs(x, first: ConvParams, second: ConvParams):
    mid = T.conv2d(x, first)
    return T.conv2d(mid, second), mid


def gcn_block(x: np.ndarray, params: GcnBlockParams) -> np.ndarray:
    """Sum of the two separable branches; spatial size is preserved."""
    return gcn_block_forward(x, params)[0]


def gcn_block_forward(x, params: GcnBlockParams):
    a, a_mid = _two_convs(x, *params.branch_a)
    b, b_mid = _two_convs(x, *params.branch_b)
    return a + b, (x, a_mid, b_mid)


def gcn_block_backward(grad_out, params: GcnBlockParams, cache):
    """Returns ``(grad_input, {name: grad})`` with names a1, a2, b1, b2 -> (gw, gb)."""
    x, a_mid, b_mid = cache
    grads = {}
    gx = np.zeros_like(x)
    for tag, (first, second), mid in (("a", params.branch_a, a_mid), ("b", params.branch_b, b_mid)):
        g_mid, gw2, gb2 = T.conv2d_backward(mid, second, grad_out)
        g_in, gw1, gb1 = T.conv2d_backward(x, first, g_mid)
        grads[tag + "1"] = (gw1, gb1)
        grads[tag + "2"] = (gw2, gb2)
        gx = gx + g_in
    return gx, grads


def br_block(x: np.ndarray, params: BrBlockParams) -> np.ndarray:
    """``x + w2 * relu(w1 * x)``, with an optional relu after the addition."""
    return br_block_forward(x, params)[0]


def br_block_forward(x, params: BrBlockParams):
    pre = T.conv2d(x, params.w1)
    act = T.relu(pre)
    total = x + T.conv2d(act, params.w2)
    out = T.relu(total) if params.post_relu else total
    return out, (x, pre, act, total)


def br_block_backward(grad_out, params: BrBlockParams, cache):
    x, pre, act, total = cache
    if params.post_relu:
        grad_out = T.relu_backward(total, grad_out)
    g_act, gw2, gb2 = T.conv2d_backward(act, params.w2, grad_out)
    g_pre = T.relu_backward(pre, g_act)
    g_x, gw1, gb1 = T.conv2d_backward(x, params.w1, g_pre)
    return grad_out + g_x, {"w1": (gw1, gb1), "w2": (gw2, gb2)}


# ---------------------------------------------------------------- model


@dataclass
class ForwardCache:
    params: ModelParams
    encoder: list = field(default_factory=list)
    gcn: tuple | None = None
    decoder: list = field(default_factory=list)
    br: tuple | None = None
    head_input: np.ndarray | None = None
    # relu masks and pool argmaxes, in execution order (used by gradient checks)
    kinks: list = field(default_factory=list)


def check_input_shape(shape, depth: int) -> None:
    if len(shape) != 4:
        raise DimensionError(f"model input must be rank 4, got shape {tuple(shape)}", axis="rank")
    m = 2 ** depth
    for axis, size in zip("hw", shape[2:]):
        if size % m or size == 0:
            raise DimensionError(f"axis {axis}: size {size} is not a positive multiple of {m}", axis=axis)


def forward(x: np.ndarray, params: ModelParams, training: bool = False):
    """Run the model.

    Returns ``(scores, new_params, cache)``; ``scores`` has shape
    ``(n, 3, h, w)`` in 0..255 colour units and ``new_params`` carries updated
    batch-norm running statistics when ``training`` is set.
    """
    check_input_shape(x.shape, params.depth)
    if x.shape[1] != params.encoder[0][0].c_in:
        raise DimensionError(f"axis c: model expects {params.encoder[0][0].c_in} input channels, got {x.shape[1]}", axis="c")
    cache = ForwardCache(params=params)
    new_enc, new_dec = [], []

    h = x
    for conv, bn in params.encoder:
        z = T.conv2d(h, conv)
        y, bn_new, bn_cache = T.batchnorm(z, bn, training)
        a = T.relu(y)
        p, argmax = T.maxpool2(a)
        cache.encoder.append((h, bn_cache, y, argmax))
        cache.kinks += [y > 0, argmax]
        new_enc.append((conv, bn_new))
        h = p

    h, cache.gcn = gcn_block_forward(h, params.gcn)

    for conv, bn in params.decoder:
        u = T.upsample_nearest2(h)
        z = T.conv2d(u, conv)
        y, bn_new, bn_cache = T.batchnorm(z, bn, training)
        cache.decoder.append((u, bn_cache, y))
        cache.kinks.append(y > 0)
        new_dec.append((conv, bn_new))
        h = T.relu(y)

    h, cache.br = br_block_forward(h, params.br)
    cache.kinks.append(cache.br[1] > 0)
    if params.br.post_relu:
        cache.kinks.append(cache.br[3] > 0)
    cache.head_input = h
    scores = T.conv2d(h, params.head) * h.dtype.type(params.output_scale)

    new_params = replace(params, encoder=new_enc, decoder=new_dec) if training else params
    return scores, new_params, cache


def predict(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Inference-mode scores."""
    return forward(x, params, training=False)[0]


def backward(cache: ForwardCache | None, grad_scores: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients for every trainable array of the cached forward pass.

    Keys match :meth:`ModelParams.named_arrays` with ``trainable_only=True``.
    """
    if cache is None or cache.head_input is None:
        raise StateError("backward called without a retained forward pass")
    params = cache.params
    grads: dict[str, np.ndarray] = {}

    g = grad_scores * grad_scores.dtype.type(params.output_scale)
    g, grads["head.w"], grads["head.b"] = T.conv2d_backward(cache.head_input, params.head, g)

    g, br_grads = br_block_backward(g, params.br, cache.br)
    for name, (gw, gb) in br_grads.items():
        grads[f"br.{name}.w"], grads[f"br.{name}.b"] = gw, gb

    for i in reversed(range(params.depth)):
        conv, _ = params.decoder[i]
        u, bn_cache, y = cache.decoder[i]
        g = T.relu_backward(y, g)
        g, grads[f"dec{i}.bn.gamma"], grads[f"dec{i}.bn.beta"] = T.batchnorm_backward(g, bn_cache)
        g, grads[f"dec{i}.conv.w"], grads[f"dec{i}.conv.b"] = T.conv2d_backward(u, conv, g)
        g = T.upsample_nearest2_backward(g)

    g, gcn_grads = gcn_block_backward(g, params.gcn, cache.gcn)
    for name, (gw, gb) in gcn_grads.items():
        grads[f"gcn.{name}.w"], grads[f"gcn.{name}.b"] = gw, gb

    for i in reversed(range(params.depth)):
        conv, _ = params.encoder[i]
        h, bn_cache, y, argmax = cache.encoder[i]
        g = T.maxpool2_backward(g, argmax)
        g = T.relu_backward(y, g)
        g, grads[f"enc{i}.bn.gamma"], grads[f"enc{i}.bn.beta"] = T.batchnorm_backward(g, bn_cache)
        g, grads[f"enc{i}.conv.w"], grads[f"enc{i}.conv.b"] = T.conv2d_backward(h, conv, g)

    order = params.named_arrays(trainable_only=True)
    return {name: grads[name] for name in order}
