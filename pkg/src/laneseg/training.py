"""Class-balanced loss, Adam, Xavier init and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import network
from .errors import ConfigError, DimensionError, InputError, NumericError, TrainingError
from .tensor import DTYPE

log = logging.getLogger(__name__)

CLASS_COLORS = np.array([[0, 0, 0], [0, 255, 0], [0, 0, 255]], dtype=np.uint8)


# ---------------------------------------------------------------- class weights


@dataclass(frozen=True)
class ClassWeights:
    w: np.ndarray
    n: np.ndarray
    N: int
    c: int
    beta: float
    alpha: float


def class_weights(labels, beta: float = 0.1, alpha: float = 10.0, c: int = 3) -> ClassWeights:
    """Per-batch class weights.

    ``N / (2 c n_i)`` clamped to ``[beta, alpha]``; classes absent from the
    batch (``n_i == 0``) get weight 1. At the average count ``n_i = N / c``
    the weight is exactly 1/2.
    """
    if c <= 0:
        raise ConfigError(f"class count must be positive, got {c}")
    if not 0 < beta < alpha:
        raise ConfigError(f"need 0 < beta < alpha, got beta={beta}, alpha={alpha}")
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DimensionError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]", axis="class")
    n = np.bincount(labels.ravel().astype(np.int64), minlength=c)
    N = int(labels.size)
    w = np.ones(c, dtype=np.float64)
    present = n > 0
    w[present] = np.clip(N / (2.0 * c * n[present]), beta, alpha)
    return ClassWeights(w=w, n=n, N=N, c=c, beta=beta, alpha=alpha)


def color_targets(labels: np.ndarray, dtype=DTYPE) -> np.ndarray:
    """(n, h, w) class ids -> (n, 3, h, w) colour-coded targets in 0..255."""
    return np.ascontiguousarray(CLASS_COLORS[labels].transpose(0, 3, 1, 2), dtype=dtype)


def weighted_loss(pred: np.ndarray, target: np.ndarray, labels: np.ndarray, weights: ClassWeights):
    """Class-weighted squared error.

    ``loss = mean over (batch, pixel) of w[label] * sum_channels (pred - target)^2``.
    Returns ``(loss, grad_pred)``.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"pred shape {pred.shape} != target shape {target.shape}", axis="shape")
    if labels.shape != (pred.shape[0],) + pred.shape[2:]:
        raise DimensionError(f"labels shape {labels.shape} does not match pred pixels {pred.shape}", axis="h")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    wmap = weights.w[labels][:, None, :, :]
    count = labels.size
    loss = float((wmap * diff * diff).sum() / count)
    grad = (2.0 / count) * wmap * diff
    return loss, grad.astype(pred.dtype)


# ---------------------------------------------------------------- adam


@dataclass(frozen=True)
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are not modified.

    Moments are kept in float64; parameters keep their own dtype. A
    non-finite gradient or an update that overflows the parameter dtype raises
    :class:`NumericError`.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise DimensionError(f"{name}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])}",
                                 axis=name)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        theta = np.asarray(params[name])
        g = np.asarray(g, dtype=np.float64)
        m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        with np.errstate(over="ignore"):
            updated = (theta.astype(np.float64) - step).astype(theta.dtype)
        if not np.isfinite(updated).all():
            raise NumericError(f"update overflowed parameter {name!r}")
        new_params[name] = updated
        new_m[name], new_v[name] = m, v
    new_state = AdamState(m=new_m, v=new_v, t=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return new_params, new_state


# ---------------------------------------------------------------- init


def fans(shape) -> tuple[int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        fan_out, fan_in = shape
    elif len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        raise ConfigError(f"cannot derive fans from shape {shape}")
    return fan_in, fan_out


def xavier_init(shape, rng: np.random.Generator, dtype=DTYPE) -> np.ndarray:
    """Uniform(-b, b) with ``b = sqrt(6 / (fan_in + fan_out))``.

    For conv weights (c_out, c_in, k_h, k_w): fan_in = c_in k_h k_w and
    fan_out = c_out k_h k_w.
    """
    fan_in, fan_out = fans(shape)
    if fan_in + fan_out <= 0 or fan_in == 0 or fan_out == 0:
        raise ConfigError(f"zero fan for shape {tuple(shape)}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


# ---------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 40
    batch_size: int = 64
    filters: tuple = (8, 16, 20, 32)
    gcn_k: int = 7
    weight_beta: float = 0.1
    weight_alpha: float = 10.0
    seed: int = 0
    c_classes: int = 3
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    br_post_relu: bool = False
    output_scale: float = 255.0
    augment: bool = False

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.validate()

    def validate(self) -> None:
        if not 0 < self.weight_beta < self.weight_alpha:
            raise ConfigError("need 0 < weight_beta < weight_alpha")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.c_classes != len(CLASS_COLORS):
            raise ConfigError(f"c_classes must be {len(CLASS_COLORS)} (background, road, vehicle)")
        if not self.filters or min(self.filters) < 1:
            raise ConfigError("filters must be a non-empty list of positive counts")
        if any(b < a for a, b in zip(self.filters, self.filters[1:])):
            raise ConfigError("filters must be non-decreasing")
        if self.gcn_k < 1 or self.gcn_k % 2 == 0:
            raise ConfigError("gcn_k must be a positive odd integer")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0 < self.bn_momentum < 1 or self.bn_eps <= 0:
            raise ConfigError("need 0 < bn_momentum < 1 and bn_eps > 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Sample:
    """One image and its per-pixel class ids."""

    id: str
    image: np.ndarray  # (h, w, 3) uint8
    labels: np.ndarray  # (h, w) uint8 class ids


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    train_mae: float
    val_mse: float
    val_mae: float
    loss: float = float("nan")


HISTORY_HEADER = ("epoch", "train_mse", "train_mae", "val_mse", "val_mae")


@dataclass
class TrainResult:
    params: network.ModelParams
    history: list[EpochRecord]

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_HEADER)
    for r in history:
        writer.writerow([r.epoch] + [repr(float(v)) for v in (r.train_mse, r.train_mae, r.val_mse, r.val_mae)])
    return buf.getvalue()


def images_to_input(images: Sequence[np.ndarray]) -> np.ndarray:
    """Stack (h, w, 3) uint8 images into an (n, 3, h, w) float32 batch in [0, 1]."""
    batch = np.stack([np.asarray(im) for im in images]).astype(DTYPE)
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2) / DTYPE(255.0))


def init_params(config: TrainConfig, rng: np.random.Generator) -> network.ModelParams:
    return network.build_model(
        config.filters, config.gcn_k, rng=rng,
        bn_eps=config.bn_eps, bn_momentum=config.bn_momentum,
        br_post_relu=config.br_post_relu, output_scale=config.output_scale,
    )


def _augment(sample: Sample, rng: np.random.Generator) -> Sample:
    from . import datapipe

    choice = rng.integers(3)
    if choice == 0:
        return sample
    if choice == 1:
        image, labels = datapipe.rotate_aug(sample.image, sample.labels, rng=rng)
    else:
        image, labels = datapipe.shift_aug(sample.image, sample.labels, rng=rng)
    return Sample(sample.id, image, labels)


def train_step(params, state: AdamState, batch: Sequence[Sample], config: TrainConfig):
    """Forward, weighted loss, backward and one Adam update. Returns ``(params, state, loss)``."""
    x = images_to_input([s.image for s in batch])
    labels = np.stack([s.labels for s in batch]).astype(np.int64)
    weights = class_weights(labels, config.weight_beta, config.weight_alpha, config.c_classes)
    scores, params_bn, cache = network.forward(x, params, training=True)
    loss, grad = weighted_loss(scores, color_targets(labels), labels, weights)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    grads = network.backward(cache, grad)
    trainable = params_bn.named_arrays(trainable_only=True)
    if config.weight_decay:
        grads = {k: g + np.float32(config.weight_decay) * trainable[k] for k, g in grads.items()}
    updated, state = adam_step(trainable, grads, state)
    return params_bn.with_arrays(updated), state, loss


def train(dataset: Sequence[Sample], config: TrainConfig, val_set: Sequence[Sample] = (),
          params: network.ModelParams | None = None) -> TrainResult:
    """Train from scratch (or from ``params``) and return final parameters plus history.

    ``history[0]`` is the evaluation of the initial parameters; ``history[k]``
    follows epoch k. Train/val metrics are inference-mode MSE/MAE in colour
    space. A non-finite loss or gradient raises :class:`TrainingError` whose
    ``last_good`` is the last parameter set that produced finite values.
    """
    from .metrics import evaluate

    dataset = list(dataset)
    if not dataset:
        raise InputError("empty dataset")
    network.check_input_shape((1, 3) + dataset[0].image.shape[:2], len(config.filters))
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(config, rng)
    state = AdamState(lr=config.lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)

    def record(epoch, loss=float("nan")):
        tr = evaluate(params, dataset)
        if val_set:
            va = evaluate(params, val_set)
            vm, va_ = va.mse, va.mae
        else:
            vm = va_ = float("nan")
        rec = EpochRecord(epoch, tr.mse, tr.mae, vm, va_, loss)
        log.info("epoch %d train_mse %.4f train_mae %.4f val_mse %.4f val_mae %.4f",
                 epoch, rec.train_mse, rec.train_mae, rec.val_mse, rec.val_mae)
        return rec

    history = [record(0)]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            if config.augment:
                batch = [_augment(s, rng) for s in batch]
            try:
                params, state, loss = train_step(params, state, batch, config)
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", last_good=params) from exc
            losses.append(loss)
        history.append(record(epoch, float(np.mean(losses))))
    return TrainResult(params, history)
