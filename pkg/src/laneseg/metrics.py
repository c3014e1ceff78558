"""MSE / MAE in colour-rendered space and evaluation reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, InputError


def _pair(pred, truth):
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}", axis="shape")
    return a, b


def mse(pred, truth) -> float:
    """Mean of squared differences over every channel-pixel."""
    a, b = _pair(pred, truth)
    return float(np.mean((b - a) ** 2))


def mae(pred, truth) -> float:
    """Mean absolute channel-pixel difference."""
    a, b = _pair(pred, truth)
    return float(np.mean(np.abs(b - a)))


def render_scores(scores: np.ndarray) -> np.ndarray:
    """Clamp colour scores to [0, 255]. Values outside the range saturate, never wrap."""
    return np.clip(np.asarray(scores, dtype=np.float64), 0.0, 255.0)


def scores_to_image(scores: np.ndarray) -> np.ndarray:
    """One (3, h, w) score map -> (h, w, 3) uint8 image."""
    return np.rint(render_scores(scores)).astype(np.uint8).transpose(1, 2, 0)


def scores_to_labels(scores: np.ndarray) -> np.ndarray:
    """Class id per pixel: the class colour nearest to the rendered prediction."""
    from .training import CLASS_COLORS

    rendered = render_scores(scores)  # (n?, 3, h, w) or (3, h, w)
    colors = CLASS_COLORS.astype(np.float64)
    d = ((rendered[..., None, :, :, :] - colors.reshape(len(colors), 3, 1, 1)) ** 2).sum(axis=-3)
    return d.argmin(axis=-3).astype(np.uint8)


@dataclass
class EvalReport:
    mse: float
    mae: float
    per_image: list[tuple[str, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id", "mse", "mae"))
        for row in self.per_image:
            w.writerow((row[0], repr(row[1]), repr(row[2])))
        w.writerow(("ALL", repr(self.mse), repr(self.mae)))
        return buf.getvalue()


def evaluate(params, dataset: Sequence, batch_size: int = 16) -> EvalReport:
    """Per-image and aggregate MSE/MAE of inference-mode predictions.

    The aggregate is the pixel-weighted mean of the per-image values, so
    images of different sizes contribute in proportion to their area.
    """
    from . import network
    from .training import color_targets, images_to_input

    dataset = list(dataset)
    if not dataset:
        raise InputError("empty dataset")
    rows = []
    sq_total = abs_total = 0.0
    count = 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        shapes = {s.image.shape for s in chunk}
        groups = [chunk] if len(shapes) == 1 else [[s] for s in chunk]
        for group in groups:
            scores = network.predict(images_to_input([s.image for s in group]), params)
            truth = color_targets(np.stack([s.labels for s in group]).astype(np.int64), np.float64)
            rendered = render_scores(scores)
            for s, r, t in zip(group, rendered, truth):
                d = t - r
                sq, ab = float((d * d).sum()), float(np.abs(d).sum())
                rows.append((s.id, sq / d.size, ab / d.size))
                sq_total += sq
                abs_total += ab
                count += d.size
    return EvalReport(mse=sq_total / count, mae=abs_total / count, per_image=rows)


def triptych(image: np.ndarray, truth_rgb: np.ndarray, pred_rgb: np.ndarray) -> np.ndarray:
    """Side-by-side (input | truth | prediction) uint8 image."""
    return np.concatenate([np.asarray(image, np.uint8), np.asarray(truth_rgb, np.uint8),
                           np.asarray(pred_rgb, np.uint8)], axis=1)
