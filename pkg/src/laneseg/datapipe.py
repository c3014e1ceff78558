"""Image I/O, Carla-style depth/label codecs, cropping, augmentation, splitting.

Images are (h, w, 3) uint8 arrays; label images are (h, w) uint8 class ids
with 0 = background, 1 = road, 2 = vehicle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, DimensionError
from .training import CLASS_COLORS, Sample

BACKGROUND, ROAD, VEHICLE = 0, 1, 2
INT24_MAX = 256 ** 3 - 1


@dataclass(frozen=True)
class TagMap:
    """Carla red-channel tag ids that are kept as road and vehicle."""

    road_tag: int = 7
    vehicle_tag: int = 10

    def __post_init__(self):
        if self.road_tag == self.vehicle_tag:
            raise ConfigError("road_tag and vehicle_tag must differ")


def _rgb(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an (h, w, 3) image, got shape {img.shape}", axis="c")
    return img


# ---------------------------------------------------------------- depth


def decode_depth(img, far: float = 1000.0) -> np.ndarray:
    """Metres per pixel from a Carla depth image: ``far * (R + 256 G + 65536 B) / (256^3 - 1)``."""
    img = _rgb(img).astype(np.int64)
    v = img[..., 0] + 256 * img[..., 1] + 65536 * img[..., 2]
    return far * v.astype(np.float64) / INT24_MAX


def encode_depth(meters, far: float = 1000.0) -> np.ndarray:
    """Inverse of :func:`decode_depth` up to int24 quantization (round to nearest code)."""
    meters = np.asarray(meters, dtype=np.float64)
    if (meters < 0).any() or (meters > far).any():
        raise DataError(f"depth values must lie in [0, {far}]")
    v = np.rint(meters / far * INT24_MAX).astype(np.int64)
    b = v // 65536
    g = (v - 65536 * b) // 256
    r = v % 256
    return np.stack([r, g, b], axis=-1).astype(np.uint8)


# ---------------------------------------------------------------- labels


def decode_labels(img, tags: TagMap = TagMap()) -> np.ndarray:
    """Map the red-channel tag of a raw label image to background/road/vehicle."""
    red = _rgb(img)[..., 0]
    out = np.zeros(red.shape, dtype=np.uint8)
    out[red == tags.road_tag] = ROAD
    out[red == tags.vehicle_tag] = VEHICLE
    return out


def encode_label_colors(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and labels.max() >= len(CLASS_COLORS):
        raise DataError(f"class id {labels.max()} has no colour")
    return CLASS_COLORS[labels]


def decode_label_colors(img) -> np.ndarray:
    """Exact inverse of :func:`encode_label_colors`; any other colour is a :class:`DataError`."""
    img = _rgb(img).astype(np.int64)
    code = (img[..., 0] << 16) | (img[..., 1] << 8) | img[..., 2]
    out = np.full(code.shape, 255, dtype=np.uint8)
    for cls, (r, g, b) in enumerate(CLASS_COLORS.astype(np.int64)):
        out[code == ((r << 16) | (g << 8) | b)] = cls
    bad = np.argwhere(out == 255)
    if len(bad):
        y, x = bad[0]
        raise DataError(f"pixel ({y}, {x}) has non-class colour {tuple(int(v) for v in img[y, x])} "
                        f"({len(bad)} invalid pixels)")
    return out


# ---------------------------------------------------------------- geometry


def crop(img, top_rows: int = 180, bottom_rows: int = 60) -> np.ndarray:
    """Drop ``top_rows`` (sky) and ``bottom_rows`` (car hood). 600 rows -> 360 by default."""
    img = np.asarray(img)
    h = img.shape[0]
    if top_rows < 0 or bottom_rows < 0 or top_rows + bottom_rows >= h:
        raise DimensionError(f"cannot crop {top_rows} + {bottom_rows} rows from height {h}", axis="h")
    return img[top_rows:h - bottom_rows].copy()


def rotate(img, labels, angle_deg: float):
    """Rotate image (bilinear) and labels (nearest) about the image centre.

    Positive angles turn the content counter-clockwise as displayed (rows
    growing downward). Out-of-frame pixels become black / background.
    """
    img = _rgb(img)
    labels = np.asarray(labels)
    if angle_deg == 0:
        return img.copy(), labels.copy()
    h, w = labels.shape
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    # forward map on (row, col) is [[cos, -sin], [sin, cos]]; sampling needs its inverse
    inv = np.array([[cos, sin], [-sin, cos]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - inv @ center
    out_labels = ndimage.affine_transform(labels, inv, offset=offset, order=0, mode="constant", cval=BACKGROUND)
    chans = [
        ndimage.affine_transform(img[..., ch].astype(np.float64), inv, offset=offset, order=1, mode="constant", cval=0.0)
        for ch in range(3)
    ]
    out_img = np.clip(np.rint(np.stack(chans, axis=-1)), 0, 255).astype(np.uint8)
    return out_img, out_labels.astype(labels.dtype)


def rotate_aug(img, labels, angle_range=(0.0, 30.0), rng: np.random.Generator | None = None):
    """Rotation by an angle drawn uniformly from ``angle_range`` degrees."""
    rng = np.random.default_rng() if rng is None else rng
    return rotate(img, labels, float(rng.uniform(*angle_range)))


def shift(img, labels, dy: int, dx: int):
    """Integer translation by (dy, dx) pixels; vacated pixels become black / background."""
    img = _rgb(img)
    labels = np.asarray(labels)
    h, w = labels.shape
    out_img = np.zeros_like(img)
    out_labels = np.full_like(labels, BACKGROUND)
    if abs(dy) < h and abs(dx) < w:
        src_y = slice(max(0, -dy), h - max(0, dy))
        dst_y = slice(max(0, dy), h - max(0, -dy))
        src_x = slice(max(0, -dx), w - max(0, dx))
        dst_x = slice(max(0, dx), w - max(0, -dx))
        out_img[dst_y, dst_x] = img[src_y, src_x]
        out_labels[dst_y, dst_x] = labels[src_y, src_x]
    return out_img, out_labels


def shift_offsets(shape, w_frac: float, h_frac: float) -> tuple[int, int]:
    h, w = shape[:2]
    return int(round(h_frac * h)), int(round(w_frac * w))


def shift_aug(img, labels, w_frac_range=(0.0, 0.2), h_frac_range=(0.0, 0.1), rng: np.random.Generator | None = None):
    rng = np.random.default_rng() if rng is None else rng
    w_frac = float(rng.uniform(*w_frac_range))
    h_frac = float(rng.uniform(*h_frac_range))
    dy, dx = shift_offsets(np.shape(labels), w_frac, h_frac)
    return shift(img, labels, dy, dx)


# ---------------------------------------------------------------- splitting


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share, then hand the remainder out in order of largest fractional part."""
    raw = [n * r for r in ratios]
    sizes = [math.floor(x) for x in raw]
    rest = n - sum(sizes)
    by_frac = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in by_frac[:rest]:
        sizes[i] += 1
    return sizes


def split_dataset(items: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle, then contiguous train/val/test partition."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"need three positive split ratios, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)!r}")
    items = list(items)
    order = np.random.default_rng(seed).permutation(len(items))
    shuffled = [items[i] for i in order]
    a, b, _ = split_sizes(len(items), ratios)
    return shuffled[:a], shuffled[a:a + b], shuffled[a + b:]


# ---------------------------------------------------------------- files


def read_png(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_png(path, img) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed compression settings keep output bytes reproducible
    Image.fromarray(_rgb(img).astype(np.uint8), "RGB").save(path, format="PNG", compress_level=6)


def read_manifest(path) -> list[tuple[Path, Path]]:
    """``input_path<TAB>label_path`` per line; relative paths resolve against the manifest's folder."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'input<TAB>label'")
        pairs.append(tuple(p if Path(p).is_absolute() else path.parent / p for p in map(Path, parts)))
    return pairs


def write_manifest(path, pairs) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for a, b in pairs:
        a, b = Path(a), Path(b)
        rel = [p.relative_to(path.parent) if p.is_relative_to(path.parent) else p for p in (a, b)]
        lines.append(f"{rel[0]}\t{rel[1]}\n")
    path.write_text("".join(lines), encoding="utf-8")


def load_samples(manifest) -> list[Sample]:
    """Load a manifest of (RGB image, colour-coded label image) pairs."""
    samples = []
    for img_path, lab_path in read_manifest(manifest):
        image = read_png(img_path)
        try:
            labels = decode_label_colors(read_png(lab_path))
        except DataError as exc:
            raise DataError(f"{lab_path}: {exc}") from exc
        if labels.shape != image.shape[:2]:
            raise DimensionError(f"{lab_path}: label size {labels.shape} != image size {image.shape[:2]}", axis="h")
        samples.append(Sample(Path(img_path).stem, image, labels))
    return samples


# ---------------------------------------------------------------- toy data


def synthetic_road(h: int = 64, w: int = 64, rng: np.random.Generator | None = None):
    """A cropped dashboard-like frame: thin far band, trapezoid road with lane marks, box cars.

    Mimics frames after the sky/hood crop, where the road fills most of the
    lower image. Returns ``(image, labels)``.
    """
    rng = np.random.default_rng() if rng is None else rng
    yy, xx = np.mgrid[0:h, 0:w]
    horizon = int(h * rng.uniform(0.05, 0.2))
    image = np.zeros((h, w, 3), dtype=np.float64)
    image[:] = (70, 120, 60)  # verge
    image[:horizon] = (150, 150, 160)  # far buildings
    labels = np.zeros((h, w), dtype=np.uint8)

    cx = w * rng.uniform(0.4, 0.6)
    top_half = w * rng.uniform(0.08, 0.15)
    bottom_half = w * rng.uniform(0.45, 0.7)
    t = np.clip((yy - horizon) / max(h - 1 - horizon, 1), 0, 1)
    half = top_half + (bottom_half - top_half) * t
    road = (yy >= horizon) & (np.abs(xx - cx) <= half)
    labels[road] = ROAD
    image[road] = (90, 90, 95)
    lane = road & (np.abs(xx - cx) <= 0.04 * half + 0.5) & ((yy // 4) % 2 == 0)
    image[lane] = (240, 240, 240)

    for _ in range(int(rng.integers(1, 3))):
        ch = int(h * rng.uniform(0.15, 0.25))
        cw = int(w * rng.uniform(0.18, 0.3))
        cy = int(rng.uniform(horizon + 2, h - ch - 2))
        cx0 = int(np.clip(cx + w * rng.uniform(-0.25, 0.25) - cw / 2, 0, w - cw))
        labels[cy:cy + ch, cx0:cx0 + cw] = VEHICLE
        image[cy:cy + ch, cx0:cx0 + cw] = (170, 30, 35)

    image += rng.normal(0, 6, size=image.shape)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), labels


def synthetic_dataset(n: int = 8, h: int = 64, w: int = 64, seed: int = 0) -> list[Sample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        image, labels = synthetic_road(h, w, rng)
        out.append(Sample(f"synth{i:04d}", image, labels))
    return out
