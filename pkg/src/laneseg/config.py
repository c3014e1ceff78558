"""Flat ``key = value`` configuration files.

``#`` starts a comment, blank lines are ignored and a later assignment of
the same key wins. Absent keys keep their defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .training import TrainConfig

DOCS = {
    "lr": "Adam learning rate",
    "epochs": "training epochs",
    "batch_size": "images per optimizer step",
    "filters": "comma-separated encoder filter counts (non-decreasing)",
    "gcn_k": "odd extent of the separable GCN kernels",
    "weight_beta": "lower clamp of the per-class loss weights",
    "weight_alpha": "upper clamp of the per-class loss weights",
    "seed": "RNG seed for init, shuffling, splitting and augmentation",
    "c_classes": "number of classes (background, road, vehicle)",
    "weight_decay": "L2 penalty added to gradients (0 disables)",
    "adam_beta1": "Adam first-moment decay",
    "adam_beta2": "Adam second-moment decay",
    "adam_eps": "Adam stabilizer",
    "bn_eps": "batch-norm variance floor",
    "bn_momentum": "batch-norm running-stat momentum",
    "br_post_relu": "apply relu after the BR residual addition",
    "output_scale": "factor applied to head outputs (colour units)",
    "augment": "random rotation/shift per sample each epoch",
    "crop_top": "rows removed from the top (sky) by preprocess",
    "crop_bottom": "rows removed from the bottom (hood) by preprocess",
    "road_tag": "red-channel tag id kept as road",
    "vehicle_tag": "red-channel tag id kept as vehicle",
    "far_plane": "depth far plane in metres",
    "data": "default dataset manifest",
    "out": "default checkpoint path",
    "split": "train,val,test ratios summing to 1",
    "port": "edge server TCP port",
}


@dataclass
class Config(TrainConfig):
    crop_top: int = 180
    crop_bottom: int = 60
    road_tag: int = 7
    vehicle_tag: int = 10
    far_plane: float = 1000.0
    data: str = ""
    out: str = ""
    split: tuple = (0.8, 0.1, 0.1)
    port: int = 7878

    def validate(self) -> None:
        super().validate()
        if self.crop_top < 0 or self.crop_bottom < 0:
            raise ConfigError("crop budgets must be >= 0")
        if self.road_tag == self.vehicle_tag:
            raise ConfigError("road_tag and vehicle_tag must differ")
        if not self.far_plane > 0:
            raise ConfigError("far_plane must be > 0")
        if len(self.split) != 3 or any(r <= 0 for r in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError("split must be three positive ratios summing to 1")
        if not 0 < self.port < 65536:
            raise ConfigError("port must be in 1..65535")

    def train_config(self) -> TrainConfig:
        names = TrainConfig.field_names()
        return TrainConfig(**{n: getattr(self, n) for n in names})


def _convert(key: str, default, text: str):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        kind = type(default[0])
        return tuple(kind(p.strip()) for p in text.split(","))
    return text


def parse_config_text(text: str, source: str = "<config>") -> Config:
    defaults = Config()
    values: dict = {}
    lines: dict[str, int] = {}
    known = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(Config)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: expected 'key = value'", line=lineno)
        key, _, val = (part.strip() for part in line.partition("="))
        if key not in known:
            raise ConfigError(f"{source}: unknown key {key!r}", line=lineno)
        try:
            values[key] = _convert(key, known[key], val)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key}: {exc}", line=lineno) from None
        lines[key] = lineno
    try:
        return Config(**values)
    except ConfigError as exc:
        # point at the last line that touched a key named in the message
        msg = str(exc)
        hits = [ln for k, ln in lines.items() if k in msg]
        raise ConfigError(f"{source}: {msg}", line=max(hits) if hits else None) from None


def parse_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def help_text() -> str:
    defaults = Config()
    rows = []
    for f in dataclasses.fields(Config):
        val = getattr(defaults, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        rows.append(f"  {f.name:<14} = {str(val):<14} # {DOCS.get(f.name, '')}")
    return "config keys (key = value, '#' comments, later keys override):\n" + "\n".join(rows)
