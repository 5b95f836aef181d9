"""Run configuration: a flat UTF-8 ``key = value`` file with ``#`` comments."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from ..nets import FusionNetConfig, PixelNetConfig, RegionNetConfig
from ..regions import ClusterConfig


class ConfigError(ValueError):
    pass


def _ints(text):
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _layers(text):
    # "16x3,16x3,1x3" -> ((16, 3), (16, 3), (1, 3))
    out = []
    for item in text.replace(" ", "").split(","):
        ch, _, k = item.partition("x")
        out.append((int(ch), int(k)))
    return tuple(out)


def _fmt(value):
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{c}x{k}" for c, k in value)
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    # data
    dataset: str = "dataset"
    image_dir: str = ""
    mask_dir: str = ""
    fixation_dir: str = ""
    pred_dir: str = ""
    model: str = ""
    out_dir: str = "out"
    mask_threshold: int = 128
    # region generation
    n: int = 300
    compactness: float = 10.0
    k: int = 15
    t: float = -0.04
    a: float = 2.0
    m: int = 5
    # networks
    pixel_blocks: tuple = (16, 32, 64, 64)
    pixel_convs: int = 2
    pixel_up_channels: int = 2
    region_window: int = 51
    region_channels: tuple = (16, 32, 64)
    region_fc: tuple = (64, 1)
    fusion_layers: tuple = ((16, 3), (16, 3), (1, 3))
    # training
    lr: float = 1e-2
    region_lr: float = 1e-2
    fusion_lr: float = 5e-2
    momentum: float = 0.9
    clip_norm: float = 1.0
    epochs: int = 200
    region_epochs: int = 30
    pixel_pretrain_epochs: int = 100
    fusion_pretrain_epochs: int = 100
    lam: float = 1.0
    seed: int = 0

    _PARSERS = {
        "pixel_blocks": _ints,
        "region_channels": _ints,
        "region_fc": _ints,
        "fusion_layers": _layers,
    }

    @classmethod
    def from_text(cls, text: str, base_dir: str = "") -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = cls._parse(known[key], key, value, lineno)
        cfg = cls(**values)
        if base_dir:
            for key in ("image_dir", "mask_dir", "fixation_dir", "pred_dir", "model", "out_dir"):
                val = getattr(cfg, key)
                if val and not os.path.isabs(val):
                    setattr(cfg, key, os.path.normpath(os.path.join(base_dir, val)))
        cfg.validate()
        return cfg

    @classmethod
    def _parse(cls, f, key, value, lineno):
        try:
            if key in cls._PARSERS:
                return cls._PARSERS[key](value)
            kind = type(f.default)
            if kind is bool:
                return value.lower() in ("1", "true", "yes")
            return kind(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))

    def validate(self):
        try:
            self.cluster_config()
            self.pixel_config()
            self.region_config()
            self.fusion_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.n < 1 or self.m < 1:
            raise ConfigError("n and m must be positive")
        for key in ("epochs", "region_epochs", "pixel_pretrain_epochs", "fusion_pretrain_epochs"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        if min(self.lr, self.region_lr, self.fusion_lr) <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning rates must be positive and momentum in [0, 1)")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(k=self.k, t=self.t, a=self.a)

    def pixel_config(self) -> PixelNetConfig:
        return PixelNetConfig(block_channels=self.pixel_blocks, convs_per_block=self.pixel_convs, up_channels=self.pixel_up_channels)

    def region_config(self) -> RegionNetConfig:
        return RegionNetConfig(window_size=self.region_window, conv_channels=self.region_channels, fc_widths=self.region_fc)

    def fusion_config(self) -> FusionNetConfig:
        return FusionNetConfig(layers=self.fusion_layers)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))
