"""Flat key=value configuration with dotted keys.

A config file holds one ``key=value`` pair per line (``#`` comments
allowed); CLI ``--ablation KEY=VALUE`` flags override file values.  Values
are typed by inspection: booleans, ints, floats, comma lists, or strings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError
from .fusion import FusionConfig
from .losses import LossConfig
from .model import ModelConfig

DEFAULTS = {
    "train.lr": 0.001,
    "train.decay_factor": 0.5,
    "train.decay_interval": 20,
    "train.max_epochs": 100,
    "train.patience": 10,
    "train.batch_size": 1,
    "train.seed": 0,
    "train.val_fraction": 0.2,
    "loss.lambda_s": 0.3,
    "loss.lambda_d": 0.1,
    "loss.radius": 7,
    "loss.eps": 1e-7,
    "loss.use_label_mask": False,
    "loss.reduction": "sum",
    "model.levels": 4,
    "model.channels": (16, 32, 64, 128),
    "model.patch_stride": 2,
    "decoder.kind": "roadsegv2",
    "decoder.block": "",
    "ham.spatial": True,
    "ham.channel": True,
    "ham.atrous": True,
    "hfcd.enabled": True,
    "awfr.enabled": True,
    "fusion.baseline_sum": False,
    "augment.ops": (),
}


def parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in raw:
        return tuple(parse_value(part) for part in raw.split(",") if part.strip())
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


def parse_override(text: str):
    if "=" not in text:
        raise ContractError(f"override {text!r} must look like KEY=VALUE")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in DEFAULTS:
        raise ContractError(f"unknown config key {key!r}")
    return key, parse_value(raw)


def read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{lineno}: expected KEY=VALUE, got {line!r}")
        key, value = parse_override(line)
        values[key] = value
    return values


def merged(file_values: dict = None, overrides: dict = None) -> dict:
    out = dict(DEFAULTS)
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ContractError(f"unknown config key {key!r}")
            out[key] = value
    return out


def _as_tuple(v):
    if isinstance(v, tuple):
        return v
    if v in ("", None):
        return ()
    return (v,)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    decay_factor: float = 0.5
    decay_interval: int = 20
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 1
    seed: int = 0
    val_fraction: float = 0.2
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment_ops: tuple = ()

    def __post_init__(self):
        if self.lr <= 0 or self.decay_factor <= 0 or self.decay_interval < 1:
            raise ContractError("learning rate, decay factor, and interval must be positive")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ContractError("epoch and batch counts must be positive")
        if self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractError("validation fraction must lie in (0, 1)")


def train_config_from_mapping(m: dict) -> TrainConfig:
    m = merged(m)
    fusion = FusionConfig(
        spatial=m["ham.spatial"], channel=m["ham.channel"], atrous=m["ham.atrous"],
        hfcd=m["hfcd.enabled"], awfr=m["awfr.enabled"],
        baseline_sum=m["fusion.baseline_sum"])
    loss = LossConfig(lambda_s=m["loss.lambda_s"], lambda_d=m["loss.lambda_d"],
                      radius=m["loss.radius"], eps=m["loss.eps"],
                      use_label_mask=m["loss.use_label_mask"],
                      reduction=m["loss.reduction"])
    model = ModelConfig(levels=m["model.levels"], channels=_as_tuple(m["model.channels"]),
                        patch_stride=m["model.patch_stride"],
                        decoder_kind=m["decoder.kind"],
                        decoder_block=m["decoder.block"] or None,
                        fusion=fusion, seed=m["train.seed"])
    return TrainConfig(lr=m["train.lr"], decay_factor=m["train.decay_factor"],
                       decay_interval=m["train.decay_interval"],
                       max_epochs=m["train.max_epochs"], patience=m["train.patience"],
                       batch_size=m["train.batch_size"], seed=m["train.seed"],
                       val_fraction=m["train.val_fraction"], loss=loss, model=model,
                       augment_ops=_as_tuple(m["augment.ops"]))
