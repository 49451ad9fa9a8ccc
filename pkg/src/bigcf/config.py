"""Training configuration and its key=value file format."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, fields

from .errors import ConfigError

log = logging.getLogger(__name__)

VARIANTS = ("full", "wo_gcr", "wo_ir", "wo_hnr", "wo_bir", "wo_bigr", "wo_pgr",
            "baseline_mf", "baseline_lightgcn")
ABLATIONS = ("full", "wo_gcr", "wo_ir", "wo_hnr", "wo_bir", "wo_bigr", "wo_pgr")

_CHOICES = {
    "variant": VARIANTS,
    "noise_mode": ("sample", "zero", "one"),
    "train_noise": ("sample", "zero", "one"),
    "bpr_score": ("logit", "prob"),
    "gcr_reduction": ("mean", "sum"),
    "dtype": ("float32", "float64"),
}


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 32
    batch_size: int = 10240
    layers: int = 2
    intents: int = 64
    kappa: float = 1.0
    tau: float = 0.2
    lambda1: float = 0.2
    lambda2: float = 1e-5
    kl_weight: float = 0.01
    lr: float = 1e-3
    epochs: int = 1000
    patience: int = 10
    seed: int = 2024
    variant: str = "full"
    # embedding noise at inference; training always uses train_noise
    noise_mode: str = "one"
    train_noise: str = "sample"
    bpr_score: str = "logit"
    gcr_reduction: str = "mean"
    include_layer0: bool = True
    val_fraction: float = 0.1
    eval_every: int = 1
    topk: int = 20
    dtype: str = "float32"

    def __post_init__(self):
        positive = ("dim", "batch_size", "intents", "kappa", "tau", "lr", "epochs", "eval_every",
                    "topk")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)!r}")
        for key in ("layers", "lambda1", "lambda2", "kl_weight", "patience"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be nonnegative, got {getattr(self, key)!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; "
                                  f"got {getattr(self, key)!r}")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def echo(self) -> str:
        """Effective configuration as key=value lines (the config file format)."""
        return "\n".join(f"{f.name}={_fmt(getattr(self, f.name))}" for f in fields(self))


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw) -> object:
    kind = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def normalize_key(key: str) -> str:
    k = key.strip().replace("-", "_")
    if k not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    return k


def parse_config_text(text: str) -> dict[str, object]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        k = normalize_key(key)
        out[k] = _coerce(k, value.strip())
    return out


def parse_config(flags: dict | None = None, config_path=None) -> TrainConfig:
    """Defaults, overridden by the config file, overridden by flags."""
    merged: dict[str, object] = {}
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                merged.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from None
    for key, value in (flags or {}).items():
        if value is None:
            continue
        k = normalize_key(key)
        merged[k] = _coerce(k, value)
    cfg = TrainConfig(**merged)
    log.info("effective config:\n%s", cfg.echo())
    return cfg
