"""Phase configurations with published defaults and a CPU-sized desk preset."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError

PHASES = ("e0", "streams", "cama", "target")
OPTIMIZERS = ("adam", "sgd_momentum")


@dataclass(frozen=True)
class PhaseConfig:
    phase: str
    epochs: int
    optimizer: str
    lr: float
    weight_decay: float = 0.0
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    seed: int = 0
    width: int = 64
    patch_size: int = 64

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.width < 1:
            raise ConfigError(f"invalid numeric setting in {self}")

    def with_overrides(self, overrides: Optional[dict] = None, **kw) -> "PhaseConfig":
        merged = dict(overrides or {}, **kw)
        known = {f.name: f.type for f in fields(self)}
        clean = {}
        for k, v in merged.items():
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
            clean[k] = _coerce(getattr(self, k), v)
        return replace(self, **clean)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(current, value):
    if isinstance(value, str):
        if isinstance(current, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    return value


PAPER = {
    "e0": PhaseConfig("e0", epochs=90, optimizer="adam", lr=1e-4, weight_decay=5e-4, batch_size=128),
    "streams": PhaseConfig(
        "streams", epochs=90, optimizer="sgd_momentum", lr=0.1, weight_decay=5e-4, batch_size=128, momentum=0.9
    ),
    "cama": PhaseConfig("cama", epochs=200, optimizer="adam", lr=2e-4, beta1=0.5, batch_size=32),
    "target": PhaseConfig(
        "target", epochs=90, optimizer="sgd_momentum", lr=0.1, weight_decay=5e-4, batch_size=128, momentum=0.9
    ),
}

# width-16 networks on 32x32 patches; sized for a single CPU core
DESK = {
    "e0": PAPER["e0"].with_overrides(epochs=6, batch_size=32, width=16, patch_size=32),
    "streams": PAPER["streams"].with_overrides(epochs=8, lr=0.05, batch_size=32, width=16, patch_size=32),
    "cama": PAPER["cama"].with_overrides(epochs=10, lr=2e-4, batch_size=32, width=16, patch_size=32),
    "target": PAPER["target"].with_overrides(epochs=8, lr=0.05, batch_size=32, width=16, patch_size=32),
}

PRESETS = {"paper": PAPER, "desk": DESK}

# Cama loss weights per preset. Ten desk epochs are too few for the
# classifier term to steer the generator at lambda_clf = 0.01.
LOSS_WEIGHTS = {
    "paper": {"lambda_pix": 10.0, "lambda_clf": 0.01},
    "desk": {"lambda_pix": 10.0, "lambda_clf": 0.1},
}


def phase_config(phase: str, preset: str = "paper", overrides: Optional[dict] = None) -> PhaseConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}")
    return PRESETS[preset][phase].with_overrides(overrides or {})


def parse_overrides(items) -> dict:
    """``["lr=0.1", "epochs=3"]`` -> ``{"lr": "0.1", "epochs": "3"}``."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_config_file(path) -> dict:
    """JSON object, or flat ``key=value`` lines (``#`` starts a comment)."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    return parse_overrides([ln for ln in lines if ln])
