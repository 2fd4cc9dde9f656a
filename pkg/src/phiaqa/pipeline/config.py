"""Training configuration, key=value config files, and the config fingerprint."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError
from ..synthdata import parse_key_values

STRATEGIES = ("two_stage", "one_stage")
FLOW_REDUCTIONS = ("element_mean", "sum")


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 32
    epochs: int = 200
    lr_max: float = 0.01
    lr_min: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.01
    dropout: float = 0.3
    lambda_m: float = 0.5
    lambda_r: float = 0.01
    steps: int = 4
    d_k: int = 128
    d_t: int = 32
    hidden: int = 0  # flow width; 0 means D (or D // 2 with half)
    no_gmf: bool = False
    no_tesa: bool = False
    no_lcr: bool = False
    no_kl: bool = False
    half: bool = False
    strategy: str = "two_stage"
    freeze_tete: bool = False
    positions: bool = True
    teacher_forcing: bool = False
    flow_to_head: bool = True
    reinit_head: bool = False
    stage1_lcr: bool = True
    mean_score_loss: bool = True  # False: L_S as the plain half sum of squares
    flow_reduction: str = "element_mean"  # or "sum": L_M as a raw squared norm
    lcr_normalize: str = "softmax"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.use_lcr and self.batch < 4:
            raise ConfigError(f"batch size {self.batch} < 4 with LCR enabled")
        if self.batch < 1 or self.epochs < 0 or self.steps < 1:
            raise ConfigError("batch >= 1, epochs >= 0 and steps >= 1 are required")
        if not self.lr_max >= self.lr_min > 0:
            raise ConfigError("need lr_max >= lr_min > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.lcr_normalize not in ("softmax", "sum"):
            raise ConfigError(f"unknown lcr_normalize {self.lcr_normalize!r}")
        if self.flow_reduction not in FLOW_REDUCTIONS:
            raise ConfigError(f"flow_reduction must be one of {FLOW_REDUCTIONS}")
        if min(self.d_k, self.d_t) < 1:
            raise ConfigError("d_k and d_t must be positive")

    @property
    def use_lcr(self) -> bool:
        return not self.no_lcr and self.lambda_r > 0

    @property
    def attention_mode(self) -> str:
        return "vanilla" if self.no_tesa else "tesa"

    def flow_hidden(self, D: int) -> int:
        width = self.hidden or D
        return max(width // 2, 1) if self.half else width

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:32]

    @classmethod
    def from_mapping(cls, values: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        kinds = {f.name: f.type for f in fields(cls)}
        changes = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _parse(kinds[key], raw, key)
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_mapping(parse_key_values(text), base)

    @classmethod
    def from_file(cls, path, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), base)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(kind, raw, key):
    if not isinstance(raw, str):
        return raw
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip().replace("-", "_") if key == "strategy" else raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
