"""Run configuration: one flat document covering every module's knobs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .backbone import DEFAULT_TEMPLATE


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    max_seq_len: int = 20
    min_len: int = 5
    max_title: int = 200
    split: str = "leave_one_out"
    # id model
    id_dim: int = 64
    encoder: str = "attention"
    pretrain_epochs: int = 20
    pretrain_batch_size: int = 64
    pretrain_lr: float = 1e-3
    # backbone
    llm_dim: int = 32
    llm_layers: int = 2
    max_context: int = 128
    ffn_mult: int = 4
    pooling: str = "last"
    use_positions: bool = True
    backbone_warmup_steps: int = 0
    template: str = DEFAULT_TEMPLATE
    # adapter
    prompt_len: int = 2
    rho: float = 1.0
    bandwidth: str = "fixed"
    per_layer_gate: bool = False
    ablation: str = "none"
    # joint training
    lam: float = 0.5
    lr: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 50
    patience: int = 5
    freeze_head: bool = False
    seed: int = 42
    dtype: str = "float64"

    def __post_init__(self):
        checks = [
            (self.lam >= 0, "lam must be >= 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.rho > 0, "rho must be > 0"),
            (self.prompt_len >= 1, "prompt_len must be >= 1"),
            (self.llm_layers >= 1, "llm_layers must be >= 1"),
            (self.max_seq_len >= 1, "max_seq_len must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.encoder in ("attention", "gru", "last"), f"unknown encoder {self.encoder!r}"),
            (self.pooling in ("last", "mean"), f"unknown pooling {self.pooling!r}"),
            (self.bandwidth in ("fixed", "median"), f"unknown bandwidth rule {self.bandwidth!r}"),
            (self.ablation in ABLATIONS, f"unknown ablation {self.ablation!r}"),
            (self.split in ("leave_one_out", "ratio"), f"unknown split {self.split!r}"),
            (self.dtype in ("float64", "float32"), f"unknown dtype {self.dtype!r}"),
            ("{titles}" in self.template, "template needs a {titles} placeholder"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def adapter_variant(self) -> str:
        return {"layerwise": "shared", "refinement": "no_refine"}.get(self.ablation, "full")

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.ablation == "distribution" else self.lam

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, **changes) -> "RunConfig":
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            default = getattr(cls, key)
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{key} must be a boolean")
            elif isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{key} must be an integer")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{key} must be a number")
                value = float(value)
            elif isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"{key} must be a string")
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


ABLATIONS = ("none", "layerwise", "refinement", "distribution")
LAMBDA_GRID = (0.1, 0.2, 0.5, 1.0)
PROMPT_LENGTHS = (1, 2, 3, 4)
