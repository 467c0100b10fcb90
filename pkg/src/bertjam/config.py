"""Flat run configuration: defaults < config file < command-line overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # task and data
    task: str = "cipher"
    data_seed: int = 1
    content_vocab: int = 64
    n_polysemous: int = 8
    n_markers: int = 2
    min_len: int = 5
    max_len: int = 16
    reorder: bool = False
    n_train: int = 20000
    n_valid: int = 1000
    n_test: int = 1000
    # micro-BERT
    bert_layers: int = 2
    bert_dim: int = 32
    bert_heads: int = 4
    bert_ff: int = 64
    bert_dropout: float = 0.1
    bert_steps: int = 400
    bert_lr: float = 2e-3
    bert_batch: int = 64
    # translation model
    d_model: int = 32
    d_ff: int = 64
    n_heads: int = 4
    n_layers: int = 2
    dropout: float = 0.3
    label_smoothing: float = 0.0
    attn_scale: str = "head"
    encdec_self_keys: bool = True
    use_bert: bool = True
    variant: str = "M0"
    # optimisation
    seed: int = 1
    phase_epochs: str = "40,10,10"
    warmup: int = 4000
    peak_lr: float = 5e-4
    init_lr: float = 1e-7
    accum: int = 1
    max_tokens: int = 4096
    avg_window: int = 10
    patience: int = 2
    min_delta: float = 1e-3
    converge_epochs: int = 3
    reset_optimizer: bool = True
    # decoding
    beam: int = 5
    length_penalty: float = 1.0
    penalty_style: str = "simple"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in ("cipher", "copy"):
            raise ConfigError(f"task must be 'cipher' or 'copy', got {self.task!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}")
        self.epochs()
        if self.beam < 1:
            raise ConfigError("beam must be >= 1")
        if self.avg_window < 1 or self.accum < 1 or self.patience < 1:
            raise ConfigError("avg_window, accum and patience must be >= 1")

    def epochs(self) -> tuple[int, int, int]:
        try:
            parts = tuple(int(x) for x in str(self.phase_epochs).split(","))
        except ValueError:
            raise ConfigError(f"phase_epochs must be three integers, got {self.phase_epochs!r}") from None
        if len(parts) != 3 or any(p < 0 for p in parts) or parts[0] < 1:
            raise ConfigError(f"phase_epochs must be 'e1,e2,e3' with e1 >= 1, got {self.phase_epochs!r}")
        return parts  # type: ignore[return-value]

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **overrides) -> "RunConfig":
        return resolve(self.to_dict(), overrides)


VARIANTS = ("M0", "M1", "M2", "M3")

# Every desk-scale default used by the acceptance suite.
DESK = {
    "n_train": 6000,
    "n_valid": 500,
    "n_test": 500,
    "dropout": 0.1,
    "phase_epochs": "10,3,5",
    "warmup": 400,
    "peak_lr": 4e-3,
    "max_tokens": 1024,
    "avg_window": 5,
    "bert_steps": 400,
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = type(getattr(RunConfig, key))
    if isinstance(value, str) and kind is not str:
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{key}: expected a boolean, got {value!r}")
            return low in ("true", "1", "yes")
        try:
            return kind(value)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is str and not isinstance(value, str):
        return str(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def resolve(*layers: dict) -> RunConfig:
    """Merge override layers left to right on top of the defaults."""
    merged: dict = {}
    for layer in layers:
        for key, value in layer.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value)
    return RunConfig(**merged)


def load_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    data = json.loads(path.read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def parse_overrides(items) -> dict:
    """``key=value`` strings to a dict (values coerced later by ``resolve``)."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build(desk: bool = False, file=None, overrides: dict | None = None) -> RunConfig:
    layers = [DESK if desk else {}]
    if file is not None:
        layers.append(load_file(file))
    layers.append(overrides or {})
    return resolve(*layers)


def write_resolved(cfg: RunConfig, run_dir) -> None:
    path = Path(run_dir) / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
