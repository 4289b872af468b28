"""Run configuration: typed flat-text config files plus CLI overrides.

A config file holds one ``key = value`` pair per line (``#`` starts a
comment). Keys and value types come from the :class:`RunConfig` fields;
unknown keys are rejected. The effective config is echoed into every output
directory, and its hash identifies the run in checkpoints and summaries.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

MODES = ("cr", "baseline", "fp")
DATASETS = ("synthetic", "cifar10")


@dataclass
class RunConfig:
    # model / quantization
    arch: str = "tinycnn"
    num_classes: int = 10
    wbits: int = 2
    abits: int = 4
    # data
    dataset: str = "synthetic"
    data_dir: str = ""
    train_size: int = 5000
    test_size: int = 2000
    labeled_fraction: float = 1.0
    calibration_size: int = 100
    data_seed: int = 0
    # optimization
    epochs: int = 30
    batch_size: int = 256
    ratio: str = "1:7"
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    # consistency regularization
    ema_momentum: float = 0.999
    cr_strength: float = 1.0
    warmup_epochs: int = 4
    divergence: str = "mse"
    # augmentation
    flip_prob: float = 0.5
    translate_px: int = 4
    jitter: float = 0.4
    grayscale_prob: float = 0.0
    rotate_deg: float = 0.0
    # orchestration
    mode: str = "cr"
    seed: int = 0
    seeds: str = "0,1,2,3,4"
    include_fp: bool = False
    eval_samples: int = 0            # 0 = whole test split
    trace_every: int = 1
    jobs: int = 1                    # parallel (seed, mode) worker processes
    out_dir: str = "runs/out"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.dataset not in DATASETS:
            raise ConfigError(
                f"dataset must be one of {DATASETS}, got '{self.dataset}'"
            )
        self.ratio_parts()      # validates
        self.seed_list()
        if self.calibration_size < 1:
            raise ConfigError("calibration_size must be >= 1")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigError("train_size and test_size must be >= 1")

    def ratio_parts(self) -> tuple[int, int]:
        try:
            left, right = self.ratio.split(":")
            parts = (int(left), int(right))
        except ValueError as exc:
            raise ConfigError(
                f"ratio must look like '1:7', got '{self.ratio}'"
            ) from exc
        if parts[0] < 1 or parts[1] < 0:
            raise ConfigError(f"ratio parts out of range: '{self.ratio}'")
        return parts

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in str(self.seeds).split(",") if s.strip() != ""]
        except ValueError as exc:
            raise ConfigError(
                f"seeds must be a comma list of integers, got '{self.seeds}'"
            ) from exc

    # -- serialization -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    ftype = _FIELDS[name].type
    raw = raw.strip()
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(
            f"config key '{name}' expects {ftype}, got '{raw}'"
        ) from exc


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno} is not 'key = value': {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}' on line {lineno}")
        values[key] = _coerce(key, raw)
    base_values = dataclasses.asdict(base) if base is not None else {}
    base_values.update(values)
    return RunConfig(**base_values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), base=base)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """CLI flags override config keys; None values mean 'not given'."""
    clean = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        clean[key] = value
    return config.replace(**clean) if clean else config
