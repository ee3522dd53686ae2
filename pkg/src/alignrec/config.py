"""Run configuration: JSON in, validated dataclasses out.

Two named presets carry the two published hyperparameter sets: "main"
(train lr 0.001, adaptation lr 0.005, test weights 1e-2/1e-1) and
"appendix" (train lr 0.01, adaptation lr 0.05, test weights 1e-3/1e-2).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .adapt import AdaptConfig
from .ingest import GeneratorSpec


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


@dataclass
class DataConfig:
    path: str = ""                   # TSV path; empty means use the generator
    generator: dict = field(default_factory=dict)
    max_len: int = 50
    min_interactions: int = 10       # 0 disables filtering
    pad_side: str = "left"


@dataclass
class LossConfig:
    mu1_train: float = 0.1
    mu2_train: float = 1.0
    lam: object = "median"           # "median" or a positive number (seconds)
    block_size: int = 10
    dilution_power: int = 2


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 500
    batch_size: int = 4096
    eval_every: int = 10
    patience: int = 3


@dataclass
class ModelSection:
    d: int = 64
    d_s: int = 32
    conv_width: int = 4
    d_ff: int = 0
    dropout: float = 0.2
    n_blocks: int = 1
    detach_extension: bool = True
    extension_history: str = "batch"


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float64"
    out_dir: str = "runs/out"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    losses: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def to_dict(self):
        return {
            "seed": self.seed,
            "precision": self.precision,
            "out_dir": self.out_dir,
            "data": dict(self.data.__dict__),
            "model": dict(self.model.__dict__),
            "losses": dict(self.losses.__dict__),
            "train": dict(self.train.__dict__),
            "adapt": self.adapt.to_dict(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


PRESETS = {
    "main": {
        "train": {"lr": 0.001},
        "losses": {"mu1_train": 0.1, "mu2_train": 1.0},
        "adapt": {"lr": 0.005, "mu1_test": 1e-2, "mu2_test": 1e-1, "steps": 1},
    },
    "appendix": {
        "train": {"lr": 0.01},
        "losses": {"mu1_train": 0.1, "mu2_train": 1.0},
        "adapt": {"lr": 0.05, "mu1_test": 1e-3, "mu2_test": 1e-2, "steps": 1},
    },
}

ABLATIONS = ("time", "state", "both", "time-test", "state-test", "both-test")


def _merge(base, over):
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _merge(base[key], val)
        else:
            base[key] = val
    return base


def load_config(source=None, preset=None, overrides=None, ablate=()):
    """Build a RunConfig from a JSON file/dict, a preset, CLI overrides and
    ablation flags; every problem is collected before raising."""
    raw = {}
    if isinstance(source, str):
        with open(source, encoding="utf-8") as fh:
            raw = json.load(fh)
    elif isinstance(source, dict):
        raw = json.loads(json.dumps(source))

    merged = RunConfig().to_dict()
    if preset:
        if preset not in PRESETS:
            raise ConfigError([f"unknown preset {preset!r} (have {sorted(PRESETS)})"])
        _merge(merged, PRESETS[preset])
    _merge(merged, raw)
    if overrides:
        _merge(merged, overrides)

    for flag in ablate:
        if flag not in ABLATIONS:
            raise ConfigError([f"unknown ablation {flag!r} (have {ABLATIONS})"])
        if flag in ("time", "both"):
            merged["losses"]["mu1_train"] = 0.0
        if flag in ("state", "both"):
            merged["losses"]["mu2_train"] = 0.0
        if flag in ("time-test", "both-test"):
            merged["adapt"]["use_time_loss"] = False
        if flag in ("state-test", "both-test"):
            merged["adapt"]["use_state_loss"] = False

    problems = []
    cfg = None
    try:
        cfg = RunConfig(
            seed=int(merged["seed"]),
            precision=str(merged["precision"]),
            out_dir=str(merged["out_dir"]),
            data=DataConfig(**merged["data"]),
            model=ModelSection(**merged["model"]),
            losses=LossConfig(**merged["losses"]),
            train=TrainConfig(**merged["train"]),
            adapt=AdaptConfig(**merged["adapt"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError([str(e)])

    problems.extend(validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg):
    """Check every module precondition up front; returns a problem list."""
    p = []
    if cfg.precision not in ("float64", "float32"):
        p.append(f"precision must be float64|float32, got {cfg.precision!r}")
    if cfg.data.max_len < 1:
        p.append(f"data.max_len must be >= 1, got {cfg.data.max_len}")
    if cfg.data.pad_side not in ("left", "right"):
        p.append(f"data.pad_side must be left|right, got {cfg.data.pad_side!r}")
    if cfg.data.min_interactions not in (0,) and cfg.data.min_interactions < 3:
        p.append("data.min_interactions must be 0 (off) or >= 3")
    if not cfg.data.path and not cfg.data.generator:
        p.append("data needs either a path or a generator spec")
    if cfg.model.d < 1 or cfg.model.d_s < 1:
        p.append("model dims must be positive")
    if cfg.model.conv_width < 1:
        p.append("model.conv_width must be >= 1")
    if not (0.0 <= cfg.model.dropout < 1.0):
        p.append(f"model.dropout must be in [0, 1), got {cfg.model.dropout}")
    if cfg.model.n_blocks < 1:
        p.append("model.n_blocks must be >= 1")
    if isinstance(cfg.losses.lam, str):
        if cfg.losses.lam != "median":
            p.append(f'losses.lam must be "median" or a positive number, got {cfg.losses.lam!r}')
    elif float(cfg.losses.lam) <= 0:
        p.append(f"losses.lam must be positive, got {cfg.losses.lam}")
    if cfg.losses.block_size < 2:
        p.append(f"losses.block_size must be >= 2, got {cfg.losses.block_size}")
    if cfg.losses.mu1_train < 0 or cfg.losses.mu2_train < 0:
        p.append("training loss weights must be non-negative")
    if cfg.train.lr <= 0:
        p.append(f"train.lr must be positive, got {cfg.train.lr}")
    if cfg.train.epochs < 1:
        p.append("train.epochs must be >= 1")
    if cfg.train.batch_size < 1:
        p.append("train.batch_size must be >= 1")
    if cfg.train.eval_every < 1:
        p.append("train.eval_every must be >= 1")
    if cfg.train.patience < 1:
        p.append("train.patience must be >= 1")
    return p


def generator_spec(cfg):
    return GeneratorSpec(**cfg.data.generator) if cfg.data.generator else None
