"""Versioned JSON experiment configuration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path

from .balance import DEFAULT_FRACTIONS, Strategy
from .ingest import TaskKind
from .nn.models import Arch
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class Stage(str, Enum):
    SYNTH = "synth"
    PREPROCESS = "preprocess"
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"
    EXTERNAL = "external_validate"
    REPORT = "report"


@dataclass
class ExperimentConfig:
    stage: Stage = Stage.PRETRAIN
    seed: int | None = None
    out: str = "runs/experiment"
    name: str = "cohort"  # dataset label used in reports
    # inputs
    events: str | None = None
    signals: str | None = None
    labels: str | None = None
    source: str | None = None  # pretrain/finetune record dir, record.json or checkpoint
    records: list = field(default_factory=list)  # report inputs
    # preprocessing
    task_kind: TaskKind = TaskKind.FREE_TEXT
    segment: bool = False
    cleaning: dict = field(default_factory=dict)
    # modelling
    arch: Arch = Arch.GRU_FCN
    model: dict = field(default_factory=dict)  # extra ModelSpec fields
    balance: Strategy = Strategy.IMBALMED
    fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    window_size: int = 50
    stride: int = 25
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    k: int = 10
    search: dict = field(default_factory=dict)  # {"enabled": bool, "dataset_class": ..., "space": {...}}
    # fine-tuning
    policies: list = field(default_factory=lambda: ["full", "head_only"])
    finetune_lr: float | None = None
    finetune_balance: Strategy = Strategy.UNBALANCED
    # synthetic cohort
    synth: dict = field(default_factory=dict)
    # report
    placeholders: bool = False
    figures: bool = True
    jobs: int = 1

    def __post_init__(self):
        try:
            self.stage = Stage(self.stage)
            self.task_kind = TaskKind(self.task_kind)
            self.arch = Arch(self.arch)
            self.balance = Strategy(self.balance)
            self.finetune_balance = Strategy(self.finetune_balance)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        bad = [p for p in self.policies if p not in ("full", "head_only")]
        if bad:
            raise ConfigError(f"unknown freeze policies {bad}")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def train_config(self, **override) -> TrainConfig:
        opts = {"seed": self.seed or 0, **self.train, **override}
        try:
            return TrainConfig(**opts)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None

    def require(self, *names: str) -> None:
        if self.seed is None:
            raise ConfigError("a seed is mandatory (--seed or \"seed\" in the config)")
        missing = [n for n in names if not getattr(self, n)]
        if missing:
            raise ConfigError(f"stage {self.stage.value} needs: {', '.join(missing)}")

    def snapshot(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, Enum):
                d[k] = v.value
        d["version"] = SCHEMA_VERSION
        d["train"] = self.train_config().to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)
