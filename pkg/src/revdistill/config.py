"""Run configuration: one YAML file per run, command-line flags layered on top."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from revdistill.backbone import BackboneSpec
from revdistill.distill import TrainConfig
from revdistill.errors import ConfigError
from revdistill.ocbe import VARIANTS

DATASETS = ("mvtec", "synthetic", "idx", "cifar10", "folder")


@dataclass
class DataConfig:
    dataset: str = "mvtec"
    root: str | None = None
    category: str | None = None
    normal_class: int | None = None
    synth_n_train: int = 200
    synth_n_test: int = 100
    synth_seed: int = 0

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")
        if self.dataset == "mvtec" and not self.category:
            raise ConfigError("--category is required for the mvtec dataset")
        if self.dataset != "synthetic" and not self.root:
            raise ConfigError(f"--root is required for the {self.dataset} dataset")
        if self.dataset in ("idx", "cifar10", "folder") and self.normal_class is None:
            raise ConfigError("--normal-class is required for one-class corpora")


@dataclass
class ScoringConfig:
    sigma: float = 4.0
    score: str = "max"  # "max": detection score, "sum": novelty score
    smooth_before_sum: bool = False
    pro_fpr_limit: float = 0.3
    histogram_bins: int = 20
    batch_size: int = 16

    def validate(self) -> None:
        if self.score not in ("max", "sum"):
            raise ConfigError(f"score must be 'max' or 'sum', got {self.score!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if not 0 < self.pro_fpr_limit <= 1:
            raise ConfigError("pro_fpr_limit must lie in (0, 1]")


@dataclass
class RunConfig:
    name: str = "run"
    out_dir: str | None = None
    ocbe_variant: str = "mff_oce"
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)

    def __post_init__(self) -> None:
        if self.ocbe_variant not in VARIANTS:
            raise ConfigError(f"unknown OCBE variant {self.ocbe_variant!r}")
        self.train.stages_used = self.backbone.stages_used

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) if self.out_dir else Path("runs") / self.name

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.scoring.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone"]["stages_used"] = list(self.backbone.stages_used)
        d["train"]["stages_used"] = list(self.train.stages_used)
        d["train"]["adam_betas"] = list(self.train.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        sections = {"backbone": BackboneSpec, "train": TrainConfig, "data": DataConfig, "scoring": ScoringConfig}
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                kind = sections[key]
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be a mapping")
                known = {f.name for f in dataclasses.fields(kind)}
                unknown = set(value) - known
                if unknown:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
                kwargs[key] = kind(**value)
            elif key in {f.name for f in dataclasses.fields(cls)}:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)

    def replace(self, **sections) -> "RunConfig":
        """Copy with fields overridden; ``sections`` values may be dicts for nested sections."""
        d = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                d[key].update(value)
            else:
                d[key] = value
        return RunConfig.from_dict(d)

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
