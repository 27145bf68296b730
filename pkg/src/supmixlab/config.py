"""Experiment documents: a TrainConfig plus dataset path, seed list and split settings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .trainer import ConfigError, TrainConfig

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass
class ExperimentConfig:
    dataset: str = ""
    seeds: list[int] = field(default_factory=lambda: [0])
    labeled_ratio: float = 0.125
    labeled_ratios: list[float] = field(default_factory=lambda: [0.125, 0.25])  # ablation sweep
    split_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        own = {f.name for f in fields(cls)} - {"train"}
        exp, train = {}, {}
        for key, value in d.items():
            if key in own:
                exp[key] = value
            elif key in _TRAIN_KEYS:
                train[key] = value
            else:
                raise ConfigError(f"{key}: unknown config key")
        if "cutmix_area" in train:
            train["cutmix_area"] = tuple(train["cutmix_area"])
        cfg = cls(**exp, train=TrainConfig.from_dict(train))
        if cfg.dataset and base_dir is not None and not Path(cfg.dataset).is_absolute():
            cfg.dataset = str((base_dir / cfg.dataset).resolve())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc, path.parent)

    def validate(self) -> None:
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds: need a non-empty list of non-negative integers")
        for r in [self.labeled_ratio, *self.labeled_ratios]:
            if not 0.0 < r <= 1.0:
                raise ConfigError(f"labeled_ratio: must lie in (0, 1], got {r}")
        self.train.resolved()

    def flat(self) -> dict:
        """Single-level dict (the on-disk form)."""
        d = {k: v for k, v in asdict(self).items() if k != "train"}
        t = asdict(self.train)
        t.pop("seed")
        d.update(t)
        return d

    def for_seed(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**asdict(self.train), "seed": seed})


def parse_seeds(text: str) -> list[int]:
    """'0,1,2' or '0-4'."""
    text = text.strip()
    try:
        if "-" in text and "," not in text:
            lo, hi = (int(x) for x in text.split("-", 1))
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"seeds: cannot parse {text!r}") from None
