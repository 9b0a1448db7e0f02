"""Pipeline configuration: one JSON file, one global seed, validated at load."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .active import ActiveLearnConfig
from .events import ExtractionConfig
from .hgcn import HgcnConfig


class ConfigError(ValueError):
    pass


DEFAULT_PATHS = {
    "telemetry": "telemetry.jsonl",
    "ground_truth": "ground_truth.json",
    "features": "features",
    "cases": "cases",
    "refinement": "refinement.json",
    "pretrained": "pretrained.ckpt",
    "model": "model.ckpt",
    "labels": "labels.jsonl",
    "report": "report.json",
    "per_case": "per_case.csv",
    "figures": "figures",
    "round": "round.json",
    "timings": "timings.json",
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    gamma: float = 0.3
    train_fraction: float = 0.7
    model: HgcnConfig = field(default_factory=HgcnConfig)
    pretrain_epochs: int = 150
    active_budget: float = 0.4  # < 1 means a fraction of the training cases
    active_rounds: int = 3
    k_boundary: int = 3
    embed_eps: float | None = None  # None: adapt eps to the embedding scale
    embed_min_pts: int = 4
    paths: dict = field(default_factory=lambda: dict(DEFAULT_PATHS))

    def __post_init__(self) -> None:
        if not (-1.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must be in [-1, 1]")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.active_budget <= 0:
            raise ConfigError("active_budget must be positive")
        if self.active_rounds < 1:
            raise ConfigError("active_rounds must be >= 1")

    def resolve_budget(self, n_train: int) -> int:
        if self.active_budget < 1.0:
            return max(1, int(-(-self.active_budget * n_train // 1)))  # ceil
        return int(self.active_budget)

    def active_config(self, n_train: int) -> ActiveLearnConfig:
        return ActiveLearnConfig(
            budget=self.resolve_budget(n_train),
            rounds=self.active_rounds,
            k_boundary=self.k_boundary,
            embed_eps=self.embed_eps,
            embed_min_pts=self.embed_min_pts,
        )

    def model_config(self) -> HgcnConfig:
        # the global seed fans out: the model draws from seed + 11
        return replace(self.model, seed=self.seed + 11)

    def pretrain_config(self) -> HgcnConfig:
        return replace(self.model_config(), epochs=self.pretrain_epochs)

    def path(self, workdir: Path, key: str) -> Path:
        return Path(workdir) / self.paths.get(key, DEFAULT_PATHS[key])

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "extraction": self.extraction.to_json(),
            "gamma": self.gamma,
            "train_fraction": self.train_fraction,
            "model": self.model.to_json(),
            "pretrain_epochs": self.pretrain_epochs,
            "active_budget": self.active_budget,
            "active_rounds": self.active_rounds,
            "k_boundary": self.k_boundary,
            "embed_eps": self.embed_eps,
            "embed_min_pts": self.embed_min_pts,
            "paths": dict(self.paths),
        }

    @staticmethod
    def from_json(obj: dict) -> "PipelineConfig":
        known = {
            "seed",
            "extraction",
            "gamma",
            "train_fraction",
            "model",
            "pretrain_epochs",
            "active_budget",
            "active_rounds",
            "k_boundary",
            "embed_eps",
            "embed_min_pts",
            "paths",
        }
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(obj)
        try:
            if "extraction" in kwargs:
                kwargs["extraction"] = ExtractionConfig.from_json(kwargs["extraction"])
            if "model" in kwargs:
                kwargs["model"] = HgcnConfig.from_json(kwargs["model"])
        except TypeError as exc:
            raise ConfigError(f"bad config section: {exc}") from exc
        if "paths" in kwargs:
            merged = dict(DEFAULT_PATHS)
            merged.update(kwargs["paths"])
            kwargs["paths"] = merged
        cfg = PipelineConfig(**kwargs)
        env_seed = os.environ.get("NEXUSRCL_SEED")
        if env_seed is not None:
            cfg = replace(cfg, seed=int(env_seed))
        return cfg


def load_pipeline_config(path: Path) -> PipelineConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return PipelineConfig.from_json(obj)
