"""Configuration dataclasses for the staged compression pipeline.

Defaults encode the full training protocol: 20 warmup epochs, 200 search
epochs, 200 fine-tune epochs, patience 40, Adam at 1e-3 for weights and 1e-2
for architecture parameters, and log-spaced regularization-strength grids
(18 points for the architecture/width stages, 9 for precision search).
Everything is overridable from JSON so desk-scale runs can shrink epochs and
widen grids.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np


def lambda_grid(lo: float = 1e-11, hi: float = 1e-7, n: int = 18) -> list[float]:
    return [float(v) for v in np.geomspace(lo, hi, n)]


@dataclass
class NasConfig:
    lambda_: float = 0.0
    warmup_epochs: int = 20
    search_epochs: int = 200
    finetune_epochs: int = 200
    patience: int = 40
    lr_w: float = 1e-3
    lr_theta: float = 1e-2
    batch_size: int = 32
    seed: int = 0
    cost_metric: str = "param_count"

    def __post_init__(self):
        if min(self.warmup_epochs, self.search_epochs, self.finetune_epochs) < 0:
            raise ValueError("epoch counts must be >= 0")
        if not np.isfinite(self.lambda_) or self.lambda_ < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lambda_}")
        if self.cost_metric != "param_count":
            raise ValueError(f"unsupported cost metric {self.cost_metric!r}")


@dataclass
class PitConfig:
    lambda_: float = 0.0
    # the input model is already trained, so the protocol skips pre-training
    warmup_epochs: int = 0
    search_epochs: int = 200
    finetune_epochs: int = 200
    patience: int = 40
    lr_w: float = 1e-3
    lr_theta: float = 1e-2
    batch_size: int = 32
    seed: int = 0
    theta_init: float = 1.0

    def __post_init__(self):
        if min(self.warmup_epochs, self.search_epochs, self.finetune_epochs) < 0:
            raise ValueError("epoch counts must be >= 0")
        if not np.isfinite(self.lambda_) or self.lambda_ < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lambda_}")


@dataclass
class MpsConfig:
    lambda_: float = 0.0
    # the input model arrives trained, so joint W/theta search starts at once
    warmup_epochs: int = 0
    search_epochs: int = 200
    finetune_epochs: int = 200
    patience: int = 40
    lr_w: float = 1e-3
    lr_theta: float = 1e-2
    batch_size: int = 32
    seed: int = 0
    precisions: tuple = (2, 4, 8)
    act_bits: int = 8
    alpha_init: float = 8.0
    alpha_decay: float = 1e-4
    tau_scale: float = 5.0
    tau_rate: float = 0.0045

    def __post_init__(self):
        if min(self.warmup_epochs, self.search_epochs, self.finetune_epochs) < 0:
            raise ValueError("epoch counts must be >= 0")
        if not np.isfinite(self.lambda_) or self.lambda_ < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lambda_}")
        self.precisions = tuple(int(p) for p in self.precisions)
        if not self.precisions or any(p < 2 or p > 8 for p in self.precisions):
            raise ValueError(f"precisions must lie in [2, 8], got {self.precisions}")


STAGES = ("synth-data", "preprocess", "nas", "prune", "mps", "finetune",
          "eval", "export", "run-int", "summarize", "pareto")

SEED_ARCHS = ("resnet1d", "unet1d")


@dataclass
class ExperimentConfig:
    seed_arch: str = "resnet1d"
    stage: str = "nas"
    lambda_grid: list = field(default_factory=lambda_grid)
    mps_lambda_grid: list = field(default_factory=lambda: lambda_grid(n=9))
    data_dir: str = "data"
    out_dir: str = "runs"
    fold: int = 0
    k_folds: int = 5
    seed: int = 0
    n_subjects: int = 12
    seconds: float = 60.0
    fs: float = 125.0
    input_len: int = 625
    widths: tuple = (16, 32, 64)
    with_smallest: bool = False
    nas: NasConfig = field(default_factory=NasConfig)
    pit: PitConfig = field(default_factory=PitConfig)
    mps: MpsConfig = field(default_factory=MpsConfig)

    def __post_init__(self):
        if self.seed_arch not in SEED_ARCHS:
            raise ValueError(f"seed_arch must be one of {SEED_ARCHS}, got {self.seed_arch!r}")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        self.widths = tuple(int(w) for w in self.widths)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, sub in (("nas", NasConfig), ("pit", PitConfig), ("mps", MpsConfig)):
            if key in d and isinstance(d[key], dict):
                sub_allowed = {f.name for f in dataclasses.fields(sub)}
                bad = set(d[key]) - sub_allowed
                if bad:
                    raise ValueError(f"unknown {key} config keys: {sorted(bad)}")
                d[key] = sub(**d[key])
        return cls(**d)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))
