"""Run configuration: every tunable in one flat, validated record."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

REFERENCE_LR = 1e-5  # full-scale values, kept for reference runs
REFERENCE_BATCH_SIZE = 128


@dataclass
class RunConfig:
    # tokenization / retrieval
    k: int = 3
    k_index: int = 8
    msa_depth: int = 2
    min_score: float = 0.0
    # conditioner
    d: int = 64
    n_layers: int = 2
    m_max: int = 4
    l_max: int = 128
    # diffusion
    T: int = 200
    schedule: str = "linear"
    unet_base: int = 32
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    lr_period: int = 0  # 0 -> total steps
    batch_size: int = 32
    steps: int = 6000
    train_depths: list[int] = field(default_factory=lambda: [0, 1, 2])
    query_noise: float = 0.1
    noise_prob: float = 0.5
    log_every: int = 100
    ckpt_every: int = 0
    # aligner / guidance
    d_a: int = 64
    tau: float = 0.07
    aligner_steps: int = 1500
    aligner_lr: float = 1e-3
    aligner_batch_size: int = 64
    w: float = 2.0
    eta: float = 0.01
    alg1_literal: bool = False
    # phenotype classifier
    classifier_steps: int = 1200
    classifier_lr: float = 2e-3
    # evaluation
    calibration_pairs: int = 2000
    # data
    n_per_combo: int = 10
    neutral_mutation_rate: float = 0.02
    env_effect: float = 0.15
    # reproducibility / execution
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ["k", "k_index", "d", "n_layers", "m_max", "l_max", "T", "unet_base", "batch_size",
                    "d_a", "aligner_batch_size", "n_per_combo", "workers"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        nonneg = ["msa_depth", "steps", "aligner_steps", "classifier_steps", "lr_period", "log_every",
                  "ckpt_every", "calibration_pairs", "w", "lr", "aligner_lr", "classifier_lr", "min_score",
                  "env_effect"]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("query_noise", "noise_prob", "neutral_mutation_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.tau <= 0 or self.eta <= 0:
            raise ValueError("tau and eta must be > 0")
        if self.schedule not in ("linear", "cosine"):
            raise ValueError(f"schedule must be linear or cosine, got {self.schedule!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"lr_schedule must be cosine or constant, got {self.lr_schedule!r}")
        depths = [*self.train_depths, self.msa_depth]
        if not self.train_depths or min(depths) < 0 or max(depths) + 1 > self.m_max:
            raise ValueError(f"MSA depths {depths} must fit m_max={self.m_max} rows (query included)")
        if self.d % 8:
            raise ValueError("d must be a multiple of 8")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def updated(self, **overrides) -> RunConfig:
        base = self.to_dict()
        base.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(base)
