"""Small builders shared across test modules."""

from __future__ import annotations

import numpy as np
import torch

from genodiff.genome import DnaRecord, EnvCoord


def randomize(module: torch.nn.Module, seed: int, scale: float = 0.5) -> torch.nn.Module:
    """Overwrite every parameter (including zero-initialized ones) with noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in sorted(module.named_parameters()):
            fan = p[0].numel() if p.dim() >= 2 else 1
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale / fan ** 0.5)
    return module


def random_records(n: int, length: int = 40, seed: int = 0) -> list[DnaRecord]:
    rng = np.random.default_rng(seed)
    return [DnaRecord(f"q{i:03d}", "".join(rng.choice(list("ACGT"), length)),
                      EnvCoord(float(rng.uniform(-60, 60)), float(rng.uniform(-170, 170)))) for i in range(n)]


SMOKE_CONFIG = {"steps": 6, "aligner_steps": 6, "classifier_steps": 6, "T": 8, "d": 16, "unet_base": 8,
                "d_a": 16, "batch_size": 8, "aligner_batch_size": 16, "calibration_pairs": 200, "log_every": 0}


SMOKE_ARTIFACTS = ["index.g2pd", "diffusion.g2pd", "aligner.g2pd", "classifier.g2pd", "report.json"]


def run_smoke_pipeline(root) -> list[str]:
    """Full CLI chain with relative paths under ``root``; the caller must chdir into ``root``."""
    import json
    from pathlib import Path

    from genodiff.cli import main

    Path(root, "cfg.json").write_text(json.dumps(SMOKE_CONFIG))
    steps = [
        ["gen-data", "--config", "cfg.json", "--n-per-combo", "9", "--out", "data"],
        ["build-index", "--corpus", "data/corpus.fasta", "--metadata", "data/metadata.tsv", "--out", "index.g2pd"],
        ["train", "--config", "cfg.json", "--data", "data", "--index", "index.g2pd", "--out", "diffusion.g2pd"],
        ["train-aligner", "--ckpt", "diffusion.g2pd", "--data", "data", "--index", "index.g2pd",
         "--out", "aligner.g2pd"],
        ["train-classifier", "--config", "cfg.json", "--data", "data", "--out", "classifier.g2pd"],
        ["evaluate", "--ckpt", "diffusion.g2pd", "--aligner-ckpt", "aligner.g2pd", "--classifier-ckpt",
         "classifier.g2pd", "--data", "data", "--index", "index.g2pd", "--max-items", "3", "--n", "1,2",
         "--out", "report.json"],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            raise AssertionError(f"genodiff {' '.join(argv)} exited with {code}")
    return SMOKE_ARTIFACTS
