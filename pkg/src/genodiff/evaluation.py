"""Scoring protocol: density-intersection threshold, success rate, PES and best-of-n."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import gaussian_kde
from torch import Tensor, nn

from . import numerics as nx
from .aligner import Aligner, GuidanceConfig, aligner_score, guided_sample
from .diffusion import NoiseSchedule, seeds_for

log = logging.getLogger(__name__)

N_VALUES = (1, 5, 10, 20, 50, 100)
# reference point from the large-scale study; reported, never asserted here
REFERENCE_THRESHOLD = 0.255


@dataclass
class ScoreDistribution:
    scores: np.ndarray
    label: str
    kde: gaussian_kde = field(init=False, repr=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.size == 0:
            raise ValueError(f"{self.label}: empty score set")
        self.kde = gaussian_kde(self.scores, bw_method="silverman")

    @property
    def kde_bandwidth(self) -> float:
        return float(np.sqrt(self.kde.covariance[0, 0]))

    def density(self, x) -> np.ndarray:
        return self.kde(np.atleast_1d(x))


@dataclass(frozen=True)
class ThresholdReport:
    x0: float
    overlap_mass: float
    method: str  # "kde-intersection" | "fallback-midpoint"


def _overlap(a: ScoreDistribution, b: ScoreDistribution, grid_points: int = 4001) -> float:
    lo = min(a.scores.min() - 4 * a.kde_bandwidth, b.scores.min() - 4 * b.kde_bandwidth)
    hi = max(a.scores.max() + 4 * a.kde_bandwidth, b.scores.max() + 4 * b.kde_bandwidth)
    xs = np.linspace(lo, hi, grid_points)
    return float(np.clip(np.trapz(np.minimum(a.density(xs), b.density(xs)), xs), 0.0, 1.0))


def derive_threshold(true_scores, shuffled_scores, tol: float = 1e-10) -> ThresholdReport:
    """Crossing of the two Silverman-bandwidth Gaussian KDEs between the set means.

    Falls back to the midpoint of the means when the density difference does
    not change sign on that interval.
    """
    true = ScoreDistribution(true_scores, "true-pairs")
    shuf = ScoreDistribution(shuffled_scores, "shuffled-pairs")
    lo, hi = float(shuf.scores.mean()), float(true.scores.mean())
    midpoint = 0.5 * (lo + hi)
    diff = lambda x: float(true.density(x)[0] - shuf.density(x)[0])
    f_lo, f_hi = diff(lo), diff(hi)
    if lo == hi or not (f_lo < 0 < f_hi or f_hi < 0 < f_lo):
        return ThresholdReport(midpoint, _overlap(true, shuf), "fallback-midpoint")
    a, b = (lo, hi) if lo < hi else (hi, lo)
    fa = diff(a)
    while b - a > tol * max(1.0, abs(a)):
        mid = 0.5 * (a + b)
        fm = diff(mid)
        if fm == 0:
            a = b = mid
            break
        if (fm < 0) == (fa < 0):
            a, fa = mid, fm
        else:
            b = mid
    return ThresholdReport(0.5 * (a + b), _overlap(true, shuf), "kde-intersection")


def success_rate(scores, x0: float) -> float:
    """Fraction of scores strictly above the threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score set")
    if not np.isfinite(x0):
        raise ValueError("threshold must be finite")
    return float((scores > x0).mean())


# --- phenotype classifier ---------------------------------------------------


class PhenotypeClassifier(nn.Module):
    def __init__(self, n_classes: int, channels: int = 3, image_size: int = 16, width: int = 32,
                 embed_dim: int = 64):
        super().__init__()
        self.n_classes = n_classes
        self.features = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Flatten(),
        )
        self.embedding = nn.Linear(2 * width * (image_size // 4) ** 2, embed_dim)
        self.classify = nn.Linear(embed_dim, n_classes)

    def embed(self, x: Tensor) -> Tensor:
        """Penultimate-layer phenotype embedding."""
        return F.silu(self.embedding(self.features(x)))

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(self.embed(x))


@dataclass(frozen=True)
class ClassifierConfig:
    steps: int = 1200
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    min_per_class: int = 8


def build_classifier(n_classes: int, image_size: int = 16, channels: int = 3, seed: int = 0) -> PhenotypeClassifier:
    return nx.init_module(PhenotypeClassifier(n_classes, channels, image_size), seed)


def train_phenotype_classifier(images: Tensor, labels: Sequence[int], config: ClassifierConfig = ClassifierConfig()):
    """Fit a small CNN species classifier; returns (model, class list, loss history)."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    if counts.min() < config.min_per_class:
        raise ValueError(f"class {classes[counts.argmin()]} has {counts.min()} images; need {config.min_per_class}")
    y = torch.from_numpy(np.searchsorted(classes, labels))
    model = build_classifier(len(classes), images.shape[-1], images.shape[1], config.seed)
    params = nx.ParamStore({"": model}, seed=config.seed)
    state = nx.AdamState(lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    for step in range(config.steps):
        idx = torch.randint(0, len(y), (min(config.batch_size, len(y)),), generator=gen)
        loss = F.cross_entropy(model(images[idx]), y[idx])
        nx.adam_step(params, nx.backward(loss, params), state, lr=nx.cosine_lr(config.lr, step, config.steps))
        history.append(float(loss.detach()))
    return model, classes, history


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    return F.cosine_similarity(a, b, dim=-1, eps=1e-12)


def pes(real: Tensor, generated: Tensor, classifier: PhenotypeClassifier) -> float:
    """Mean cosine similarity between classifier embeddings of paired real/generated images."""
    if real.shape[0] != generated.shape[0]:
        raise ValueError(f"{real.shape[0]} real vs {generated.shape[0]} generated images")
    with torch.no_grad():
        return float(cosine_rows(classifier.embed(real), classifier.embed(generated)).mean())


# --- best-of-n --------------------------------------------------------------


@dataclass
class ModelStack:
    denoiser: nn.Module
    aligner: Aligner
    classifier: PhenotypeClassifier
    schedule: NoiseSchedule
    guidance: GuidanceConfig
    x0: float


@dataclass
class EvalItem:
    id: str
    gen_cond: Tensor    # (l, d) condition the sampler is given
    score_cond: Tensor  # (l, d) condition generated images are scored against
    real_image: Tensor  # (ch, H, W)


@dataclass
class EvalReport:
    per_n: dict[int, dict[str, float]]
    mean_score: float
    n_items: int
    per_item_scores: dict[str, list[float]] = field(default_factory=dict, repr=False)
    images: Tensor | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "metric": "AlignerScore",
            "per_n": {str(n): v for n, v in sorted(self.per_n.items())},
            "mean_score": self.mean_score,
            "n_items": self.n_items,
        }


def _sample_group(stack: ModelStack, group: Sequence[tuple[int, EvalItem]], n: int, seed: int):
    """Sample ``n`` chains for each item of the group in one batch."""
    seeds = [s for index, _ in group for s in seeds_for(seed + 1_000_003 * index, n)]
    gen_cond = torch.cat([it.gen_cond.unsqueeze(0).expand(n, -1, -1) for _, it in group])
    score_cond = torch.cat([it.score_cond.unsqueeze(0).expand(n, -1, -1) for _, it in group])
    real = torch.stack([it.real_image for _, it in group])
    images = guided_sample(gen_cond, stack.schedule, stack.denoiser, stack.aligner, stack.guidance,
                           seeds, tuple(real.shape[1:]))
    scores = aligner_score(images, score_cond, stack.aligner).reshape(len(group), n)
    with torch.no_grad():
        emb_real = stack.classifier.embed(real).repeat_interleave(n, dim=0)
        pes_vals = cosine_rows(stack.classifier.embed(images), emb_real).reshape(len(group), n)
    return scores.double().numpy(), pes_vals.double().numpy(), images.reshape(len(group), n, *real.shape[1:])


def evaluate_top_n(stack: ModelStack, items: Sequence[EvalItem], n_list: Sequence[int] = N_VALUES,
                   seed: int = 0, workers: int = 1, chains_per_batch: int = 256,
                   keep_images: bool = False) -> EvalReport:
    """Sample ``max(n_list)`` images per DNA once; top-n metrics use the first n samples.

    Each metric keeps its own best value among the n candidates, so every
    column is non-decreasing in n. Chains of several DNAs share a batch;
    every chain has its own seed derived from ``seed`` and the DNA's index.
    """
    n_list = sorted(set(int(n) for n in n_list))
    if not items:
        raise ValueError("empty evaluation set")
    if not n_list or n_list[0] < 1:
        raise ValueError("n values must be >= 1")
    n_max = n_list[-1]
    per_group = max(1, chains_per_batch // n_max)
    indexed = list(enumerate(items))
    groups = [indexed[i : i + per_group] for i in range(0, len(indexed), per_group)]
    run = lambda group: _sample_group(stack, group, n_max, seed)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, groups))
    else:
        results = [run(g) for g in groups]
    scores = np.concatenate([r[0] for r in results])
    pes_vals = np.concatenate([r[1] for r in results])
    per_n = {}
    for n in n_list:
        best = scores[:, :n].max(axis=1)
        per_n[n] = {
            "mean_best_score": float(best.mean()),
            "success_rate": success_rate(best, stack.x0),
            "pes": float(pes_vals[:, :n].max(axis=1).mean()),
        }
    report = EvalReport(per_n, float(scores.mean()), len(items),
                        {it.id: s.tolist() for it, s in zip(items, scores)})
    if keep_images:
        report.images = torch.cat([r[2] for r in results])
    return report
