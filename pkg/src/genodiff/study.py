"""End-to-end synthetic study: data -> retrieval -> training -> calibrated evaluation.

Produces the numbers behind the directional checks: best-of-n curves, the
shuffled-pair baseline, guidance on/off, MSA depth on mutated queries and the
seen/unseen gap.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import pipeline as pl
from .aligner import GuidanceConfig
from .config import RunConfig
from .evaluation import (
    N_VALUES,
    ClassifierConfig,
    EvalItem,
    ModelStack,
    ThresholdReport,
    derive_threshold,
    evaluate_top_n,
    success_rate,
    train_phenotype_classifier,
)
from .synth import SyntheticDataset, SyntheticSpec, make_dataset

log = logging.getLogger(__name__)


@dataclass
class StudyConfig:
    run: RunConfig = field(default_factory=RunConfig)
    n_top: int = 16          # DNAs in the full best-of-100 table
    n_compare: int = 128     # DNAs per directional comparison
    compare_n: int = 5       # samples per DNA in the comparisons
    ablation_depths: tuple[int, ...] = (0, 1, 2)
    eval_seed: int = 12345


def _subset(items, n, seed):
    if len(items) <= n:
        return list(items)
    idx = np.random.default_rng(seed).choice(len(items), n, replace=False)
    return [items[i] for i in sorted(idx)]


def _items(ids, gen_conds, score_conds, images):
    return [EvalItem(i, g, s, x) for i, g, s, x in zip(ids, gen_conds, score_conds, images)]


@dataclass
class Calibration:
    threshold: ThresholdReport
    gt_success_rate: float
    shuffled_success_rate: float
    true_scores: np.ndarray
    shuffled_scores: np.ndarray

    def to_dict(self) -> dict:
        return {
            "threshold": {"x0": self.threshold.x0, "overlap_mass": self.threshold.overlap_mass,
                          "method": self.threshold.method},
            "gt_success_rate": self.gt_success_rate,
            "shuffled_success_rate": self.shuffled_success_rate,
            "true_mean": float(self.true_scores.mean()),
            "shuffled_mean": float(self.shuffled_scores.mean()),
        }


def calibrate(aligner, conds: torch.Tensor, images: torch.Tensor, labels, cfg: RunConfig) -> Calibration:
    """Threshold x0 from true vs shuffled pairs on (a subset of) the training set."""
    idx = _subset(list(range(len(images))), cfg.calibration_pairs, cfg.seed)
    true_s, shuf_s = pl.calibration_scores(aligner, conds[idx], images[idx], [labels[i] for i in idx], cfg.seed)
    thr = derive_threshold(true_s, shuf_s)
    return Calibration(thr, success_rate(true_s, thr.x0), success_rate(shuf_s, thr.x0), true_s, shuf_s)


def eval_items(conditioner, specimens, index, cfg: RunConfig, variants=(("clean", None),),
               seed_offset: int = 7) -> dict[tuple[str, int], list[EvalItem]]:
    """Evaluation items per (variant, depth).

    Generation uses the requested MSA; scoring always uses the clean query at
    ``cfg.msa_depth`` so every variant is judged against the same reference.
    """
    wanted = [(v, cfg.msa_depth if d is None else d) for v, d in variants]
    depths = sorted({cfg.msa_depth, *(d for _, d in wanted)})
    names = tuple(sorted({"clean", *(v for v, _ in wanted)}))
    bank = pl.build_bank([s.record for s in specimens], index, depths, cfg.k, cfg.min_score,
                         cfg.query_noise, cfg.seed + seed_offset, variants=names)
    ref = pl.encode_bank(conditioner, bank, cfg.msa_depth, "clean")
    real = pl.images_tensor(specimens)
    ids = [s.id for s in specimens]
    return {vd: _items(ids, pl.encode_bank(conditioner, bank, vd[1], vd[0]), ref, real) for vd in wanted}


def run_study(study: StudyConfig, dataset: SyntheticDataset | None = None) -> dict:
    cfg = study.run
    pl.set_determinism()
    timings = {}
    t0 = time.time()
    if dataset is None:
        spec = SyntheticSpec(neutral_mutation_rate=cfg.neutral_mutation_rate, env_effect=cfg.env_effect)
        dataset = make_dataset(cfg.n_per_combo, spec, cfg.seed)
    index = pl.index_for(dataset.corpus, cfg)
    depths = sorted({*cfg.train_depths, cfg.msa_depth, *study.ablation_depths})
    train = dataset.split("train")
    bank = pl.build_bank([s.record for s in train], index, depths, cfg.k, cfg.min_score,
                         cfg.query_noise, cfg.seed)
    images = pl.images_tensor(train)
    labels = [s.attrs.combo_id for s in train]
    timings["data"] = time.time() - t0

    t0 = time.time()
    schedule = pl.schedule_for(cfg)
    conditioner, denoiser = pl.build_models(cfg)
    diff_hist = pl.train_diffusion(conditioner, denoiser, bank, images, schedule, cfg)
    conditioner.eval(), denoiser.eval()
    timings["train_diffusion"] = time.time() - t0

    t0 = time.time()
    pooled = pl.encode_bank(conditioner, bank, cfg.msa_depth, pooled=True)
    aligner = pl.build_aligner(cfg)
    align_hist = pl.train_aligner(aligner, pooled, images, schedule, cfg)
    timings["train_aligner"] = time.time() - t0

    t0 = time.time()
    classifier, _, cls_hist = train_phenotype_classifier(
        images, labels, ClassifierConfig(steps=cfg.classifier_steps, lr=cfg.classifier_lr, seed=cfg.seed))
    timings["train_classifier"] = time.time() - t0

    t0 = time.time()
    cal = calibrate(aligner, pl.encode_bank(conditioner, bank, cfg.msa_depth), images, labels, cfg)
    timings["calibration"] = time.time() - t0

    guided = GuidanceConfig(w=cfg.w, eta=cfg.eta, alg1_literal=cfg.alg1_literal)
    stack = ModelStack(denoiser, aligner, classifier, schedule, guided, cal.threshold.x0)
    stack0 = ModelStack(denoiser, aligner, classifier, schedule, GuidanceConfig(w=0.0), cal.threshold.x0)
    results: dict = {}

    t0 = time.time()
    val = _subset(dataset.split("val"), study.n_compare, study.eval_seed)
    vd = [("clean", cfg.msa_depth)] + [("noised", d) for d in study.ablation_depths]
    val_items = eval_items(conditioner, val, index, cfg, vd)
    clean_items = val_items[("clean", cfg.msa_depth)]
    top = evaluate_top_n(stack, clean_items[: study.n_top], N_VALUES, study.eval_seed, cfg.workers)
    results["seen_top_n"] = top.to_dict()
    timings["eval_top_n"] = time.time() - t0

    t0 = time.time()
    cmp_n = (1, study.compare_n)
    seen_g = evaluate_top_n(stack, clean_items, cmp_n, study.eval_seed, cfg.workers)
    seen_0 = evaluate_top_n(stack0, clean_items, cmp_n, study.eval_seed, cfg.workers)
    results["seen_guided"] = seen_g.to_dict()
    results["seen_unguided"] = seen_0.to_dict()
    timings["eval_guidance"] = time.time() - t0

    t0 = time.time()
    results["depth_ablation"] = {}
    for d in study.ablation_depths:
        results["depth_ablation"][str(d)] = evaluate_top_n(stack, val_items[("noised", d)], cmp_n, study.eval_seed,
                                                           cfg.workers).to_dict()
    timings["eval_depth"] = time.time() - t0

    t0 = time.time()
    unseen = _subset(dataset.split("unseen"), study.n_compare, study.eval_seed)
    unseen_items = eval_items(conditioner, unseen, index, cfg)[("clean", cfg.msa_depth)]
    results["unseen"] = evaluate_top_n(stack, unseen_items, cmp_n, study.eval_seed, cfg.workers).to_dict()
    timings["eval_unseen"] = time.time() - t0

    results.update(
        calibration=cal.to_dict(),
        losses={
            "diffusion_first": float(np.mean(diff_hist[:50])),
            "diffusion_last": float(np.mean(diff_hist[-50:])),
            "aligner_first": float(np.mean(align_hist[:50])),
            "aligner_last": float(np.mean(align_hist[-50:])),
            "classifier_last": float(np.mean(cls_hist[-50:])),
        },
        timings=timings,
        config=cfg.to_dict(),
        study={k: v for k, v in asdict(study).items() if k != "run"},
    )
    return results
