"""Glue between data, retrieval, models and training loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from . import numerics as nx
from .aligner import Aligner, AlignerConfig, align_loss, aligner_score
from .conditioner import Conditioner, ConditionerConfig
from .config import RunConfig
from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule, diffusion_loss, forward_sample, make_schedule
from .genome import DnaRecord, vocab_size
from .retrieval import KmerIndex, assemble_msa_block, build_index, retrieve_top_m
from .synth import Specimen, mutate_query

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def set_determinism() -> None:
    torch.use_deterministic_algorithms(True)


# --- model construction -----------------------------------------------------


def conditioner_config(cfg: RunConfig) -> ConditionerConfig:
    return ConditionerConfig(d=cfg.d, n_layers=cfg.n_layers, n_vocab=vocab_size(cfg.k), m_max=cfg.m_max,
                             l_max=cfg.l_max)


def build_models(cfg: RunConfig) -> tuple[Conditioner, Denoiser]:
    cond = nx.init_module(Conditioner(conditioner_config(cfg)), cfg.seed)
    den = nx.init_module(Denoiser(DenoiserConfig(base=cfg.unet_base, cond_dim=cfg.d)), cfg.seed + 1)
    return cond, den


def build_aligner(cfg: RunConfig) -> Aligner:
    return nx.init_module(Aligner(AlignerConfig(cond_dim=cfg.d, d_a=cfg.d_a, tau=cfg.tau)), cfg.seed + 2)


def schedule_for(cfg: RunConfig) -> NoiseSchedule:
    return make_schedule(cfg.T, cfg.schedule)


# --- MSA banks --------------------------------------------------------------


@dataclass
class BlockBank:
    """Pre-assembled MSA inputs for a list of queries, per depth and query variant.

    ``tokens[(variant, depth)]`` is (N, depth + 1, l); variants are "clean"
    and "noised" (query point-mutated before retrieval).
    """

    ids: list[str]
    tokens: dict[tuple[str, int], Tensor]
    evolution: dict[tuple[str, int], Tensor]
    envs: dict[tuple[str, int], Tensor]
    retrieved: dict[str, list[list[str]]]

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx: Tensor, depth: int, noised: Tensor | None = None):
        keys = [("clean", depth)] + ([("noised", depth)] if noised is not None else [])
        out = []
        for table in (self.tokens, self.evolution, self.envs):
            x = table[keys[0]][idx]
            if noised is not None:
                y = table[keys[1]][idx]
                mask = noised.reshape(-1, *([1] * (x.dim() - 1)))
                x = torch.where(mask, y, x)
            out.append(x)
        return tuple(out)


def build_bank(queries: Sequence[DnaRecord], index: KmerIndex | None, depths: Sequence[int], k: int,
               min_score: float = 0.0, noise_rate: float = 0.0, seed: int = 0,
               variants: Sequence[str] = ("clean", "noised")) -> BlockBank:
    depths = sorted(set(depths))
    d_max = depths[-1]
    if d_max > 0 and index is None:
        raise ValueError("MSA depth > 0 needs a retrieval index")
    seqs = np.random.SeedSequence(seed).spawn(len(queries))
    cols: dict[tuple[str, int], list] = {(v, d): [] for v in variants for d in depths}
    retrieved: dict[str, list[list[str]]] = {v: [] for v in variants}
    for q, ss in zip(queries, seqs):
        for variant in variants:
            query = mutate_query(q, noise_rate, np.random.default_rng(ss)) if variant == "noised" else q
            hits = [h.record for h in retrieve_top_m(index, query, d_max, min_score)] if d_max else []
            retrieved[variant].append([h.id for h in hits])
            for d in depths:
                cols[(variant, d)].append(assemble_msa_block(query, hits[:d], k))
    tokens, evolution, envs = {}, {}, {}
    for key, blocks in cols.items():
        tokens[key] = torch.from_numpy(np.stack([b.tokens for b in blocks]))
        evolution[key] = torch.from_numpy(np.stack([b.evolution for b in blocks])).float()
        envs[key] = torch.from_numpy(np.stack([b.envs for b in blocks])).float()
    return BlockBank([q.id for q in queries], tokens, evolution, envs, retrieved)


def images_tensor(specimens: Sequence[Specimen]) -> Tensor:
    return torch.from_numpy(np.stack([s.image for s in specimens])).float()


def index_for(corpus: Sequence[DnaRecord], cfg: RunConfig) -> KmerIndex:
    return build_index(list(corpus), cfg.k_index, workers=cfg.workers)


# --- training loops ---------------------------------------------------------


def lr_at(cfg_lr: float, step: int, total: int, schedule: str, period: int) -> float:
    if schedule == "constant":
        return cfg_lr
    return nx.cosine_lr(cfg_lr, step, period or total)


def train_diffusion(
    conditioner: Conditioner,
    denoiser: Denoiser,
    bank: BlockBank,
    images: Tensor,
    schedule: NoiseSchedule,
    cfg: RunConfig,
    on_step: Callable[[int, float], None] | None = None,
    start_step: int = 0,
) -> list[float]:
    """Joint optimization of conditioner and denoiser on the noise-prediction loss.

    Each batch uses one MSA depth drawn from ``cfg.train_depths``; each item
    uses its point-mutated query with probability ``cfg.noise_prob``.
    """
    if len(bank) == 0:
        raise ValueError("empty training set")
    params = nx.ParamStore({"conditioner": conditioner, "denoiser": denoiser}, seed=cfg.seed)
    state = nx.AdamState(lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 17)
    has_noised = any(key[0] == "noised" for key in bank.tokens)
    history = []
    for step in range(start_step, start_step + cfg.steps):
        idx = torch.randint(0, len(bank), (min(cfg.batch_size, len(bank)),), generator=gen)
        depth = cfg.train_depths[int(torch.randint(0, len(cfg.train_depths), (1,), generator=gen))]
        noised = (torch.rand(len(idx), generator=gen) < cfg.noise_prob) if has_noised else None
        tokens, evo, envs = bank.batch(idx, depth, noised)
        try:
            loss = diffusion_loss(images[idx], conditioner(tokens, evo, envs), schedule, denoiser, gen)
            grads = nx.backward(loss, params)
        except nx.NonFiniteError as exc:
            raise TrainingError(f"step {step}: {exc} (depth={depth}, batch={idx.tolist()[:8]}...)") from exc
        lr = lr_at(cfg.lr, step - start_step, cfg.steps, cfg.lr_schedule, cfg.lr_period)
        nx.adam_step(params, grads, state, lr=lr)
        history.append(float(loss.detach()))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("diffusion step %d loss %.4f lr %.2e", step + 1, np.mean(history[-cfg.log_every:]), lr)
        if on_step is not None:
            on_step(step + 1, history[-1])
    return history


@torch.no_grad()
def encode_bank(conditioner: Conditioner, bank: BlockBank, depth: int, variant: str = "clean",
                batch: int = 128, pooled: bool = False) -> Tensor:
    """Condition matrices (N, l, d) for every query in the bank, or their l-means (N, d)."""
    outs = []
    key = (variant, depth)
    for s in range(0, len(bank), batch):
        sl = slice(s, s + batch)
        c = conditioner(bank.tokens[key][sl], bank.evolution[key][sl], bank.envs[key][sl])
        outs.append(c.mean(dim=1) if pooled else c)
    return torch.cat(outs)


def train_aligner(
    aligner: Aligner,
    pooled_conds: Tensor,
    images: Tensor,
    schedule: NoiseSchedule,
    cfg: RunConfig,
    on_step: Callable[[int, float], bool | None] | None = None,
) -> list[float]:
    """Contrastive training on noised images; the conditioner's outputs are fixed inputs.

    ``on_step(step, loss)`` may return True to stop early.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    params = nx.ParamStore({"aligner": aligner}, seed=cfg.seed)
    state = nx.AdamState(lr=cfg.aligner_lr)
    gen = torch.Generator().manual_seed(cfg.seed + 29)
    B = min(cfg.aligner_batch_size, len(images))
    history = []
    for step in range(cfg.aligner_steps):
        idx = torch.randperm(len(images), generator=gen)[:B]
        t = torch.randint(1, schedule.T + 1, (B,), generator=gen)
        eps = torch.randn(images[idx].shape, generator=gen)
        x_t = forward_sample(images[idx], t, eps, schedule)
        loss = align_loss(aligner.embed(x_t, t), aligner.summary_from_pooled(pooled_conds[idx]), aligner.config.tau)
        nx.adam_step(params, nx.backward(loss, params), state,
                     lr=nx.cosine_lr(cfg.aligner_lr, step, cfg.aligner_steps))
        history.append(float(loss.detach()))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("aligner step %d loss %.4f", step + 1, np.mean(history[-cfg.log_every:]))
        if on_step is not None and on_step(step + 1, history[-1]):
            break
    return history


@torch.no_grad()
def retrieval_accuracy(aligner: Aligner, pooled_conds: Tensor, images: Tensor, t: Tensor) -> float:
    """In-batch top-1: fraction of images whose best-scoring condition is their own."""
    emb = aligner.embed(images, t)
    logits = emb @ aligner.summary_from_pooled(pooled_conds).T
    return float((logits.argmax(dim=1) == torch.arange(len(images))).float().mean())


# --- calibration ------------------------------------------------------------


def shuffled_partners(labels: Tensor, gen: torch.Generator, max_rounds: int = 1000) -> Tensor:
    """For each item, a random partner index carrying a different label."""
    n = len(labels)
    if len(torch.unique(labels)) < 2:
        raise ValueError("shuffled pairs need at least two labels")
    partner = torch.randint(0, n, (n,), generator=gen)
    for _ in range(max_rounds):
        clash = labels[partner] == labels
        if not clash.any():
            return partner
        partner[clash] = torch.randint(0, n, (int(clash.sum()),), generator=gen)
    raise RuntimeError("could not draw mismatched partners")


@torch.no_grad()
def calibration_scores(aligner: Aligner, conds: Tensor, images: Tensor, labels: Sequence[int], seed: int,
                       batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Aligner scores for true (image, own DNA) pairs and for shuffled pairs.

    Shuffled partners are drawn from a different species.
    """
    n = len(images)
    perm = shuffled_partners(torch.as_tensor(np.asarray(labels)), torch.Generator().manual_seed(seed))
    true, shuf = [], []
    for s in range(0, n, batch):
        sl = slice(s, s + batch)
        true.append(aligner_score(images[sl], conds[sl], aligner))
        shuf.append(aligner_score(images[sl], conds[perm[sl]], aligner))
    return torch.cat(true).double().numpy(), torch.cat(shuf).double().numpy()
