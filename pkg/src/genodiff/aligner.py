"""Noise-aware DNA/image aligner, contrastive objective and alignment-guided sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import numerics as nx
from .diffusion import (
    CHANNELS,
    IMAGE_SIZE,
    EpsModel,
    NoiseSchedule,
    chain_generators,
    chain_noise,
    expand_condition,
    reverse_mean,
    timestep_embedding,
)


@dataclass(frozen=True)
class AlignerConfig:
    channels: int = CHANNELS
    base: int = 32
    cond_dim: int = 64
    d_a: int = 64
    tau: float = 0.07
    tdim: int = 64

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 0.0
    eta: float = 0.01
    alg1_literal: bool = False

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("guidance strength must be >= 0")
        if self.eta <= 0:
            raise ValueError("update rate must be > 0")


class Aligner(nn.Module):
    """g(x_t, t): a small conv encoder with timestep conditioning, unit-norm output."""

    def __init__(self, config: AlignerConfig = AlignerConfig()):
        super().__init__()
        self.config = config
        c1, c2 = config.base, 2 * config.base
        self.time_mlp = nn.Sequential(nn.Linear(config.tdim, c2), nn.SiLU(), nn.Linear(c2, c2))
        self.conv1 = nn.Conv2d(config.channels, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.norm2 = nn.GroupNorm(8, c2)
        self.conv3 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.norm3 = nn.GroupNorm(8, c2)
        self.head = nn.Linear(c2, config.d_a)
        self.cond_proj = nn.Linear(config.cond_dim, config.d_a, bias=False)

    def embed(self, x: Tensor, t) -> Tensor:
        """Unit embedding of (noisy) images; ``t = 0`` denotes a clean image."""
        if x.dim() != 4 or x.shape[1] != self.config.channels:
            raise ValueError(f"expected (B, {self.config.channels}, H, W) images, got {tuple(x.shape)}")
        B = x.shape[0]
        t = torch.as_tensor(t).reshape(-1).expand(B)
        temb = self.time_mlp(timestep_embedding(t, self.config.tdim).to(x.dtype))
        h = F.silu(self.conv1(x))
        h = F.silu(self.norm2(self.conv2(h)) + temb[:, :, None, None])
        h = F.silu(self.norm3(self.conv3(h)))
        return F.normalize(self.head(h.mean(dim=(2, 3))), dim=-1)

    def summary(self, cond: Tensor) -> Tensor:
        """Mean over the l axis, linear projection, unit norm: (..., l, d) -> (..., d_a)."""
        return self.summary_from_pooled(cond.mean(dim=-2))

    def summary_from_pooled(self, pooled: Tensor) -> Tensor:
        return F.normalize(self.cond_proj(pooled), dim=-1)

    def similarity(self, x: Tensor, t, cond_summary: Tensor) -> Tensor:
        return (self.embed(x, t) * cond_summary).sum(-1)


def align_loss(image_emb: Tensor, cond_emb: Tensor, tau: float = 0.07) -> Tensor:
    """In-batch InfoNCE: item i's positive is condition i, the other B-1 are negatives."""
    B = image_emb.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    logits = nx.matmul(image_emb, cond_emb.T) / tau
    return F.cross_entropy(logits, torch.arange(B))


def aligner_score(x0: Tensor, cond: Tensor, aligner: Aligner) -> Tensor:
    """Cosine between clean-image and condition embeddings; (B,) for a batch."""
    with torch.no_grad():
        return aligner.similarity(x0, 0, aligner.summary(cond))


def alignment_gradient(aligner: Aligner, x: Tensor, t: int, cond_summary: Tensor) -> Tensor:
    """d similarity / d x_t per chain with aligner parameters held fixed."""
    with torch.enable_grad():
        xg = x.detach().requires_grad_(True)
        sim = aligner.similarity(xg, torch.full((x.shape[0],), t), cond_summary)
        (g,) = torch.autograd.grad(sim.sum(), xg)
    return g


def literal_align_loss_gradient(aligner: Aligner, x: Tensor, t: int, pos: Tensor, negatives: Tensor | None) -> Tensor:
    """Gradient of the contrastive loss with the positive at index 0 of each chain's candidate set."""
    cands = pos[:, None, :] if negatives is None else torch.cat(
        [pos[:, None, :], negatives.unsqueeze(0).expand(pos.shape[0], -1, -1)], dim=1)
    with torch.enable_grad():
        xg = x.detach().requires_grad_(True)
        emb = aligner.embed(xg, torch.full((x.shape[0],), t))
        logits = (emb[:, None, :] * cands).sum(-1) / aligner.config.tau
        loss = -torch.log_softmax(logits, dim=-1)[:, 0].sum()
        (g,) = torch.autograd.grad(loss, xg)
    return g


@torch.no_grad()
def guided_sample(
    cond: Tensor,
    schedule: NoiseSchedule,
    denoiser: EpsModel,
    aligner: Aligner | None,
    guidance: GuidanceConfig,
    seeds: Sequence[int] | int,
    image_shape=(CHANNELS, IMAGE_SIZE, IMAGE_SIZE),
    negatives: Tensor | None = None,
) -> Tensor:
    """Alignment-guided reverse diffusion, one chain per seed.

    Default form: the predicted noise is shifted against the aligner's
    similarity gradient, ``eps' = eps - w sqrt(1 - abar_t) grad``, and the
    usual ancestral step follows. With ``w = 0`` this is exactly the
    unguided sampler.

    ``alg1_literal`` instead takes the explicit step
    ``x_{t-1} = x_t - eta (grad log p(x_t|C) + w grad L_align)`` with the
    signs taken literally, no injected noise, and the contrastive loss
    computed against ``negatives`` (condition summaries).
    That variant is kept for comparison; it does not denoise.
    """
    if guidance.w and aligner is None:
        raise ValueError("guidance requires an aligner")
    seeds = [seeds] if isinstance(seeds, int) else list(seeds)
    n = len(seeds)
    cond = expand_condition(cond, n)
    summary = aligner.summary(cond) if aligner is not None else None
    gens = chain_generators(seeds)
    x = chain_noise(gens, image_shape, cond.dtype)
    for t in range(schedule.T, 0, -1):
        tt = torch.full((n,), t, dtype=torch.long)
        eps = denoiser(x, tt, cond)
        sqrt_1m_ab = math.sqrt(1 - schedule.alpha_bar[t - 1])
        if guidance.alg1_literal:
            score = -eps / sqrt_1m_ab
            if guidance.w:
                score = score + guidance.w * literal_align_loss_gradient(aligner, x, t, summary, negatives)
            x = nx.check_finite(x - guidance.eta * score, "literal guidance update")
            continue
        if guidance.w:
            eps = eps - guidance.w * sqrt_1m_ab * alignment_gradient(aligner, x, t, summary)
        x = reverse_mean(x, t, eps, schedule)
        if t > 1:
            x = x + math.sqrt(schedule.sigma2[t - 1]) * chain_noise(gens, image_shape, cond.dtype)
    return x.clamp(-1.0, 1.0)
