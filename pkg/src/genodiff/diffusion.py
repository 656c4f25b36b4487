"""Conditional DDPM: noise schedules, forward corruption, U-Net noise predictor, sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import numerics as nx

IMAGE_SIZE = 16
CHANNELS = 3
DEFAULT_T = 200


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by ``t - 1`` for diffusion step ``t`` in ``1..T``."""

    kind: str
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha)

    @property
    def sigma2(self) -> np.ndarray:
        return 1.0 - self.alpha

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"diffusion step outside 1..{self.T}")


def make_schedule(T: int = DEFAULT_T, kind: str = "linear") -> NoiseSchedule:
    """Linear: 1 - alpha_t runs 1e-4 -> 0.02. Cosine: squared-cosine alpha_bar, s = 0.008."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, T)
    elif kind == "cosine":
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - betas
    return NoiseSchedule(kind, alpha, np.cumprod(alpha))


def _per_item(values: np.ndarray, t: Tensor | int, like: Tensor) -> Tensor:
    idx = torch.as_tensor(t, dtype=torch.long) - 1
    out = torch.as_tensor(values, dtype=like.dtype)[idx]
    return out.reshape(-1, *([1] * (like.dim() - 1))) if out.dim() else out


def forward_sample(x0: Tensor, t, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Draw from q(x_t | x_0) given the noise: sqrt(abar) x0 + sqrt(1 - abar) eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}")
    schedule.check_step(t)
    ab = _per_item(schedule.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps


def forward_step(x_prev: Tensor, t, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """One Markov step q(x_t | x_{t-1})."""
    schedule.check_step(t)
    a = _per_item(schedule.alpha, t, x_prev)
    return torch.sqrt(a) * x_prev + torch.sqrt(1 - a) * eps


def reverse_mean(x_t: Tensor, t: int, eps_hat: Tensor, schedule: NoiseSchedule) -> Tensor:
    a = float(schedule.alpha[t - 1])
    ab = float(schedule.alpha_bar[t - 1])
    return (x_t - ((1 - a) / math.sqrt(1 - ab)) * eps_hat) / math.sqrt(a)


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10_000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


# --- denoiser ---------------------------------------------------------------


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Image positions attend to the rows of the condition matrix."""

    _zero_init = ("proj.weight", "proj.bias")

    def __init__(self, ch: int, cond_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.q = nn.Linear(ch, ch, bias=False)
        self.k = nn.Linear(cond_dim, ch, bias=False)
        self.v = nn.Linear(cond_dim, ch, bias=False)
        self.proj = nn.Linear(ch, ch)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        B, C, H, W = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)  # (B, HW, C)
        split = lambda z: z.reshape(B, z.shape[1], self.heads, C // self.heads).transpose(1, 2)
        q, k, v = split(self.q(h)), split(self.k(cond)), split(self.v(cond))
        w = nx.softmax(q @ k.transpose(-1, -2) / math.sqrt(C // self.heads), dim=-1)
        out = (w @ v).transpose(1, 2).reshape(B, H * W, C)
        return x + self.proj(out).transpose(1, 2).reshape(B, C, H, W)


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = CHANNELS
    base: int = 32
    cond_dim: int = 64
    heads: int = 4
    tdim: int = 128


class Denoiser(nn.Module):
    """Two-level U-Net predicting the added noise, conditioned through cross-attention.

    Works on any square input whose side is divisible by 4.
    """

    _zero_init = ("out_conv.weight", "out_conv.bias")

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        c1, c2 = config.base, 2 * config.base
        td = config.tdim
        self.time_mlp = nn.Sequential(nn.Linear(td // 2, td), nn.SiLU(), nn.Linear(td, td))
        self.null_token = nn.Parameter(torch.zeros(1, config.cond_dim))
        self.in_conv = nn.Conv2d(config.channels, c1, 3, padding=1)
        self.down1 = ResBlock(c1, c1, td)
        self.pool1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.down2 = ResBlock(c2, c2, td)
        self.attn2 = CrossAttention(c2, config.cond_dim, config.heads)
        self.pool2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, c2, td)
        self.attn_mid = CrossAttention(c2, config.cond_dim, config.heads)
        self.up2 = ResBlock(2 * c2, c2, td)
        self.attn_up2 = CrossAttention(c2, config.cond_dim, config.heads)
        self.up1 = ResBlock(c2 + c1, c1, td)
        self.out_norm = nn.GroupNorm(_groups(c1), c1)
        self.out_conv = nn.Conv2d(c1, config.channels, 3, padding=1)

    def forward(self, x: Tensor, t: Tensor, cond: Tensor | None) -> Tensor:
        """x: (B, ch, H, W); t: (B,) steps; cond: (B, l, d) or None for the null condition."""
        B = x.shape[0]
        if cond is None:
            cond = self.null_token.expand(B, 1, -1)
        if cond.dim() != 3 or cond.shape[0] != B or cond.shape[-1] != self.config.cond_dim:
            raise ValueError(f"condition shape {tuple(cond.shape)} incompatible with batch {B}")
        t = torch.as_tensor(t).reshape(-1).expand(B)
        temb = self.time_mlp(timestep_embedding(t, self.config.tdim // 2).to(x.dtype))
        h1 = self.down1(self.in_conv(x), temb)
        h2 = self.attn2(self.down2(self.pool1(h1), temb), cond)
        h = self.attn_mid(self.mid(self.pool2(h2), temb), cond)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.attn_up2(self.up2(torch.cat([h, h2], 1), temb), cond)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up1(torch.cat([h, h1], 1), temb)
        return nx.check_finite(self.out_conv(F.silu(self.out_norm(h))), "denoiser")


EpsModel = Callable[[Tensor, Tensor, Tensor], Tensor]


def diffusion_loss(
    x0: Tensor,
    cond: Tensor,
    schedule: NoiseSchedule,
    model: EpsModel,
    generator: torch.Generator | None = None,
    t: Tensor | None = None,
    eps: Tensor | None = None,
) -> Tensor:
    """Simplified DDPM objective ``mean ||eps - eps_model(x_t, t, C)||^2``.

    ``t`` and ``eps`` are drawn (uniform 1..T, standard normal) unless given.
    """
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    B = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_sample(x0, t, eps, schedule)
    return F.mse_loss(model(x_t, t, cond), eps)


def chain_generators(seeds: Sequence[int]) -> list[torch.Generator]:
    return [torch.Generator().manual_seed(int(s)) for s in seeds]


def chain_noise(gens: Sequence[torch.Generator], shape, dtype=torch.float32) -> Tensor:
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in gens])


def seeds_for(seed: int, n: int) -> list[int]:
    """Per-chain seeds derived from one run seed."""
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


def expand_condition(cond: Tensor, n: int) -> Tensor:
    if cond.dim() == 2:
        return cond.unsqueeze(0).expand(n, -1, -1)
    if cond.shape[0] != n:
        raise ValueError(f"{cond.shape[0]} conditions for {n} chains")
    return cond


@torch.no_grad()
def sample_unguided(
    cond: Tensor,
    schedule: NoiseSchedule,
    model: EpsModel,
    seeds: Sequence[int] | int,
    image_shape=(CHANNELS, IMAGE_SIZE, IMAGE_SIZE),
) -> Tensor:
    """Ancestral sampling, one independent chain per seed, clamped to [-1, 1].

    ``cond`` is (l, d) shared by all chains or (n, l, d) per chain.
    """
    seeds = [seeds] if isinstance(seeds, int) else list(seeds)
    n = len(seeds)
    cond = expand_condition(cond, n)
    gens = chain_generators(seeds)
    x = chain_noise(gens, image_shape, cond.dtype)
    for t in range(schedule.T, 0, -1):
        tt = torch.full((n,), t, dtype=torch.long)
        x = reverse_mean(x, t, model(x, tt, cond), schedule)
        if t > 1:
            x = x + math.sqrt(schedule.sigma2[t - 1]) * chain_noise(gens, image_shape, cond.dtype)
    return x.clamp(-1.0, 1.0)
