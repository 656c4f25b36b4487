"""Differentiable array substrate on top of torch autograd.

The operator set used by the learned modules is wrapped here so every result
is checked for NaN/Inf and a violation names the operator that produced it.
Adam and the cosine learning-rate schedule are implemented directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by {op}")
        self.op = op


def check_finite(x: Tensor, op: str) -> Tensor:
    # a sum is non-finite whenever any term is; only then pay for the exact test
    if math.isfinite(float(x.detach().sum())):
        return x
    if not torch.isfinite(x).all():
        raise NonFiniteError(op)
    return x


def tensor(data, dtype=torch.float64, requires_grad: bool = False) -> Tensor:
    return torch.tensor(data, dtype=dtype, requires_grad=requires_grad)


def _shape_error(op: str, *xs: Tensor) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {[tuple(x.shape) for x in xs]}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _shape_error("matmul", a, b)
    return check_finite(a @ b, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a + b
    except RuntimeError:
        raise _shape_error("add", a, b) from None
    return check_finite(out, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a * b
    except RuntimeError:
        raise _shape_error("mul", a, b) from None
    return check_finite(out, "mul")


def broadcast(a: Tensor, shape) -> Tensor:
    try:
        return a.expand(*shape)
    except RuntimeError:
        raise ValueError(f"broadcast: cannot expand {tuple(a.shape)} to {tuple(shape)}") from None


def scale(a: Tensor, c: float) -> Tensor:
    return check_finite(a * c, "scale")


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return check_finite(torch.softmax(x, dim=dim), "softmax")


def layer_norm(x: Tensor, dim: int = -1, eps: float = LN_EPS) -> Tensor:
    """Normalize to zero mean, unit (biased) variance along ``dim``; no affine."""
    if dim in (-1, x.dim() - 1):
        return check_finite(F.layer_norm(x, x.shape[-1:], eps=eps), "layer_norm")
    mu = x.mean(dim=dim, keepdim=True)
    var = x.var(dim=dim, unbiased=False, keepdim=True)
    return check_finite((x - mu) / torch.sqrt(var + eps), "layer_norm")


def gelu(x: Tensor) -> Tensor:
    return check_finite(F.gelu(x), "gelu")


def mean(x: Tensor, dim=None) -> Tensor:
    out = x.mean() if dim is None else x.mean(dim=dim)
    return check_finite(out, "mean")


def concat(xs: Iterable[Tensor], dim: int = 0) -> Tensor:
    try:
        out = torch.cat(list(xs), dim=dim)
    except RuntimeError as exc:
        raise ValueError(f"concat: {exc}") from None
    return check_finite(out, "concat")


class LayerNorm(nn.LayerNorm):
    """Affine layer norm routed through the checked operator."""

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x) * self.weight + self.bias


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Gradients of a scalar loss for every parameter in ``params``.

    Parameters the loss does not depend on get an exact zero. The graph is
    released afterwards.
    """
    if loss.dim() != 0:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from the parameter graph")
    check_finite(loss, "loss")
    names = [n for n, p in params.items() if p.requires_grad]
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        out[n] = torch.zeros_like(params[n]) if g is None else check_finite(g, f"grad[{n}]")
    return out


# --- parameters -------------------------------------------------------------


def init_module(module: nn.Module, seed: int) -> nn.Module:
    """Deterministically (re)initialize every parameter from ``seed``.

    Parameters are visited in name order; tensors of rank >= 2 get a fan-in
    scaled normal, rank-1 ``weight`` tensors (norm scales) start at one and
    everything else at zero.
    Modules may define ``_zero_init`` (a set of parameter-name suffixes) to
    force specific tensors to zero.
    """
    gen = torch.Generator().manual_seed(seed)
    zero_suffixes = set()
    for name, sub in module.named_modules():
        for suffix in getattr(sub, "_zero_init", ()):
            zero_suffixes.add(f"{name}.{suffix}" if name else suffix)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            if name in zero_suffixes:
                p.zero_()
            elif p.dim() >= 2:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) / math.sqrt(fan_in))
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    return module


class ParamStore(dict):
    """Flat ``path -> Tensor`` view over one or more modules' parameters."""

    def __init__(self, modules: Mapping[str, nn.Module] | None = None, seed: int | None = None):
        super().__init__()
        self.seed = seed
        for prefix, mod in (modules or {}).items():
            for name, p in mod.named_parameters():
                self[f"{prefix}.{name}" if prefix else name] = p

    def state(self) -> dict[str, Tensor]:
        return {k: v.detach().clone() for k, v in self.items()}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: AdamState,
              lr: float | None = None) -> AdamState:
    """One bias-corrected Adam update, in place; parameters without a gradient are untouched."""
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(p.shape)}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if lr:
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state


def cosine_lr(base_lr: float, step: int, period: int, min_lr: float = 0.0) -> float:
    """Cosine annealing from ``base_lr`` to ``min_lr`` over ``period`` steps."""
    if period <= 0:
        return base_lr
    frac = min(step, period) / period
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * frac))


# --- verification -----------------------------------------------------------


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x`` (no autograd involved)."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f(x))
            flat[i] = orig - h
            fm = float(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return g


def max_relative_error(a: Tensor, b: Tensor, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor) elementwise."""
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max())
