"""Environment-aware MSA encoder.

Row attention runs within each aligned sequence and its pre-softmax scores are
scaled per key position by the evolution gate; column attention runs across
sequences at each position and is scaled per key row by the environment gate.
The final activations are mean-pooled over MSA rows into an ``l x d`` condition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import numerics as nx
from .genome import DEFAULT_K, vocab_size
from .retrieval import MsaBlock


@dataclass(frozen=True)
class ConditionerConfig:
    d: int = 64
    n_layers: int = 2
    n_vocab: int = vocab_size(DEFAULT_K)
    m_max: int = 4
    l_max: int = 128
    heads: int = 1

    def __post_init__(self):
        for name in ("d", "n_layers", "n_vocab", "m_max", "l_max", "heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")


@dataclass(frozen=True)
class ConditionEmbedding:
    values: Tensor  # (l, d)

    @property
    def l(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def gated_attention(q: Tensor, k: Tensor, v: Tensor, gate: Tensor, return_weights: bool = False):
    """softmax((q k^T) * gate / sqrt(d)) v over the last two axes.

    ``gate`` broadcasts against the score matrix with its last axis indexing
    keys.
    """
    d = q.shape[-1]
    scores = nx.matmul(q, k.transpose(-1, -2))
    weights = nx.softmax(nx.scale(nx.mul(scores, gate), 1.0 / math.sqrt(d)), dim=-1)
    out = nx.matmul(weights, v)
    return (out, weights) if return_weights else out


def row_attention(h: Tensor, w_v: Tensor, wq: nn.Module, wk: nn.Module, wv: nn.Module,
                  return_weights: bool = False):
    """h: (..., m, l, d), w_v: (..., l) -> (..., m, l, d); attention within each row."""
    if w_v.shape[-1] != h.shape[-2]:
        raise ValueError(f"evolution gate length {w_v.shape[-1]} != l={h.shape[-2]}")
    gate = w_v[..., None, None, :]
    return gated_attention(wq(h), wk(h), wv(h), gate, return_weights)


def column_attention(h: Tensor, w_e: Tensor, wq: nn.Module, wk: nn.Module, wv: nn.Module,
                     return_weights: bool = False):
    """h: (..., m, l, d), w_e: (..., m) -> (..., m, l, d); attention within each column."""
    if w_e.shape[-1] != h.shape[-3]:
        raise ValueError(f"environment gate length {w_e.shape[-1]} != m={h.shape[-3]}")
    hc = h.transpose(-2, -3)  # (..., l, m, d)
    gate = w_e[..., None, None, :]
    res = gated_attention(wq(hc), wk(hc), wv(hc), gate, return_weights)
    if return_weights:
        out, weights = res
        return out.transpose(-2, -3), weights
    return res.transpose(-2, -3)


class GateMLP(nn.Module):
    """Positionwise ``1 + tanh(MLP(x))``; zero output layer makes it the identity gate."""

    _zero_init = ("out.weight", "out.bias")

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden)
        self.out = nn.Linear(hidden, 1)

    def forward(self, x: Tensor) -> Tensor:
        return 1.0 + torch.tanh(self.out(nx.gelu(self.hidden(x)))).squeeze(-1)


class AxialLayer(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.row_q, self.row_k, self.row_v = (nn.Linear(d, d, bias=False) for _ in range(3))
        self.col_q, self.col_k, self.col_v = (nn.Linear(d, d, bias=False) for _ in range(3))
        self.ff_in = nn.Linear(d, 2 * d)
        self.ff_out = nn.Linear(2 * d, d)
        self.ff_norm = nx.LayerNorm(d)

    def msa_norm(self, h: Tensor, w_v: Tensor, w_e: Tensor) -> Tensor:
        h_row = row_attention(h, w_v, self.row_q, self.row_k, self.row_v)
        h_col = column_attention(h, w_e, self.col_q, self.col_k, self.col_v)
        return nx.layer_norm(nx.add(h_row, h_col))

    def forward(self, h: Tensor, w_v: Tensor, w_e: Tensor) -> Tensor:
        h = self.msa_norm(h, w_v, w_e)
        return self.ff_norm(nx.add(h, self.ff_out(nx.gelu(self.ff_in(h)))))


class Conditioner(nn.Module):
    """Batched encoder: tokens (B, m, l), evolution (B, l), envs (B, m, 3) -> C (B, l, d)."""

    def __init__(self, config: ConditionerConfig = ConditionerConfig()):
        super().__init__()
        if config.heads != 1:
            raise NotImplementedError("only single-head axial attention is implemented")
        self.config = config
        d = config.d
        self.token_embedding = nn.Embedding(config.n_vocab, d)
        self.position_embedding = nn.Parameter(torch.zeros(config.l_max, d))
        self.evo_gate = GateMLP(1, d)
        self.env_gate = GateMLP(3, d)
        self.layers = nn.ModuleList(AxialLayer(d) for _ in range(config.n_layers))

    def embed(self, tokens: Tensor) -> Tensor:
        cfg = self.config
        m, l = tokens.shape[-2:]
        if m > cfg.m_max or l > cfg.l_max:
            raise ValueError(f"MSA of {m}x{l} exceeds configured maximum {cfg.m_max}x{cfg.l_max}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= cfg.n_vocab):
            raise ValueError(f"token id outside vocabulary of {cfg.n_vocab}")
        return self.token_embedding(tokens) + self.position_embedding[:l]

    def evolution_gate(self, v: Tensor) -> Tensor:
        return self.evo_gate(v.to(self.position_embedding.dtype).unsqueeze(-1))

    def environment_gate(self, envs: Tensor) -> Tensor:
        norms = envs.norm(dim=-1)
        if ((norms - 1).abs() > 1e-6).any():
            raise ValueError("environment rows must be unit vectors")
        return self.env_gate(envs.to(self.position_embedding.dtype))

    def encode(self, tokens: Tensor, evolution: Tensor, envs: Tensor) -> Tensor:
        """Per-row activations of the last layer, (B, m, l, d)."""
        h = self.embed(tokens)
        w_v = self.evolution_gate(evolution)
        w_e = self.environment_gate(envs)
        for layer in self.layers:
            h = layer(h, w_v, w_e)
        return h

    def forward(self, tokens: Tensor, evolution: Tensor, envs: Tensor) -> Tensor:
        return nx.mean(self.encode(tokens, evolution, envs), dim=-3)


def block_tensors(blocks: Sequence[MsaBlock], dtype=torch.float32) -> tuple[Tensor, Tensor, Tensor]:
    """Stack equally-shaped MSA blocks into batched (tokens, evolution, envs)."""
    shapes = {(b.m, b.l) for b in blocks}
    if len(shapes) != 1:
        raise ValueError(f"blocks in a batch must share (m, l); got {sorted(shapes)}")
    tokens = torch.from_numpy(np.stack([b.tokens for b in blocks]))
    evo = torch.from_numpy(np.stack([b.evolution for b in blocks])).to(dtype)
    envs = torch.from_numpy(np.stack([b.envs for b in blocks])).to(dtype)
    return tokens, evo, envs


def encode_condition(block: MsaBlock, model: Conditioner) -> ConditionEmbedding:
    dtype = model.position_embedding.dtype
    tokens, evo, envs = block_tensors([block], dtype)
    return ConditionEmbedding(model(tokens, evo, envs)[0])
