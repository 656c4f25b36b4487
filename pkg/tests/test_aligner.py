import math

import numpy as np
import pytest
import torch

from genodiff import numerics as nx
from genodiff.aligner import (
    Aligner,
    AlignerConfig,
    GuidanceConfig,
    align_loss,
    aligner_score,
    alignment_gradient,
    guided_sample,
)
from genodiff.diffusion import Denoiser, DenoiserConfig, make_schedule, sample_unguided, seeds_for

from helpers import randomize

D = torch.float64


def toy_aligner(channels=1, seed=0):
    return randomize(Aligner(AlignerConfig(channels=channels, base=8, cond_dim=6, d_a=5, tdim=8)).double(), seed)


def test_embedding_unit_and_deterministic():
    al = toy_aligner(3)
    x = torch.randn(4, 3, 8, 8, dtype=D)
    e = al.embed(x, torch.tensor([0, 3, 10, 50]))
    np.testing.assert_allclose(e.norm(dim=-1).detach().numpy(), 1, atol=1e-12)
    torch.testing.assert_close(e, al.embed(x, torch.tensor([0, 3, 10, 50])))
    with pytest.raises(ValueError):
        al.embed(torch.randn(4, 2, 8, 8, dtype=D), 0)


def test_embedding_input_gradient():
    al = toy_aligner()
    x = torch.randn(1, 1, 4, 4, dtype=D, requires_grad=True)
    target = torch.randn(5, dtype=D)
    f = lambda v: (al.embed(v, torch.tensor([7])) * target).sum()
    (g,) = torch.autograd.grad(f(x), x)
    assert nx.max_relative_error(g, nx.finite_difference_grad(f, x)) < 1e-4


def test_condition_summary_hand_example():
    al = Aligner(AlignerConfig(cond_dim=2, d_a=2)).double()
    with torch.no_grad():
        al.cond_proj.weight.copy_(torch.eye(2, dtype=D))
    C = torch.tensor([[1.0, 2.0], [3.0, 0.0]], dtype=D)
    s = al.summary(C)
    np.testing.assert_allclose(s.detach().numpy(), np.array([2.0, 1.0]) / math.sqrt(5), atol=1e-15)
    torch.testing.assert_close(al.summary(C.clone()), s)


def test_align_loss_examples():
    e = torch.nn.functional.normalize(torch.randn(1, 5, dtype=D), dim=-1)
    assert align_loss(e, torch.nn.functional.normalize(torch.randn(1, 5, dtype=D), dim=-1)).item() == 0.0
    same = e.expand(6, 5)
    assert abs(align_loss(same, same).item() - math.log(6)) < 1e-12
    with pytest.raises(ValueError):
        align_loss(e[:0], e[:0])


def test_align_loss_hand_logits():
    img = torch.eye(4, dtype=D)
    cond = torch.tensor([[1.0, 0, 0, 0], [0.6, 0.8, 0, 0], [0, 0, 1.0, 0], [0, 0, 0.8, 0.6]], dtype=D)
    tau = 0.5
    logits = img.numpy() @ cond.numpy().T / tau
    ce = np.mean([np.log(np.exp(logits[i]).sum()) - logits[i, i] for i in range(4)])
    assert abs(align_loss(img, cond, tau).item() - ce) < 1e-12
    assert align_loss(img, cond, tau).item() > 0


def test_scores_are_cosines():
    al = toy_aligner(3)
    x = torch.randn(10, 3, 8, 8, dtype=D)
    C = torch.randn(10, 4, 6, dtype=D)
    direct = (al.embed(x, 0) * al.summary(C)).sum(-1)
    torch.testing.assert_close(aligner_score(x, C, al), direct)
    assert aligner_score(x, C, al).abs().max() <= 1 + 1e-12


def test_score_extremes_and_rotation_invariance():
    a = torch.nn.functional.normalize(torch.randn(3, 5, dtype=D), dim=-1)
    assert torch.allclose((a * a).sum(-1), torch.ones(3, dtype=D))
    assert torch.allclose((a * -a).sum(-1), -torch.ones(3, dtype=D))
    b = torch.nn.functional.normalize(torch.randn(3, 5, dtype=D), dim=-1)
    q, _ = torch.linalg.qr(torch.randn(5, 5, dtype=D))
    torch.testing.assert_close(((a @ q) * (b @ q)).sum(-1), (a * b).sum(-1))


def test_alignment_gradient_matches_finite_differences():
    al = toy_aligner()
    x = torch.randn(2, 1, 4, 4, dtype=D)
    summary = al.summary(torch.randn(2, 3, 6, dtype=D)).detach()
    g = alignment_gradient(al, x, 5, summary)
    f = lambda v: al.similarity(v, torch.full((2,), 5), summary).sum()
    assert nx.max_relative_error(g, nx.finite_difference_grad(f, x)) < 1e-4


def test_alignment_gradient_32bit():
    al = toy_aligner().float()
    x = torch.randn(2, 1, 4, 4)
    summary = al.summary(torch.randn(2, 3, 6)).detach()
    g = alignment_gradient(al, x, 5, summary).double()
    al64 = al.double()
    f = lambda v: al64.similarity(v, torch.full((2,), 5), summary.double()).sum()
    assert nx.max_relative_error(g, nx.finite_difference_grad(f, x.double()), floor=1e-3) < 1e-3


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(w=-1)
    with pytest.raises(ValueError):
        GuidanceConfig(eta=0)


def _stack():
    den = randomize(Denoiser(DenoiserConfig(channels=3, base=8, cond_dim=6, heads=2, tdim=16)).double(), 1, 0.3)
    return make_schedule(12), den, toy_aligner(3, 2)


def test_w_zero_is_bit_identical_to_unguided():
    s, den, al = _stack()
    C = torch.randn(3, 4, 6, dtype=D)
    seeds = seeds_for(5, 3)
    a = guided_sample(C, s, den, al, GuidanceConfig(w=0.0), seeds, (3, 8, 8))
    b = sample_unguided(C, s, den, seeds, (3, 8, 8))
    assert torch.equal(a, b)


def test_guided_output_clamped_and_deterministic():
    s, den, al = _stack()
    C = torch.randn(2, 4, 6, dtype=D)
    a = guided_sample(C, s, den, al, GuidanceConfig(w=3.0), [1, 2], (3, 8, 8))
    assert a.abs().max() <= 1
    assert torch.equal(a, guided_sample(C, s, den, al, GuidanceConfig(w=3.0), [1, 2], (3, 8, 8)))
    assert not torch.equal(a, guided_sample(C, s, den, al, GuidanceConfig(w=0.0), [1, 2], (3, 8, 8)))
    with pytest.raises(ValueError):
        guided_sample(C, s, den, None, GuidanceConfig(w=1.0), [1, 2], (3, 8, 8))


def test_literal_mode_runs_and_uses_negatives():
    s, den, al = _stack()
    C = torch.randn(2, 4, 6, dtype=D)
    negs = al.summary(torch.randn(3, 4, 6, dtype=D)).detach()
    lit = GuidanceConfig(w=1.0, eta=0.01, alg1_literal=True)
    a = guided_sample(C, s, den, al, lit, [1, 2], (3, 8, 8), negatives=negs)
    b = guided_sample(C, s, den, al, lit, [1, 2], (3, 8, 8))
    assert a.shape == (2, 3, 8, 8) and torch.isfinite(a).all()
    # with the positive as the only candidate the contrastive gradient vanishes
    c = guided_sample(C, s, den, al, GuidanceConfig(w=0.0, eta=0.01, alg1_literal=True), [1, 2], (3, 8, 8))
    torch.testing.assert_close(b, c)
    assert not torch.equal(a, b)
