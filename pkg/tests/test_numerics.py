import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from genodiff import numerics as nx


def test_softmax_constant_row_and_shift():
    x = torch.full((2, 5), 3.0, dtype=torch.float64)
    np.testing.assert_allclose(nx.softmax(x).numpy(), 0.2)
    y = torch.randn(4, 7, dtype=torch.float64)
    torch.testing.assert_close(nx.softmax(y + 11.5), nx.softmax(y))
    torch.testing.assert_close(nx.softmax(y, dim=0).sum(0), torch.ones(7, dtype=torch.float64))


def test_layer_norm_hand_value():
    out = nx.layer_norm(nx.tensor([[1.0, 2.0, 3.0]]))
    z = 1 / math.sqrt(2 / 3 + nx.LN_EPS)
    np.testing.assert_allclose(out.numpy(), [[-z, 0.0, z]], atol=1e-12)
    assert abs(z - 1.2247) < 1e-4


def test_layer_norm_any_axis():
    x = torch.randn(3, 4, 5, dtype=torch.float64)
    out = nx.layer_norm(x, dim=1)
    np.testing.assert_allclose(out.mean(1).numpy(), 0, atol=1e-12)
    var = x.var(1, unbiased=False)
    np.testing.assert_allclose(out.var(1, unbiased=False).numpy(), (var / (var + nx.LN_EPS)).numpy(), atol=1e-12)


def test_other_ops():
    a, b = torch.randn(3, 4, dtype=torch.float64), torch.randn(4, 2, dtype=torch.float64)
    torch.testing.assert_close(nx.matmul(a, b), a @ b)
    torch.testing.assert_close(nx.add(a, 1.0 + a), 2 * a + 1)
    torch.testing.assert_close(nx.mul(a, a), a ** 2)
    torch.testing.assert_close(nx.scale(a, 0.5), a / 2)
    torch.testing.assert_close(nx.mean(a, 1), a.mean(1))
    torch.testing.assert_close(nx.concat([a, a], 0)[3:], a)
    assert nx.broadcast(torch.ones(1, 4), (3, 4)).shape == (3, 4)
    assert nx.gelu(torch.zeros(2)).abs().max() == 0


@pytest.mark.parametrize("call", [
    lambda: nx.matmul(torch.ones(2, 3), torch.ones(2, 3)),
    lambda: nx.add(torch.ones(2, 3), torch.ones(3, 2)),
    lambda: nx.mul(torch.ones(4), torch.ones(3)),
    lambda: nx.broadcast(torch.ones(2, 3), (4, 3)),
    lambda: nx.concat([torch.ones(2, 3), torch.ones(2, 4)], 0),
])
def test_shape_errors(call):
    with pytest.raises(ValueError):
        call()


def test_non_finite_names_operator():
    with pytest.raises(nx.NonFiniteError, match="matmul"):
        nx.matmul(torch.tensor([[1e308, 1e308]], dtype=torch.float64), torch.tensor([[1e308], [1e308]],
                                                                                     dtype=torch.float64))
    with pytest.raises(nx.NonFiniteError, match="add"):
        nx.add(torch.tensor([float("inf")]), torch.tensor([-float("inf")]))
    # a large but finite sum must not trip the check
    big = torch.full((4,), 1e308, dtype=torch.float64)
    assert nx.check_finite(big, "x") is big


def test_backward_linear_map():
    W = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    unused = torch.randn(2, dtype=torch.float64, requires_grad=True)
    x = torch.randn(4, dtype=torch.float64)
    grads = nx.backward((W @ x).sum(), {"W": W, "unused": unused})
    torch.testing.assert_close(grads["W"], x.expand(3, 4))
    assert torch.equal(grads["unused"], torch.zeros(2, dtype=torch.float64))


def test_backward_errors():
    W = torch.randn(3, requires_grad=True)
    with pytest.raises(ValueError):
        nx.backward(W * 2, {"W": W})
    with pytest.raises(ValueError):
        nx.backward((W * 2).sum().detach(), {"W": W})


def test_mlp_gradients_match_finite_differences():
    torch.manual_seed(0)
    mlp = nn.Sequential(nn.Linear(5, 7), nn.GELU(), nn.Linear(7, 6), nn.Tanh(), nn.Linear(6, 1)).double()
    x = torch.randn(8, 5, dtype=torch.float64)
    params = nx.ParamStore({"mlp": mlp})
    grads = nx.backward(mlp(x).pow(2).mean(), params)
    for name, p in params.items():
        def f(v, p=p):
            saved = p.detach().clone()
            with torch.no_grad():
                p.copy_(v)
            out = mlp(x).pow(2).mean()
            with torch.no_grad():
                p.copy_(saved)
            return out
        fd = nx.finite_difference_grad(f, p.detach())
        assert nx.max_relative_error(grads[name], fd) < 1e-4, name


def test_init_is_deterministic_and_honours_zero_init():
    class M(nn.Module):
        _zero_init = ("b.weight",)

        def __init__(self):
            super().__init__()
            self.a = nn.Linear(3, 4)
            self.b = nn.Linear(4, 2)
            self.n = nn.LayerNorm(4)

    m1, m2 = nx.init_module(M(), 5), nx.init_module(M(), 5)
    for (n1, p1), (_, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert torch.equal(p1, p2), n1
    assert torch.count_nonzero(m1.b.weight) == 0
    assert torch.all(m1.n.weight == 1) and torch.all(m1.a.bias == 0)
    assert not torch.equal(nx.init_module(M(), 6).a.weight, m1.a.weight)


def test_param_store_paths_unique():
    store = nx.ParamStore({"x": nn.Linear(2, 2), "y": nn.Linear(2, 2)}, seed=3)
    assert sorted(store) == ["x.bias", "x.weight", "y.bias", "y.weight"]
    assert store.seed == 3


def test_adam_zero_gradient():
    p = torch.randn(3, dtype=torch.float64)
    before = p.clone()
    state = nx.adam_step({"p": p}, {"p": torch.zeros(3, dtype=torch.float64)}, nx.AdamState(lr=0.1))
    assert torch.equal(p, before) and state.step == 1


def test_adam_constant_gradient_descends():
    p = torch.zeros(1, dtype=torch.float64)
    state = nx.AdamState(lr=0.01)
    for _ in range(50):
        nx.adam_step({"p": p}, {"p": torch.tensor([2.5], dtype=torch.float64)}, state)
    assert p.item() < -0.4


def test_adam_hand_formula():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    m0, v0 = torch.tensor([0.1, 0.2], dtype=torch.float64), torch.tensor([0.01, 0.03], dtype=torch.float64)
    g = torch.tensor([0.5, -1.5], dtype=torch.float64)
    state = nx.AdamState(lr=0.01, step=3, m={"p": m0.clone()}, v={"p": v0.clone()})
    nx.adam_step({"p": p}, {"p": g}, state)
    b1, b2, t = 0.9, 0.999, 4
    m = b1 * np.array([0.1, 0.2]) + (1 - b1) * np.array([0.5, -1.5])
    v = b2 * np.array([0.01, 0.03]) + (1 - b2) * np.array([0.25, 2.25])
    expect = np.array([1.0, -2.0]) - 0.01 * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + 1e-8)
    np.testing.assert_allclose(p.numpy(), expect, rtol=0, atol=1e-15)


def test_adam_untouched_and_shape_checks():
    p, q = torch.ones(2), torch.ones(3)
    nx.adam_step({"p": p, "q": q}, {"p": torch.ones(2)}, nx.AdamState(lr=0.1))
    assert torch.equal(q, torch.ones(3)) and not torch.equal(p, torch.ones(2))
    with pytest.raises(ValueError):
        nx.adam_step({"p": p}, {"p": torch.ones(3)}, nx.AdamState())


def test_cosine_lr():
    assert nx.cosine_lr(1.0, 0, 100) == 1.0
    assert abs(nx.cosine_lr(1.0, 50, 100) - 0.5) < 1e-12
    assert nx.cosine_lr(1.0, 100, 100) == 0.0
    assert nx.cosine_lr(1.0, 7, 0) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_finite_difference_oracle_on_polynomial(xs):
    x = torch.tensor(xs, dtype=torch.float64)
    fd = nx.finite_difference_grad(lambda v: (v ** 3).sum(), x)
    np.testing.assert_allclose(fd.numpy(), 3 * x.numpy() ** 2, atol=1e-6)
