import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dtshape.diffnet import (AdamState, ConfigurationError, DenseNetSpec, HyperSpec, NonFiniteError, ShapeError,
                             adam_step, backward, forward, forward_with_spatial_grad, hyper_forward, hyper_init,
                             siren_init, unflatten)
from helpers import gradient_check


def fd_jacobian(spec, params, x, const=None, h=1e-4):
    cols = []
    for k in range(x.shape[-1]):
        e = torch.zeros(x.shape[-1], dtype=x.dtype)
        e[k] = h
        cols.append((forward(spec, params, x + e, const) - forward(spec, params, x - e, const)) / (2 * h))
    return torch.stack(cols, dim=-1)


def test_spec_validation():
    with pytest.raises(ShapeError):
        DenseNetSpec((3, 1), ("linear",))
    with pytest.raises(ShapeError):
        DenseNetSpec((3, 8, 1), ("sine", "sine"))
    s = DenseNetSpec.mlp(3, 8, 3, 1)
    assert s.widths == (3, 8, 8, 1) and s.activations == ("sine", "sine", "linear")
    assert s.n_params == 4 * 8 + 9 * 8 + 9 * 1


def test_unflatten_wrong_length():
    s = DenseNetSpec.mlp(3, 8, 3, 1)
    with pytest.raises(ShapeError):
        unflatten(s, torch.zeros(s.n_params + 1, dtype=torch.float64))


def test_init_deterministic():
    s = DenseNetSpec.mlp(3, 32, 5, 1)
    assert torch.equal(siren_init(s, 7), siren_init(s, 7))
    assert not torch.equal(siren_init(s, 7), siren_init(s, 8))


def test_init_deep_layer_bound():
    s = DenseNetSpec.mlp(3, 256, 5, 1, omega0=30.0)
    layers = unflatten(s, siren_init(s, 0))
    bound = math.sqrt(6 / 256) / 30
    for w, _ in layers[1:-1]:
        assert float(w.abs().max()) <= bound


def test_init_output_std():
    # seed-averaged output spread of a fresh template-sized net on unit-ball points
    s = DenseNetSpec.mlp(3, 256, 5, 1)
    rng = np.random.default_rng(0)
    d = rng.standard_normal((1000, 3))
    x = torch.tensor(d / np.linalg.norm(d, axis=1, keepdims=True) * rng.random((1000, 1)) ** (1 / 3))
    stds = [float(forward(s, siren_init(s, k), x).std()) for k in range(5)]
    assert 0.1 <= np.mean(stds) <= 2.0


def test_zero_weight_net_outputs_final_bias():
    s = DenseNetSpec.mlp(3, 8, 3, 2)
    p = torch.zeros(s.n_params, dtype=torch.float64)
    p[-2:] = torch.tensor([0.5, -1.5])
    y = forward(s, p, torch.randn(10, 3, dtype=torch.float64))
    assert torch.equal(y, torch.tensor([[0.5, -1.5]] * 10, dtype=torch.float64))


def test_hand_computed_width_one():
    s = DenseNetSpec((1, 1, 1), ("sine", "linear"), omega0=2.0)
    # w1=0.3, b1=0.1, w2=-1.2, b2=0.4
    p = torch.tensor([0.3, 0.1, -1.2, 0.4], dtype=torch.float64)
    x = torch.tensor([[0.7]], dtype=torch.float64)
    expect = -1.2 * math.sin(2.0 * (0.3 * 0.7 + 0.1)) + 0.4
    assert abs(float(forward(s, p, x)) - expect) <= 1e-12


def test_batched_params_match_single():
    s = DenseNetSpec.mlp(5, 8, 3, 2)
    p = torch.stack([siren_init(s, 0), siren_init(s, 1)])
    x = torch.randn(2, 6, 3, dtype=torch.float64)
    c = torch.randn(2, 2, dtype=torch.float64)
    both = forward(s, p, x, c)
    for i in range(2):
        assert torch.allclose(both[i], forward(s, p[i], x[i], c[i]), atol=1e-13)
        # constant suffix is the same as concatenating it on every row
        cat = torch.cat([x[i], c[i].expand(6, 2)], dim=-1)
        assert torch.allclose(both[i], forward(s, p[i], cat), atol=1e-13)


def test_linear_net_jacobian_exact():
    s = DenseNetSpec((3, 2, 1), ("linear", "linear"))
    p = torch.randn(s.n_params, dtype=torch.float64)
    (w1, _), (w2, _) = unflatten(s, p)
    out = forward_with_spatial_grad(s, p, torch.randn(4, 3, dtype=torch.float64))
    assert torch.allclose(out.jacobian, (w2 @ w1).expand(4, 1, 3), atol=1e-14)


def test_jacobian_only_over_position_inputs():
    s = DenseNetSpec.mlp(3 + 4, 8, 3, 4)
    p = siren_init(s, 0)
    out = forward_with_spatial_grad(s, p, torch.randn(5, 3, dtype=torch.float64),
                                    const=torch.randn(4, dtype=torch.float64))
    assert out.jacobian.shape == (5, 4, 3)


@settings(max_examples=15, deadline=None)
@given(width=st.integers(2, 16), depth=st.integers(2, 5), seed=st.integers(0, 10_000),
       n_const=st.integers(0, 4), batched=st.booleans())
def test_spatial_grad_matches_fd(width, depth, seed, n_const, batched):
    s = DenseNetSpec.mlp(3 + n_const, width, depth, 2)
    g = torch.Generator().manual_seed(seed)
    if batched:
        p = torch.stack([siren_init(s, g), siren_init(s, g)])
        x = torch.rand(2, 50, 3, generator=g, dtype=torch.float64) * 2 - 1
        c = torch.randn(2, n_const, generator=g, dtype=torch.float64) if n_const else None
    else:
        p = siren_init(s, g)
        x = torch.rand(100, 3, generator=g, dtype=torch.float64) * 2 - 1
        c = torch.randn(n_const, generator=g, dtype=torch.float64) if n_const else None
    out = forward_with_spatial_grad(s, p, x, c)
    assert torch.allclose(out.values, forward(s, p, x, c), atol=1e-13)
    fd = fd_jacobian(s, p, x, c)
    err = (out.jacobian - fd).abs().max() / fd.abs().max()
    assert float(err) <= 1e-3


def test_backward_quadratic():
    p = torch.randn(10, dtype=torch.float64, requires_grad=True)
    (g,) = backward((p * p).sum(), [p])
    assert torch.allclose(g, 2 * p.detach())


def test_backward_unused_code_is_zero():
    p = torch.randn(3, dtype=torch.float64, requires_grad=True)
    code = torch.randn(4, dtype=torch.float64, requires_grad=True)
    _, gc = backward((p ** 3).sum(), [p, code])
    assert torch.equal(gc, torch.zeros(4, dtype=torch.float64))


def test_backward_non_finite_raises():
    p = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(NonFiniteError) as ei:
        backward((p / p).sum(), [p], node="ratio")
    assert ei.value.node == "ratio"


def test_backward_linearity():
    s = DenseNetSpec.mlp(3, 8, 3, 1)
    p = siren_init(s, 3).requires_grad_()
    x = torch.randn(20, 3, dtype=torch.float64)

    def l1():
        return forward(s, p, x).pow(2).mean()

    def l2():
        return forward_with_spatial_grad(s, p, x).jacobian.norm(dim=-1).mean()

    (g1,) = backward(l1(), [p])
    (g2,) = backward(l2(), [p])
    (g,) = backward(0.3 * l1() - 2.0 * l2(), [p])
    assert torch.allclose(g, 0.3 * g1 - 2.0 * g2, atol=1e-12, rtol=0)


def test_eikonal_style_second_order_gradient():
    s = DenseNetSpec((3, 6, 1), ("sine", "linear"))
    p = siren_init(s, 11)
    x = torch.rand(40, 3, dtype=torch.float64) * 2 - 1

    def loss():
        j = forward_with_spatial_grad(s, p, x).jacobian[:, 0, :]
        return (j.norm(dim=-1) - 1).abs().mean()

    assert gradient_check(loss, [p], n_dirs=5) <= 1e-3


def test_hyper_zero_code_zero_bias_gives_zero_weights():
    target = DenseNetSpec.mlp(3 + 4, 8, 3, 4)
    hs = HyperSpec(target, 4, 8)
    params = hyper_init(hs, 0)
    for gspec, p in zip(hs.generators(), params):
        for k, (_, b) in enumerate(unflatten(gspec, p)):
            b.data.zero_()
    out = hyper_forward(hs, params, torch.zeros(4, dtype=torch.float64))
    assert out.shape == (target.n_params,)
    assert torch.equal(out, torch.zeros_like(out))


def test_hyper_distinct_codes_distinct_weights():
    hs = HyperSpec(DenseNetSpec.mlp(3 + 4, 8, 3, 4), 4, 8)
    params = hyper_init(hs, 0)
    a = hyper_forward(hs, params, torch.randn(4, dtype=torch.float64))
    b = hyper_forward(hs, params, torch.randn(4, dtype=torch.float64))
    assert not torch.equal(a, b)


def test_hyper_batched():
    hs = HyperSpec(DenseNetSpec.mlp(3 + 4, 8, 3, 4), 4, 8)
    params = hyper_init(hs, 0)
    codes = torch.randn(3, 4, dtype=torch.float64)
    out = hyper_forward(hs, params, codes)
    for i in range(3):
        assert torch.allclose(out[i], hyper_forward(hs, params, codes[i]), atol=1e-14)


def test_hyper_gradient_fd():
    target = DenseNetSpec.mlp(3 + 2, 4, 3, 4)
    hs = HyperSpec(target, 2, 4)
    params = hyper_init(hs, 1)
    beta = torch.randn(2, dtype=torch.float64)
    x = torch.rand(10, 3, dtype=torch.float64)
    alpha = torch.randn(2, dtype=torch.float64)

    def loss():
        w = hyper_forward(hs, params, beta)
        return forward(target, w, x, alpha).pow(2).sum()

    assert gradient_check(loss, list(params) + [beta], n_dirs=5) <= 1e-3


def test_hyper_mismatch():
    hs = HyperSpec(DenseNetSpec.mlp(3 + 4, 8, 3, 4), 4, 8)
    params = hyper_init(hs, 0)
    with pytest.raises(ConfigurationError):
        hyper_forward(hs, params[:-1], torch.zeros(4, dtype=torch.float64))
    with pytest.raises(ShapeError):
        hyper_forward(hs, params, torch.zeros(5, dtype=torch.float64))


def test_adam_zero_gradient_no_change():
    p = torch.randn(5, dtype=torch.float64)
    before = p.clone()
    st_ = AdamState.zeros_like([p])
    adam_step(st_, [p], [torch.zeros(5, dtype=torch.float64)], lr=0.1)
    assert torch.equal(p, before)


def test_adam_first_step_hand_value():
    p = torch.tensor([1.0], dtype=torch.float64)
    st_ = AdamState.zeros_like([p])
    adam_step(st_, [p], [torch.tensor([1.0], dtype=torch.float64)], lr=0.1)
    # bias-corrected m = v = 1, update = lr * 1 / (1 + eps)
    assert abs(float(p) - (1.0 - 0.1 / (1 + 1e-8))) <= 1e-15


def test_adam_matches_torch_optimizer():
    gen = torch.Generator().manual_seed(0)
    p = torch.randn(7, generator=gen, dtype=torch.float64)
    q = p.clone().requires_grad_()
    opt = torch.optim.Adam([q], lr=1e-2)
    st_ = AdamState.zeros_like([p])
    for _ in range(20):
        g = torch.randn(7, generator=gen, dtype=torch.float64)
        adam_step(st_, [p], [g], lr=1e-2)
        opt.zero_grad()
        q.grad = g.clone()
        opt.step()
    assert torch.allclose(p, q.detach(), atol=1e-12, rtol=0)


def test_adam_trajectory_deterministic():
    def run():
        s = DenseNetSpec.mlp(3, 8, 3, 1)
        p = siren_init(s, 0).requires_grad_()
        st_ = AdamState.zeros_like([p])
        x = torch.linspace(-1, 1, 30, dtype=torch.float64).reshape(10, 3)
        for _ in range(5):
            (g,) = backward(forward(s, p, x).pow(2).mean(), [p])
            adam_step(st_, [p], [g], lr=1e-3)
        return p.detach()

    assert torch.equal(run(), run())
