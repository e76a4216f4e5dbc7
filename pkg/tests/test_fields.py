import dataclasses

import pytest
import torch

from dtshape.diffnet import ShapeError, forward, unflatten
from dtshape.fields import (DeformTemplateModel, ModelConfig, deform, instance_eval, instance_sdf, template_residual,
                            template_sdf)
from helpers import TOY, gradient_check, toy_model


def zero_hyper(model: DeformTemplateModel) -> DeformTemplateModel:
    m = model.clone()
    for h in m.hyper:
        h.zero_()
    return m


def test_zero_hyper_gives_zero_deform():
    m = zero_hyper(toy_model(0))
    p = torch.randn(30, 3, dtype=torch.float64)
    d = deform(m, p, m.alpha[0], m.beta[0])
    assert torch.equal(d.vec, torch.zeros_like(d.vec)) and torch.equal(d.dis, torch.zeros_like(d.dis))
    # identity deform: the instance field is the template field
    assert torch.equal(instance_sdf(m, p, m.alpha[0], m.beta[0]), template_sdf(m, p))


def test_deform_deterministic():
    m = toy_model(1)
    p = torch.randn(30, 3, dtype=torch.float64)
    a = deform(m, p, m.alpha[1], m.beta[1])
    b = deform(m, p, m.alpha[1], m.beta[1])
    assert torch.equal(a.vec, b.vec) and torch.equal(a.dis, b.dis)


def test_constant_displacement_adds():
    m = zero_hyper(toy_model(2))
    # last generator's output bias sets the deform output layer; only the dis bias is non-zero
    gspec = m.hyper_spec.generators()[-1]
    _, b_last = unflatten(gspec, m.hyper[-1])[-1]
    c = 0.37
    b_last[-1] = c
    p = torch.randn(25, 3, dtype=torch.float64)
    assert torch.allclose(instance_sdf(m, p, m.alpha[0], m.beta[0]), template_sdf(m, p) + c, atol=1e-15)


def test_composition_identity():
    m = toy_model(3)
    p = torch.randn(40, 3, dtype=torch.float64)
    d = deform(m, p, m.alpha[0], m.beta[0])
    direct = template_sdf(m, p + d.vec) + d.dis
    assert torch.equal(instance_sdf(m, p, m.alpha[0], m.beta[0]), direct)


def test_template_batched_equals_pointwise():
    m = toy_model(4)
    q = torch.randn(12, 3, dtype=torch.float64)
    batched = template_sdf(m, q)
    single = torch.stack([template_sdf(m, q[i:i + 1])[0] for i in range(12)])
    assert torch.allclose(batched, single, atol=1e-15)


def test_template_independent_of_codes():
    m = toy_model(5)
    q = torch.randn(10, 3, dtype=torch.float64)
    before = template_sdf(m, q)
    m.alpha.normal_()
    m.beta.normal_()
    assert torch.equal(before, template_sdf(m, q))


def test_residual_zero_for_zero_codes_and_zero_hyper():
    m = zero_hyper(toy_model(6))
    m.t.zero_()
    m.beta_t.zero_()
    r = template_residual(m, torch.randn(20, 3, dtype=torch.float64))
    assert float(r.vec.abs().max()) == 0.0 and float(r.dis.abs().max()) == 0.0


def test_residual_gradient_wrt_t():
    m = toy_model(7)
    q = torch.randn(20, 3, dtype=torch.float64)

    def loss():
        r = template_residual(m, q)
        return (r.vec.abs().sum(-1) + r.dis.abs()).mean()

    assert gradient_check(loss, [m.t]) <= 1e-3


def test_instance_eval_matches_fd_and_values():
    m = toy_model(8, n=3)
    p = torch.rand(3, 50, 3, dtype=torch.float64) * 2 - 1
    ev = instance_eval(m, p, m.alpha, m.beta)
    assert torch.allclose(ev.sdf, torch.stack([instance_sdf(m, p[i], m.alpha[i], m.beta[i]) for i in range(3)]),
                          atol=1e-13)
    h = 1e-5
    fd = []
    for k in range(3):
        e = torch.zeros(3, dtype=torch.float64)
        e[k] = h
        fd.append((instance_eval(m, p + e, m.alpha, m.beta).sdf - instance_eval(m, p - e, m.alpha, m.beta).sdf)
                  / (2 * h))
    fd = torch.stack(fd, -1)
    assert float((ev.grad - fd).abs().max() / fd.abs().max()) <= 1e-3


def test_alpha_gradient_nonzero():
    m = toy_model(9)
    a = m.alpha[0].clone().requires_grad_()
    s = instance_sdf(m, torch.rand(20, 3, dtype=torch.float64), a, m.beta[0]).sum()
    (g,) = torch.autograd.grad(s, a)
    assert torch.isfinite(g).all() and float(g.abs().max()) > 0


def test_code_dimension_checked():
    m = toy_model(0)
    with pytest.raises(ShapeError):
        deform(m, torch.zeros(3, 3, dtype=torch.float64), torch.zeros(5, dtype=torch.float64), m.beta[0])


def test_create_initialisation():
    cfg = dataclasses.replace(TOY, latent_dim=128)
    m = DeformTemplateModel.create(cfg, 50, torch.Generator().manual_seed(0))
    assert m.alpha.shape == (50, 128) and m.beta.shape == (50, 128)
    assert abs(float(m.alpha.std()) - 0.01) < 1e-3 and abs(float(m.beta.std()) - 0.01) < 1e-3
    assert float(m.t.abs().max()) == 0.0 and float(m.beta_t.abs().max()) == 0.0
    assert m.instance_ids == [str(i) for i in range(50)]


def test_clone_is_independent():
    m = toy_model(0)
    c = m.clone()
    c.template.add_(1.0)
    c.hyper[0].add_(1.0)
    assert m.template_digest() != c.template_digest()
    assert not torch.equal(m.hyper[0], c.hyper[0])


def test_fresh_deform_is_small():
    m = DeformTemplateModel.create(ModelConfig.desk(), 2, torch.Generator().manual_seed(0))
    d = deform(m, torch.rand(100, 3, dtype=torch.float64), m.alpha[0], m.beta[0])
    assert float(d.vec.abs().max()) < 0.1 and float(d.dis.abs().max()) < 0.1


def test_deform_output_layer_is_linear():
    spec = ModelConfig.desk().deform_spec()
    assert spec.activations[-1] == "linear" and spec.n_out == 4 and spec.n_in == 3 + 128
    assert forward(spec, torch.zeros(spec.n_params, dtype=torch.float64),
                   torch.zeros(1, 131, dtype=torch.float64)).shape == (1, 4)
