"""Deform and template fields and their composition into an instance SDF.

An instance SDF is ``s(p) = Temp(p + dvec(p)) + ddis(p)`` where
``(dvec, ddis) = Deform_{H(beta)}(p, alpha)`` and the deform weights are
generated by the hypernetwork ``H`` from the instance's hyper code ``beta``.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch

from .diffnet import (DTYPE, DenseNetSpec, HyperSpec, ShapeError, forward,
                      forward_with_spatial_grad, hyper_forward, hyper_init, siren_init)


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 128
    template_hidden: int = 256
    template_layers: int = 5
    deform_hidden: int = 256
    deform_layers: int = 5
    hyper_hidden: int = 256
    hyper_layers: int = 3
    omega0: float = 30.0
    code_std: float = 0.01

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls(latent_dim=128, template_hidden=64, deform_hidden=32, hyper_hidden=32)

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls()

    def template_spec(self) -> DenseNetSpec:
        return DenseNetSpec.mlp(3, self.template_hidden, self.template_layers, 1, "sine", self.omega0)

    def deform_spec(self) -> DenseNetSpec:
        return DenseNetSpec.mlp(3 + self.latent_dim, self.deform_hidden, self.deform_layers, 4,
                                "sine", self.omega0)

    def hyper_spec(self) -> HyperSpec:
        return HyperSpec(self.deform_spec(), self.latent_dim, self.hyper_hidden, self.hyper_layers)


class DeformOutput(NamedTuple):
    vec: torch.Tensor  # (..., N, 3)
    dis: torch.Tensor  # (..., N)


@dataclass
class DeformTemplateModel:
    """Template net, hypernetwork and per-instance codes.

    All tensors are float64 leaves.  ``alpha``/``beta`` hold one row per
    training instance; ``t``/``beta_t`` are the template's own codes.
    """

    config: ModelConfig
    template: torch.Tensor
    hyper: list[torch.Tensor]
    alpha: torch.Tensor
    beta: torch.Tensor
    t: torch.Tensor
    beta_t: torch.Tensor
    category: str = "shape"
    instance_ids: list[str] = field(default_factory=list)

    @classmethod
    def create(cls, config: ModelConfig, n_instances: int, gen: torch.Generator,
               category: str = "shape", instance_ids: list[str] | None = None) -> "DeformTemplateModel":
        template = siren_init(config.template_spec(), gen)
        hyper = hyper_init(config.hyper_spec(), gen)
        L = config.latent_dim
        alpha = torch.randn(n_instances, L, generator=gen, dtype=DTYPE) * config.code_std
        beta = torch.randn(n_instances, L, generator=gen, dtype=DTYPE) * config.code_std
        ids = list(instance_ids) if instance_ids is not None else [str(i) for i in range(n_instances)]
        return cls(config, template, hyper, alpha, beta,
                   torch.zeros(L, dtype=DTYPE), torch.zeros(L, dtype=DTYPE), category, ids)

    @property
    def template_spec(self) -> DenseNetSpec:
        return self.config.template_spec()

    @property
    def deform_spec(self) -> DenseNetSpec:
        return self.config.deform_spec()

    @property
    def hyper_spec(self) -> HyperSpec:
        return self.config.hyper_spec()

    @property
    def n_instances(self) -> int:
        return self.alpha.shape[0]

    def named_tensors(self) -> list[tuple[str, torch.Tensor]]:
        out = [("template", self.template)]
        out += [(f"hyper.{k}", h) for k, h in enumerate(self.hyper)]
        out += [("alpha", self.alpha), ("beta", self.beta), ("t", self.t), ("beta_t", self.beta_t)]
        return out

    def trainable(self) -> list[torch.Tensor]:
        return [t for _, t in self.named_tensors()]

    def requires_grad_(self, flag: bool = True) -> "DeformTemplateModel":
        for t in self.trainable():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "DeformTemplateModel":
        new = copy.copy(self)
        new.template = self.template.detach().clone()
        new.hyper = [h.detach().clone() for h in self.hyper]
        new.alpha = self.alpha.detach().clone()
        new.beta = self.beta.detach().clone()
        new.t = self.t.detach().clone()
        new.beta_t = self.beta_t.detach().clone()
        new.instance_ids = list(self.instance_ids)
        return new

    def template_digest(self) -> str:
        return hashlib.sha256(self.template.detach().numpy().tobytes()).hexdigest()

    def config_dict(self) -> dict:
        return asdict(self.config)


def _check_code(model: DeformTemplateModel, code: torch.Tensor, name: str) -> None:
    if code.shape[-1] != model.config.latent_dim:
        raise ShapeError(f"{name} has dimension {code.shape[-1]}, model uses {model.config.latent_dim}")


def deform_params(model: DeformTemplateModel, beta: torch.Tensor) -> torch.Tensor:
    _check_code(model, beta, "beta")
    return hyper_forward(model.hyper_spec, model.hyper, beta)


def deform(model: DeformTemplateModel, p: torch.Tensor, alpha: torch.Tensor,
           beta: torch.Tensor, params: torch.Tensor | None = None) -> DeformOutput:
    """Deformation flow and SDF displacement at ``p``.

    ``p`` is ``(N, 3)`` with ``(L,)`` codes or ``(B, N, 3)`` with ``(B, L)``
    codes.  ``params`` short-circuits the hypernetwork when already generated.
    """
    _check_code(model, alpha, "alpha")
    if params is None:
        params = deform_params(model, beta)
    out = forward(model.deform_spec, params, p, const=alpha)
    return DeformOutput(out[..., :3], out[..., 3])


def template_sdf(model: DeformTemplateModel, q: torch.Tensor) -> torch.Tensor:
    return forward(model.template_spec, model.template, q)[..., 0]


def instance_sdf(model: DeformTemplateModel, p: torch.Tensor, alpha: torch.Tensor,
                 beta: torch.Tensor) -> torch.Tensor:
    d = deform(model, p, alpha, beta)
    return template_sdf(model, p + d.vec) + d.dis


def template_residual(model: DeformTemplateModel, p_t: torch.Tensor) -> DeformOutput:
    """Deform output for template points under the template codes; zero for a valid template."""
    return deform(model, p_t, model.t, model.beta_t)


class InstanceEval(NamedTuple):
    sdf: torch.Tensor  # (..., N)
    grad: torch.Tensor  # (..., N, 3) spatial gradient of the instance SDF
    template_grad: torch.Tensor  # (..., N, 3) gradient of Temp at q = p + dvec
    vec: torch.Tensor
    dis: torch.Tensor


def instance_eval(model: DeformTemplateModel, p: torch.Tensor, alpha: torch.Tensor,
                  beta: torch.Tensor, params: torch.Tensor | None = None) -> InstanceEval:
    """Instance SDF with its spatial gradient, through deform and template."""
    _check_code(model, alpha, "alpha")
    if params is None:
        params = deform_params(model, beta)
    d = forward_with_spatial_grad(model.deform_spec, params, p, const=alpha)
    vec, dis = d.values[..., :3], d.values[..., 3]
    jvec, jdis = d.jacobian[..., :3, :], d.jacobian[..., 3, :]
    q = p + vec
    tq = forward_with_spatial_grad(model.template_spec, model.template, q.reshape(-1, 3))
    temp_val = tq.values[:, 0].reshape(q.shape[:-1])
    temp_grad = tq.jacobian[:, 0, :].reshape(q.shape)
    # ds/dp = (I + dvec/dp)^T dTemp/dq + dddis/dp
    grad = temp_grad + torch.einsum("...ij,...i->...j", jvec, temp_grad) + jdis
    return InstanceEval(temp_val + dis, grad, temp_grad, vec, dis)
