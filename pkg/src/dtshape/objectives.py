"""Loss terms for deform-template training and fine-tuning.

Every term is a per-batch mean (sums in the formulation are folded into the
weights), so weight values do not depend on batch size.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Callable, NamedTuple

import torch

from .diffnet import NonFiniteError
from .fields import (DeformTemplateModel, InstanceEval, deform, deform_params, instance_eval,
                     template_residual)

TERMS = ("sdf_reg", "normal", "eikonal", "offsurface", "tpn", "vec", "dis", "temp_shape",
         "reg_alpha", "reg_t", "reg_beta")


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    sdf: float = 3e3
    normal: float = 1e2
    eikonal: float = 5e1
    offsurface: float = 5e2
    vec: float = 5.0
    dis: float = 1e2
    alpha: float = 1e5
    beta: float = 1e6
    delta: float = 100.0
    # Weight sharing as printed: the template-shape term reuses the displacement
    # weight and the template code reuses the instance-code weight.
    temp_shape: float | None = None
    reg_t: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and (v < 0 or v != v or v == float("inf")):
                raise ContractError(f"weight {f.name} must be finite and nonnegative")
        if self.delta < 10:
            raise ContractError("delta must be >= 10")

    def term_weights(self) -> dict[str, float]:
        return {
            "sdf_reg": self.sdf, "normal": self.normal, "eikonal": self.eikonal,
            "offsurface": self.offsurface, "tpn": self.normal, "vec": self.vec, "dis": self.dis,
            "temp_shape": self.dis if self.temp_shape is None else self.temp_shape,
            "reg_alpha": self.alpha, "reg_t": self.alpha if self.reg_t is None else self.reg_t,
            "reg_beta": self.beta,
        }


class LossBreakdown:
    """Unweighted terms, their weights, and the weighted total."""

    def __init__(self, terms: dict[str, torch.Tensor], weights: dict[str, float]):
        self.terms = terms
        self.weights = {k: weights[k] for k in terms}
        total = None
        for k, v in terms.items():
            total = self.weights[k] * v if total is None else total + self.weights[k] * v
        self.total = total if total is not None else torch.zeros((), dtype=torch.float64)

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.terms[key]

    def weighted(self, key: str) -> float:
        return float(self.weights[key] * self.terms[key])

    def as_floats(self) -> dict[str, float]:
        out = {k: float(self.terms[k].detach()) if k in self.terms else float("nan") for k in TERMS}
        out["total"] = float(self.total.detach())
        return out

    def check_finite(self) -> None:
        for k, v in self.terms.items():
            if not torch.isfinite(v).all():
                raise NonFiniteError(f"loss term {k}")


class PointBatch(NamedTuple):
    """Surface and free samples for ``B`` instances."""

    surface: torch.Tensor  # (B, Ns, 3)
    normals: torch.Tensor | None  # (B, Ns, 3)
    free: torch.Tensor  # (B, Nf, 3)
    free_sdf: torch.Tensor  # (B, Nf)
    index: torch.Tensor  # (B,) rows of the code tables

    @property
    def points(self) -> torch.Tensor:
        return torch.cat([self.surface, self.free], dim=-2)

    @property
    def gt_sdf(self) -> torch.Tensor:
        return torch.cat([torch.zeros(self.surface.shape[:-1], dtype=self.free_sdf.dtype), self.free_sdf], dim=-1)

    @property
    def n_surface(self) -> int:
        return self.surface.shape[-2]


def _norm(v: torch.Tensor) -> torch.Tensor:
    # subgradient 0 at the origin instead of NaN
    return torch.sqrt((v * v).sum(-1) + 1e-300)


def _cos(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return (a * b).sum(-1) / torch.clamp(_norm(a) * _norm(b), min=eps)


FieldFn = Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


def sdf_terms(values: torch.Tensor, grads: torch.Tensor, batch: PointBatch,
              delta: float = 100.0) -> dict[str, torch.Tensor]:
    """Regression, normal, eikonal and off-surface terms from field values/gradients."""
    if batch.normals is None:
        raise ContractError("surface samples need normals")
    ns = batch.n_surface
    return {
        "sdf_reg": (values - batch.gt_sdf).abs().mean(),
        "normal": (1.0 - _cos(grads[..., :ns, :], batch.normals)).mean(),
        "eikonal": (_norm(grads) - 1.0).abs().mean(),
        "offsurface": torch.exp(-delta * values[..., ns:].abs()).mean(),
    }


def _codes(model: DeformTemplateModel, batch: PointBatch):
    return model.alpha[batch.index], model.beta[batch.index]


def sdf_loss(model: DeformTemplateModel | FieldFn, batch: PointBatch,
             weights: LossWeights = LossWeights()) -> LossBreakdown:
    """The four SDF terms for a model (codes taken from ``batch.index``) or a plain field."""
    pts = batch.points
    if isinstance(model, DeformTemplateModel):
        a, b = _codes(model, batch)
        ev = instance_eval(model, pts, a, b)
        values, grads = ev.sdf, ev.grad
    else:
        values, grads = model(pts)
    return LossBreakdown(sdf_terms(values, grads, batch, weights.delta), weights.term_weights())


def template_normal_term(ev: InstanceEval, batch: PointBatch) -> torch.Tensor:
    ns = batch.n_surface
    return (1.0 - _cos(ev.template_grad[..., :ns, :], batch.normals)).mean()


def template_normal_loss(model: DeformTemplateModel, batch: PointBatch,
                         weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted normal agreement of the template gradient at deformed surface points."""
    if batch.normals is None:
        raise ContractError("surface samples need normals")
    a, b = _codes(model, batch)
    ev = instance_eval(model, batch.surface, a, b)
    return weights.normal * template_normal_term(ev, batch)


def laplacian_stencil(points: torch.Tensor, h: float) -> torch.Tensor:
    """``(..., N, 3)`` -> ``(..., 7N, 3)``: centre then +-h along x, y, z."""
    offs = torch.zeros(7, 3, dtype=points.dtype)
    for k in range(3):
        offs[1 + 2 * k, k] = h
        offs[2 + 2 * k, k] = -h
    st = points.unsqueeze(-3) + offs.view(7, 1, 3)  # (..., 7, N, 3)
    return st.reshape(*points.shape[:-2], 7 * points.shape[-2], 3)


def laplacian_from_stencil(values: torch.Tensor, n: int, h: float) -> torch.Tensor:
    v = values.reshape(*values.shape[:-2], 7, n, values.shape[-1])
    c = v[..., 0, :, :]
    lap = (v[..., 1, :, :] + v[..., 2, :, :] - 2 * c) + (v[..., 3, :, :] + v[..., 4, :, :] - 2 * c) \
        + (v[..., 5, :, :] + v[..., 6, :, :] - 2 * c)
    return lap / (h * h)


def vec_smooth_term(vec_fn: Callable[[torch.Tensor], torch.Tensor], points: torch.Tensor,
                    h: float = 1e-2) -> torch.Tensor:
    """Mean Euclidean norm of the finite-difference Laplacian of a vector field."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    n = points.shape[-2]
    vals = vec_fn(laplacian_stencil(points, h))
    return _norm(laplacian_from_stencil(vals, n, h)).mean()


def vec_smooth_loss(model: DeformTemplateModel, batch: PointBatch, h: float = 1e-2,
                    max_points: int | None = None) -> torch.Tensor:
    a, b = _codes(model, batch)
    params = deform_params(model, b)
    pts = batch.points if max_points is None else _subset(batch, max_points)
    return vec_smooth_term(lambda q: deform(model, q, a, b, params).vec, pts, h)


def _subset(batch: PointBatch, k: int) -> torch.Tensor:
    # evenly split between surface and free samples; deterministic prefix
    ks = min(k // 2, batch.n_surface)
    kf = min(k - ks, batch.free.shape[-2])
    return torch.cat([batch.surface[..., :ks, :], batch.free[..., :kf, :]], dim=-2)


def dis_loss(model: DeformTemplateModel, batch: PointBatch) -> torch.Tensor:
    a, b = _codes(model, batch)
    return deform(model, batch.points, a, b).dis.abs().mean()


def temp_shape_loss(model: DeformTemplateModel, p_t: torch.Tensor) -> torch.Tensor:
    """Mean L1 magnitude of the 4-component deform output at template points."""
    r = template_residual(model, p_t)
    return (r.vec.abs().sum(-1) + r.dis.abs()).mean()


def latent_reg(alphas: torch.Tensor, t: torch.Tensor, betas: torch.Tensor,
               beta_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Squared-L2 sums of instance codes, template code, and hyper codes (incl. the template's)."""
    return (alphas * alphas).sum(), (t * t).sum(), (betas * betas).sum() + (beta_t * beta_t).sum()


def train_objective(model: DeformTemplateModel, batch: PointBatch, template_points: torch.Tensor | None,
                    weights: LossWeights = LossWeights(), h: float = 1e-2,
                    vec_points: int | None = None) -> LossBreakdown:
    """Full training objective on one step's batch.

    Code regularisers are averaged over the instances in the batch.
    """
    a, b = _codes(model, batch)
    params = deform_params(model, b)
    ev = instance_eval(model, batch.points, a, b, params)
    terms = sdf_terms(ev.sdf, ev.grad, batch, weights.delta)
    terms["tpn"] = template_normal_term(ev, batch)
    pts = batch.points if vec_points is None else _subset(batch, vec_points)
    terms["vec"] = vec_smooth_term(lambda q: deform(model, q, a, b, params).vec, pts, h)
    terms["dis"] = ev.dis.abs().mean()
    if template_points is not None:
        terms["temp_shape"] = temp_shape_loss(model, template_points)
    else:
        terms["temp_shape"] = torch.zeros((), dtype=ev.sdf.dtype)
    nb = a.shape[0]
    ra, rt, rb = latent_reg(a, model.t, b, torch.zeros_like(model.beta_t))
    terms["reg_alpha"] = ra / nb
    terms["reg_t"] = rt
    terms["reg_beta"] = rb / nb + (model.beta_t * model.beta_t).sum()
    return LossBreakdown(terms, weights.term_weights())


def finetune_objective(model: DeformTemplateModel, batch: PointBatch, alpha_j: torch.Tensor,
                       beta_j: torch.Tensor, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """SDF loss plus code regularisers for one unseen shape; the template is frozen.

    ``batch`` holds a single instance (B=1); ``batch.index`` is ignored.
    """
    view = dataclasses.replace(model, template=model.template.detach())
    ev = instance_eval(view, batch.points, alpha_j.unsqueeze(0), beta_j.unsqueeze(0))
    terms = sdf_terms(ev.sdf, ev.grad, batch, weights.delta)
    terms["reg_alpha"] = (alpha_j * alpha_j).sum()
    terms["reg_beta"] = (beta_j * beta_j).sum()
    return LossBreakdown(terms, weights.term_weights())
