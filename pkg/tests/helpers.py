"""Shared builders and numerical oracles for the test-suite."""
from __future__ import annotations

import numpy as np
import torch

from dtshape.fields import DeformTemplateModel, ModelConfig
from dtshape.geometry.sampling import SampledShape, uniform_ball
from dtshape.objectives import PointBatch

TOY = ModelConfig(latent_dim=4, template_hidden=8, template_layers=3, deform_hidden=8, deform_layers=3,
                  hyper_hidden=8, hyper_layers=3)


def toy_model(seed: int = 0, n: int = 2, config: ModelConfig = TOY, code_scale: float = 1.0) -> DeformTemplateModel:
    g = torch.Generator().manual_seed(seed)
    m = DeformTemplateModel.create(config, n, g)
    # non-trivial codes so code gradients are exercised away from zero
    with torch.no_grad():
        m.alpha.normal_(0.0, 0.3 * code_scale, generator=g)
        m.beta.normal_(0.0, 0.3 * code_scale, generator=g)
        m.t.normal_(0.0, 0.3 * code_scale, generator=g)
        m.beta_t.normal_(0.0, 0.3 * code_scale, generator=g)
    return m


def sphere_batch(n_inst: int, n_surf: int, n_free: int, radius: float = 0.45, seed: int = 0,
                 centers=None) -> PointBatch:
    """Exact samples of spheres: surface points with radial normals, free points with exact SDF."""
    rng = np.random.default_rng(seed)
    surf, nrm, free, sdf = [], [], [], []
    for i in range(n_inst):
        c = np.zeros(3) if centers is None else np.asarray(centers[i], dtype=float)
        d = rng.standard_normal((n_surf, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        surf.append(c + radius * d)
        nrm.append(d)
        f = uniform_ball(n_free, rng)
        free.append(f)
        sdf.append(np.linalg.norm(f - c, axis=1) - radius)
    t = lambda a: torch.tensor(np.stack(a), dtype=torch.float64)  # noqa: E731
    return PointBatch(t(surf), t(nrm), t(free), t(sdf), torch.arange(n_inst))


def sphere_shape(radius: float = 0.45, n_surface: int = 20_000, n_free: int = 20_000, seed: int = 0,
                 center=(0.0, 0.0, 0.0), shape_id: str = "sphere") -> SampledShape:
    b = sphere_batch(1, n_surface, n_free, radius, seed, centers=[center])
    return SampledShape(b.surface[0].numpy(), b.normals[0].numpy(), b.free[0].numpy(), b.free_sdf[0].numpy(),
                        shape_id)


def directional_fd(loss_fn, tensors: list[torch.Tensor], direction: list[torch.Tensor], h: float = 1e-6) -> float:
    """Central difference of ``loss_fn()`` along ``direction`` (tensors are perturbed in place)."""
    with torch.no_grad():
        for t, d in zip(tensors, direction):
            t.add_(h * d)
        up = float(loss_fn())
        for t, d in zip(tensors, direction):
            t.sub_(2 * h * d)
        down = float(loss_fn())
        for t, d in zip(tensors, direction):
            t.add_(h * d)
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(loss_fn, tensors: list[torch.Tensor], n_dirs: int = 3, seed: int = 0,
                   h: float = 1e-6) -> float:
    """Worst relative error between autograd and central FD over random directions."""
    for t in tensors:
        t.requires_grad_(True)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, tensors)]
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
        norm = sum(float((d * d).sum()) for d in dirs) ** 0.5
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        numeric = directional_fd(loss_fn, tensors, dirs, h)
        worst = max(worst, rel_err(analytic, numeric))
    return worst
