"""Template interaction: score an initial reconstruction against the learned
template with coherent point drift, keep the most confident points, and
re-embed them with the template frozen.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.spatial import cKDTree

from .fields import DeformTemplateModel
from .geometry.mesh import TriMesh
from .geometry.sampling import SampledShape, SamplingConfig, fibonacci_rig, render_depths, sample_free_space
from .geometry.volume import VoxelGrid, mesh_from_voxels
from .metrics import chamfer
from .rng import numpy_rng
from .training import EmbedResult, TrainConfig, embed_shape, extract_template

VARIANTS = ("rigid", "rigid+scale", "affine")
SIGMA2_FLOOR = 1e-12


class KTooSmallError(ValueError):
    pass


@dataclass
class CpdResult:
    confidence: np.ndarray  # (N,) max posterior of each scored point
    outlier: np.ndarray  # (N,) posterior mass of the uniform outlier component
    converged: bool
    iterations: int
    sigma2: float
    sigma2_history: list[float]
    rotation: np.ndarray  # linear part: s*R for rigid variants, B for affine
    translation: np.ndarray
    scale: float
    clamped: bool = False
    posterior: np.ndarray | None = None  # (M, N) when requested

    def transform(self, y: np.ndarray) -> np.ndarray:
        return y @ self.rotation.T + self.translation


def _posterior(x: np.ndarray, ty: np.ndarray, sigma2: float, w: float, volume: float):
    """P(m|n) for GMM centroids ``ty`` (M, D) and data ``x`` (N, D); also the outlier mass.

    The outlier component is uniform over ``volume`` (the data's bounding box).
    Normalisation is done in log space, shifted by each column's maximum.
    """
    M, D = ty.shape
    # log kernel -|x - ty|^2 / (2 sigma2) as a single product of augmented coordinates
    inv = 1.0 / sigma2
    ya = np.hstack([ty * inv, (-0.5 * inv) * (ty * ty).sum(1, keepdims=True), np.ones((M, 1))])
    xa = np.hstack([x, np.ones((len(x), 1)), (-0.5 * inv) * (x * x).sum(1, keepdims=True)])
    P = ya @ xa.T
    top = P.max(axis=0)
    P -= top[None, :]
    # weights below e^-700 are immaterial; clamping keeps exp out of the slow subnormal range
    np.maximum(P, -700.0, out=P)
    np.exp(P, out=P)
    col = P.sum(axis=0)
    if w > 0:
        logc = 0.5 * D * math.log(2.0 * math.pi * sigma2) + math.log(w / (1.0 - w)) + math.log(M / volume)
        out_term = np.exp(np.minimum(logc - top, 700.0))
        col += out_term
        out = out_term / col
    else:
        out = np.zeros(x.shape[0])
    P /= col[None, :]
    return P, out


def _box_volume(x: np.ndarray) -> float:
    ext = x.max(axis=0) - x.min(axis=0)
    return float(np.prod(np.maximum(ext, 1e-3 * max(ext.max(), 1e-12))))


def cpd_register(template_pts: np.ndarray, initial_pts: np.ndarray, variant: str = "affine",
                 w: float = 0.1, max_iters: int = 150, tol: float = 1e-8,
                 keep_posterior: bool = False) -> CpdResult:
    """Move the template (GMM centroids) onto the initial points by EM and score the initial points.

    M-steps are the closed-form updates for a rotation (optionally with
    isotropic scale) or a general affine map.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown CPD variant {variant!r}; choose from {VARIANTS}")
    if not 0.0 <= w < 1.0:
        raise ValueError("outlier weight must be in [0, 1)")
    Y = np.asarray(template_pts, dtype=np.float64)
    X = np.asarray(initial_pts, dtype=np.float64)
    if len(Y) == 0 or len(X) == 0:
        raise ValueError("CPD needs two non-empty point sets")
    M, D = Y.shape
    N = X.shape[0]
    B = np.eye(D)
    t = np.zeros(D)
    s = 1.0
    sigma2 = float(((X[None, :, :] - Y[:, None, :]) ** 2).sum() / (D * M * N)) if M * N <= 4_000_000 else \
        float((N * (X * X).sum() + M * (Y * Y).sum() - 2 * Y.sum(0) @ X.sum(0)) / (D * M * N))
    volume = _box_volume(X)
    history = [sigma2]
    converged = clamped = False
    it = 0
    for it in range(1, max_iters + 1):
        P, _ = _posterior(X, Y @ B.T + t, sigma2, w, volume)
        p1 = P.sum(axis=1)  # (M,)
        pt1 = P.sum(axis=0)  # (N,)
        Np = p1.sum()
        mu_x = pt1 @ X / Np
        mu_y = p1 @ Y / Np
        Xh, Yh = X - mu_x, Y - mu_y
        A = Xh.T @ P.T @ Yh  # (D, D)
        xx = (pt1[:, None] * Xh * Xh).sum()
        if variant == "affine":
            yPy = (Yh * p1[:, None]).T @ Yh
            B = np.linalg.solve(yPy.T, A.T).T
            t = mu_x - B @ mu_y
            new = (xx - np.trace(A @ B.T)) / (Np * D)
            s = float(abs(np.linalg.det(B)) ** (1.0 / D))
        else:
            U, _, Vt = np.linalg.svd(A)
            C = np.eye(D)
            C[-1, -1] = np.linalg.det(U @ Vt)
            R = U @ C @ Vt
            tr = np.trace(A.T @ R)
            if variant == "rigid+scale":
                s = tr / (p1 @ (Yh * Yh).sum(1))
            B = s * R
            t = mu_x - B @ mu_y
            if variant == "rigid+scale":
                new = (xx - s * tr) / (Np * D)
            else:
                new = (xx - 2 * tr + (p1 @ (Yh * Yh).sum(1))) / (Np * D)
        new = float(new)
        if not new > SIGMA2_FLOOR:
            new = SIGMA2_FLOOR
            clamped = True
        change = abs(sigma2 - new)
        sigma2 = new
        history.append(sigma2)
        if change < tol or clamped:
            converged = not clamped
            break
    P, outlier = _posterior(X, Y @ B.T + t, sigma2, w, volume)
    return CpdResult(P.max(axis=0), outlier, converged, it, sigma2, history, B, t, float(s), clamped,
                     P if keep_posterior else None)


def top_k_count(n: int, k_percent: float) -> int:
    if not 0 < k_percent <= 100:
        raise ValueError("K must be in (0, 100]")
    return math.ceil(Fraction(str(k_percent)) * n / 100)


def select_top_k(confidence: np.ndarray, k_percent: float) -> np.ndarray:
    """Indices of the ceil(K% * N) most confident points; ties go to the lower index.

    Indices are returned in ascending order so the selection is a stable subset.
    """
    c = np.asarray(confidence, dtype=np.float64)
    k = top_k_count(len(c), k_percent)
    order = np.lexsort((np.arange(len(c)), -c))
    return np.sort(order[:k])


# ---------------------------------------------------------------- refinement

@dataclass
class RefineConfig:
    k_percent: float = 25.0
    n_surface: int = 4096
    n_free: int = 4096
    template_points: int = 3000
    variant: str = "affine"
    w: float = 0.1
    max_iters: int = 150
    tol: float = 1e-8
    # "template": template points are the GMM centroids and initial points are scored
    direction: str = "template"
    # keep only free points whose nearest initial surface sample survived the filter
    filter_free: bool = True
    embed_epochs: int = 30
    cameras: SamplingConfig = field(default_factory=SamplingConfig)


@dataclass
class RefineReport:
    cpd_iters: int
    cpd_sigma2: float
    cpd_converged: bool
    k_percent: float
    n_filtered: int
    mean_confidence: float
    sdf_initial: float
    sdf_final: float
    cd_before: float | None = None
    cd_after: float | None = None
    n_free: int | None = None

    def to_json(self) -> str:
        d = {"cpd": {"iters": self.cpd_iters, "sigma2": self.cpd_sigma2, "converged": self.cpd_converged},
             "k_percent": self.k_percent, "n_filtered": self.n_filtered, "n_free": self.n_free,
             "mean_confidence": self.mean_confidence,
             "sdf_loss": {"initial": self.sdf_initial, "final": self.sdf_final}}
        if self.cd_before is not None:
            d["cd_before"] = self.cd_before
        if self.cd_after is not None:
            d["cd_after"] = self.cd_after
        return json.dumps(d, indent=2, sort_keys=True)


@dataclass
class RefineResult:
    mesh: TriMesh
    report: RefineReport
    confidence: np.ndarray
    embedding: EmbedResult
    initial_mesh: TriMesh


def initial_mesh(initial: VoxelGrid | TriMesh) -> TriMesh:
    mesh = mesh_from_voxels(initial) if isinstance(initial, VoxelGrid) else initial
    if mesh.is_empty:
        raise ValueError("initial result is empty")
    return mesh


def score_points(model: DeformTemplateModel, points: np.ndarray, config: RefineConfig,
                 rng: np.random.Generator, template_resolution: int = 96) -> CpdResult:
    template = extract_template(model, template_resolution)
    if template.is_empty:
        raise ValueError("model template has no surface to register against")
    tp, _ = template.sample_area(config.template_points, rng)
    if config.direction == "template":
        return cpd_register(tp, points, config.variant, config.w, config.max_iters, config.tol)
    if config.direction == "initial":
        res = cpd_register(points, tp, config.variant, config.w, config.max_iters, config.tol,
                           keep_posterior=True)
        res.confidence = res.posterior.max(axis=1)
        res.posterior = None
        return res
    raise ValueError(f"unknown CPD direction {config.direction!r}")


def filter_free_points(surface: np.ndarray, keep: np.ndarray, free: np.ndarray,
                       free_sdf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop free points whose SDF is governed by a rejected part of the initial surface."""
    _, nearest = cKDTree(surface).query(free)
    mask = np.zeros(len(surface), dtype=bool)
    mask[keep] = True
    ok = mask[nearest]
    return free[ok], free_sdf[ok]


def refine(model: DeformTemplateModel, initial: VoxelGrid | TriMesh, config: RefineConfig | None = None,
           embed_config: TrainConfig | None = None, seed: int = 0,
           ground_truth: TriMesh | None = None) -> RefineResult:
    config = config or RefineConfig()
    embed_config = embed_config or TrainConfig.desk()
    mesh = initial_mesh(initial)
    rng = numpy_rng(seed, "refine", "samples")
    sp, sn = mesh.sample_area(config.n_surface, rng)
    cams = fibonacci_rig(config.cameras.n_cameras, config.cameras.camera_radius, config.cameras.resolution)
    fp, fs = sample_free_space(mesh, render_depths(mesh, cams), cams, config.n_free, rng)
    cpd = score_points(model, sp, config, numpy_rng(seed, "refine", "template"), embed_config.template_resolution)
    keep = select_top_k(cpd.confidence, config.k_percent)
    if len(keep) == 0:
        raise KTooSmallError("no points survive the confidence filter; increase K")
    if config.filter_free:
        fp, fs = filter_free_points(sp, keep, fp, fs)
    pseudo = SampledShape(sp[keep], sn[keep], fp, fs, "refine")
    emb = embed_shape(model, pseudo, config.embed_epochs, embed_config, seed=seed)
    report = RefineReport(cpd.iterations, cpd.sigma2, cpd.converged, config.k_percent, int(len(keep)),
                          float(cpd.confidence[keep].mean()), emb.sdf_initial, emb.sdf_final,
                          n_free=int(len(fp)))
    if ground_truth is not None:
        crng = numpy_rng(seed, "refine", "chamfer")
        report.cd_before = cd_between(mesh, ground_truth, crng)
        report.cd_after = cd_between(emb.mesh, ground_truth, crng)
    return RefineResult(emb.mesh, report, cpd.confidence, emb, mesh)


def cd_between(a: TriMesh, b: TriMesh, rng: np.random.Generator, n: int = 30_000) -> float:
    if a.is_empty or b.is_empty:
        return math.inf
    pa, _ = a.sample_area(n, rng)
    pb, _ = b.sample_area(n, rng)
    return chamfer(pa, pb, normalizer=n)
