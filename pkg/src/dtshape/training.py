"""Joint training of template, hypernetwork and codes; embedding of unseen shapes; checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffnet import DTYPE, AdamState, NonFiniteError, adam_step, backward
from .fields import DeformTemplateModel, ModelConfig, instance_eval, instance_sdf, template_residual, template_sdf
from .geometry.mesh import TriMesh, atomic_write
from .geometry.sampling import SampledShape, uniform_ball
from .geometry.volume import marching_cubes
from .objectives import TERMS, LossWeights, PointBatch, finetune_objective, sdf_loss, train_objective
from .rng import numpy_rng, torch_gen

log = logging.getLogger(__name__)

SDF_TERMS = ("sdf_reg", "normal", "eikonal", "offsurface")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None, epoch: int):
        super().__init__(f"{message} (last good checkpoint: {checkpoint}, epoch {epoch})")
        self.checkpoint = checkpoint
        self.epoch = epoch


class EmbeddingDiverged(RuntimeError):
    def __init__(self, report: dict):
        super().__init__(f"embedding diverged: {report}")
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch: int = 16
    surface_points: int = 4096
    free_points: int = 4096
    lr: float = 1e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    template_period: int = 5
    template_resolution: int = 64
    template_points: int = 4096
    final_resolution: int = 96
    # None: one pass over the instances (ceil(N / batch) steps) per epoch
    steps_per_epoch: int | None = None
    # None: Laplacian smoothness on every sampled point
    vec_points: int | None = None
    fd_step: float = 1e-2
    # None: constant lr; otherwise lr is multiplied by lr_decay_factor from this fraction of the epochs on
    lr_decay_start: float | None = None
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        counts = {k: getattr(self, k) for k in ("epochs", "batch", "surface_points", "free_points",
                                                 "template_period", "template_points")}
        for k, v in counts.items():
            if int(v) < 1:
                raise ValueError(f"{k} must be positive")
        if self.template_resolution < 8 or self.final_resolution < 8:
            raise ValueError("marching-cubes resolution must be at least 8")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_decay_start is not None and not 0.0 <= self.lr_decay_start <= 1.0:
            raise ValueError("lr_decay_start must lie in [0, 1]")
        if not self.lr_decay_factor > 0:
            raise ValueError("lr_decay_factor must be positive")

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        base = dict(epochs=50, batch=8, surface_points=1024, free_points=1024, template_points=1024,
                    steps_per_epoch=40, vec_points=128, final_resolution=96, lr_decay_start=0.6)
        base.update(kw)
        return cls(**base)

    def steps(self, n_instances: int) -> int:
        if self.steps_per_epoch is not None:
            return self.steps_per_epoch
        return math.ceil(n_instances / self.batch)

    def lr_at(self, epoch: int, epochs: int | None = None) -> float:
        """Learning rate for a 1-based epoch of a run lasting ``epochs`` (default: this config's)."""
        epochs = self.epochs if epochs is None else epochs
        if self.lr_decay_start is not None and epoch > self.lr_decay_start * epochs:
            return self.lr * self.lr_decay_factor
        return self.lr

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- run log

LOG_COLUMNS = ("epoch",) + TERMS + ("total", "sdf", "wall_ms", "template_residual", "template_fallback")


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.rows.append(row)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    def to_csv(self, path: str | os.PathLike | None = None, wall_time: bool = True) -> str:
        cols = [c for c in LOG_COLUMNS if wall_time or c != "wall_ms"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(r.get(c, float("nan"))) for c in cols])
        text = buf.getvalue()
        if path is not None:
            atomic_write(Path(path), text.encode())
        return text


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------- template

def _numpy_field(fn):
    """Numpy evaluator of a learned field, clipped to the unit ball.

    Free-space supervision only covers the unit ball, so crossings in the
    corners of the extraction cube are unconstrained artefacts; intersecting
    with the ball removes them.
    """
    def f(x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            q = torch.as_tensor(x, dtype=DTYPE)
            return torch.maximum(fn(q), q.norm(dim=-1) - 1.0).numpy()
    return f


def extract_template(model: DeformTemplateModel, resolution: int = 96) -> TriMesh:
    """Zero level set of the template field; empty when the field has no crossing."""
    return marching_cubes(_numpy_field(lambda q: template_sdf(model, q)), resolution)


def extract_instance(model: DeformTemplateModel, alpha: torch.Tensor, beta: torch.Tensor,
                     resolution: int = 96) -> TriMesh:
    alpha, beta = alpha.detach(), beta.detach()
    return marching_cubes(_numpy_field(lambda p: instance_sdf(model, p, alpha, beta)), resolution)


@dataclass(frozen=True)
class TemplateSample:
    points: np.ndarray
    fallback: bool  # True when the template had no iso-surface and ball samples were used


def sample_template_points(model: DeformTemplateModel, count: int, resolution: int,
                           rng: np.random.Generator) -> TemplateSample:
    mesh = extract_template(model, resolution)
    if mesh.is_empty:
        return TemplateSample(uniform_ball(count, rng), True)
    pts, _ = mesh.sample_area(count, rng)
    return TemplateSample(pts, False)


class TemplateSampler:
    """Template surface samples refreshed once every ``period`` epochs."""

    def __init__(self, count: int, resolution: int, period: int, rng: np.random.Generator):
        self.count, self.resolution, self.period, self.rng = count, resolution, period, rng
        self._cache: TemplateSample | None = None
        self._epoch: int | None = None

    def get(self, model: DeformTemplateModel, epoch: int) -> TemplateSample:
        if self._cache is None or epoch - self._epoch >= self.period:
            self._cache = sample_template_points(model, self.count, self.resolution, self.rng)
            self._epoch = epoch
        return self._cache


def template_residual_stat(model: DeformTemplateModel, p_t: np.ndarray) -> float:
    """Mean of ``|dvec| + |ddis|`` over template points under the template codes."""
    with torch.no_grad():
        r = template_residual(model, torch.as_tensor(p_t, dtype=DTYPE))
        return float((r.vec.norm(dim=-1) + r.dis.abs()).mean())


# ---------------------------------------------------------------- batches

def _draw(shape: SampledShape, n_surf: int, n_free: int, rng: np.random.Generator):
    si = rng.integers(0, shape.n_surface, n_surf)
    fi = rng.integers(0, shape.n_free, n_free)
    return (shape.surface_points[si], shape.surface_normals[si], shape.free_points[fi], shape.free_sdf[fi])


def draw_batch(dataset: list[SampledShape], index: np.ndarray, n_surf: int, n_free: int,
               rng: np.random.Generator) -> PointBatch:
    parts = [_draw(dataset[i], n_surf, n_free, rng) for i in index]
    stack = [torch.as_tensor(np.stack([p[k] for p in parts]), dtype=DTYPE) for k in range(4)]
    return PointBatch(stack[0], stack[1], stack[2], stack[3], torch.as_tensor(np.asarray(index), dtype=torch.long))


def _check_dataset(dataset: list[SampledShape]) -> None:
    if not dataset:
        raise ValueError("training needs at least one shape")
    for s in dataset:
        if s.n_surface == 0 or s.n_free == 0:
            raise ValueError(f"shape {s.shape_id!r} has no samples")


# ---------------------------------------------------------------- training

def train(dataset: list[SampledShape], config: TrainConfig, model_config: ModelConfig | None = None,
          category: str = "shape", checkpoint_dir: str | os.PathLike | None = None,
          progress=None) -> tuple[DeformTemplateModel, RunLog]:
    """Optimise template, hypernetwork and all codes jointly.

    Per epoch the log records the mean of each loss term over the epoch's
    steps, the wall time and the template residual on the current template
    samples.  ``checkpoint_dir`` receives ``model.rsck`` after every epoch.
    """
    _check_dataset(dataset)
    if len(dataset) == 1:
        log.warning("training on a single shape: the template will simply fit that shape")
    mcfg = model_config or ModelConfig.desk()
    n = len(dataset)
    model = DeformTemplateModel.create(mcfg, n, torch_gen(config.seed, "train", "init"), category,
                                       [s.shape_id or str(i) for i, s in enumerate(dataset)])
    model.requires_grad_(True)
    params = model.trainable()
    adam = AdamState.zeros_like(params)
    rng_pts = numpy_rng(config.seed, "train", "points")
    rng_idx = numpy_rng(config.seed, "train", "instances")
    sampler = TemplateSampler(config.template_points, config.template_resolution, config.template_period,
                              numpy_rng(config.seed, "train", "template"))
    runlog = RunLog()
    steps = config.steps(n)
    b = min(config.batch, n)
    last_good: tuple[DeformTemplateModel, AdamState, int] = (model.clone(), _clone_adam(adam), 0)
    ckpt_path = Path(checkpoint_dir) / "model.rsck" if checkpoint_dir is not None else None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        ts = sampler.get(model, epoch)
        p_t = torch.as_tensor(ts.points, dtype=DTYPE)
        sums = dict.fromkeys(TERMS + ("total",), 0.0)
        for _ in range(steps):
            index = np.sort(rng_idx.choice(n, size=b, replace=False))
            batch = draw_batch(dataset, index, config.surface_points, config.free_points, rng_pts)
            try:
                br = train_objective(model, batch, p_t, config.weights, config.fd_step, config.vec_points)
                grads = backward(br.total, params, node="train_objective")
            except NonFiniteError as exc:
                path = _dump_last_good(last_good, ckpt_path, config)
                raise TrainingDiverged(f"non-finite value in {exc.node}", path, last_good[2]) from exc
            adam_step(adam, params, grads, lr=config.lr_at(epoch))
            for k, v in br.as_floats().items():
                sums[k] += v
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        w = config.weights.term_weights()
        row["sdf"] = sum(w[k] * row[k] for k in SDF_TERMS)
        row["template_residual"] = template_residual_stat(model, ts.points)
        row["template_fallback"] = ts.fallback
        row["wall_ms"] = int(round((time.perf_counter() - t0) * 1000))
        runlog.append(row)
        last_good = (model.clone(), _clone_adam(adam), epoch)
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, model, adam, seed=config.seed, epoch=epoch, train_config=config)
        if progress is not None:
            progress(row)
    model.requires_grad_(False)
    return model, runlog


def _clone_adam(adam: AdamState) -> AdamState:
    return AdamState([m.clone() for m in adam.m], [v.clone() for v in adam.v], adam.step)


def _dump_last_good(last_good, ckpt_path: Path | None, config: TrainConfig) -> str:
    model, adam, epoch = last_good
    path = ckpt_path or Path(tempfile.mkdtemp(prefix="dtshape-")) / "last_good.rsck"
    save_checkpoint(path, model, adam, seed=config.seed, epoch=epoch, train_config=config)
    return str(path)


# ---------------------------------------------------------------- embedding

@dataclass
class EmbedResult:
    alpha: torch.Tensor
    beta: torch.Tensor
    model: DeformTemplateModel  # hypernetwork adapted; template identical to the base model's
    mesh: TriMesh
    log: RunLog
    sdf_initial: float  # weighted SDF loss on a fixed evaluation batch before fine-tuning
    sdf_final: float

    @property
    def sdf_reduction(self) -> float:
        return self.sdf_initial / self.sdf_final if self.sdf_final > 0 else math.inf


def _sdf_value(view: DeformTemplateModel, batch: PointBatch, alpha, beta, weights: LossWeights) -> float:
    fn = lambda pts: _eval_grad(view, pts, alpha, beta)  # noqa: E731
    br = sdf_loss(fn, batch, weights)
    return float(br.total.detach())


def _eval_grad(view, pts, alpha, beta):
    ev = instance_eval(view, pts, alpha.unsqueeze(0), beta.unsqueeze(0))
    return ev.sdf, ev.grad


def embed_shape(model: DeformTemplateModel, unseen: SampledShape, epochs: int = 30,
                config: TrainConfig | None = None, seed: int | None = None,
                divergence_factor: float = 1e3) -> EmbedResult:
    """Fit fresh codes (and a private copy of the hypernetwork) to one shape, template frozen."""
    config = config or TrainConfig.desk()
    _check_dataset([unseen])
    if epochs < 1:
        raise ValueError("epochs must be positive")
    seed = config.seed if seed is None else seed
    view = model.clone()
    view.requires_grad_(False)
    gen = torch_gen(seed, "embed", "codes")
    L = model.config.latent_dim
    alpha = (torch.randn(L, generator=gen, dtype=DTYPE) * model.config.code_std).requires_grad_()
    beta = (torch.randn(L, generator=gen, dtype=DTYPE) * model.config.code_std).requires_grad_()
    for h in view.hyper:
        h.requires_grad_(True)
    params = [alpha, beta] + list(view.hyper)
    adam = AdamState.zeros_like(params)
    rng = numpy_rng(seed, "embed", "points")
    eval_batch = draw_batch([unseen], np.zeros(1, dtype=np.int64), config.surface_points,
                            config.free_points, numpy_rng(seed, "embed", "eval"))
    sdf_initial = _sdf_value(view, eval_batch, alpha, beta, config.weights)
    runlog = RunLog()
    steps = config.steps(1)
    initial_total = None
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        sums = dict.fromkeys(TERMS + ("total",), 0.0)
        for _ in range(steps):
            batch = draw_batch([unseen], np.zeros(1, dtype=np.int64), config.surface_points,
                               config.free_points, rng)
            br = finetune_objective(view, batch, alpha, beta, config.weights)
            total = float(br.total.detach())
            if initial_total is None:
                initial_total = total
            if not math.isfinite(total) or total > divergence_factor * initial_total:
                raise EmbeddingDiverged({"epoch": epoch, "loss": total, "initial_loss": initial_total})
            grads = backward(br.total, params, node="finetune_objective")
            adam_step(adam, params, grads, lr=config.lr_at(epoch, epochs))
            for k, v in br.as_floats().items():
                sums[k] += v if math.isfinite(v) else 0.0
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        w = config.weights.term_weights()
        row["sdf"] = sum(w[k] * row[k] for k in SDF_TERMS)
        row["template_residual"] = float("nan")
        row["template_fallback"] = False
        row["wall_ms"] = int(round((time.perf_counter() - t0) * 1000))
        runlog.append(row)
    alpha, beta = alpha.detach(), beta.detach()
    view.requires_grad_(False)
    sdf_final = _sdf_value(view, eval_batch, alpha, beta, config.weights)
    mesh = extract_instance(view, alpha, beta, config.final_resolution)
    return EmbedResult(alpha, beta, view, mesh, runlog, sdf_initial, sdf_final)


# ---------------------------------------------------------------- checkpoints

_RSCK_MAGIC = b"RSCK"
_RSCK_VERSION = 1


def save_checkpoint(path: str | os.PathLike, model: DeformTemplateModel, adam: AdamState | None = None,
                    seed: int = 0, epoch: int = 0, train_config: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    """Magic, u32 version, u64 header length, JSON header, then little-endian f64 arrays."""
    named = [(k, t.detach()) for k, t in model.named_tensors()]
    if adam is not None:
        names = [k for k, _ in model.named_tensors()]
        named += [(f"adam.m.{k}", m) for k, m in zip(names, adam.m)]
        named += [(f"adam.v.{k}", v) for k, v in zip(names, adam.v)]
    spec_t, spec_d = model.template_spec, model.deform_spec
    header = {
        "model": model.config_dict(),
        "template_spec": {"widths": list(spec_t.widths), "activations": list(spec_t.activations)},
        "deform_spec": {"widths": list(spec_d.widths), "activations": list(spec_d.activations)},
        "latent_dim": model.config.latent_dim,
        "omega0": model.config.omega0,
        "seed": int(seed),
        "epoch": int(epoch),
        "category": model.category,
        "instance_ids": list(model.instance_ids),
        "adam_step": adam.step if adam is not None else None,
        "train": _jsonable(train_config.to_dict()) if train_config is not None else None,
        "extra": extra or {},
        "arrays": [[k, list(t.shape)] for k, t in named],
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_RSCK_MAGIC)
    buf.write(struct.pack("<IQ", _RSCK_VERSION, len(hdr)))
    buf.write(hdr)
    for _, t in named:
        buf.write(np.ascontiguousarray(t.numpy(), dtype="<f8").tobytes())
    atomic_write(Path(path), buf.getvalue())


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, float) and not math.isfinite(d):
        return repr(d)
    return d


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | os.PathLike) -> tuple[DeformTemplateModel, AdamState | None, dict]:
    data = Path(path).read_bytes()
    if data[:4] != _RSCK_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != _RSCK_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(data):
            raise CheckpointError(f"{path}: truncated at array {name}")
        arrays[name] = torch.from_numpy(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).copy())
        off += 8 * n
    cfg = ModelConfig(**header["model"])
    n_hyper = len(cfg.hyper_spec().generators())
    model = DeformTemplateModel(cfg, arrays["template"], [arrays[f"hyper.{k}"] for k in range(n_hyper)],
                                arrays["alpha"], arrays["beta"], arrays["t"], arrays["beta_t"],
                                header["category"], list(header["instance_ids"]))
    adam = None
    if header.get("adam_step") is not None:
        names = [k for k, _ in model.named_tensors()]
        adam = AdamState([arrays[f"adam.m.{k}"] for k in names], [arrays[f"adam.v.{k}"] for k in names],
                         int(header["adam_step"]))
    return model, adam, header
