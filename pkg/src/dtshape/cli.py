"""Command-line pipelines: synth -> prep -> train -> template/embed/refine -> eval.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .diffnet import NonFiniteError
from .geometry.mesh import MeshParseError, Similarity, TriMesh, UnsupportedTopologyError, atomic_write, load_mesh, \
    normalize_to_unit_sphere, save_mesh
from .geometry.sampling import EmptySurfaceError, load_sampled, prepare_shape, save_sampled
from .geometry.volume import FieldValueError, VoxelGrid, load_voxels, mesh_from_voxels, voxelize
from .metrics import REPORT_COLUMNS, MetricContractError, evaluate
from .rng import numpy_rng
from .synth import make_family
from .training import CheckpointError, EmbeddingDiverged, TrainingDiverged, embed_shape, extract_template, \
    load_checkpoint, train

log = logging.getLogger("dtshape")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
FAMILY_NAMES = {"spheres": "sphere", "ellipsoids": "ellipsoid", "boxes": "box", "two-lobe": "two-lobe"}
MESH_SUFFIXES = (".obj", ".stl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue().encode())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _mesh_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"mesh directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in MESH_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no .obj/.stl meshes in {directory}")
    return files


def _load_shapes(directory: Path):
    if not directory.is_dir():
        raise FileNotFoundError(f"sample directory not found: {directory}")
    files = sorted(directory.glob("*.rsit"))
    if not files:
        raise FileNotFoundError(f"no .rsit archives in {directory}")
    return [load_sampled(p) for p in files]


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> int:
    family = args.family or cfg["synth"]["family"]
    if family not in FAMILY_NAMES:
        raise ConfigError(f"synth.family must be one of {sorted(FAMILY_NAMES)}", "synth.family")
    n = cfg["synth"]["n"] if args.n is None else args.n
    if n < 1:
        raise ConfigError("synth.n must be at least 1", "synth.n")
    out = Path(args.out)
    shapes = make_family(FAMILY_NAMES[family], n, numpy_rng(cfg.seed, "synth", family))
    records = []
    for s in shapes:
        save_mesh(s.mesh, out / f"{s.shape_id}.obj")
        records.append({"id": s.shape_id, "family": s.family, "params": s.params,
                        "watertight": s.mesh.is_watertight(), "euler": s.mesh.euler_characteristic()})
    atomic_write(out / "params.json", json.dumps({"seed": cfg.seed, "family": family, "shapes": records},
                                                 indent=2, sort_keys=True).encode())
    print(f"wrote {n} {family} meshes to {out}")
    return EXIT_OK


def cmd_prep(args, cfg: RunConfig) -> int:
    files = _mesh_files(Path(args.meshes))
    scfg = cfg.sampling_config()
    out = Path(args.out)
    rows = []
    for f in files:
        mesh = load_mesh(f)
        tf = Similarity(1.0, np.zeros(3))
        if cfg["prep"]["normalize"]:
            mesh, tf = normalize_to_unit_sphere(mesh)
        shape = prepare_shape(mesh, scfg, numpy_rng(cfg.seed, "prep", f.stem), f.stem)
        save_sampled(shape, out / f"{f.stem}.rsit")
        rows.append([f.stem, shape.n_surface, shape.n_free, _fmt(float(tf.scale)),
                     " ".join(_fmt(float(v)) for v in tf.translate)])
        print(f"{f.stem}: {shape.n_surface} surface + {shape.n_free} free samples")
    _write_csv(out / "manifest.csv", ["id", "n_surface", "n_free", "scale", "translate"], rows)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from . import plots
    data = _load_shapes(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    progress = (lambda r: print(f"epoch {r['epoch']:4d}  total {r['total']:.4g}  sdf {r['sdf']:.4g}  "
                                f"template residual {r['template_residual']:.4g}", flush=True))
    model, runlog = train(data, tcfg, cfg.model_config(), category=args.category, checkpoint_dir=out,
                          progress=progress)
    runlog.to_csv(out / "runlog.csv")
    plots.loss_curves(runlog.rows, out / "loss.png")
    print(f"checkpoint: {out / 'model.rsck'}")
    return EXIT_OK


def cmd_template(args, cfg: RunConfig) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    res = args.resolution or cfg["train"]["final_resolution"]
    mesh = extract_template(model, res)
    out = Path(args.out)
    if mesh.is_empty:
        print("template field has no zero crossing; writing an empty mesh", file=sys.stderr)
    save_mesh(mesh, out / "template.obj")
    print(f"template: {out / 'template.obj'} ({len(mesh.triangles)} triangles)")
    return EXIT_OK


def _embed_config(args, cfg: RunConfig):
    tcfg = cfg.train_config()
    if args.resolution:
        import dataclasses
        tcfg = dataclasses.replace(tcfg, final_resolution=args.resolution)
    return tcfg


def cmd_embed(args, cfg: RunConfig) -> int:
    from . import plots
    model, _, _ = load_checkpoint(args.checkpoint)
    shape = load_sampled(args.shape)
    out = Path(args.out)
    res = embed_shape(model, shape, cfg["embed"]["epochs"], _embed_config(args, cfg), seed=cfg.seed)
    stem = Path(args.shape).stem
    save_mesh(res.mesh, out / f"{stem}.obj")
    res.log.to_csv(out / f"{stem}_embed.csv")
    plots.loss_curves(res.log.rows, out / f"{stem}_embed.png", title="embedding loss")
    print(f"SDF loss {res.sdf_initial:.4g} -> {res.sdf_final:.4g}; mesh {out / (stem + '.obj')}")
    return EXIT_OK


def _load_initial(path: Path) -> VoxelGrid | TriMesh:
    if path.suffix.lower() == ".rsvg":
        return load_voxels(path)
    return load_mesh(path)


def cmd_refine(args, cfg: RunConfig) -> int:
    from . import plots
    from .tim import refine
    model, _, _ = load_checkpoint(args.checkpoint)
    initial = _load_initial(Path(args.initial))
    rcfg = cfg.refine_config()
    if args.top_k is not None:
        import dataclasses
        rcfg = dataclasses.replace(rcfg, k_percent=args.top_k)
    gt = load_mesh(args.gt) if args.gt else None
    res = refine(model, initial, rcfg, _embed_config(args, cfg), seed=cfg.seed, ground_truth=gt)
    out = Path(args.out)
    stem = Path(args.initial).stem
    save_mesh(res.mesh, out / f"{stem}_refined.obj")
    atomic_write(out / f"{stem}_report.json", res.report.to_json().encode())
    k = res.report.n_filtered
    cut = float(np.sort(res.confidence)[::-1][k - 1])
    plots.confidence_histogram(res.confidence, cut, out / f"{stem}_confidence.png")
    print(res.report.to_json())
    return EXIT_OK


def _as_pair(path: Path, res: int) -> tuple[TriMesh, VoxelGrid]:
    if path.suffix.lower() == ".rsvg":
        grid = load_voxels(path)
        return mesh_from_voxels(grid), grid
    mesh = load_mesh(path)
    g = VoxelGrid.spanning(res)
    return mesh, voxelize(mesh, g.dims, g.spacing, g.origin)


def _eval_pairs(pred: Path, gt: Path) -> list[tuple[str, Path, Path]]:
    if pred.is_dir() != gt.is_dir():
        raise UsageError("prediction and ground truth must both be files or both be directories")
    if not pred.is_dir():
        for p in (pred, gt):
            if not p.exists():
                raise FileNotFoundError(p)
        return [(pred.stem, pred, gt)]
    suffixes = MESH_SUFFIXES + (".rsvg",)
    gts = {p.stem: p for p in gt.iterdir() if p.suffix.lower() in suffixes}
    pairs = []
    for p in sorted(pred.iterdir()):
        if p.suffix.lower() not in suffixes:
            continue
        key = p.stem[:-len("_refined")] if p.stem.endswith("_refined") else p.stem
        if key in gts:
            pairs.append((key, p, gts[key]))
    if not pairs:
        raise FileNotFoundError(f"no prediction in {pred} has a ground-truth file of the same name in {gt}")
    return pairs


def cmd_eval(args, cfg: RunConfig) -> int:
    from . import plots
    ev = cfg["eval"]
    res = args.resolution or ev["voxel_resolution"]
    tau = args.tau if args.tau is not None else ev["tau"]
    rows = []
    for sid, p, g in _eval_pairs(Path(args.pred), Path(args.gt)):
        pm, pv = _as_pair(p, res)
        gm, gv = _as_pair(g, res)
        if pv.dims != gv.dims:
            raise MetricContractError(f"{sid}: grid dimensions differ: {pv.dims} vs {gv.dims}")
        rep = evaluate(pm, gm, pv, gv, numpy_rng(cfg.seed, "eval", sid), sid, tau,
                       ev["cd_points"], ev["emd_points"])
        rows.append(rep.row())
        print(f"{sid}: CD x1e2 {100 * rep.cd:.4f}  EMD {rep.emd:.4g}  DSC {rep.dsc:.2f}  NSD {rep.nsd:.2f}  "
              f"HD95 {rep.hd95:.4g}  ASSD {rep.assd:.4g}")
    out = Path(args.out)
    _write_csv(out / "metrics.csv", REPORT_COLUMNS, [[_fmt(r[c]) for c in REPORT_COLUMNS] for r in rows])
    plots.metric_bars(rows, out / "metrics.png")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run-config file ([section] key = value)")
    common.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--paper-scale", action="store_true", help="full-size sampling, networks and schedule")
    common.add_argument("--resolution", type=int, help="marching-cubes or voxel resolution")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dtshape", description="Deformable-template implicit shape modelling.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic mesh family")
    s.add_argument("--family", choices=sorted(FAMILY_NAMES))
    s.add_argument("--n", type=int)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("prep", parents=[common], help="sample SDF training data from meshes")
    s.add_argument("meshes", help="directory of .obj/.stl meshes")
    s.set_defaults(fn=cmd_prep)

    s = sub.add_parser("train", parents=[common], help="train template, deform field and codes")
    s.add_argument("data", help="directory of .rsit sample archives")
    s.add_argument("--category", default="shape")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("template", parents=[common], help="extract the template mesh")
    s.add_argument("checkpoint")
    s.set_defaults(fn=cmd_template)

    s = sub.add_parser("embed", parents=[common], help="fit an unseen shape with the template frozen")
    s.add_argument("checkpoint")
    s.add_argument("shape", help=".rsit sample archive")
    s.set_defaults(fn=cmd_embed)

    s = sub.add_parser("refine", parents=[common], help="refine an initial mask or mesh via the template")
    s.add_argument("checkpoint")
    s.add_argument("initial", help=".rsvg voxel mask or .obj/.stl mesh")
    s.add_argument("--top-k", type=float, help="percent of most confident points kept")
    s.add_argument("--gt", help="ground-truth mesh for before/after chamfer")
    s.set_defaults(fn=cmd_refine)

    s = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    s.add_argument("pred", help="mesh/.rsvg file or directory")
    s.add_argument("gt", help="mesh/.rsvg file or directory")
    s.add_argument("--tau", type=float, help="NSD tolerance (default: one voxel)")
    s.set_defaults(fn=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.paper_scale) if args.config else RunConfig.defaults(args.paper_scale)
        if args.seed is not None:
            cfg.set("run.seed", args.seed)
        return args.fn(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, EmbeddingDiverged, NonFiniteError, FieldValueError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, MeshParseError, UnsupportedTopologyError, CheckpointError, EmptySurfaceError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MetricContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
