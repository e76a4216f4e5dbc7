"""Point-set (CD, EMD) and voxel (DSC, NSD, HD95, ASSD) reconstruction metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .geometry.mesh import TriMesh
from .geometry.volume import VoxelGrid

CD_POINTS = 30_000
EMD_POINTS = 1_000


class MetricContractError(ValueError):
    pass


def _points(x) -> np.ndarray:
    p = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise MetricContractError("point set is empty")
    return p


def nearest_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from each point of ``a`` to its nearest neighbour in ``b``.

    The KD-tree only shortlists candidates; the value is recomputed as
    ``((a - b) ** 2).sum()`` over every near-tie so it is bit-identical to an
    exhaustive search.
    """
    tree = cKDTree(b)
    d, idx = tree.query(a, k=1)
    out = ((a - b[idx]) ** 2).sum(-1)
    groups = tree.query_ball_point(a, d * (1 + 1e-9) + 1e-300)
    for i, g in enumerate(groups):
        if len(g) > 1:
            out[i] = ((a[i] - b[g]) ** 2).sum(-1).min()
    return out


def chamfer_raw(s1, s2) -> float:
    a, b = _points(s1), _points(s2)
    return float(nearest_sq(a, b).sum() + nearest_sq(b, a).sum())


def chamfer(s1, s2, normalizer: float = CD_POINTS) -> float:
    """Two-sided sum of squared nearest-neighbour distances, divided by ``normalizer``."""
    return chamfer_raw(s1, s2) / normalizer


def emd_raw(s1, s2) -> float:
    """Minimum over bijections of the summed squared distances (exact assignment)."""
    a, b = _points(s1), _points(s2)
    if len(a) != len(b):
        raise MetricContractError(f"EMD needs equal sizes, got {len(a)} and {len(b)}")
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def emd(s1, s2) -> float:
    """Per-point mean of the optimal matching cost."""
    return emd_raw(s1, s2) / len(_points(s1))


def resample(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded uniform subsample (with replacement only when there are too few points)."""
    points = _points(points)
    idx = rng.choice(len(points), size=n, replace=len(points) < n)
    return points[idx]


# ---------------------------------------------------------------- voxel metrics

def _check_grids(a: VoxelGrid, b: VoxelGrid) -> None:
    if a.dims != b.dims or not np.allclose(a.spacing, b.spacing) or not np.allclose(a.origin, b.origin):
        raise MetricContractError("voxel grids must share dims, spacing and origin")


class DiceResult(NamedTuple):
    value: float
    both_empty: bool


def dsc(a: VoxelGrid, b: VoxelGrid) -> DiceResult:
    _check_grids(a, b)
    na, nb = a.count, b.count
    if na + nb == 0:
        return DiceResult(100.0, True)
    inter = int(np.logical_and(a.occupancy, b.occupancy).sum())
    return DiceResult(100.0 * 2 * inter / (na + nb), False)


def surface_voxels(grid: VoxelGrid) -> np.ndarray:
    """Indices ``(K, 3)`` of occupied voxels with an unoccupied 6-neighbour (outside counts as empty)."""
    occ = np.pad(grid.occupancy, 1, constant_values=False)
    core = occ[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for ax in range(3):
        for s in (-1, 1):
            interior &= np.roll(occ, s, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(core & ~interior)


def _surface_xyz(grid: VoxelGrid) -> np.ndarray:
    return surface_voxels(grid) * np.asarray(grid.spacing)


class SurfaceDistances(NamedTuple):
    a_to_b: np.ndarray  # sorted
    b_to_a: np.ndarray


def surface_distances(a: VoxelGrid, b: VoxelGrid) -> SurfaceDistances:
    _check_grids(a, b)
    sa, sb = _surface_xyz(a), _surface_xyz(b)
    if len(sa) == 0 or len(sb) == 0:
        raise MetricContractError("surface distances need two non-empty masks")
    return SurfaceDistances(np.sort(np.sqrt(nearest_sq(sa, sb))), np.sort(np.sqrt(nearest_sq(sb, sa))))


def nsd_from(d: SurfaceDistances, tau: float) -> float:
    n = len(d.a_to_b) + len(d.b_to_a)
    return 100.0 * (int((d.a_to_b <= tau).sum()) + int((d.b_to_a <= tau).sum())) / n


def hd95_from(d: SurfaceDistances) -> float:
    return float(max(np.percentile(d.a_to_b, 95), np.percentile(d.b_to_a, 95)))


def assd_from(d: SurfaceDistances) -> float:
    return float((d.a_to_b.sum() + d.b_to_a.sum()) / (len(d.a_to_b) + len(d.b_to_a)))


def default_tau(grid: VoxelGrid) -> float:
    return float(max(grid.spacing))


def nsd(a: VoxelGrid, b: VoxelGrid, tau: float | None = None) -> float:
    return nsd_from(surface_distances(a, b), default_tau(a) if tau is None else tau)


def hd95(a: VoxelGrid, b: VoxelGrid) -> float:
    return hd95_from(surface_distances(a, b))


def assd(a: VoxelGrid, b: VoxelGrid) -> float:
    return assd_from(surface_distances(a, b))


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class MetricReport:
    shape_id: str
    cd: float  # normalised; multiply by 100 for display
    emd: float  # per-point mean
    emd_sum: float
    dsc: float
    nsd: float
    hd95: float
    assd: float
    n_points: int
    tau: float

    def row(self) -> dict:
        return asdict(self)


REPORT_COLUMNS = ("shape_id", "cd", "emd", "emd_sum", "dsc", "nsd", "hd95", "assd", "n_points", "tau")


def evaluate(pred: TriMesh, gt: TriMesh, pred_mask: VoxelGrid, gt_mask: VoxelGrid,
             rng: np.random.Generator, shape_id: str = "", tau: float | None = None,
             cd_points: int = CD_POINTS, emd_points: int = EMD_POINTS) -> MetricReport:
    """All metrics for one reconstruction; empty predictions score infinite distances."""
    tau = default_tau(gt_mask) if tau is None else tau
    gp, _ = gt.sample_area(cd_points, rng)
    if pred.is_empty:
        cd = em = es = math.inf
    else:
        pp, _ = pred.sample_area(cd_points, rng)
        cd = chamfer(pp, gp, normalizer=cd_points)
        es = emd_raw(resample(pp, emd_points, rng), resample(gp, emd_points, rng))
        em = es / emd_points
    d = dsc(pred_mask, gt_mask).value
    if pred_mask.count == 0 or gt_mask.count == 0:
        n_, h_, a_ = 0.0, math.inf, math.inf
    else:
        sd = surface_distances(pred_mask, gt_mask)
        n_, h_, a_ = nsd_from(sd, tau), hd95_from(sd), assd_from(sd)
    return MetricReport(shape_id, cd, em, es, d, n_, h_, a_, cd_points, tau)
