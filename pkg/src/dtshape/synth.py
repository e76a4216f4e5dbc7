"""Synthetic shape families with closed-form ground truth, and corruptions of them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry.mesh import TriMesh, box_mesh, ellipsoid_mesh, icosphere
from .geometry.sdf import AnalyticSDF, Box, Difference, Ellipsoid, Sphere, Union, two_lobe
from .geometry.volume import VoxelGrid, marching_cubes, mesh_from_voxels, voxelize

FAMILIES = ("sphere", "ellipsoid", "box", "two-lobe")


@dataclass(frozen=True)
class SynthShape:
    shape_id: str
    family: str
    params: dict
    sdf: AnalyticSDF
    mesh: TriMesh


def make_shape(family: str, params: dict, shape_id: str = "", subdivisions: int = 5,
               mc_resolution: int = 96) -> SynthShape:
    if family == "sphere":
        r = float(params["radius"])
        return SynthShape(shape_id, family, params, Sphere(r), icosphere(subdivisions, r))
    if family == "ellipsoid":
        axes = tuple(map(float, params["axes"]))
        return SynthShape(shape_id, family, params, Ellipsoid(axes), ellipsoid_mesh(axes, subdivisions=subdivisions))
    if family == "box":
        h = tuple(map(float, params["half_extents"]))
        return SynthShape(shape_id, family, params, Box(h), box_mesh(h))
    if family == "two-lobe":
        sdf = two_lobe(params["axes_a"], params["center_a"], params["axes_b"], params["center_b"], params["k"])
        return SynthShape(shape_id, family, params, sdf, marching_cubes(sdf, mc_resolution))
    raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")


def sample_params(family: str, rng: np.random.Generator) -> dict:
    if family == "sphere":
        return {"radius": float(rng.uniform(0.3, 0.6))}
    if family == "ellipsoid":
        return {"axes": [float(a) for a in rng.uniform(0.3, 0.6, 3)]}
    if family == "box":
        return {"half_extents": [float(a) for a in rng.uniform(0.25, 0.45, 3)]}
    if family == "two-lobe":
        a, b = rng.uniform(0.2, 0.35, 3), rng.uniform(0.2, 0.35, 3)
        # lobes overlap along x (offset below the mean x semi-axis) so the union is one genus-0 body
        sep = float(rng.uniform(0.5, 0.8) * 0.5 * (a[0] + b[0]))
        return {"axes_a": [float(v) for v in a], "center_a": [-sep, 0.0, 0.0],
                "axes_b": [float(v) for v in b], "center_b": [sep, 0.0, 0.0], "k": 0.1}
    raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")


def make_family(family: str, count: int, rng: np.random.Generator, prefix: str | None = None) -> list[SynthShape]:
    prefix = prefix or family
    return [make_shape(family, sample_params(family, rng), f"{prefix}_{i:03d}") for i in range(count)]


# ---------------------------------------------------------------- corruption

def _bisect_radius(vol_fn, target: float, lo: float, hi: float, iters: int = 40) -> float:
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if vol_fn(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def corrupt(shape: SynthShape, rng: np.random.Generator, bite_fraction: float = 0.10,
            blob_fraction: float = 0.05, n_blobs: int = 3, resolution: int = 64) -> tuple[VoxelGrid, dict]:
    """Voxel mask of ``shape`` with a spherical bite and outlier blobs.

    The bite is centred on a random surface point and sized so it removes
    ``bite_fraction`` of the volume; ``n_blobs`` disjoint spheres outside the
    shape add ``blob_fraction`` of the volume.  Returns the mask and the
    parameters used.
    """
    grid = VoxelGrid.spanning(resolution)
    centers = grid.centers()
    inside = shape.sdf(centers) < 0
    cell = float(np.prod(grid.spacing))
    v0 = inside.sum() * cell
    pts, normals = shape.mesh.sample_area(1, rng)
    bc = pts[0]

    def removed(r):
        return (inside & (np.linalg.norm(centers - bc, axis=1) < r)).sum() * cell

    r_bite = _bisect_radius(removed, bite_fraction * v0, 0.0, 1.0)
    bite = Sphere(r_bite, tuple(bc))
    blob_r = (blob_fraction * v0 / n_blobs * 3.0 / (4.0 * np.pi)) ** (1.0 / 3.0)
    blobs = []
    tries = 0
    while len(blobs) < n_blobs:
        tries += 1
        if tries > 10000:
            raise RuntimeError("could not place outlier blobs")
        c = rng.uniform(-0.85 + blob_r, 0.85 - blob_r, 3)
        if shape.sdf(c[None])[0] < blob_r + 0.05:
            continue
        if any(np.linalg.norm(c - np.asarray(b.center)) < 2 * blob_r + 0.05 for b in blobs):
            continue
        blobs.append(Sphere(blob_r, tuple(c)))
    field_ = Union((Difference(shape.sdf, bite),) + tuple(blobs))
    occ = field_(centers) < 0
    mask = grid.with_occupancy(occ.reshape(grid.dims))
    params = {"bite_center": bc.tolist(), "bite_radius": r_bite, "blob_radius": blob_r,
              "blob_centers": [list(b.center) for b in blobs], "resolution": resolution,
              "bite_fraction": bite_fraction, "blob_fraction": blob_fraction}
    return mask, params


def voxel_mask(mesh: TriMesh, resolution: int = 64) -> VoxelGrid:
    grid = VoxelGrid.spanning(resolution)
    return voxelize(mesh, grid.dims, grid.spacing, grid.origin)


__all__ = ["FAMILIES", "SynthShape", "make_shape", "sample_params", "make_family", "corrupt",
           "voxel_mask", "mesh_from_voxels"]
