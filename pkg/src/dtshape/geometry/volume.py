"""Iso-surface extraction and binary voxel grids."""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from skimage import measure

from .mesh import TriMesh, atomic_write
from .raster import rasterize

Field = Callable[[np.ndarray], np.ndarray]


class FieldValueError(FloatingPointError):
    pass


def grid_points(resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    axis = np.linspace(lo, hi, resolution)
    g = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def evaluate_grid(field: Field, resolution: int, lo: float = -1.0, hi: float = 1.0,
                  chunk: int = 65536) -> np.ndarray:
    pts = grid_points(resolution, lo, hi)
    vals = np.concatenate([np.asarray(field(pts[s:s + chunk]), dtype=np.float64).reshape(-1)
                           for s in range(0, len(pts), chunk)])
    vol = vals.reshape(resolution, resolution, resolution)
    bad = ~np.isfinite(vol)
    if bad.any():
        i, j, k = np.argwhere(bad)[0]
        raise FieldValueError(f"field is not finite at grid index ({i}, {j}, {k}), "
                              f"position {tuple(pts[np.ravel_multi_index((i, j, k), vol.shape)])}")
    return vol


def marching_cubes(field: Field | np.ndarray, resolution: int = 64, iso: float = 0.0,
                   lo: float = -1.0, hi: float = 1.0) -> TriMesh:
    """Iso-surface of a field sampled on ``resolution``^3 points spanning ``[lo, hi]^3``.

    Field values increase outward (SDF convention); triangles are wound so
    their normals point outward.  Returns an empty mesh without a crossing.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    vol = field if isinstance(field, np.ndarray) else evaluate_grid(field, resolution, lo, hi)
    if not np.isfinite(vol).all():
        i, j, k = np.argwhere(~np.isfinite(vol))[0]
        raise FieldValueError(f"field is not finite at grid index ({i}, {j}, {k})")
    if not (vol.min() < iso < vol.max()):
        return TriMesh.empty()
    step = (hi - lo) / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=(step,) * 3,
                                                gradient_direction="ascent", method="lewiner")
    # skimage winds "ascent" faces with normals pointing down the gradient
    return TriMesh(verts + lo, faces[:, ::-1])


# ---------------------------------------------------------------- voxel grids

@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Binary occupancy.  ``origin`` is the grid's minimum corner; voxel
    ``(i, j, k)`` is centred at ``origin + (i + 0.5, j + 0.5, k + 0.5) * spacing``."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    occupancy: np.ndarray  # (nx, ny, nz) bool
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.size != int(np.prod(self.dims)):
            raise ValueError("occupancy size does not match dims")
        occ = occ.reshape(self.dims) if occ.ndim != 3 else occ
        if tuple(occ.shape) != tuple(self.dims):
            raise ValueError("occupancy shape does not match dims")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        occ = np.ascontiguousarray(occ)
        occ.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @classmethod
    def spanning(cls, n: int, lo: float = -1.0, hi: float = 1.0, occupancy=None) -> "VoxelGrid":
        s = (hi - lo) / n
        occ = np.zeros((n, n, n), dtype=bool) if occupancy is None else occupancy
        return cls((n, n, n), (s, s, s), (lo, lo, lo), occ)

    def flat(self) -> np.ndarray:
        """Occupancy with x varying fastest."""
        return self.occupancy.ravel(order="F")

    def centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return np.asarray(self.origin) + (idx + 0.5) * np.asarray(self.spacing)

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def with_occupancy(self, occ: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.spacing, self.origin, occ)


def voxelize(mesh: TriMesh, dims, spacing, origin) -> VoxelGrid:
    """Occupied iff the voxel centre is inside by +x ray-crossing parity.

    Rays are nudged by +1e-7 voxel in y and z so they never pass exactly
    through vertices or edges.
    """
    dims = tuple(int(d) for d in dims)
    nx, ny, nz = dims
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    warnings = ()
    occ = np.zeros(dims, dtype=bool)
    if mesh.is_empty:
        return VoxelGrid(dims, spacing, origin, occ)
    if not mesh.is_watertight():
        warnings = ("mesh is not watertight; parity applied anyway",)
    # lattice coordinates: voxel centre (i, j, k) at integer (i, j, k)
    c = (mesh.corners() - np.asarray(origin)) / np.asarray(spacing) - 0.5
    jitter = 1e-7
    uv = np.stack([c[..., 1] - jitter, c[..., 2] - jitter], axis=-1)
    toggles = np.zeros((ny * nz, nx + 1), dtype=np.int64)
    for row, xcross, _, _ in rasterize(uv, c[..., 0], ny, nz, inclusive=False):
        # voxel i lies beyond the crossing when i > xcross
        start = np.clip(np.floor(xcross).astype(np.int64) + 1, 0, nx)
        np.add.at(toggles, (row, start), 1)
    parity = np.cumsum(toggles, axis=1)[:, :nx] % 2 == 1  # (ny*nz, nx), row = k*ny + j
    occ = parity.reshape(nz, ny, nx).transpose(2, 1, 0)
    return VoxelGrid(dims, spacing, origin, occ, warnings)


def mesh_from_voxels(grid: VoxelGrid) -> TriMesh:
    """Marching cubes of the 0.5 level of the occupancy indicator (padded so it closes)."""
    occ = np.pad(grid.occupancy.astype(np.float64), 1)
    if occ.max() == 0:
        return TriMesh.empty()
    verts, faces, _, _ = measure.marching_cubes(0.5 - occ, level=0.0, spacing=grid.spacing,
                                                gradient_direction="ascent", method="lewiner")
    verts = verts + np.asarray(grid.origin) + 0.5 * np.asarray(grid.spacing) - np.asarray(grid.spacing)
    return TriMesh(verts, faces[:, ::-1])


_RSVG_MAGIC = b"RSVG"


def save_voxels(grid: VoxelGrid, path: str | os.PathLike) -> None:
    """Magic, u32 version, 3 x u32 dims, 3 x f32 spacing, 3 x f32 origin, LSB-first packed bits."""
    buf = io.BytesIO()
    buf.write(_RSVG_MAGIC)
    buf.write(struct.pack("<I3I3f3f", 1, *grid.dims, *grid.spacing, *grid.origin))
    buf.write(np.packbits(grid.flat(), bitorder="little").tobytes())
    atomic_write(Path(path), buf.getvalue())


def load_voxels(path: str | os.PathLike) -> VoxelGrid:
    data = Path(path).read_bytes()
    if data[:4] != _RSVG_MAGIC:
        raise ValueError(f"{path}: not a voxel grid file")
    vals = struct.unpack_from("<I3I3f3f", data, 4)
    if vals[0] != 1:
        raise ValueError(f"{path}: unsupported voxel version {vals[0]}")
    dims, spacing, origin = vals[1:4], vals[4:7], vals[7:10]
    n = int(np.prod(dims))
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=4 + 40), count=n, bitorder="little")
    occ = bits.astype(bool).reshape(dims, order="F")
    return VoxelGrid(tuple(dims), tuple(spacing), tuple(origin), occ)
