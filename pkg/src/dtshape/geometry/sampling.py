"""Virtual-camera sampling of surface and free-space points with signed distances."""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh, atomic_write
from .raster import rasterize

# free point classified outside when its depth is within this of the surface depth
SIGN_TIE = 1e-6


class EmptySurfaceError(ValueError):
    pass


@dataclass(frozen=True)
class VirtualCamera:
    """Orthographic camera on a sphere around the origin, looking at it.

    The image plane spans ``[-half_width, half_width]^2`` so the default
    footprint covers the unit ball.  Depth is measured from the camera plane
    along the viewing direction.
    """

    position: tuple[float, float, float]
    width: int = 256
    height: int = 256
    half_width: float = 1.0

    def __post_init__(self):
        if np.linalg.norm(self.position) < 1.5:
            raise ValueError("camera must sit at radius >= 1.5")

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) orthonormal basis."""
        c = np.asarray(self.position, dtype=np.float64)
        fwd = -c / np.linalg.norm(c)
        world_up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.99 else np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, world_up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (i, j) and depth of world points."""
        right, up, fwd = self.frame()
        rel = np.asarray(pts, dtype=np.float64) - np.asarray(self.position)
        s = self.width / (2 * self.half_width)
        i = (rel @ right + self.half_width) * s - 0.5
        j = (rel @ up + self.half_width) * (self.height / (2 * self.half_width)) - 0.5
        return i, j, rel @ fwd

    def unproject(self, i: np.ndarray, j: np.ndarray, depth: np.ndarray) -> np.ndarray:
        right, up, fwd = self.frame()
        u = (np.asarray(i) + 0.5) * (2 * self.half_width / self.width) - self.half_width
        v = (np.asarray(j) + 0.5) * (2 * self.half_width / self.height) - self.half_width
        return (np.asarray(self.position) + u[:, None] * right + v[:, None] * up
                + np.asarray(depth)[:, None] * fwd)


def fibonacci_rig(n: int = 100, radius: float = 2.0, resolution: int = 256) -> list[VirtualCamera]:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + 5 ** 0.5) * k
    pos = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1) * radius
    return [VirtualCamera(tuple(p), resolution, resolution) for p in pos]


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray  # (H, W), +inf where nothing is hit
    face: np.ndarray  # (H, W) hit triangle, -1 where empty


def render_depths(mesh: TriMesh, cameras: list[VirtualCamera]) -> list[DepthMap]:
    """Nearest-hit depth (and triangle) per pixel, by z-buffered scan conversion."""
    out = []
    corners = mesh.corners().reshape(-1, 3)
    for cam in cameras:
        W, H = cam.width, cam.height
        depth = np.full(H * W, np.inf)
        face = np.full(H * W, -1, dtype=np.int64)
        if not mesh.is_empty:
            i, j, d = cam.project(corners)
            uv = np.stack([i, j], axis=1).reshape(-1, 3, 2)
            dz = d.reshape(-1, 3)
            for pix, dep, tri, _ in rasterize(uv, dz, W, H):
                keep = dep > 0  # in front of the camera plane
                pix, dep, tri = pix[keep], dep[keep], tri[keep]
                order = np.lexsort((tri, dep, pix))
                pix, dep, tri = pix[order], dep[order], tri[order]
                first = np.ones(len(pix), dtype=bool)
                first[1:] = pix[1:] != pix[:-1]
                pix, dep, tri = pix[first], dep[first], tri[first]
                better = dep < depth[pix]
                depth[pix[better]] = dep[better]
                face[pix[better]] = tri[better]
        out.append(DepthMap(depth.reshape(H, W), face.reshape(H, W)))
    return out


def sample_surface(mesh: TriMesh, depths: list[DepthMap], cameras: list[VirtualCamera], count: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Back-projected depth pixels with the normal of the triangle each one hit."""
    cam_idx, pix_idx = [], []
    for c, dm in enumerate(depths):
        hit = np.flatnonzero(np.isfinite(dm.depth.ravel()))
        cam_idx.append(np.full(len(hit), c))
        pix_idx.append(hit)
    cam_idx = np.concatenate(cam_idx)
    pix_idx = np.concatenate(pix_idx)
    total = len(pix_idx)
    if total == 0:
        raise EmptySurfaceError("no finite-depth pixels")
    pick = rng.choice(total, size=count, replace=count > total)
    pick.sort()
    fn = mesh.face_normals()
    pts = np.empty((count, 3))
    nrm = np.empty((count, 3))
    for c in np.unique(cam_idx[pick]):
        sel = np.flatnonzero(cam_idx[pick] == c)
        pix = pix_idx[pick[sel]]
        cam, dm = cameras[c], depths[c]
        j, i = np.divmod(pix, cam.width)
        pts[sel] = cam.unproject(i, j, dm.depth.ravel()[pix])
        nrm[sel] = fn[dm.face.ravel()[pix]]
    return pts, nrm


def uniform_ball(count: int, rng: np.random.Generator, radius: float = 1.0) -> np.ndarray:
    d = rng.standard_normal((count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (radius * rng.random(count) ** (1.0 / 3.0))[:, None]


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points of paired points/triangles (Voronoi-region case analysis)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        res = a + ab * v[:, None] + ac * w[:, None]
        # edges
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        res[m] = (b + (c - b) * t_bc[:, None])[m]
        t_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        res[m] = (a + ac * t_ac[:, None])[m]
        t_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        res[m] = (a + ab * t_ab[:, None])[m]
    # vertices
    m = (d6 >= 0) & (d5 <= d6)
    res[m] = c[m]
    m = (d3 >= 0) & (d4 <= d3)
    res[m] = b[m]
    m = (d1 <= 0) & (d2 <= 0)
    res[m] = a[m]
    return res


def unsigned_distance(mesh: TriMesh, pts: np.ndarray, k: int = 8, chunk: int = 4096) -> np.ndarray:
    """Exact distance from points to the mesh surface.

    Triangles are indexed by a KD-tree over their centroids.  An upper bound
    from the ``k`` nearest centroids prunes the candidate set to centroids
    within ``bound + r_max`` (``r_max``: largest centroid-to-corner radius), so
    the minimum over candidates is exact.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    corners = mesh.corners()
    cent = corners.mean(axis=1)
    r_max = float(np.linalg.norm(corners - cent[:, None], axis=2).max())
    tree = cKDTree(cent)
    k = min(k, len(cent))
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        q = pts[s:s + chunk]
        _, nn = tree.query(q, k=k)
        nn = nn.reshape(len(q), k)
        rep = np.repeat(np.arange(len(q)), k)
        f = nn.ravel()
        cp = closest_point_on_triangles(q[rep], corners[f, 0], corners[f, 1], corners[f, 2])
        bound = np.linalg.norm(cp - q[rep], axis=1).reshape(len(q), k).min(axis=1)
        cand = tree.query_ball_point(q, bound + r_max + 1e-12)
        lens = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(q))
        f = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand])
        rep = np.repeat(np.arange(len(q)), lens)
        cp = closest_point_on_triangles(q[rep], corners[f, 0], corners[f, 1], corners[f, 2])
        d = np.linalg.norm(cp - q[rep], axis=1)
        starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
        out[s:s + chunk] = np.minimum.reduceat(d, starts)
    return out


def depth_sign(pts: np.ndarray, depths: list[DepthMap], cameras: list[VirtualCamera]) -> np.ndarray:
    """+1 where some camera sees the point in front of the surface, else -1.

    A view only counts as evidence when the point is in front of all four
    surrounding pixel samples, so silhouette quantisation cannot flip
    interior points near the outline.
    """
    outside = np.zeros(len(pts), dtype=bool)
    for cam, dm in zip(cameras, depths):
        i, j, d = cam.project(pts)
        i0 = np.floor(i).astype(np.int64)
        j0 = np.floor(j).astype(np.int64)
        surf = np.full(len(pts), np.inf)
        for di in (0, 1):
            for dj in (0, 1):
                ii, jj = i0 + di, j0 + dj
                ok = (ii >= 0) & (ii < cam.width) & (jj >= 0) & (jj < cam.height)
                val = np.where(ok, dm.depth[np.clip(jj, 0, cam.height - 1), np.clip(ii, 0, cam.width - 1)], np.inf)
                surf = np.minimum(surf, val)
        outside |= d <= surf + SIGN_TIE
    return np.where(outside, 1.0, -1.0)


def sample_free_space(mesh: TriMesh, depths: list[DepthMap], cameras: list[VirtualCamera], count: int,
                      rng: np.random.Generator, points: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Uniform unit-ball points with exact distance and depth-test sign."""
    pts = uniform_ball(count, rng) if points is None else np.asarray(points, dtype=np.float64)
    return pts, depth_sign(pts, depths, cameras) * unsigned_distance(mesh, pts)


# ---------------------------------------------------------------- sampled shapes

@dataclass(frozen=True, eq=False)
class SampledShape:
    surface_points: np.ndarray  # (N, 3)
    surface_normals: np.ndarray  # (N, 3)
    free_points: np.ndarray  # (M, 3)
    free_sdf: np.ndarray  # (M,)
    shape_id: str = ""

    @property
    def n_surface(self) -> int:
        return len(self.surface_points)

    @property
    def n_free(self) -> int:
        return len(self.free_points)


@dataclass(frozen=True)
class SamplingConfig:
    n_surface: int = 80_000
    n_free: int = 20_000
    n_cameras: int = 100
    camera_radius: float = 2.0
    resolution: int = 256

    @classmethod
    def full(cls) -> "SamplingConfig":
        return cls(n_surface=800_000, n_free=200_000)


def prepare_shape(mesh: TriMesh, config: SamplingConfig, rng: np.random.Generator,
                  shape_id: str = "") -> SampledShape:
    cams = fibonacci_rig(config.n_cameras, config.camera_radius, config.resolution)
    depths = render_depths(mesh, cams)
    sp, sn = sample_surface(mesh, depths, cams, config.n_surface, rng)
    fp, fs = sample_free_space(mesh, depths, cams, config.n_free, rng)
    return SampledShape(sp, sn, fp, fs, shape_id)


_RSIT_MAGIC = b"RSIT"


def save_sampled(shape: SampledShape, path: str | os.PathLike) -> None:
    """Binary archive: magic, u32 version, id, surface (x,y,z,nx,ny,nz) f32, free (x,y,z,sdf) f32."""
    sid = shape.shape_id.encode("utf-8")
    buf = io.BytesIO()
    buf.write(_RSIT_MAGIC)
    buf.write(struct.pack("<IQ", 1, len(sid)))
    buf.write(sid)
    surf = np.concatenate([shape.surface_points, shape.surface_normals], axis=1).astype("<f4")
    buf.write(struct.pack("<Q", len(surf)))
    buf.write(surf.tobytes())
    free = np.concatenate([shape.free_points, shape.free_sdf[:, None]], axis=1).astype("<f4")
    buf.write(struct.pack("<Q", len(free)))
    buf.write(free.tobytes())
    atomic_write(Path(path), buf.getvalue())


def load_sampled(path: str | os.PathLike) -> SampledShape:
    data = Path(path).read_bytes()
    if data[:4] != _RSIT_MAGIC:
        raise ValueError(f"{path}: not a sampled-shape archive")
    version, n_id = struct.unpack_from("<IQ", data, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported archive version {version}")
    off = 16
    sid = data[off:off + n_id].decode("utf-8")
    off += n_id
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    surf = np.frombuffer(data, dtype="<f4", count=n * 6, offset=off).reshape(n, 6).astype(np.float64)
    off += n * 24
    (m,) = struct.unpack_from("<Q", data, off)
    off += 8
    free = np.frombuffer(data, dtype="<f4", count=m * 4, offset=off).reshape(m, 4).astype(np.float64)
    return SampledShape(surf[:, :3], surf[:, 3:], free[:, :3], free[:, 3], sid)
