"""Indexed triangle meshes: I/O, normalisation and basic constructions."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# scale so the farthest vertex sits at 1/1.03, leaving an exterior shell in the unit ball
NORMALIZE_MARGIN = 1.03


class MeshParseError(ValueError):
    def __init__(self, msg: str, path: str | os.PathLike = "", line: int | None = None,
                 offset: int | None = None):
        where = f"{path}" + (f":{line}" if line is not None else "") + \
            (f" @ byte {offset}" if offset is not None else "")
        super().__init__(f"{where}: {msg}" if where else msg)
        self.line = line
        self.offset = offset


class UnsupportedTopologyError(MeshParseError):
    pass


class DegenerateInputError(ValueError):
    pass


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (F, 3) int64
    normals: np.ndarray | None = None  # (V, 3) per-vertex unit normals

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", _frozen(v, np.float64))
        object.__setattr__(self, "triangles", _frozen(f, np.int64))
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(v):
                raise ValueError("one normal per vertex required")
            object.__setattr__(self, "normals", _frozen(n, np.float64))

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def corners(self) -> np.ndarray:
        """(F, 3, 3) triangle corner positions."""
        return self.vertices[self.triangles]

    def face_normals(self) -> np.ndarray:
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(ln > 0, ln, 1.0)

    def face_areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def volume(self) -> float:
        """Signed volume; positive for outward-wound closed meshes."""
        c = self.corners()
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    def edges(self) -> np.ndarray:
        f = self.triangles
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.sort(e, axis=1)

    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        n_edges = len(np.unique(self.edges(), axis=0))
        return int(len(used) - n_edges + len(self.triangles))

    def transformed(self, scale: float, translate) -> "TriMesh":
        return TriMesh(self.vertices * scale + np.asarray(translate, dtype=np.float64),
                       self.triangles, self.normals)

    def sample_area(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Area-weighted uniform surface samples with their face normals."""
        if self.is_empty:
            raise DegenerateInputError("cannot sample an empty mesh")
        area = self.face_areas()
        face = rng.choice(len(area), size=count, p=area / area.sum())
        u, v = rng.random(count), rng.random(count)
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        c = self.corners()[face]
        pts = c[:, 0] + u[:, None] * (c[:, 1] - c[:, 0]) + v[:, None] * (c[:, 2] - c[:, 0])
        return pts, self.face_normals()[face]


@dataclass(frozen=True)
class Similarity:
    """Maps normalised coordinates back to the original: ``x = scale * y + translate``."""

    scale: float
    translate: tuple[float, float, float]

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) * self.scale + np.asarray(self.translate)

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - np.asarray(self.translate)) / self.scale


def normalize_to_unit_sphere(mesh: TriMesh, margin: float = NORMALIZE_MARGIN) -> tuple[TriMesh, Similarity]:
    """Centre the vertex bounding box at the origin and scale the farthest vertex to ``1/margin``."""
    v = mesh.vertices
    if len(v) == 0:
        raise DegenerateInputError("empty mesh")
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    radius = np.linalg.norm(v - center, axis=1).max()
    if not radius > 0:
        raise DegenerateInputError("all vertices coincide")
    scale = radius * margin
    tf = Similarity(float(scale), tuple(float(c) for c in center))
    return TriMesh((v - center) / scale, mesh.triangles, mesh.normals), tf


# ---------------------------------------------------------------- file formats

def load_mesh(path: str | os.PathLike) -> TriMesh:
    path = Path(path)
    if path.suffix.lower() == ".stl":
        return _load_stl(path)
    return _load_obj(path)


def save_mesh(mesh: TriMesh, path: str | os.PathLike) -> None:
    path = Path(path)
    data = _stl_bytes(mesh) if path.suffix.lower() == ".stl" else _obj_text(mesh).encode()
    atomic_write(path, data)


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _obj_index(tok: str, n: int, path, lineno) -> int:
    try:
        i = int(tok)
    except ValueError:
        raise MeshParseError(f"bad index {tok!r}", path, lineno) from None
    if i == 0:
        raise MeshParseError("OBJ indices are 1-based", path, lineno)
    return i - 1 if i > 0 else n + i


def _load_obj(path: Path) -> TriMesh:
    verts, vns, faces, face_vn = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            if tag in ("v", "vn"):
                try:
                    xyz = [float(x) for x in parts[1:4]]
                except ValueError:
                    raise MeshParseError(f"bad {tag} record", path, lineno) from None
                if len(xyz) != 3:
                    raise MeshParseError(f"{tag} needs 3 coordinates", path, lineno)
                (verts if tag == "v" else vns).append(xyz)
            elif tag == "f":
                if len(parts) != 4:
                    raise UnsupportedTopologyError(f"face with {len(parts) - 1} vertices", path, lineno)
                idx, nidx = [], []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    idx.append(_obj_index(fields[0], len(verts), path, lineno))
                    if len(fields) == 3 and fields[2]:
                        nidx.append(_obj_index(fields[2], len(vns), path, lineno))
                faces.append(idx)
                if len(nidx) == 3:
                    face_vn.append((idx, nidx))
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise MeshParseError("face index out of range", path)
    normals = None
    if vns:
        vn = np.array(vns, dtype=np.float64)
        if face_vn:
            normals = np.zeros_like(v)
            for vi, ni in face_vn:
                normals[vi] = vn[ni]
        elif len(vn) == len(v):
            normals = vn
    return TriMesh(v, f, normals)


def _obj_text(mesh: TriMesh) -> str:
    lines = ["# triangle mesh"]
    lines += ["v %.17g %.17g %.17g" % tuple(p) for p in mesh.vertices]
    if mesh.normals is not None:
        lines += ["vn %.17g %.17g %.17g" % tuple(n) for n in mesh.normals]
        lines += ["f %d//%d %d//%d %d//%d" % (a, a, b, b, c, c) for a, b, c in mesh.triangles + 1]
    else:
        lines += ["f %d %d %d" % tuple(t) for t in mesh.triangles + 1]
    return "\n".join(lines) + "\n"


_STL_RECORD = np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])


def _stl_bytes(mesh: TriMesh) -> bytes:
    rec = np.zeros(len(mesh.triangles), dtype=_STL_RECORD)
    rec["n"] = mesh.face_normals()
    rec["v"] = mesh.corners()
    header = b"binary STL".ljust(80, b"\0")
    return header + struct.pack("<I", len(rec)) + rec.tobytes()


def _load_stl(path: Path) -> TriMesh:
    data = path.read_bytes()
    if len(data) < 84:
        raise MeshParseError("truncated STL header", path, offset=len(data))
    (n,) = struct.unpack_from("<I", data, 80)
    need = 84 + n * _STL_RECORD.itemsize
    if len(data) < need:
        raise MeshParseError(f"expected {n} triangles", path, offset=len(data))
    rec = np.frombuffer(data, dtype=_STL_RECORD, count=n, offset=84)
    corners = rec["v"].astype(np.float64).reshape(-1, 3)
    verts, inv = np.unique(corners, axis=0, return_inverse=True)
    return TriMesh(verts, inv.reshape(-1, 3))


# ---------------------------------------------------------------- constructions

def icosphere(subdivisions: int = 4, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    return TriMesh(v * radius + np.asarray(center), f)


def _subdivide(v: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    mid = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
    m = inv.reshape(3, -1).T + len(v)  # midpoints of edges (01, 12, 20)
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
    nf = np.concatenate([np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
                         np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
    return np.concatenate([v, mid]), nf


def ellipsoid_mesh(axes, center=(0.0, 0.0, 0.0), subdivisions: int = 4) -> TriMesh:
    s = icosphere(subdivisions)
    return TriMesh(s.vertices * np.asarray(axes, dtype=np.float64) + np.asarray(center), s.triangles)


def box_mesh(half_extents, center=(0.0, 0.0, 0.0), divisions: int = 8) -> TriMesh:
    """Closed box with each face split into ``divisions`` x ``divisions`` quads."""
    h = np.asarray(half_extents, dtype=np.float64)
    g = np.linspace(-1.0, 1.0, divisions + 1)
    verts, faces = [], []
    index: dict[tuple, int] = {}

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            for i in range(divisions):
                for j in range(divisions):
                    quad = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign
                        p[u_ax] = g[i + du]
                        p[v_ax] = g[j + dv]
                        quad.append(vid(p))
                    a, b, c, d = quad
                    faces += [[a, b, c], [a, c, d]]
    v = np.array(verts) * h + np.asarray(center)
    f = np.array(faces, dtype=np.int64)
    # orient outward: flip triangles whose normal points toward the centre
    c = v[f]
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    inward = np.einsum("ij,ij->i", n, c.mean(axis=1) - np.asarray(center)) < 0
    f[inward] = f[inward][:, ::-1]
    return TriMesh(v, f)
