"""Scan conversion of projected triangles onto an integer sample lattice.

Shared by depth rendering (lattice = pixel centres) and parity voxelisation
(lattice = voxel-centre rays).  Sample ``(i, j)`` sits at lattice coordinates
``(i, j)``; triangles are given in the same coordinates.
"""
from __future__ import annotations

import numpy as np

_CHUNK = 2_000_000


def rasterize(tri_uv: np.ndarray, tri_depth: np.ndarray, width: int, height: int,
              inclusive: bool = True):
    """Yield ``(pixel, depth, face, bary)`` hits in chunks.

    ``tri_uv`` is ``(F, 3, 2)`` lattice coordinates, ``tri_depth`` ``(F, 3)``.
    ``pixel`` is the flat index ``j * width + i``.  With ``inclusive`` samples on
    an edge count as inside (crack-free depth maps); otherwise the test is strict.
    """
    u, v = tri_uv[..., 0], tri_uv[..., 1]
    x0 = np.maximum(np.ceil(u.min(axis=1)).astype(np.int64), 0)
    x1 = np.minimum(np.floor(u.max(axis=1)).astype(np.int64), width - 1)
    y0 = np.maximum(np.ceil(v.min(axis=1)).astype(np.int64), 0)
    y1 = np.minimum(np.floor(v.max(axis=1)).astype(np.int64), height - 1)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    count = nx * ny
    a = tri_uv[:, 0]
    e1 = tri_uv[:, 1] - a
    e2 = tri_uv[:, 2] - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    live = np.nonzero((count > 0) & (np.abs(det) > 1e-14))[0]
    if len(live) == 0:
        return
    csum = np.cumsum(count[live])
    start = 0
    while start < len(live):
        stop = int(np.searchsorted(csum, (csum[start - 1] if start else 0) + _CHUNK, side="right"))
        stop = max(stop, start + 1)
        faces = live[start:stop]
        n = count[faces]
        tri = np.repeat(faces, n)
        local = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        px = x0[tri] + local % nx[tri]
        py = y0[tri] + local // nx[tri]
        dx = px - a[tri, 0]
        dy = py - a[tri, 1]
        d = det[tri]
        l1 = (dx * e2[tri, 1] - dy * e2[tri, 0]) / d
        l2 = (e1[tri, 0] * dy - e1[tri, 1] * dx) / d
        l0 = 1.0 - l1 - l2
        if inclusive:
            eps = -1e-12
            inside = (l0 >= eps) & (l1 >= eps) & (l2 >= eps)
        else:
            inside = (l0 > 0) & (l1 > 0) & (l2 > 0)
        tri, px, py = tri[inside], px[inside], py[inside]
        bary = np.stack([l0[inside], l1[inside], l2[inside]], axis=1)
        depth = (bary * tri_depth[tri]).sum(axis=1)
        yield py * width + px, depth, tri, bary
        start = stop
