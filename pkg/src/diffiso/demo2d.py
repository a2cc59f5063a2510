"""2D contouring demonstrators: marching squares vs marching triangles.

Squares run on the regular grid.  Triangles run on a staggered-row lattice
(odd rows shifted half a cell), the 2D analogue of tetrahedral lattices whose
nodes sit off the grid layers — on fields that are non-linear between layers
this produces the characteristic zigzag, while squares stay straight.  On
exact (affine) distance fields both recover the contour exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import Field2D

__all__ = ["Demo2DResult", "demo_2d"]

# marching squares segment table: corners 0=(0,0) 1=(1,0) 2=(1,1) 3=(0,1),
# edges 0=bottom 1=right 2=top 3=left, bit c set when corner c is inside.
# Ambiguous cases 5 and 10 keep the two inside corners separated.
_SQUARE_SEGMENTS = {
    0: [], 15: [],
    1: [(3, 0)], 14: [(3, 0)],
    2: [(0, 1)], 13: [(0, 1)],
    4: [(1, 2)], 11: [(1, 2)],
    8: [(2, 3)], 7: [(2, 3)],
    3: [(3, 1)], 12: [(3, 1)],
    6: [(0, 2)], 9: [(0, 2)],
    5: [(3, 0), (1, 2)],
    10: [(0, 1), (2, 3)],
}
_SQUARE_EDGE_CORNERS = ((0, 1), (1, 2), (2, 3), (3, 0))
_SQUARE_CORNERS = ((0, 0), (1, 0), (1, 1), (0, 1))


@dataclass
class Demo2DResult:
    mode: str
    vertices: np.ndarray          # (V, 2)
    segments: np.ndarray          # (S, 2) vertex indices
    polylines: list               # lists of vertex indices, chained
    deviations: np.ndarray        # per-vertex distance to the true level set
    stats: dict = field(default_factory=dict)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "deviation"])
            for v, d in zip(self.vertices, self.deviations):
                writer.writerow([f"{v[0]:.17g}", f"{v[1]:.17g}", f"{d:.17g}"])
        return path

    def to_svg(self, path, size: int = 512) -> Path:
        path = Path(path)
        v = self.vertices
        if len(v):
            lo = v.min(axis=0)
            hi = v.max(axis=0)
            span = max(float((hi - lo).max()), 1e-12)
        else:
            lo, span = np.zeros(2), 1.0
        pad = 0.05 * span

        def pix(p):
            q = (p - lo + pad) / (span + 2 * pad) * size
            return q[0], size - q[1]

        lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
                 f'height="{size}" viewBox="0 0 {size} {size}">']
        for poly in self.polylines:
            pts = " ".join("%.3f,%.3f" % pix(v[i]) for i in poly)
            lines.append(f'<polyline points="{pts}" fill="none" '
                         f'stroke="black" stroke-width="1.5"/>')
        lines.append("</svg>")
        path.write_text("\n".join(lines) + "\n")
        return path


def _weld_segments(raw_points, raw_keys):
    """Merge endpoints sharing a lattice-edge key; returns welded arrays."""
    keys, inverse = np.unique(raw_keys, axis=0, return_inverse=True)
    vertices = np.zeros((len(keys), 2))
    vertices[inverse] = raw_points
    segments = inverse.reshape(-1, 2)
    segments = segments[segments[:, 0] != segments[:, 1]]
    return vertices, segments


def _chain_polylines(n_vertices, segments):
    adjacency = [[] for _ in range(n_vertices)]
    for si, (a, b) in enumerate(segments):
        adjacency[a].append((b, si))
        adjacency[b].append((a, si))
    used = np.zeros(len(segments), dtype=bool)
    polylines = []
    # open chains first (endpoints of degree 1), then remaining loops
    order = [v for v in range(n_vertices) if len(adjacency[v]) == 1]
    order += list(range(n_vertices))
    for start in order:
        for nxt, si in adjacency[start]:
            if used[si]:
                continue
            chain = [start]
            cur, edge = nxt, si
            used[edge] = True
            chain.append(cur)
            while True:
                follow = [(w, sj) for (w, sj) in adjacency[cur] if not used[sj]]
                if not follow:
                    break
                cur, edge = follow[0]
                used[edge] = True
                chain.append(cur)
            polylines.append(chain)
    return polylines


def _interp(p_a, p_b, s_a, s_b, iso):
    u = (s_a - iso) / (s_a - s_b)
    u = min(max(u, 1e-6), 1.0 - 1e-6)
    return p_a + u * (p_b - p_a)


def demo_2d(field2d: Field2D, mode: str, res: int, origin=(0.0, 0.0),
            extent: float = 1.0, iso: float = 0.0) -> Demo2DResult:
    """Contour a 2D field over a res x res node lattice spanning `extent`."""
    if res < 2:
        raise ValueError("res must be >= 2")
    if mode not in ("squares", "triangles"):
        raise ValueError(f"mode must be 'squares' or 'triangles', got {mode!r}")
    origin = np.asarray(origin, dtype=np.float64)
    h = float(extent) / (res - 1)
    iso = float(iso)

    if mode == "squares":
        xs = origin[0] + np.arange(res) * h
        ys = origin[1] + np.arange(res) * h
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([gx, gy], axis=-1)
        vals = field2d.evaluate(pts)
        raw_points, raw_keys = [], []
        for i in range(res - 1):
            for j in range(res - 1):
                corner_vals = [vals[i + dx, j + dy] for dx, dy in _SQUARE_CORNERS]
                cfg = sum(1 << c for c, v in enumerate(corner_vals) if v < iso)
                for e1, e2 in _SQUARE_SEGMENTS[cfg]:
                    for e in (e1, e2):
                        ca, cb = _SQUARE_EDGE_CORNERS[e]
                        (dxa, dya), (dxb, dyb) = _SQUARE_CORNERS[ca], _SQUARE_CORNERS[cb]
                        p = _interp(pts[i + dxa, j + dya], pts[i + dxb, j + dyb],
                                    corner_vals[ca], corner_vals[cb], iso)
                        raw_points.append(p)
                        # lattice edge key: lower node + axis
                        na = (i + dxa, j + dya)
                        nb = (i + dxb, j + dyb)
                        lo, hi_ = min(na, nb), max(na, nb)
                        raw_keys.append((lo[0], lo[1], hi_[0], hi_[1]))
    else:
        # staggered rows: odd rows shifted half a cell in x
        node_pos = np.zeros((res, res, 2))
        for r in range(res):
            shift = 0.5 * h if r % 2 else 0.0
            node_pos[:, r, 0] = origin[0] + np.arange(res) * h + shift
            node_pos[:, r, 1] = origin[1] + r * h
        vals = field2d.evaluate(node_pos)
        triangles = []
        for r in range(res - 1):
            for i in range(res - 1):
                a = (i, r)
                a1 = (i + 1, r)
                b = (i, r + 1)
                b1 = (i + 1, r + 1)
                if r % 2 == 0:
                    # upper row shifted right: B_i sits between A_i and A_{i+1}
                    triangles.append((a, a1, b))
                    triangles.append((a1, b1, b))
                else:
                    triangles.append((a, a1, b1))
                    triangles.append((a, b1, b))
        raw_points, raw_keys = [], []
        for tri in triangles:
            tri_vals = [vals[n] for n in tri]
            inside = [v < iso for v in tri_vals]
            k = sum(inside)
            if k in (0, 3):
                continue
            crossing = [(m, n) for m in range(3) for n in range(m + 1, 3)
                        if inside[m] != inside[n]]
            for m, n in crossing:
                p = _interp(node_pos[tri[m]], node_pos[tri[n]],
                            tri_vals[m], tri_vals[n], iso)
                raw_points.append(p)
                lo, hi_ = min(tri[m], tri[n]), max(tri[m], tri[n])
                raw_keys.append((lo[0], lo[1], hi_[0], hi_[1]))

    if raw_points:
        vertices, segments = _weld_segments(np.asarray(raw_points),
                                            np.asarray(raw_keys, dtype=np.int64))
    else:
        vertices = np.empty((0, 2))
        segments = np.empty((0, 2), dtype=np.int64)
    polylines = _chain_polylines(len(vertices), segments)
    deviations = field2d.distance_to_level(vertices, iso) if len(vertices) \
        else np.empty(0)
    stats = {
        "vertex_count": int(len(vertices)),
        "segment_count": int(len(segments)),
        "deviation_rms": float(np.sqrt(np.mean(deviations**2))) if len(deviations) else 0.0,
        "deviation_max": float(np.max(deviations)) if len(deviations) else 0.0,
        "x_std": float(np.std(vertices[:, 0])) if len(vertices) else 0.0,
        "y_std": float(np.std(vertices[:, 1])) if len(vertices) else 0.0,
    }
    return Demo2DResult(mode=mode, vertices=vertices, segments=segments,
                        polylines=polylines, deviations=deviations, stats=stats)
