"""Depth rasterization and mesh-comparison metrics.

Depth is camera-space z (the rasterizer-native convention), sampled at pixel
centers with no anti-aliasing.  The rasterizer interpolates inverse depth
(perspective-correct), so its output matches exact ray-triangle intersection
wherever a pixel is covered; nearest positive depth wins, ties go to the
smaller triangle id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .fields import AnalyticField
from .mesh import IndexedMesh

__all__ = ["Camera", "DepthMap", "render_depth", "vsa", "vsa_curve",
           "chamfer", "surface_deviation", "save_depth", "load_depth",
           "look_at_camera"]

_Z_NEAR = 1e-9


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels, world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray      # (3, 3) world-to-camera
    translation: np.ndarray   # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-10):
            raise ValueError("rotation must be orthonormal to 1e-10")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def eye(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    def pixel_rays(self):
        """World-space unit directions through every pixel center, (H, W, 3)."""
        ix = np.arange(self.width) + 0.5
        iy = np.arange(self.height) + 0.5
        u, v = np.meshgrid(ix, iy, indexing="xy")
        d_cam = np.stack([(u - self.cx) / self.fx,
                          (v - self.cy) / self.fy,
                          np.ones_like(u)], axis=-1)
        d_world = d_cam @ self.rotation
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                   cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]),
                   rotation=np.array(d["rotation"]), translation=np.array(d["translation"]))


def look_at_camera(eye, target, up=(0.0, 0.0, 1.0), width=64, height=64,
                   focal: float | None = None) -> Camera:
    """Camera at `eye` looking toward `target` (+z forward, +x right)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-12:
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])        # rows: camera axes in world
    t = -r @ eye
    if focal is None:
        focal = 1.2 * max(width, height)
    return Camera(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, rotation=r, translation=t)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel camera-space z of the nearest surface plus visibility mask."""

    depth: np.ndarray     # (H, W), undefined where not visible
    visible: np.ndarray   # (H, W) bool
    tri_id: np.ndarray | None = None   # (H, W) int, -1 where not visible

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        v = np.asarray(self.visible, dtype=bool)
        if d.shape != v.shape:
            raise ValueError("depth and visibility shapes differ")
        if np.any(d[v] <= 0):
            raise ValueError("visible depths must be positive")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "visible", v)

    @property
    def shape(self):
        return self.depth.shape


def _clip_polygon_near(poly):
    """Sutherland-Hodgman clip of a camera-space polygon against z >= _Z_NEAR."""
    out = []
    n = len(poly)
    for i in range(n):
        cur, nxt = poly[i], poly[(i + 1) % n]
        cin = cur[2] >= _Z_NEAR
        nin = nxt[2] >= _Z_NEAR
        if cin:
            out.append(cur)
        if cin != nin:
            t = (_Z_NEAR - cur[2]) / (nxt[2] - cur[2])
            out.append(cur + t * (nxt - cur))
    return out


def render_depth(mesh: IndexedMesh, cam: Camera) -> DepthMap:
    """Z-buffer rasterization at pixel centers.

    Deterministic: triangles processed in id order, strict-less updates, so
    exactly coincident surfaces resolve to the smaller triangle id.
    """
    h, w = cam.height, cam.width
    zbuf = np.full((h, w), np.inf)
    ids = np.full((h, w), -1, dtype=np.int64)
    if not mesh.is_empty():
        cam_pts = cam.to_camera(mesh.vertices)
        for ti, tri in enumerate(mesh.triangles):
            corners = cam_pts[tri]
            if np.all(corners[:, 2] >= _Z_NEAR):
                polys = [corners]
            else:
                clipped = _clip_polygon_near(list(corners))
                if len(clipped) < 3:
                    continue
                clipped = np.asarray(clipped)
                polys = [clipped[[0, i, i + 1]] for i in range(1, len(clipped) - 1)]
            for p in polys:
                _raster_triangle(p, ti, cam, zbuf, ids)
    visible = ids >= 0
    depth = np.where(visible, zbuf, 0.0)
    return DepthMap(depth=depth, visible=visible, tri_id=ids)


def _raster_triangle(corners, ti, cam, zbuf, ids):
    z = corners[:, 2]
    sx = cam.fx * corners[:, 0] / z + cam.cx
    sy = cam.fy * corners[:, 1] / z + cam.cy
    area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sy[1] - sy[0]) * (sx[2] - sx[0])
    if area == 0.0:
        return
    if area < 0:
        sx = sx[[0, 2, 1]]
        sy = sy[[0, 2, 1]]
        z = z[[0, 2, 1]]
        area = -area
    h, w = zbuf.shape
    x0 = max(int(np.ceil(min(sx) - 0.5)), 0)
    x1 = min(int(np.floor(max(sx) - 0.5)), w - 1)
    y0 = max(int(np.ceil(min(sy) - 0.5)), 0)
    y1 = min(int(np.floor(max(sy) - 0.5)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    px = np.arange(x0, x1 + 1) + 0.5
    py = np.arange(y0, y1 + 1) + 0.5
    gx, gy = np.meshgrid(px, py, indexing="xy")
    w0 = (sx[2] - sx[1]) * (gy - sy[1]) - (sy[2] - sy[1]) * (gx - sx[1])
    w1 = (sx[0] - sx[2]) * (gy - sy[2]) - (sy[0] - sy[2]) * (gx - sx[2])
    w2 = (sx[1] - sx[0]) * (gy - sy[0]) - (sy[1] - sy[0]) * (gx - sx[0])
    covered = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not np.any(covered):
        return
    inv_z = (w0 / z[0] + w1 / z[1] + w2 / z[2]) / area
    with np.errstate(divide="ignore"):
        depth = 1.0 / inv_z
    block = zbuf[y0:y1 + 1, x0:x1 + 1]
    idblock = ids[y0:y1 + 1, x0:x1 + 1]
    better = covered & (depth > 0) & (depth < block)
    block[better] = depth[better]
    idblock[better] = ti


def vsa(d1: DepthMap, d2: DepthMap, tau: float) -> float:
    """Visible surface agreement: over the union of the visibility masks, the
    fraction of pixels co-visible with depth difference under tau.

    Returns 1.0 by convention when the union is empty.
    """
    if d1.shape != d2.shape:
        raise ValueError(f"depth map shapes differ: {d1.shape} vs {d2.shape}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    union = d1.visible | d2.visible
    n = int(np.count_nonzero(union))
    if n == 0:
        return 1.0
    both = d1.visible & d2.visible
    agree = both & (np.abs(d1.depth - d2.depth) < tau)
    return float(np.count_nonzero(agree) / n)


def vsa_curve(d1: DepthMap, d2: DepthMap, taus) -> list[tuple[float, float]]:
    return [(float(t), vsa(d1, d2, float(t))) for t in taus]


def chamfer(points_a, points_b) -> float:
    """Sum of the two directional means of squared nearest-neighbor distances."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer requires non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def surface_deviation(mesh: IndexedMesh, field: AnalyticField) -> dict:
    """Per-vertex |field| statistics; exact distances when field is a true SDF."""
    if not field.is_sdf:
        raise ValueError("surface_deviation requires an unwarped distance field")
    if mesh.is_empty():
        raise ValueError("empty mesh")
    vals = field.evaluate(mesh.vertices)
    return {
        "rms": float(np.sqrt(np.mean(vals**2))),
        "max": float(np.max(np.abs(vals))),
        "mean_signed": float(np.mean(vals)),
        "count": int(len(vals)),
    }


def save_depth(dm: DepthMap, cam: Camera, path) -> Path:
    """Raw little-endian float32 depth + JSON sidecar (W, H, camera)."""
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    header = {"width": int(dm.shape[1]), "height": int(dm.shape[0]),
              "dtype": "<f4", "sidecar": path.name + ".raw",
              "camera": cam.to_dict()}
    depth = np.where(dm.visible, dm.depth, np.float64(-1.0)).astype("<f4")
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(header, fh, indent=2)
        fh.write("\n")
    depth.tofile(path.with_suffix(".raw"))
    return path.with_suffix(".json")


def load_depth(path):
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    with open(path) as fh:
        header = json.load(fh)
    w, h = header["width"], header["height"]
    raw = np.fromfile(path.parent / header["sidecar"], dtype="<f4")
    depth = raw.reshape(h, w).astype(np.float64)
    visible = depth > 0
    cam = Camera.from_dict(header["camera"])
    return DepthMap(depth=np.where(visible, depth, 0.0), visible=visible), cam
