"""Welded indexed triangle meshes with optional extraction provenance."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["IndexedMesh", "save_obj", "load_obj", "save_ply"]


@dataclass(frozen=True)
class IndexedMesh:
    """Triangle mesh with shared vertices.

    Triangles are counter-clockwise when viewed from outside; extraction
    orients them so normals point toward increasing field value.
    `provenance` records each vertex's owning lattice edge when the mesh came
    out of an extractor: rows (axis, i, j, k) for grid extractions
    (provenance_kind "grid-edge") or node-id pairs for tet lattices
    (provenance_kind "node-pair").
    """

    vertices: np.ndarray
    triangles: np.ndarray
    provenance: np.ndarray | None = None
    provenance_kind: str = ""
    colors: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(v):
                raise ValueError("colors must match vertex count")
            object.__setattr__(self, "colors", c)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def undirected_edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array of sorted index pairs."""
        if self.is_empty():
            return np.empty((0, 2), dtype=np.int64)
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles) if len(self.triangles) else np.empty(0)
        return int(len(used) - len(self.undirected_edges()) + len(self.triangles))

    def signed_volume(self) -> float:
        """Divergence-theorem volume; positive for outward-oriented closed meshes."""
        if self.is_empty():
            return 0.0
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def with_vertices(self, vertices) -> "IndexedMesh":
        return IndexedMesh(vertices=vertices, triangles=self.triangles,
                           provenance=self.provenance,
                           provenance_kind=self.provenance_kind,
                           colors=self.colors, metadata=dict(self.metadata))

    def with_colors(self, colors) -> "IndexedMesh":
        return IndexedMesh(vertices=self.vertices, triangles=self.triangles,
                           provenance=self.provenance,
                           provenance_kind=self.provenance_kind,
                           colors=colors, metadata=dict(self.metadata))


def save_obj(mesh: IndexedMesh, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("# diffiso mesh\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    return path


def load_obj(path) -> IndexedMesh:
    vertices = []
    triangles = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for i in range(1, len(idx) - 1):  # fan-triangulate polygons
                    triangles.append([idx[0], idx[i], idx[i + 1]])
    return IndexedMesh(vertices=np.array(vertices, dtype=np.float64).reshape(-1, 3),
                       triangles=np.array(triangles, dtype=np.int64).reshape(-1, 3))


def save_ply(mesh: IndexedMesh, path) -> Path:
    """Binary little-endian PLY; includes uchar RGB when the mesh is colored."""
    path = Path(path)
    has_color = mesh.colors is not None
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {mesh.vertex_count}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {mesh.triangle_count}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        pos = mesh.vertices.astype("<f4")
        if has_color:
            rgb = np.clip(np.round(mesh.colors * 255), 0, 255).astype(np.uint8)
            for p, c in zip(pos, rgb):
                fh.write(struct.pack("<3f3B", *p, *c))
        else:
            fh.write(pos.tobytes())
        tri = mesh.triangles.astype("<i4")
        body = b"".join(struct.pack("<B3i", 3, *t) for t in tri) if len(tri) else b""
        fh.write(body)
    return path
