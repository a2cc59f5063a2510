"""Marching tetrahedra baseline on two lattices.

Kuhn lattice: every grid cell splits into the six tetrahedra around its main
diagonal.  This split is conforming as-is — the induced diagonal on every
cube face runs between the face corners whose coordinates increase together,
so both cubes sharing a face agree on it (checked by test, like the cube
tables).

Staggered (body-centered) lattice: grid nodes plus cell centers, tets built
over cube faces (four per interior face between the two adjacent centers,
two per boundary face under its own center).  The centers sample the field
at positions off the node layers, which is what makes tetrahedral extraction
zigzag on fields that are non-linear between layers: crossing edges stop
seeing identical value pairs.  Grid-node-only lattices provably cannot show
that artifact, so the staggered variant resamples an analytic field.
"""

from __future__ import annotations

import numpy as np

from .fields import AnalyticField
from .marching_cubes import ISO_PERTURBATION, U_CLAMP, _as_deformable, _prepare_values
from .mesh import IndexedMesh

__all__ = ["extract_mt", "extract_mt_staggered", "kuhn_tets", "bcc_lattice",
           "marching_tets_core"]

# local tet edges, index order
_TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
                      dtype=np.int64)

# the six tets of the Kuhn split: corner paths 0 -> axis -> plane -> 6 of the
# cube corner numbering used by the cube tables
_KUHN_CORNERS = np.array([
    (0, 1, 2, 6), (0, 2, 3, 6), (0, 1, 5, 6),
    (0, 5, 4, 6), (0, 4, 7, 6), (0, 3, 7, 6),
], dtype=np.int64)
_CUBE_OFFSETS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
], dtype=np.int64)


def _build_case_table():
    """Per 4-bit configuration: up to two triangles over local tet edges,
    oriented so normals point toward the positive (outside) corners.

    Orientation is calibrated numerically on the positively oriented
    reference tet rather than hand-derived.
    """
    ref = np.array([(0.0, 0.0, 0.0), (1.0, 0.0, 0.0),
                    (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)])
    edge_mid = ref[_TET_EDGES].mean(axis=1)
    table = np.full((16, 6), -1, dtype=np.int64)
    counts = np.zeros(16, dtype=np.int64)
    edge_of = {tuple(sorted(e)): i for i, e in enumerate(map(tuple, _TET_EDGES))}
    for cfg in range(1, 15):
        inside = [c for c in range(4) if (cfg >> c) & 1]
        outside = [c for c in range(4) if c not in inside]
        if len(inside) in (1, 3):
            lone = inside[0] if len(inside) == 1 else outside[0]
            others = [c for c in range(4) if c != lone]
            tris = [[edge_of[tuple(sorted((lone, o)))] for o in others]]
        else:
            v, w = inside
            a, b = outside
            cycle = [edge_of[tuple(sorted((v, a)))], edge_of[tuple(sorted((v, b)))],
                     edge_of[tuple(sorted((w, b)))], edge_of[tuple(sorted((w, a)))]]
            tris = [[cycle[0], cycle[1], cycle[2]], [cycle[0], cycle[2], cycle[3]]]
        centroid_in = ref[inside].mean(axis=0)
        centroid_out = ref[outside].mean(axis=0)
        flat = []
        for tri in tris:
            p = edge_mid[tri]
            n = np.cross(p[1] - p[0], p[2] - p[0])
            if np.dot(n, centroid_out - centroid_in) < 0:
                tri = [tri[0], tri[2], tri[1]]
            flat.extend(tri)
        table[cfg, : len(flat)] = flat
        counts[cfg] = len(flat) // 3
    return table, counts


_CASE_TABLE, _CASE_COUNT = _build_case_table()


def marching_tets_core(points, values, tets, iso: float):
    """Shared kernel: contour `values` over a tet complex.

    tets must be positively oriented.  Returns (vertices, triangles,
    edge_pairs) with one welded vertex per crossing tet edge, keyed by the
    sorted global node pair.
    """
    points = np.asarray(points, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    tets = np.asarray(tets, dtype=np.int64)
    iso = float(iso)
    inside = values < iso
    cfg = (inside[tets[:, 0]].astype(np.int64)
           | inside[tets[:, 1]] << 1
           | inside[tets[:, 2]] << 2
           | inside[tets[:, 3]] << 3)
    active = np.nonzero((cfg > 0) & (cfg < 15))[0]
    if len(active) == 0:
        return (np.empty((0, 3)), np.empty((0, 3), dtype=np.int64),
                np.empty((0, 2), dtype=np.int64))
    cfg_a = cfg[active]
    counts = _CASE_COUNT[cfg_a]
    padded = _CASE_TABLE[cfg_a]                  # (A, 6)
    valid = padded >= 0
    local = padded[valid]                         # flat local edge ids
    tet_rep = np.repeat(tets[active], 3 * counts, axis=0)
    na = tet_rep[np.arange(len(local)), _TET_EDGES[local, 0]]
    nb = tet_rep[np.arange(len(local)), _TET_EDGES[local, 1]]
    lo = np.minimum(na, nb)
    hi = np.maximum(na, nb)
    key = lo * len(points) + hi
    uniq, inv = np.unique(key, return_inverse=True)
    lo_u = uniq // len(points)
    hi_u = uniq % len(points)
    s_a = values[lo_u]
    s_b = values[hi_u]
    u = (s_a - iso) / (s_a - s_b)
    u = np.clip(u, U_CLAMP, 1.0 - U_CLAMP)
    verts = points[lo_u] + u[:, None] * (points[hi_u] - points[lo_u])
    triangles = inv.reshape(-1, 3)
    edge_pairs = np.stack([lo_u, hi_u], axis=1)
    return verts, triangles, edge_pairs


def _orient_positive(points, tets):
    p = points[tets]
    det = np.einsum("ij,ij->i", p[:, 1] - p[:, 0],
                    np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]))
    flipped = det < 0
    if np.any(flipped):
        tets = tets.copy()
        tets[flipped] = tets[flipped][:, [0, 1, 3, 2]]
    return tets


def kuhn_tets(dims):
    """Six-tet split of every cell; (T, 4) linear node ids, C node order."""
    nx, ny, nz = dims
    strides = np.array([ny * nz, nz, 1], dtype=np.int64)
    ci, cj, ck = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1),
                             np.arange(nz - 1), indexing="ij")
    cells = np.stack([ci, cj, ck], axis=-1).reshape(-1, 3)
    corner_lin = (cells[:, None, :] + _CUBE_OFFSETS[None, :, :]) @ strides  # (C, 8)
    return corner_lin[:, _KUHN_CORNERS].reshape(-1, 4)


def extract_mt(grid, iso: float = 0.0, mode: str = "closed") -> IndexedMesh:
    """Marching tetrahedra over the Kuhn split of a (deformable) grid.

    Same boundary policy and edge-interpolation rule as the cube extractor;
    forward pass only.
    """
    grid = _as_deformable(grid)
    work, _, n_perturbed = _prepare_values(grid.values, float(iso), mode)
    points = grid.node_positions().reshape(-1, 3)
    tets = _orient_positive(points, kuhn_tets(grid.dims))
    verts, triangles, pairs = marching_tets_core(points, work.ravel(), tets, iso)
    return IndexedMesh(vertices=verts, triangles=triangles, provenance=pairs,
                       provenance_kind="node-pair",
                       metadata={"iso": float(iso), "mode": mode,
                                 "lattice": "kuhn",
                                 "perturbed_nodes": n_perturbed})


def bcc_lattice(dims, origin, spacing):
    """Node positions and tets of the staggered lattice for `dims` grid nodes.

    Returns (points, tets, n_grid_nodes): grid nodes first, then cell
    centers.  Four tets per interior cube face (between the two adjacent
    centers), two per boundary face (under its own center).
    """
    dims = tuple(int(d) for d in dims)
    nx, ny, nz = dims
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64) * np.ones(3)
    strides = np.array([ny * nz, nz, 1], dtype=np.int64)
    gi, gj, gk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    grid_pts = origin + np.stack([gi, gj, gk], axis=-1).reshape(-1, 3) * spacing
    ncx, ncy, ncz = nx - 1, ny - 1, nz - 1
    si, sj, sk = np.meshgrid(np.arange(ncx), np.arange(ncy), np.arange(ncz),
                             indexing="ij")
    cells = np.stack([si, sj, sk], axis=-1).reshape(-1, 3)
    center_pts = origin + (cells + 0.5) * spacing
    n_grid = len(grid_pts)
    cell_strides = np.array([ncy * ncz, ncz, 1], dtype=np.int64)

    def center_id(cell_idx):
        return n_grid + cell_idx @ cell_strides

    def node_id(node_idx):
        return node_idx @ strides

    tet_blocks = []
    for axis in range(3):
        ax_u, ax_v = [a for a in range(3) if a != axis]
        # interior faces between cell c and its +axis neighbor
        ncells = [ncx, ncy, ncz]
        shape = ncells.copy()
        shape[axis] -= 1
        if min(shape) > 0:
            fi, fj, fk = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
            cell_a = np.stack([fi, fj, fk], axis=-1).reshape(-1, 3)
            cell_b = cell_a.copy()
            cell_b[:, axis] += 1
            c1 = center_id(cell_a)
            c2 = center_id(cell_b)
            base = cell_a.copy()
            base[:, axis] += 1  # face plane at the shared side
            for (du1, dv1), (du2, dv2) in (((0, 0), (1, 0)), ((1, 0), (1, 1)),
                                           ((1, 1), (0, 1)), ((0, 1), (0, 0))):
                e1 = base.copy()
                e1[:, ax_u] += du1
                e1[:, ax_v] += dv1
                e2 = base.copy()
                e2[:, ax_u] += du2
                e2[:, ax_v] += dv2
                tet_blocks.append(np.stack(
                    [c1, c2, node_id(e1), node_id(e2)], axis=1))
        # boundary faces on both sides of this axis
        for side in (0, 1):
            shape2 = ncells.copy()
            shape2[axis] = 1
            fi, fj, fk = np.meshgrid(*[np.arange(s) for s in shape2], indexing="ij")
            cell = np.stack([fi, fj, fk], axis=-1).reshape(-1, 3)
            cell[:, axis] = 0 if side == 0 else ncells[axis] - 1
            c1 = center_id(cell)
            base = cell.copy()
            base[:, axis] += side  # 0 for low face, +1 for high face
            corner = []
            for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                e = base.copy()
                e[:, ax_u] += du
                e[:, ax_v] += dv
                corner.append(node_id(e))
            # split by the diagonal from the face's lowest corner
            tet_blocks.append(np.stack([c1, corner[0], corner[1], corner[2]], axis=1))
            tet_blocks.append(np.stack([c1, corner[0], corner[2], corner[3]], axis=1))
    points = np.vstack([grid_pts, center_pts])
    tets = _orient_positive(points, np.vstack(tet_blocks))
    return points, tets, n_grid


def extract_mt_staggered(field: AnalyticField, dims, origin, spacing,
                         iso: float = 0.0, mode: str = "closed") -> IndexedMesh:
    """Marching tetrahedra over the staggered lattice, resampling `field`.

    The artifact-reproduction instrument: cell centers sample the field off
    the node layers, exposing the zigzag on non-linear fields.
    """
    points, tets, n_grid = bcc_lattice(dims, origin, spacing)
    values = field.evaluate(points)
    if not np.all(np.isfinite(values)):
        raise ValueError("field evaluated non-finite on the staggered lattice")
    iso = float(iso)
    if mode == "closed":
        dims = tuple(int(d) for d in dims)
        grid_vals = values[:n_grid].reshape(dims)
        work, _, _ = _prepare_values(grid_vals, iso, mode)
        values = values.copy()
        values[:n_grid] = work.ravel()
    elif mode != "open":
        raise ValueError(f"mode must be 'closed' or 'open', got {mode!r}")
    # exact-iso perturbation must cover the center samples too
    exact = values == iso
    if np.any(exact):
        scale = float(np.max(np.abs(values - iso))) or 1.0
        values = values.copy()
        values[exact] = iso + ISO_PERTURBATION * scale
    verts, triangles, pairs = marching_tets_core(points, values, tets, iso)
    return IndexedMesh(vertices=verts, triangles=triangles, provenance=pairs,
                       provenance_kind="node-pair",
                       metadata={"iso": float(iso), "mode": mode,
                                 "lattice": "staggered"})
