"""Differentiable marching cubes on deformable grids.

Forward: welded watertight extraction from the classic 256-entry tables.
Backward: per-vertex sparse derivatives against the two grid nodes that own
the vertex's edge — scalar sensitivities dv/ds_a, dv/ds_b and displacement
blocks (1-u)*I, u*I — plus a scatter-add chain rule back to whole-grid
gradients.

Each extracted vertex lies on one grid edge at parameter
u = (s_a - iso) / (s_a - s_b), position v = p_a + u (p_b - p_a), where a is
the edge's canonically lower node and p includes the node displacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grids import DeformableGrid, ScalarGrid
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_COUNT, TRI_TABLE_PADDED
from .mesh import IndexedMesh

__all__ = [
    "VertexJacobian",
    "extract",
    "chain_gradient",
    "clamp_displacements",
    "save_jacobian_triplets",
    "U_CLAMP",
    "ISO_PERTURBATION",
]

# interpolation parameter kept off the nodes to preserve weld uniqueness
U_CLAMP = 1e-6
# relative perturbation applied to nodes sitting exactly at iso
ISO_PERTURBATION = 1e-7
# closed-mode boundary nodes are forced at least this far outside (relative)
BOUNDARY_PAD = 1e-6

# per local cube edge: the axis it runs along and the cell-relative offset of
# its lower node (derived from CORNER_OFFSETS/EDGE_CORNERS at import)
_EDGE_AXIS = np.empty(12, dtype=np.int64)
_EDGE_OFFSET = np.empty((12, 3), dtype=np.int64)
for _e, (_a, _b) in enumerate(EDGE_CORNERS):
    _pa, _pb = CORNER_OFFSETS[_a], CORNER_OFFSETS[_b]
    _axis = int(np.nonzero(_pa != _pb)[0][0])
    _EDGE_AXIS[_e] = _axis
    _EDGE_OFFSET[_e] = np.minimum(_pa, _pb)


@dataclass(frozen=True)
class VertexJacobian:
    """Sparse derivative record of one extraction.

    node_a/node_b are linear node ids (C order over grid dims).  Scalar
    sensitivities are world-units-per-field-unit 3-vectors.  Displacement
    sensitivity blocks are (1-u)*I for node a and u*I for node b, so only u
    is stored.
    """

    dims: tuple[int, int, int]
    node_a: np.ndarray
    node_b: np.ndarray
    dv_ds_a: np.ndarray
    dv_ds_b: np.ndarray
    u: np.ndarray

    def __len__(self):
        return len(self.node_a)


def _as_deformable(grid) -> DeformableGrid:
    if isinstance(grid, DeformableGrid):
        return grid
    if isinstance(grid, ScalarGrid):
        return DeformableGrid.undisplaced(grid)
    raise TypeError(f"expected ScalarGrid or DeformableGrid, got {type(grid)}")


def clamp_displacements(grid, displacement=None) -> DeformableGrid:
    """Clamp each displacement component to |d| <= (0.5 - 1e-4) * spacing.

    Idempotent; guarantees no cell inversion with margin.  Accepts either a
    DeformableGrid, or a base grid plus a raw displacement array (which may
    violate the half-cell invariant; this is the operation that establishes
    it).
    """
    if displacement is None:
        base, disp = grid.base, grid.displacement
    else:
        base = grid.base if isinstance(grid, DeformableGrid) else grid
        disp = np.asarray(displacement, dtype=np.float64)
    limit = (0.5 - 1e-4) * base.spacing
    return DeformableGrid(base=base, displacement=np.clip(disp, -limit, limit))


def _prepare_values(values, iso, mode):
    """Working copy with closed-boundary forcing and exact-iso perturbation.

    Returns (work, scalar_gain, perturbed_count) where scalar_gain is the
    per-node derivative of the working value w.r.t. the raw value (0 where
    the closed-mode clamp is active, 1 elsewhere).
    """
    work = np.array(values, dtype=np.float64)
    scale = float(np.max(np.abs(work - iso))) if work.size else 0.0
    if scale == 0.0:
        scale = 1.0
    gain = np.ones_like(work)
    if mode == "closed":
        pad = BOUNDARY_PAD * scale
        boundary = np.zeros(work.shape, dtype=bool)
        boundary[0, :, :] = boundary[-1, :, :] = True
        boundary[:, 0, :] = boundary[:, -1, :] = True
        boundary[:, :, 0] = boundary[:, :, -1] = True
        clamped = boundary & (work - iso < pad)
        work[clamped] = iso + pad
        gain[clamped] = 0.0
    elif mode != "open":
        raise ValueError(f"mode must be 'closed' or 'open', got {mode!r}")
    exact = work == iso
    n_exact = int(np.count_nonzero(exact))
    if n_exact:
        work[exact] = iso + ISO_PERTURBATION * scale
        if np.any(work == iso):
            raise ValueError("perturbation budget exhausted: node still at iso")
    if not np.all(np.isfinite(work)):
        raise ValueError("non-finite grid values")
    return work, gain, n_exact


def extract(grid, iso: float = 0.0, mode: str = "closed"):
    """Extract the iso-surface and its vertex Jacobian.

    mode "closed" (default) forces the outermost node layer outside so the
    result is a closed surface; "open" uses the raw values.  Returns
    (IndexedMesh, VertexJacobian); the mesh carries per-vertex grid-edge
    provenance (axis, i, j, k of the edge's lower node).
    """
    grid = _as_deformable(grid)
    nx, ny, nz = grid.dims
    iso = float(iso)
    work, gain, n_perturbed = _prepare_values(grid.values, iso, mode)
    spacing = grid.base.spacing
    origin = grid.base.origin

    inside = work < iso
    # cube configuration per cell: bit c set when corner c is inside
    cfg = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint8)
    for c, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        view = inside[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1]
        cfg |= view.astype(np.uint8) << c

    meta = {"iso": iso, "mode": mode, "perturbed_nodes": n_perturbed}
    # active grid edges (sign change along each axis), in fixed axis-major order
    crossings = []
    n_nodes = nx * ny * nz
    for axis in range(3):
        shifted = [slice(None)] * 3
        shifted[axis] = slice(1, None)
        head = [slice(None)] * 3
        head[axis] = slice(None, -1)
        crossed = inside[tuple(shifted)] != inside[tuple(head)]
        idx = np.argwhere(crossed)
        crossings.append(idx)
    total_v = sum(len(c) for c in crossings)
    if total_v == 0:
        empty = IndexedMesh(vertices=np.empty((0, 3)), triangles=np.empty((0, 3), dtype=np.int64),
                            provenance=np.empty((0, 4), dtype=np.int64),
                            provenance_kind="grid-edge", metadata=meta)
        jac = VertexJacobian(dims=grid.dims,
                             node_a=np.empty(0, dtype=np.int64),
                             node_b=np.empty(0, dtype=np.int64),
                             dv_ds_a=np.empty((0, 3)), dv_ds_b=np.empty((0, 3)),
                             u=np.empty(0))
        return empty, jac

    flat_work = work.ravel()
    flat_gain = gain.ravel()
    disp = grid.displacement.reshape(-1, 3)
    axis_strides = np.array([ny * nz, nz, 1], dtype=np.int64)

    vert_pos = np.empty((total_v, 3))
    node_a = np.empty(total_v, dtype=np.int64)
    node_b = np.empty(total_v, dtype=np.int64)
    dv_ds_a = np.empty((total_v, 3))
    dv_ds_b = np.empty((total_v, 3))
    u_all = np.empty(total_v)
    provenance = np.empty((total_v, 4), dtype=np.int64)
    edge_ids_sorted = np.empty(total_v, dtype=np.int64)

    base = 0
    for axis in range(3):
        idx = crossings[axis]
        m = len(idx)
        if m == 0:
            continue
        sl = slice(base, base + m)
        a_lin = idx @ axis_strides
        b_lin = a_lin + axis_strides[axis]
        s_a = flat_work[a_lin]
        s_b = flat_work[b_lin]
        denom = s_a - s_b
        u = (s_a - iso) / denom
        clamped = (u < U_CLAMP) | (u > 1.0 - U_CLAMP)
        u = np.clip(u, U_CLAMP, 1.0 - U_CLAMP)
        p_a = origin + idx * spacing + disp[a_lin]
        p_b = p_a.copy()
        p_b[:, axis] += spacing[axis]
        p_b += disp[b_lin] - disp[a_lin]
        delta = p_b - p_a
        vert_pos[sl] = p_a + u[:, None] * delta
        du_ds_a = np.where(clamped, 0.0, -(s_b - iso) / denom**2) * flat_gain[a_lin]
        du_ds_b = np.where(clamped, 0.0, (s_a - iso) / denom**2) * flat_gain[b_lin]
        dv_ds_a[sl] = du_ds_a[:, None] * delta
        dv_ds_b[sl] = du_ds_b[:, None] * delta
        u_all[sl] = u
        node_a[sl] = a_lin
        node_b[sl] = b_lin
        provenance[sl, 0] = axis
        provenance[sl, 1:] = idx
        edge_ids_sorted[sl] = axis * n_nodes + a_lin
        base += m

    # vertex ids are positional; edge_ids_sorted is ascending per axis block
    # and blocks are offset by axis, so it is globally sorted for searchsorted
    active = np.argwhere((cfg != 0) & (cfg != 255))
    cfg_active = cfg[active[:, 0], active[:, 1], active[:, 2]]
    tri_counts = TRI_COUNT[cfg_active]
    total_entries = int(tri_counts.sum()) * 3
    if total_entries == 0:
        triangles = np.empty((0, 3), dtype=np.int64)
    else:
        padded = TRI_TABLE_PADDED[cfg_active]          # (A, 16)
        valid = padded >= 0
        local_edges = padded[valid].astype(np.int64)    # flat, 3 per triangle
        cell_rep = np.repeat(active, 3 * tri_counts, axis=0)
        edge_axis = _EDGE_AXIS[local_edges]
        edge_node = (cell_rep + _EDGE_OFFSET[local_edges]) @ axis_strides
        eid = edge_axis * n_nodes + edge_node
        vid = np.searchsorted(edge_ids_sorted, eid)
        triangles = vid.reshape(-1, 3)
        # table winding is ccw seen from inside; flip so normals point toward
        # increasing field value
        triangles = triangles[:, [0, 2, 1]]

    mesh = IndexedMesh(vertices=vert_pos, triangles=triangles,
                       provenance=provenance, provenance_kind="grid-edge",
                       metadata=meta)
    jac = VertexJacobian(dims=grid.dims, node_a=node_a, node_b=node_b,
                         dv_ds_a=dv_ds_a, dv_ds_b=dv_ds_b, u=u_all)
    return mesh, jac


def chain_gradient(jac: VertexJacobian, dL_dv: np.ndarray):
    """Scatter per-vertex loss cotangents back to the grid.

    Returns (dL_dvalues, dL_ddisplacement) with shapes (nx, ny, nz) and
    (nx, ny, nz, 3).  Accumulation uses bincount over node ids, which is
    order-deterministic regardless of thread count.
    """
    dL_dv = np.asarray(dL_dv, dtype=np.float64).reshape(-1, 3)
    if len(dL_dv) != len(jac):
        raise ValueError(
            f"cotangent count {len(dL_dv)} does not match jacobian size {len(jac)}")
    n = int(np.prod(jac.dims))
    contrib_a = np.einsum("vi,vi->v", dL_dv, jac.dv_ds_a)
    contrib_b = np.einsum("vi,vi->v", dL_dv, jac.dv_ds_b)
    grad_s = (np.bincount(jac.node_a, weights=contrib_a, minlength=n)
              + np.bincount(jac.node_b, weights=contrib_b, minlength=n))
    grad_d = np.zeros((n, 3))
    wa = 1.0 - jac.u
    wb = jac.u
    for c in range(3):
        grad_d[:, c] = (np.bincount(jac.node_a, weights=dL_dv[:, c] * wa, minlength=n)
                        + np.bincount(jac.node_b, weights=dL_dv[:, c] * wb, minlength=n))
    return grad_s.reshape(jac.dims), grad_d.reshape(jac.dims + (3,))


def save_jacobian_triplets(jac: VertexJacobian, path) -> Path:
    """Debug export: sparse triplets (row, col, value).

    Rows index vertex coordinates (3*vertex + axis).  Columns index
    parameters: scalar value of node n at column n; displacement component
    (n, axis) at column N + 3*n + axis, N = node count.  One line per entry,
    "row col value", after a comment header.
    """
    path = Path(path)
    n = int(np.prod(jac.dims))
    with open(path, "w") as fh:
        fh.write("# sparse vertex jacobian triplets: row col value\n")
        fh.write(f"# rows: 3*vertex+coord ({3 * len(jac)} rows); "
                 f"cols: node scalars [0,{n}) then displacement components "
                 f"[{n},{4 * n})\n")
        for v in range(len(jac)):
            for axis in range(3):
                row = 3 * v + axis
                fh.write(f"{row} {jac.node_a[v]} {jac.dv_ds_a[v, axis]:.17g}\n")
                fh.write(f"{row} {jac.node_b[v]} {jac.dv_ds_b[v, axis]:.17g}\n")
                # displacement blocks are diagonal: only the matching component
                col_a = n + 3 * jac.node_a[v] + axis
                col_b = n + 3 * jac.node_b[v] + axis
                fh.write(f"{row} {col_a} {1.0 - jac.u[v]:.17g}\n")
                fh.write(f"{row} {col_b} {jac.u[v]:.17g}\n")
    return path
