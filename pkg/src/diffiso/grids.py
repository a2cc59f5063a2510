"""Regular scalar grids and their deformable variant.

Layout convention: grids are node-centered with x-fastest ordering, i.e.
the flat index of node (i, j, k) is ``i + nx*j + nx*ny*k``.  In memory the
values live in an ``(nx, ny, nz)`` float64 array; serialization uses
``ravel(order="F")`` so the on-disk byte order matches the stated layout
bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "ScalarGrid",
    "DeformableGrid",
    "apply_nonlinear_warp",
    "density_to_opacity",
    "save_grid",
    "load_grid",
    "WARP_SATURATION_CAP",
]

# Saturation cap for exp() in warps: half of the largest finite double.
WARP_SATURATION_CAP = np.finfo(np.float64).max / 2.0

VALUE_SEMANTICS = ("sdf", "density", "opacity-minus-threshold")


def _as_triple(x, dtype=float):
    arr = np.asarray(x, dtype=dtype).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, 3)
    if arr.size != 3:
        raise ValueError(f"expected scalar or 3-vector, got shape {np.asarray(x).shape}")
    return arr


@dataclass(frozen=True)
class ScalarGrid:
    """Scalar samples on a regular 3D node lattice.

    dims are node counts per axis (each >= 2); spacing is the cell size in
    world units.  values must be finite.
    """

    dims: tuple[int, int, int]
    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray
    semantics: str = "sdf"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise ValueError(f"dims must be three counts >= 2, got {self.dims}")
        origin = _as_triple(self.origin)
        spacing = _as_triple(self.spacing)
        if np.any(spacing <= 0):
            raise ValueError(f"spacing must be positive, got {spacing}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != dims:
            values = values.reshape(dims)
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise ValueError(f"non-finite grid value at node {tuple(bad)}")
        if self.semantics not in VALUE_SEMANTICS:
            raise ValueError(f"unknown value semantics {self.semantics!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "values", values)

    @property
    def node_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def node_positions(self) -> np.ndarray:
        """All node positions as an (nx, ny, nz, 3) array."""
        nx, ny, nz = self.dims
        i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([i, j, k], axis=-1).astype(np.float64)
        return self.origin + idx * self.spacing

    def with_values(self, values, semantics=None) -> "ScalarGrid":
        return replace(self, values=np.asarray(values, dtype=np.float64),
                       semantics=semantics or self.semantics)


@dataclass(frozen=True)
class DeformableGrid:
    """A ScalarGrid whose nodes carry displacement vectors.

    Each displacement component must stay strictly below half a cell so no
    cell can invert.
    """

    base: ScalarGrid
    displacement: np.ndarray

    def __post_init__(self):
        disp = np.asarray(self.displacement, dtype=np.float64)
        expected = self.base.dims + (3,)
        if disp.shape != expected:
            disp = disp.reshape(expected)
        if not np.all(np.isfinite(disp)):
            raise ValueError("non-finite displacement")
        limit = 0.5 * self.base.spacing
        if np.any(np.abs(disp) >= limit):
            worst = np.unravel_index(np.argmax(np.abs(disp / limit)), disp.shape)
            raise ValueError(
                f"displacement component at node {worst[:3]} axis {worst[3]} "
                f"reaches half a cell; clamp first"
            )
        object.__setattr__(self, "displacement", disp)

    @classmethod
    def undisplaced(cls, base: ScalarGrid) -> "DeformableGrid":
        return cls(base=base, displacement=np.zeros(base.dims + (3,)))

    @property
    def dims(self):
        return self.base.dims

    @property
    def values(self):
        return self.base.values

    def node_positions(self) -> np.ndarray:
        return self.base.node_positions() + self.displacement


def apply_nonlinear_warp(grid: ScalarGrid, shift: float) -> ScalarGrid:
    """Replace every value s by exp(s) - 1 - shift.

    exp() overflow saturates at WARP_SATURATION_CAP; the number of saturated
    nodes is flagged in the result metadata, never silently dropped.
    """
    s = grid.values
    with np.errstate(over="ignore"):
        e = np.exp(s)
    saturated = int(np.count_nonzero(~np.isfinite(e) | (e > WARP_SATURATION_CAP)))
    e = np.where(np.isfinite(e), np.minimum(e, WARP_SATURATION_CAP), WARP_SATURATION_CAP)
    meta = dict(grid.metadata)
    meta["warp_shift"] = float(shift)
    if saturated:
        meta["warp_saturated_nodes"] = saturated
    out = e - 1.0 - float(shift)
    return replace(grid, values=out, metadata=meta)


def density_to_opacity(grid: ScalarGrid, step: float, threshold: float) -> ScalarGrid:
    """Convert per-node densities to (opacity - threshold) values.

    alpha = 1 - exp(-sigma * step); the output stores alpha - threshold so it
    can feed isosurface extraction at level zero.
    """
    step = float(step)
    threshold = float(threshold)
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    sigma = grid.values
    if np.any(sigma < 0):
        bad = tuple(int(i) for i in np.argwhere(sigma < 0)[0])
        raise ValueError(f"negative density at node {bad}")
    alpha = 1.0 - np.exp(-sigma * step)
    meta = dict(grid.metadata)
    meta.update({"opacity_step": step, "opacity_threshold": threshold})
    return replace(grid, values=alpha - threshold,
                   semantics="opacity-minus-threshold", metadata=meta)


# ---------------------------------------------------------------------------
# File format: JSON header + raw little-endian sidecar.
# ---------------------------------------------------------------------------

def save_grid(grid: ScalarGrid | DeformableGrid, path) -> Path:
    """Write a grid as <path>.json header plus <path>.raw value block.

    The raw block holds the values x-fastest in little-endian order; for a
    DeformableGrid the displacement block follows the values, xyz per node.
    """
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    base = grid.base if isinstance(grid, DeformableGrid) else grid
    precision = base.metadata.get("precision", "float64")
    if precision not in ("float32", "float64"):
        raise ValueError(f"unknown precision tag {precision!r}")
    dtype = np.dtype("<f4") if precision == "float32" else np.dtype("<f8")

    header = {
        "dims": list(base.dims),
        "origin": base.origin.tolist(),
        "spacing": base.spacing.tolist(),
        "precision": precision,
        "value_semantics": base.semantics,
        "layout": "node-centered, x-fastest",
        "sidecar": path.name + ".raw",
        "has_displacement": isinstance(grid, DeformableGrid),
    }
    blocks = [np.ascontiguousarray(base.values.ravel(order="F"), dtype=dtype)]
    if isinstance(grid, DeformableGrid):
        # x-fastest node order, xyz interleaved per node
        disp = grid.displacement.transpose(2, 1, 0, 3).reshape(-1, 3)
        blocks.append(np.ascontiguousarray(disp.ravel(), dtype=dtype))
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(header, fh, indent=2)
        fh.write("\n")
    with open(path.with_suffix(".raw"), "wb") as fh:
        for block in blocks:
            fh.write(block.tobytes())
    return path.with_suffix(".json")


def load_grid(path) -> ScalarGrid | DeformableGrid:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    with open(path) as fh:
        header = json.load(fh)
    dims = tuple(header["dims"])
    dtype = np.dtype("<f4") if header["precision"] == "float32" else np.dtype("<f8")
    raw = np.fromfile(path.parent / header["sidecar"], dtype=dtype)
    n = dims[0] * dims[1] * dims[2]
    values = raw[:n].astype(np.float64).reshape(dims, order="F")
    grid = ScalarGrid(
        dims=dims,
        origin=np.array(header["origin"]),
        spacing=np.array(header["spacing"]),
        values=values,
        semantics=header["value_semantics"],
        metadata={"precision": header["precision"]},
    )
    if header.get("has_displacement"):
        disp = raw[n:n + 3 * n].astype(np.float64).reshape(n, 3)
        disp = disp.reshape(dims[2], dims[1], dims[0], 3).transpose(2, 1, 0, 3)
        return DeformableGrid(base=grid, displacement=disp)
    return grid
