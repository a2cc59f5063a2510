"""Analytic scalar fields: exact SDF primitives, unions, and nonlinear warps.

Sign convention: negative inside, positive outside, zero on the surface.
The primitives (sphere, box, torus, plane) are exact signed distance
functions; a union is the pointwise min, which is a valid SDF outside the
shapes and a correct sign field everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AnalyticField",
    "SphereField",
    "BoxField",
    "TorusField",
    "PlaneField",
    "UnionField",
    "SmoothedNoiseField",
    "WarpedField",
    "Line2D",
    "Circle2D",
    "Warped2D",
    "sample_field_to_grid",
    "field_from_spec",
    "warp_zero_crossing",
]

from .grids import ScalarGrid


class AnalyticField:
    """Deterministic scalar field over R^3.  Subclasses implement evaluate()."""

    #: true when values are exact signed distances (lost under warps)
    is_sdf = True

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at points of shape (..., 3); returns shape (...)."""
        raise NotImplementedError

    def __call__(self, points):
        return self.evaluate(np.asarray(points, dtype=np.float64))

    def warped(self, shift: float) -> "WarpedField":
        return WarpedField(base=self, shift=float(shift))


@dataclass(frozen=True)
class SphereField(AnalyticField):
    center: tuple = (0.5, 0.5, 0.5)
    radius: float = 0.35

    def evaluate(self, p):
        d = p - np.asarray(self.center, dtype=np.float64)
        return np.linalg.norm(d, axis=-1) - self.radius


@dataclass(frozen=True)
class BoxField(AnalyticField):
    center: tuple = (0.5, 0.5, 0.5)
    half_extents: tuple = (0.3, 0.3, 0.3)

    def evaluate(self, p):
        q = np.abs(p - np.asarray(self.center, dtype=np.float64)) - np.asarray(
            self.half_extents, dtype=np.float64
        )
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class TorusField(AnalyticField):
    """Torus around an axis-parallel circle of radius major, tube radius minor."""

    center: tuple = (0.5, 0.5, 0.5)
    major: float = 0.3
    minor: float = 0.1
    axis: int = 2

    def evaluate(self, p):
        d = p - np.asarray(self.center, dtype=np.float64)
        ring = [ax for ax in range(3) if ax != self.axis]
        radial = np.hypot(d[..., ring[0]], d[..., ring[1]]) - self.major
        return np.hypot(radial, d[..., self.axis]) - self.minor


@dataclass(frozen=True)
class PlaneField(AnalyticField):
    """Half-space boundary n·x - offset with unit normal (positive side out)."""

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.5

    def evaluate(self, p):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return p @ n - self.offset


@dataclass(frozen=True)
class UnionField(AnalyticField):
    parts: tuple

    def evaluate(self, p):
        vals = [part.evaluate(p) for part in self.parts]
        return np.minimum.reduce(vals)


class SmoothedNoiseField(AnalyticField):
    """Smooth band-limited random field: a seeded sum of sinusoids minus a level.

    Not a distance field, but smooth and generic — useful for stressing the
    extraction tables with every sign configuration.  Negative pockets appear
    where the sinusoid sum exceeds `level`.
    """

    is_sdf = False

    def __init__(self, seed: int, n_waves: int = 8, max_freq: float = 3.0,
                 level: float = 0.4, box=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))):
        rng = np.random.default_rng(seed)
        self.seed = int(seed)
        self.freq = rng.uniform(-max_freq, max_freq, size=(n_waves, 3)) * 2 * math.pi
        self.phase = rng.uniform(0, 2 * math.pi, size=n_waves)
        self.amp = rng.uniform(0.3, 1.0, size=n_waves) / n_waves
        self.level = float(level)
        self.box = (np.asarray(box[0], float), np.asarray(box[1], float))

    def evaluate(self, p):
        phases = p @ self.freq.T + self.phase
        return self.level - np.sin(phases) @ self.amp


@dataclass(frozen=True)
class WarpedField(AnalyticField):
    """base field s remapped through f(s) = exp(s) - 1 - shift."""

    base: AnalyticField
    shift: float

    is_sdf = False

    def evaluate(self, p):
        s = self.base.evaluate(p)
        return np.exp(s) - 1.0 - self.shift


def warp_zero_crossing(shift: float) -> float:
    """The base-field value s at which exp(s) - 1 - shift crosses zero."""
    if shift <= -1:
        raise ValueError("warp has no zero crossing for shift <= -1")
    return math.log1p(shift)


# ---------------------------------------------------------------------------
# 2D fields for the marching squares / triangles demonstrators.
# ---------------------------------------------------------------------------

class Field2D:
    is_sdf = True

    def evaluate(self, p):
        raise NotImplementedError

    def __call__(self, p):
        return self.evaluate(np.asarray(p, dtype=np.float64))

    def warped(self, shift):
        return Warped2D(base=self, shift=float(shift))

    def distance_to_level(self, p, level: float = 0.0):
        """Distance from points to the {field == level} set (exact for SDFs)."""
        return np.abs(self.evaluate(p) - level)


@dataclass(frozen=True)
class Line2D(Field2D):
    """Vertical line x = offset (SDF: x - offset)."""

    offset: float = 0.5

    def evaluate(self, p):
        return p[..., 0] - self.offset


@dataclass(frozen=True)
class Circle2D(Field2D):
    center: tuple = (0.5, 0.5)
    radius: float = 0.3

    def evaluate(self, p):
        d = p - np.asarray(self.center, dtype=np.float64)
        return np.linalg.norm(d, axis=-1) - self.radius


@dataclass(frozen=True)
class Warped2D(Field2D):
    base: Field2D
    shift: float

    is_sdf = False

    def evaluate(self, p):
        return np.exp(self.base.evaluate(p)) - 1.0 - self.shift

    def distance_to_level(self, p, level: float = 0.0):
        # the warp is monotone, so {f == level} is the base level set at
        # s = log(1 + shift + level); base distance semantics still apply
        s = math.log1p(self.shift + level)
        return self.base.distance_to_level(p, level=s)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_field_to_grid(field: AnalyticField, dims, origin, spacing) -> ScalarGrid:
    """Evaluate `field` at every node of the described lattice.

    values[i, j, k] = field(origin + (i, j, k) * spacing), exactly.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 2 for d in dims):
        raise ValueError(f"dims must each be >= 2, got {dims}")
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64) * np.ones(3)
    nx, ny, nz = dims
    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    pts = origin + np.stack([i, j, k], axis=-1) * spacing
    vals = field.evaluate(pts)
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))[0]
        raise ValueError(
            f"field evaluated non-finite at node {tuple(bad)} "
            f"(position {pts[tuple(bad)]})"
        )
    semantics = "sdf" if field.is_sdf else "density"
    if isinstance(field, (WarpedField,)):
        semantics = "sdf"  # warped SDF: sign field, not a metric distance
    return ScalarGrid(dims=dims, origin=origin, spacing=spacing, values=vals,
                      semantics=semantics)


def field_from_spec(spec: dict) -> AnalyticField:
    """Build a field from a plain dict (the CLI's JSON field description)."""
    kind = spec.get("kind")
    if kind == "sphere":
        f = SphereField(center=tuple(spec.get("center", (0.5, 0.5, 0.5))),
                        radius=float(spec.get("radius", 0.35)))
    elif kind == "box":
        f = BoxField(center=tuple(spec.get("center", (0.5, 0.5, 0.5))),
                     half_extents=tuple(spec.get("half_extents", (0.3, 0.3, 0.3))))
    elif kind == "torus":
        f = TorusField(center=tuple(spec.get("center", (0.5, 0.5, 0.5))),
                       major=float(spec.get("major", 0.3)),
                       minor=float(spec.get("minor", 0.1)),
                       axis=int(spec.get("axis", 2)))
    elif kind == "plane":
        f = PlaneField(normal=tuple(spec.get("normal", (0, 0, 1))),
                       offset=float(spec.get("offset", 0.5)))
    elif kind == "union":
        f = UnionField(parts=tuple(field_from_spec(s) for s in spec["parts"]))
    elif kind == "noise":
        f = SmoothedNoiseField(seed=int(spec.get("seed", 0)),
                               n_waves=int(spec.get("n_waves", 8)),
                               max_freq=float(spec.get("max_freq", 3.0)),
                               level=float(spec.get("level", 0.4)))
    else:
        raise ValueError(f"unknown field kind {kind!r}")
    if "warp_shift" in spec:
        f = f.warped(float(spec["warp_shift"]))
    return f


# ---------------------------------------------------------------------------
# Surface point clouds (optimization targets)
# ---------------------------------------------------------------------------

def sphere_surface_points(n, center=(0.5, 0.5, 0.5), radius=0.35, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v


def torus_surface_points(n, center=(0.5, 0.5, 0.5), major=0.3, minor=0.1,
                         axis=2, seed=0):
    rng = np.random.default_rng(seed)
    # rejection on the ring angle keeps the sampling area-uniform
    pts = np.empty((0, 3))
    while len(pts) < n:
        m = 2 * (n - len(pts)) + 16
        phi = rng.uniform(0, 2 * math.pi, m)
        theta = rng.uniform(0, 2 * math.pi, m)
        keep = rng.uniform(0, 1, m) < (major + minor * np.cos(theta)) / (major + minor)
        phi, theta = phi[keep], theta[keep]
        ring = major + minor * np.cos(theta)
        local = np.stack([ring * np.cos(phi), ring * np.sin(phi),
                          minor * np.sin(theta)], axis=1)
        pts = np.vstack([pts, local])
    pts = pts[:n]
    order = [0, 1, 2]
    if axis != 2:
        order = {0: [2, 1, 0], 1: [0, 2, 1]}[axis]
        pts = pts[:, order]
    return np.asarray(center) + pts


def box_surface_points(n, center=(0.5, 0.5, 0.5), half_extents=(0.3, 0.3, 0.3),
                       seed=0):
    rng = np.random.default_rng(seed)
    h = np.asarray(half_extents, dtype=np.float64)
    areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
    areas = np.repeat(areas, 2)  # two faces per axis
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1, 1, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        m = face == f
        ax = f // 2
        sgn = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != ax]
        pts[m, ax] = sgn * h[ax]
        pts[m, others[0]] = uv[m, 0] * h[others[0]]
        pts[m, others[1]] = uv[m, 1] * h[others[1]]
    return np.asarray(center) + pts
