"""Mesh certification: watertightness, manifold connectivity, self-intersection.

Definitions enforced here:
  * watertight: every edge is shared by exactly two faces;
  * manifold connectivity: every edge bounds at most two faces and the faces
    around each vertex form a single closed or open fan;
  * self-intersection freedom: no two triangles that share neither a vertex
    index nor an edge intersect each other.

Certification only — nothing is repaired.  Near-degenerate geometric
predicates fall back from floating point to exact rational arithmetic when a
determinant falls below EPS_PREDICATE relative to the local scale.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .mesh import IndexedMesh

__all__ = ["QualityReport", "check_watertight", "check_manifold", "certify",
           "self_intersections", "self_intersections_brute"]

EPS_PREDICATE = 1e-12
MAX_OFFENDERS = 16


@dataclass(frozen=True)
class QualityReport:
    watertight: bool
    manifold_connectivity: bool
    self_intersection_free: bool | None
    euler_characteristic: int
    boundary_edge_count: int
    nonmanifold_edge_count: int
    nonmanifold_vertex_count: int
    degenerate_triangle_count: int
    consistently_oriented: bool
    offending_elements: dict = field(default_factory=dict)

    @property
    def manifold(self) -> bool:
        return bool(self.manifold_connectivity
                    and (self.self_intersection_free is not False))

    def all_ok(self) -> bool:
        return bool(self.watertight and self.manifold_connectivity
                    and self.self_intersection_free is not False)

    def to_dict(self) -> dict:
        return {
            "watertight": self.watertight,
            "manifold_connectivity": self.manifold_connectivity,
            "self_intersection_free": self.self_intersection_free,
            "euler_characteristic": self.euler_characteristic,
            "boundary_edge_count": self.boundary_edge_count,
            "nonmanifold_edge_count": self.nonmanifold_edge_count,
            "nonmanifold_vertex_count": self.nonmanifold_vertex_count,
            "degenerate_triangle_count": self.degenerate_triangle_count,
            "consistently_oriented": self.consistently_oriented,
            "offending_elements": {k: list(map(list, v)) if v and isinstance(v[0], tuple)
                                   else list(v)
                                   for k, v in self.offending_elements.items()},
        }


def _edge_census(mesh: IndexedMesh):
    """Undirected edge counts including edges of degenerate triangles."""
    t = mesh.triangles
    if len(t) == 0:
        return (np.empty((0, 2), dtype=np.int64), np.empty(0, dtype=np.int64),
                np.empty((0, 2), dtype=np.int64))
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    edges, counts = np.unique(und, axis=0, return_counts=True)
    return edges, counts, directed


def check_watertight(mesh: IndexedMesh) -> QualityReport:
    """Edge census over unordered endpoint pairs; watertight iff all counts == 2."""
    t = mesh.triangles
    degenerate = np.nonzero((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2])
                            | (t[:, 0] == t[:, 2]))[0] if len(t) else np.empty(0, int)
    edges, counts, directed = _edge_census(mesh)
    boundary = edges[counts == 1]
    nonmanifold = edges[counts >= 3]
    # orientation: each undirected edge of a clean mesh appears once per direction
    oriented = True
    if len(directed):
        d_unique, d_counts = np.unique(directed, axis=0, return_counts=True)
        oriented = bool(np.all(d_counts == 1)) and len(d_unique) == 2 * np.count_nonzero(counts == 2) + np.count_nonzero(counts == 1)
    used = np.unique(t) if len(t) else np.empty(0)
    euler = int(len(used) - len(edges) + len(t))
    offenders = {}
    if len(boundary):
        offenders["boundary_edges"] = [tuple(map(int, e)) for e in boundary[:MAX_OFFENDERS]]
    if len(nonmanifold):
        offenders["nonmanifold_edges"] = [tuple(map(int, e)) for e in nonmanifold[:MAX_OFFENDERS]]
    if len(degenerate):
        offenders["degenerate_triangles"] = [int(i) for i in degenerate[:MAX_OFFENDERS]]
    watertight = (len(boundary) == 0 and len(nonmanifold) == 0
                  and len(degenerate) == 0 and len(t) > 0)
    return QualityReport(
        watertight=watertight,
        manifold_connectivity=len(nonmanifold) == 0,
        self_intersection_free=None,
        euler_characteristic=euler,
        boundary_edge_count=int(len(boundary)),
        nonmanifold_edge_count=int(len(nonmanifold)),
        nonmanifold_vertex_count=0,
        degenerate_triangle_count=int(len(degenerate)),
        consistently_oriented=oriented,
        offending_elements=offenders,
    )


def _vertex_fans_ok(mesh: IndexedMesh):
    """Vertices whose incident faces do not form a single open or closed fan."""
    t = mesh.triangles
    if len(t) == 0:
        return []
    v2t = defaultdict(list)
    for ti, tri in enumerate(t):
        for v in tri:
            v2t[int(v)].append(ti)
    bad = []
    for v, tris in v2t.items():
        # wedge multigraph: for each incident triangle, an edge between the
        # two neighbor vertices; a fan is a single simple path or cycle
        link_count = defaultdict(int)
        adj = defaultdict(list)
        ok = True
        for ti in tris:
            others = [int(x) for x in t[ti] if x != v]
            if len(others) != 2:
                ok = False  # degenerate triangle at v
                break
            for w in others:
                link_count[w] += 1
            adj[others[0]].append(ti)
            adj[others[1]].append(ti)
        if ok:
            # every neighbor appears in at most two wedges
            if any(c > 2 for c in link_count.values()):
                ok = False
        if ok:
            odd = sum(1 for c in link_count.values() if c == 1)
            if odd not in (0, 2):
                ok = False
        if ok and len(tris) > 1:
            # connectivity walk across shared wedge links
            seen = {tris[0]}
            stack = [tris[0]]
            while stack:
                cur = stack.pop()
                for w in (int(x) for x in t[cur] if x != v):
                    for nxt in adj[w]:
                        if nxt not in seen:
                            seen.add(nxt)
                            stack.append(nxt)
            ok = len(seen) == len(tris)
        if not ok:
            bad.append(v)
    return sorted(bad)


def check_manifold(mesh: IndexedMesh, self_intersection: bool = True) -> QualityReport:
    """Connectivity manifoldness plus (optionally) self-intersection freedom."""
    report = check_watertight(mesh)
    bad_vertices = _vertex_fans_ok(mesh)
    offenders = dict(report.offending_elements)
    if bad_vertices:
        offenders["nonmanifold_vertices"] = bad_vertices[:MAX_OFFENDERS]
    connectivity = (report.nonmanifold_edge_count == 0 and not bad_vertices
                    and report.degenerate_triangle_count == 0)
    free = None
    if self_intersection:
        pairs = self_intersections(mesh)
        free = len(pairs) == 0
        if pairs:
            offenders["intersecting_pairs"] = [tuple(map(int, p)) for p in pairs[:MAX_OFFENDERS]]
    return QualityReport(
        watertight=report.watertight,
        manifold_connectivity=connectivity,
        self_intersection_free=free,
        euler_characteristic=report.euler_characteristic,
        boundary_edge_count=report.boundary_edge_count,
        nonmanifold_edge_count=report.nonmanifold_edge_count,
        nonmanifold_vertex_count=len(bad_vertices),
        degenerate_triangle_count=report.degenerate_triangle_count,
        consistently_oriented=report.consistently_oriented,
        offending_elements=offenders,
    )


def certify(mesh: IndexedMesh, self_intersection: bool = True) -> QualityReport:
    """Full certification; the one-stop entry point."""
    return check_manifold(mesh, self_intersection=self_intersection)


# ---------------------------------------------------------------------------
# Self-intersection: uniform-grid broad phase + Moller narrow phase with an
# exact rational fallback for near-degenerate contacts.
# ---------------------------------------------------------------------------

def _candidate_pairs(mesh: IndexedMesh):
    """Triangle pairs with overlapping AABBs, excluding index-sharing pairs."""
    t = mesh.triangles
    v = mesh.vertices
    nt = len(t)
    if nt < 2:
        return np.empty((0, 2), dtype=np.int64)
    corners = v[t]                       # (nt, 3, 3)
    lo = corners.min(axis=1)
    hi = corners.max(axis=1)
    span = hi - lo
    cell = max(float(np.median(span[span.max(axis=1) > 0].max(axis=1))
                     if np.any(span.max(axis=1) > 0) else 1.0), 1e-12)
    lo_idx = np.floor(lo / cell).astype(np.int64)
    hi_idx = np.floor(hi / cell).astype(np.int64)
    buckets = defaultdict(list)
    for ti in range(nt):
        for ix in range(lo_idx[ti, 0], hi_idx[ti, 0] + 1):
            for iy in range(lo_idx[ti, 1], hi_idx[ti, 1] + 1):
                for iz in range(lo_idx[ti, 2], hi_idx[ti, 2] + 1):
                    buckets[(ix, iy, iz)].append(ti)
    pairs = set()
    for members in buckets.values():
        if len(members) < 2:
            continue
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                a, b = members[i], members[j]
                if a > b:
                    a, b = b, a
                pairs.add((a, b))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    p = np.array(sorted(pairs), dtype=np.int64)
    # AABB overlap filter
    a, b = p[:, 0], p[:, 1]
    overlap = np.all((lo[a] <= hi[b]) & (lo[b] <= hi[a]), axis=1)
    p = p[overlap]
    # exclude pairs sharing any vertex index (covers shared edges too)
    ta, tb = t[p[:, 0]], t[p[:, 1]]
    shared = np.zeros(len(p), dtype=bool)
    for i in range(3):
        for j in range(3):
            shared |= ta[:, i] == tb[:, j]
    return p[~shared]


def self_intersections(mesh: IndexedMesh):
    """Sorted list of intersecting triangle-id pairs (accelerated)."""
    pairs = _candidate_pairs(mesh)
    return _narrow_phase(mesh, pairs)


def self_intersections_brute(mesh: IndexedMesh):
    """O(n^2) oracle: every non-adjacent pair is examined.

    Pairs whose bounding boxes are disjoint cannot intersect and are settled
    by the (vectorized) box test; the rest go to the same narrow phase as the
    accelerated path, so only the pair enumeration differs.
    """
    t = mesh.triangles
    nt = len(t)
    idx = np.array([(i, j) for i in range(nt) for j in range(i + 1, nt)],
                   dtype=np.int64).reshape(-1, 2)
    if len(idx):
        ta, tb = t[idx[:, 0]], t[idx[:, 1]]
        shared = np.zeros(len(idx), dtype=bool)
        for i in range(3):
            for j in range(3):
                shared |= ta[:, i] == tb[:, j]
        idx = idx[~shared]
    if len(idx):
        corners = mesh.vertices[t]
        lo = corners.min(axis=1)
        hi = corners.max(axis=1)
        a, b = idx[:, 0], idx[:, 1]
        overlap = np.all((lo[a] <= hi[b]) & (lo[b] <= hi[a]), axis=1)
        idx = idx[overlap]
    return _narrow_phase(mesh, idx)


def _narrow_phase(mesh: IndexedMesh, pairs: np.ndarray):
    if len(pairs) == 0:
        return []
    v = mesh.vertices
    t = mesh.triangles
    scale = float(np.max(np.abs(v))) if len(v) else 1.0
    eps = EPS_PREDICATE * max(scale, 1.0)
    out = []
    for a, b in pairs:
        r = _tri_tri_intersect(v[t[a]], v[t[b]], eps)
        if r:
            out.append((int(a), int(b)))
    return sorted(out)


def _tri_tri_intersect(tri1, tri2, eps) -> bool:
    """Moller interval test; returns True only for genuine penetration or
    coplanar area overlap (touching within eps is not flagged)."""
    d1, s1 = _signed_distances(tri1, tri2, eps)
    if np.all(s1 == 0):
        return _coplanar_overlap(tri1, tri2, eps)
    if np.all(s1 >= 0) or np.all(s1 <= 0):
        return False
    d2, s2 = _signed_distances(tri2, tri1, eps)
    if np.all(s2 == 0):
        return _coplanar_overlap(tri1, tri2, eps)
    if np.all(s2 >= 0) or np.all(s2 <= 0):
        return False
    n1 = np.cross(tri1[1] - tri1[0], tri1[2] - tri1[0])
    n2 = np.cross(tri2[1] - tri2[0], tri2[2] - tri2[0])
    direction = np.cross(n1, n2)
    ax = int(np.argmax(np.abs(direction)))
    if abs(direction[ax]) == 0.0:
        # degenerate direction with straddling signs: defer to coplanar logic
        return _coplanar_overlap(tri1, tri2, eps)
    i1 = _interval(tri1[:, ax], d1, s1)
    i2 = _interval(tri2[:, ax], d2, s2)
    if i1 is None or i2 is None:
        return False
    lo = max(i1[0], i2[0])
    hi = min(i1[1], i2[1])
    return hi - lo > eps


def _signed_distances(tri, other, eps):
    """Signed distances of tri's vertices to other's plane, plus their signs.

    Float distances are kept for interval interpolation; entries within eps
    of zero have their sign re-decided by exact rational arithmetic (a zero
    sign marks a vertex exactly on the plane)."""
    n = np.cross(other[1] - other[0], other[2] - other[0])
    d = (tri - other[0]) @ n
    signs = np.sign(d).astype(np.int64)
    small = np.abs(d) <= eps * max(float(np.linalg.norm(n)), 1e-300)
    for i in np.nonzero(small)[0]:
        signs[i] = _orient3d_exact(other[0], other[1], other[2], tri[i])
        if signs[i] == 0:
            d[i] = 0.0
    return d, signs


def _orient3d_exact(a, b, c, d):
    """Exact sign of det(b-a, c-a, d-a) via Fractions (floats are exact)."""
    fa = [Fraction(float(x)) for x in a]
    fb = [Fraction(float(x)) for x in b]
    fc = [Fraction(float(x)) for x in c]
    fd = [Fraction(float(x)) for x in d]
    u = [fb[i] - fa[i] for i in range(3)]
    v = [fc[i] - fa[i] for i in range(3)]
    w = [fd[i] - fa[i] for i in range(3)]
    det = (u[0] * (v[1] * w[2] - v[2] * w[1])
           - u[1] * (v[0] * w[2] - v[2] * w[0])
           + u[2] * (v[0] * w[1] - v[1] * w[0]))
    return (det > 0) - (det < 0)


def _interval(proj, d, signs):
    """Interval of the triangle's intersection with the other plane along the
    projection axis.  Crossing classification uses the (exact) signs; the
    interpolation parameter uses the float distances."""
    ts = []
    for i in range(3):
        for j in range(i + 1, 3):
            if signs[i] * signs[j] < 0:
                denom = d[i] - d[j]
                t = proj[i] if denom == 0.0 else proj[i] + (proj[j] - proj[i]) * d[i] / denom
                ts.append(t)
    for i in range(3):
        if signs[i] == 0:
            ts.append(proj[i])
    if len(ts) < 2:
        if len(ts) == 1:
            ts.append(ts[0])
        else:
            return None
    return min(ts), max(ts)


def _coplanar_overlap(tri1, tri2, eps) -> bool:
    """2D overlap of coplanar triangles: any proper edge crossing or full
    containment counts; touching at shared boundary does not."""
    n = np.cross(tri1[1] - tri1[0], tri1[2] - tri1[0])
    ax = int(np.argmax(np.abs(n)))
    keep = [i for i in range(3) if i != ax]
    a = tri1[:, keep]
    b = tri2[:, keep]
    for i in range(3):
        for j in range(3):
            if _segments_cross(a[i], a[(i + 1) % 3], b[j], b[(j + 1) % 3], eps):
                return True
    return _point_in_triangle(b.mean(axis=0), a, eps) or \
        _point_in_triangle(a.mean(axis=0), b, eps)


def _orient2d(a, b, c, eps):
    det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if abs(det) <= eps:
        fa, fb, fc = ([Fraction(float(x)) for x in p] for p in (a, b, c))
        d = (fb[0] - fa[0]) * (fc[1] - fa[1]) - (fb[1] - fa[1]) * (fc[0] - fa[0])
        return (d > 0) - (d < 0)
    return 1 if det > 0 else -1


def _segments_cross(p1, p2, q1, q2, eps) -> bool:
    """Proper crossing only: each segment strictly straddles the other."""
    o1 = _orient2d(p1, p2, q1, eps)
    o2 = _orient2d(p1, p2, q2, eps)
    o3 = _orient2d(q1, q2, p1, eps)
    o4 = _orient2d(q1, q2, p2, eps)
    return o1 * o2 < 0 and o3 * o4 < 0


def _point_in_triangle(p, tri, eps) -> bool:
    o1 = _orient2d(tri[0], tri[1], p, eps)
    o2 = _orient2d(tri[1], tri[2], p, eps)
    o3 = _orient2d(tri[2], tri[0], p, eps)
    return (o1 > 0 and o2 > 0 and o3 > 0) or (o1 < 0 and o2 < 0 and o3 < 0)
