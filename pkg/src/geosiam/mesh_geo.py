"""Triangle surface meshes, edge-graph geodesics and target coordinates."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

LEFT = 0
RIGHT = 1

# left-right axis negated for right-hemisphere coordinate targets
MIRROR_AXIS = 0


class MeshError(ValueError):
    """Raised for malformed mesh files or meshes violating their invariants."""


class HemisphereError(ValueError):
    """Raised when a geodesic query spans the two hemispheres."""


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Immutable triangle mesh with inflated coordinates and per-vertex labels.

    ``vertices`` and ``inflated`` are ``(n, 3)`` float64 arrays in mm,
    ``triangles`` is ``(m, 3)`` int64, ``hemisphere`` and ``region`` are
    ``(n,)`` int64.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    inflated: np.ndarray
    hemisphere: np.ndarray
    region: np.ndarray

    def __post_init__(self):
        for name in ("vertices", "triangles", "inflated", "hemisphere", "region"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        validate_mesh(self)
        object.__setattr__(self, "_graph", None)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted ``(k, 2)`` array with i < j."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    @property
    def graph(self) -> sparse.csr_matrix:
        """Symmetric sparse edge graph weighted by Euclidean edge length."""
        if self._graph is None:
            e = self.edges
            w = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
            n = self.n_vertices
            g = sparse.coo_matrix(
                (np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
                shape=(n, n),
            ).tocsr()
            object.__setattr__(self, "_graph", g)
        return self._graph

    def same_fields(self, other: "SurfaceMesh") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("vertices", "triangles", "inflated", "hemisphere", "region")
        )


@dataclass(frozen=True)
class GeodesicResult:
    distance: float
    path: list


def validate_mesh(mesh: SurfaceMesh) -> None:
    v, t = mesh.vertices, mesh.triangles
    n = len(v)
    if v.ndim != 2 or v.shape[1] != 3:
        raise MeshError(f"vertices must be (n, 3), got {v.shape}")
    if t.ndim != 2 or t.shape[1] != 3:
        raise MeshError(f"triangles must be (m, 3), got {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise MeshError("triangle indices must be integers")
    for name in ("inflated", "hemisphere", "region"):
        if len(getattr(mesh, name)) != n:
            raise MeshError(f"{name} has {len(getattr(mesh, name))} entries for {n} vertices")
    if mesh.inflated.shape != (n, 3):
        raise MeshError("inflated must be (n, 3)")
    if not np.all(np.isfinite(v)) or not np.all(np.isfinite(mesh.inflated)):
        raise MeshError("non-finite vertex coordinates")
    if len(t):
        if t.min() < 0 or t.max() >= n:
            bad = int(t.max()) if t.max() >= n else int(t.min())
            raise MeshError(f"triangle references vertex index {bad} out of range for {n} vertices")
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise MeshError("degenerate triangle with repeated vertex index")
    if not np.all(np.isin(mesh.hemisphere, (LEFT, RIGHT))):
        raise MeshError("hemisphere tags must be 0 (LEFT) or 1 (RIGHT)")
    if np.any(mesh.region < 0):
        raise MeshError("region ids must be non-negative")
    h = mesh.hemisphere
    if len(t) and np.any((h[t[:, 0]] != h[t[:, 1]]) | (h[t[:, 1]] != h[t[:, 2]])):
        raise MeshError("triangle spans two hemispheres")
    e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1) if len(t) else np.zeros((0, 2), int)
    for hemi in (LEFT, RIGHT):
        idx = np.flatnonzero(h == hemi)
        if len(idx) <= 1:
            continue
        sel = (h[e[:, 0]] == hemi) if len(e) else np.zeros(0, bool)
        g = sparse.coo_matrix((np.ones(sel.sum()), (e[sel, 0], e[sel, 1])), shape=(n, n))
        sub = g.tocsr()[idx][:, idx]
        ncomp, _ = csgraph.connected_components(sub, directed=False)
        if ncomp != 1:
            name = "LEFT" if hemi == LEFT else "RIGHT"
            raise MeshError(f"{name} hemisphere edge graph has {ncomp} components")


def save_mesh(mesh: SurfaceMesh, path) -> None:
    lines = [f"meshv1 {mesh.n_vertices} {mesh.n_triangles}"]
    for p, q, h, r in zip(mesh.vertices, mesh.inflated, mesh.hemisphere, mesh.region):
        coords = " ".join(repr(float(c)) for c in (*p, *q))
        lines.append(f"v {coords} {int(h)} {int(r)}")
    for i, j, k in mesh.triangles:
        lines.append(f"t {int(i)} {int(j)} {int(k)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mesh(path) -> SurfaceMesh:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise MeshError("empty mesh file")
    head = text[0].split()
    if len(head) != 3 or head[0] != "meshv1":
        raise MeshError(f"line 1: expected 'meshv1 <nv> <nt>', got {text[0]!r}")
    try:
        nv, nt = int(head[1]), int(head[2])
    except ValueError as exc:
        raise MeshError(f"line 1: {exc}") from None
    body = [ln for ln in text[1:] if ln.strip()]
    if len(body) != nv + nt:
        raise MeshError(f"expected {nv + nt} records, found {len(body)}")
    verts = np.empty((nv, 3))
    infl = np.empty((nv, 3))
    hemi = np.empty(nv, dtype=np.int64)
    region = np.empty(nv, dtype=np.int64)
    tris = np.empty((nt, 3), dtype=np.int64)
    for lineno, ln in enumerate(body, start=2):
        parts = ln.split()
        k = lineno - 2
        try:
            if k < nv:
                if parts[0] != "v" or len(parts) != 9:
                    raise MeshError(f"line {lineno}: malformed vertex record {ln!r}")
                vals = [float(x) for x in parts[1:7]]
                verts[k] = vals[:3]
                infl[k] = vals[3:]
                hemi[k] = int(parts[7])
                region[k] = int(parts[8])
            else:
                if parts[0] != "t" or len(parts) != 4:
                    raise MeshError(f"line {lineno}: malformed triangle record {ln!r}")
                tris[k - nv] = [int(x) for x in parts[1:]]
        except ValueError as exc:
            if isinstance(exc, MeshError):
                raise
            raise MeshError(f"line {lineno}: {exc}") from None
    return SurfaceMesh(verts, tris, infl, hemi, region)


def nearest_vertex(mesh: SurfaceMesh, p) -> int:
    """Closest vertex by Euclidean distance; ties go to the lowest index."""
    d2 = np.sum((mesh.vertices - np.asarray(p, dtype=float)) ** 2, axis=1)
    return int(np.argmin(d2))


def nearest_vertices(mesh: SurfaceMesh, points) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty(len(points), dtype=np.int64)
    for start in range(0, len(points), 256):
        chunk = points[start:start + 256]
        d2 = np.sum((chunk[:, None, :] - mesh.vertices[None]) ** 2, axis=2)
        out[start:start + 256] = np.argmin(d2, axis=1)
    return out


def _check_same_hemisphere(mesh, a, b):
    if mesh.hemisphere[a] != mesh.hemisphere[b]:
        raise HemisphereError(f"vertices {a} and {b} lie on different hemispheres")


def geodesic_distance(mesh: SurfaceMesh, a: int, b: int) -> GeodesicResult:
    """Dijkstra shortest path over the edge graph, stopping once ``b`` settles."""
    n = mesh.n_vertices
    if not (0 <= a < n and 0 <= b < n):
        raise IndexError(f"vertex id out of range for {n} vertices")
    _check_same_hemisphere(mesh, a, b)
    if a == b:
        return GeodesicResult(0.0, [a])
    g = mesh.graph
    indptr, indices, weights = g.indptr, g.indices, g.data
    dist = {a: 0.0}
    prev = {}
    done = set()
    heap = [(0.0, a)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == b:
            break
        for k in range(indptr[u], indptr[u + 1]):
            w = indices[k]
            nd = d + weights[k]
            # strict improvement, or equal cost via a lower-index predecessor
            if w not in dist or nd < dist[w] or (nd == dist[w] and u < prev.get(w, u + 1)):
                dist[w] = nd
                prev[w] = u
                heapq.heappush(heap, (nd, w))
    path = [b]
    while path[-1] != a:
        path.append(prev[path[-1]])
    path.reverse()
    return GeodesicResult(float(dist[b]), path)


def geodesic_distances(mesh: SurfaceMesh, sources, targets, chunk: int = 256) -> np.ndarray:
    """Batch edge-graph distances for vertex pairs ``(sources[i], targets[i])``.

    Pairs sharing a source reuse one single-source sweep.
    """
    sources = np.asarray(sources, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(mesh.hemisphere[sources] != mesh.hemisphere[targets]):
        i = int(np.flatnonzero(mesh.hemisphere[sources] != mesh.hemisphere[targets])[0])
        raise HemisphereError(f"pair {i} ({sources[i]}, {targets[i]}) crosses hemispheres")
    out = np.empty(len(sources))
    uniq, inv = np.unique(sources, return_inverse=True)
    for start in range(0, len(uniq), chunk):
        block = uniq[start:start + chunk]
        dm = csgraph.dijkstra(mesh.graph, directed=False, indices=block)
        sel = (inv >= start) & (inv < start + len(block))
        out[sel] = dm[inv[sel] - start, targets[sel]]
    return out


def geodesic_between_points(mesh: SurfaceMesh, p1, p2) -> float:
    a = nearest_vertex(mesh, p1)
    b = nearest_vertex(mesh, p2)
    return geodesic_distance(mesh, a, b).distance


def target_coordinate(mesh: SurfaceMesh, v: int, axis: int = MIRROR_AXIS) -> np.ndarray:
    c = np.array(mesh.inflated[v], dtype=float)
    if mesh.hemisphere[v] == RIGHT:
        c[axis] = -c[axis]
    return c


def target_coordinates(mesh: SurfaceMesh, vs, axis: int = MIRROR_AXIS) -> np.ndarray:
    vs = np.asarray(vs, dtype=np.int64)
    c = np.array(mesh.inflated[vs], dtype=float)
    c[mesh.hemisphere[vs] == RIGHT, axis] *= -1
    return c


def vertex_normals(mesh: SurfaceMesh) -> np.ndarray:
    """Area-weighted vertex normals; rows of isolated vertices are zero."""
    v, t = mesh.vertices, mesh.triangles
    # cross product magnitude is twice the area, so summing it weights by area
    fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, t[:, k], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 0)


def vertex_normal(mesh: SurfaceMesh, v: int) -> np.ndarray:
    incident = np.any(mesh.triangles == v, axis=1)
    if not incident.any():
        raise MeshError(f"vertex {v} belongs to no triangle")
    t = mesh.triangles[incident]
    p = mesh.vertices
    n = np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]]).sum(axis=0)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise MeshError(f"vertex {v} has zero-area neighbourhood")
    return n / norm
