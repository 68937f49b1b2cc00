"""Triangle meshes: normals, OBJ files, ray casting and closest-point queries."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int, counter-clockwise seen from outside

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self, normalise: bool = True) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        if normalise:
            n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def vertex_normals(self) -> np.ndarray:
        fn = self.face_normals(normalise=False)  # area weighted
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-300)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces)


def write_obj(path, mesh: Mesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def intersect_rays(origins, directions, triangles, both_sides: bool = False):
    """Watertight ray/triangle intersection (Woop et al. 2013) for every ray-triangle pair.

    ``origins``/``directions`` are ``(R, 3)`` (or a single shared origin), ``triangles``
    ``(F, 3, 3)``.  Returns ``(t, bary)`` with ``t`` of shape ``(R, F)`` (``inf`` on a
    miss, measured in units of the direction vector) and barycentrics ``(R, F, 3)``
    weighting the triangle's three vertices.  Hits need ``t > 0`` unless
    ``both_sides`` is set, in which case any ``t != 0`` counts.
    """
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    o = np.broadcast_to(np.asarray(origins, dtype=float), d.shape)
    tri = np.asarray(triangles, dtype=float)
    R = len(d)
    kz = np.argmax(np.abs(d), axis=1)
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    flip = d[np.arange(R), kz] < 0
    kx, ky = np.where(flip, ky, kx), np.where(flip, kx, ky)
    rows = np.arange(R)
    dz = d[rows, kz]
    Sx = d[rows, kx] / dz
    Sy = d[rows, ky] / dz
    Sz = 1.0 / dz

    rel = tri[None, :, :, :] - o[:, None, None, :]  # (R, F, 3 verts, 3 coords)
    px = np.take_along_axis(rel, kx[:, None, None, None], axis=3)[..., 0]
    py = np.take_along_axis(rel, ky[:, None, None, None], axis=3)[..., 0]
    pz = np.take_along_axis(rel, kz[:, None, None, None], axis=3)[..., 0]
    X = px - Sx[:, None, None] * pz
    Y = py - Sy[:, None, None] * pz
    Z = Sz[:, None, None] * pz
    Ax, Bx, Cx = X[..., 0], X[..., 1], X[..., 2]
    Ay, By, Cy = Y[..., 0], Y[..., 1], Y[..., 2]
    U = Cx * By - Cy * Bx
    V = Ax * Cy - Ay * Cx
    W = Bx * Ay - By * Ax
    mixed = ((U < 0) | (V < 0) | (W < 0)) & ((U > 0) | (V > 0) | (W > 0))
    det = U + V + W
    ok = ~mixed & (det != 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (U * Z[..., 0] + V * Z[..., 1] + W * Z[..., 2]) / det
        bary = np.stack([U, V, W], axis=-1) / det[..., None]
    ok &= (t != 0) if both_sides else (t > 0)
    t = np.where(ok, t, np.inf)
    return t, bary


def raycast_first_hit(mesh: Mesh, origin, directions, chunk: int = 64):
    """Closest positive hit per ray: ``(t, face_index, bary)``; misses have ``face_index = -1``."""
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    tris = mesh.triangles
    t_best = np.full(len(d), np.inf)
    f_best = np.full(len(d), -1, dtype=np.int64)
    b_best = np.zeros((len(d), 3))
    for s in range(0, len(d), chunk):
        t, bary = intersect_rays(origin, d[s:s + chunk], tris)
        f = np.argmin(t, axis=1)
        rows = np.arange(len(f))
        tt = t[rows, f]
        hit = np.isfinite(tt)
        t_best[s:s + chunk] = tt
        f_best[s:s + chunk] = np.where(hit, f, -1)
        b_best[s:s + chunk] = np.where(hit[:, None], bary[rows, f], 0.0)
    return t_best, f_best, b_best


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles ``(a, b, c)`` to points ``p`` (all ``(N, 3)``).

    Region-based method from Ericson, *Real-Time Collision Detection* 5.1.5.
    Returns ``(q, bary)`` where ``q = bary[:,0] a + bary[:,1] b + bary[:,2] c``.
    """
    p, a, b, c = (np.asarray(x, dtype=float) for x in (p, a, b, c))
    n = len(p)
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    bary = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    def assign(mask, w):
        nonlocal done
        m = mask & ~done
        bary[m] = w[m]
        done |= m

    one = np.ones(n)
    zero = np.zeros(n)
    assign((d1 <= 0) & (d2 <= 0), np.stack([one, zero, zero], 1))
    assign((d3 >= 0) & (d4 <= d3), np.stack([zero, one, zero], 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - v, v, zero], 1))
        assign((d6 >= 0) & (d5 <= d6), np.stack([zero, zero, one], 1))
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - w, zero, w], 1))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.stack([zero, 1 - w, w], 1))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(np.ones(n, dtype=bool), np.stack([1 - v - w, v, w], 1))
    q = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    return q, bary


def vertex_face_table(mesh: Mesh) -> np.ndarray:
    """``(V, k)`` table of incident faces padded with ``-1``."""
    V = len(mesh.vertices)
    counts = np.bincount(mesh.faces.ravel(), minlength=V)
    table = np.full((V, max(int(counts.max()), 1)), -1, dtype=np.int64)
    fill = np.zeros(V, dtype=np.int64)
    for f, tri in enumerate(mesh.faces):
        for v in tri:
            table[v, fill[v]] = f
            fill[v] += 1
    return table


class ClosestPointQuery:
    """Approximately exact closest-point queries using incident faces of the k nearest vertices."""

    def __init__(self, mesh: Mesh, k: int = 8):
        self.mesh = mesh
        self.k = min(k, len(mesh.vertices))
        self.tree = cKDTree(mesh.vertices)
        self.table = vertex_face_table(mesh)

    def query(self, points: np.ndarray):
        """Returns ``(closest_points, face_index, bary, distance)``."""
        points = np.atleast_2d(points)
        _, nn = self.tree.query(points, k=self.k)
        nn = np.atleast_2d(nn).reshape(len(points), -1)
        cand = self.table[nn].reshape(len(points), -1)  # (N, k*deg)
        n, m = cand.shape
        valid = cand >= 0
        faces = np.where(valid, cand, 0)
        tri = self.mesh.triangles[faces.ravel()]
        p = np.repeat(points, m, axis=0)
        q, bary = closest_point_on_triangles(p, tri[:, 0], tri[:, 1], tri[:, 2])
        dist = np.linalg.norm(q - p, axis=1).reshape(n, m)
        dist[~valid] = np.inf
        j = np.argmin(dist, axis=1)
        rows = np.arange(n)
        sel = rows * m + j
        return q[sel], faces[rows, j], bary[sel], dist[rows, j]


def closest_points_bruteforce(mesh: Mesh, points: np.ndarray, chunk: int = 32):
    """Exact closest points against every triangle; slow, for checks."""
    points = np.atleast_2d(points)
    tris = mesh.triangles
    F = len(tris)
    out_q = np.zeros_like(points)
    out_d = np.zeros(len(points))
    out_f = np.zeros(len(points), dtype=np.int64)
    for s in range(0, len(points), chunk):
        pts = points[s:s + chunk]
        p = np.repeat(pts, F, axis=0)
        t = np.tile(tris, (len(pts), 1, 1))
        q, _ = closest_point_on_triangles(p, t[:, 0], t[:, 1], t[:, 2])
        d = np.linalg.norm(q - p, axis=1).reshape(len(pts), F)
        j = np.argmin(d, axis=1)
        out_f[s:s + chunk] = j
        out_d[s:s + chunk] = d[np.arange(len(pts)), j]
        out_q[s:s + chunk] = q.reshape(len(pts), F, 3)[np.arange(len(pts)), j]
    return out_q, out_f, out_d


def facing_mask(mesh: Mesh, camera_center: np.ndarray) -> np.ndarray:
    """Per-face flag: front side visible from ``camera_center`` (same frame as the mesh)."""
    n = mesh.face_normals(normalise=False)
    centroid = mesh.triangles.mean(axis=1)
    return np.einsum("ij,ij->i", n, np.asarray(camera_center) - centroid) > 0


def contour_vertices(mesh: Mesh, camera_center: np.ndarray) -> np.ndarray:
    """Indices of contour-generator vertices: shared by front- and back-facing faces."""
    front = facing_mask(mesh, camera_center)
    V = len(mesh.vertices)
    has_front = np.zeros(V, dtype=bool)
    has_back = np.zeros(V, dtype=bool)
    for k in range(3):
        has_front[mesh.faces[front, k]] = True
        has_back[mesh.faces[~front, k]] = True
    return np.flatnonzero(has_front & has_back)


def uv_sphere(radius: float = 1.0, rings: int = 16, segments: int = 32) -> Mesh:
    """Latitude/longitude sphere with outward-facing triangles."""
    verts = [[0.0, -radius, 0.0]]
    for i in range(1, rings + 1):
        el = -np.pi / 2 + np.pi * i / (rings + 1)
        for j in range(segments):
            az = 2 * np.pi * j / segments
            verts.append([radius * np.cos(el) * np.sin(az), radius * np.sin(el), radius * np.cos(el) * np.cos(az)])
    verts.append([0.0, radius, 0.0])
    faces = _latlong_faces(rings, segments)
    mesh = Mesh(np.array(verts), faces)
    return orient_outward(mesh)


def _latlong_faces(rings: int, segments: int) -> np.ndarray:
    faces = []
    top = 1 + rings * segments
    idx = lambda i, j: 1 + i * segments + (j % segments)  # noqa: E731
    for j in range(segments):
        faces.append([0, idx(0, j + 1), idx(0, j)])
    for i in range(rings - 1):
        for j in range(segments):
            a, b = idx(i, j), idx(i, j + 1)
            c, d = idx(i + 1, j), idx(i + 1, j + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
    for j in range(segments):
        faces.append([top, idx(rings - 1, j), idx(rings - 1, j + 1)])
    return np.array(faces, dtype=np.int64)


def orient_outward(mesh: Mesh) -> Mesh:
    """Flip all faces if the signed volume is negative (closed, consistently wound meshes)."""
    t = mesh.triangles
    vol = np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum()
    if vol < 0:
        return Mesh(mesh.vertices, mesh.faces[:, ::-1].copy())
    return mesh
