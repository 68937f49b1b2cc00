"""Content-preserving grid warp of the reference image and mesh-driven per-pixel eye warps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, RigidTransform
from .mesh import Mesh, contour_vertices
from .render import bilinear_sample, rasterize

log = logging.getLogger(__name__)


class WarpError(RuntimeError):
    pass


@dataclass
class GridWarpField:
    """``rows x cols`` cells laid uniformly over a ``width x height`` image (pixel-edge extent)."""

    rows: int
    cols: int
    width: int
    height: int
    target_vertices: np.ndarray | None = None  # (rows+1, cols+1, 2)
    energies: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise WarpError("grid needs at least 2x2 cells")
        if self.target_vertices is not None:
            self.target_vertices = np.asarray(self.target_vertices, dtype=float)
            if self.target_vertices.shape != (self.rows + 1, self.cols + 1, 2):
                raise WarpError("target vertex array has the wrong shape")

    @property
    def cell_size(self) -> tuple[float, float]:
        return self.width / self.cols, self.height / self.rows

    @property
    def source_vertices(self) -> np.ndarray:
        cw, ch = self.cell_size
        ys, xs = np.mgrid[0:self.rows + 1, 0:self.cols + 1].astype(float)
        return np.stack([xs * cw - 0.5, ys * ch - 0.5], axis=-1)

    @property
    def n_vertices(self) -> int:
        return (self.rows + 1) * (self.cols + 1)

    def vid(self, i, j):
        return np.asarray(i) * (self.cols + 1) + np.asarray(j)

    def anchors(self, pts: np.ndarray):
        """Bilinear anchors of source points: ``(vertex ids (N, 4), weights (N, 4), inside)``.

        Corner order is (top-left, top-right, bottom-left, bottom-right).
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        cw, ch = self.cell_size
        gx = (pts[:, 0] + 0.5) / cw
        gy = (pts[:, 1] + 0.5) / ch
        inside = (gx >= 0) & (gx <= self.cols) & (gy >= 0) & (gy <= self.rows)
        j = np.clip(np.floor(gx).astype(np.int64), 0, self.cols - 1)
        i = np.clip(np.floor(gy).astype(np.int64), 0, self.rows - 1)
        s = np.clip(gx - j, 0, 1)
        t = np.clip(gy - i, 0, 1)
        ids = np.stack([self.vid(i, j), self.vid(i, j + 1), self.vid(i + 1, j), self.vid(i + 1, j + 1)], 1)
        w = np.stack([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t], 1)
        return ids, w, inside

    def save(self, path) -> None:
        """Flat little-endian float64 dump: header (rows, cols, width, height) then target vertices."""
        hdr = np.array([self.rows, self.cols, self.width, self.height], dtype="<f8")
        tv = self.target_vertices if self.target_vertices is not None else self.source_vertices
        np.concatenate([hdr, tv.astype("<f8").ravel()]).tofile(path)

    @classmethod
    def load(cls, path) -> "GridWarpField":
        raw = np.fromfile(path, dtype="<f8")
        r, c, w, h = (int(v) for v in raw[:4])
        return cls(r, c, w, h, raw[4:].reshape(r + 1, c + 1, 2))


@dataclass
class WarpConstraints:
    source_points: np.ndarray  # (N, 2) face correspondences in the source image
    target_points: np.ndarray  # (N, 2) where they must land
    silhouette_source: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    silhouette_target: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    face_mask: np.ndarray | None = None  # source-image face region; None disables the boundary prior
    alpha: float = 1.0
    beta: float = 5.0
    gamma: float = 10.0

    def __post_init__(self):
        self.source_points = np.asarray(self.source_points, dtype=float).reshape(-1, 2)
        self.target_points = np.asarray(self.target_points, dtype=float).reshape(-1, 2)
        self.silhouette_source = np.asarray(self.silhouette_source, dtype=float).reshape(-1, 2)
        self.silhouette_target = np.asarray(self.silhouette_target, dtype=float).reshape(-1, 2)
        if len(self.source_points) != len(self.target_points):
            raise WarpError("face correspondence arrays differ in length")
        if len(self.silhouette_source) != len(self.silhouette_target):
            raise WarpError("silhouette arrays differ in length")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise WarpError("weights must be non-negative")


# -- correspondences ----------------------------------------------------------------------------


def _facing_vertices(mesh: Mesh, T: RigidTransform) -> np.ndarray:
    P = T.apply(mesh.vertices)
    n = mesh.vertex_normals() @ T.rotation.T
    return np.einsum("ij,ij->i", n, -P) > 0


def project_mesh_correspondences(mesh: Mesh, pose_ref: RigidTransform, pose_query: RigidTransform,
                                 K: CameraIntrinsics, mesh_query: Mesh | None = None,
                                 K_query: CameraIntrinsics | None = None):
    """Per-vertex ``(ref_px, query_px, vertex_ids)`` for vertices facing both cameras and inside both frames."""
    mq = mesh if mesh_query is None else mesh_query
    Kq = K if K_query is None else K_query
    if len(mq.vertices) != len(mesh.vertices):
        raise WarpError("reference and query meshes must share topology")
    Pr = pose_ref.apply(mesh.vertices)
    Pq = pose_query.apply(mq.vertices)
    ok = (Pr[:, 2] > 0) & (Pq[:, 2] > 0) & _facing_vertices(mesh, pose_ref) & _facing_vertices(mq, pose_query)
    ids = np.flatnonzero(ok)
    a = K.project_camera_points(Pr[ids])
    b = Kq.project_camera_points(Pq[ids])
    keep = K.contains(a) & Kq.contains(b)
    return a[keep], b[keep], ids[keep]


def silhouette_pairs(mesh: Mesh, pose_ref: RigidTransform, pose_query: RigidTransform, K: CameraIntrinsics,
                     query_silhouette: np.ndarray, max_dist: float, mesh_query: Mesh | None = None):
    """Map query silhouette points to the reference image through the nearest contour-generator vertex.

    Returns ``(ref_points, query_points, dropped)``; points farther than ``max_dist``
    pixels from every projected contour vertex are dropped.
    """
    sil = np.atleast_2d(np.asarray(query_silhouette, dtype=float))
    if sil.size == 0:
        raise WarpError("empty silhouette")
    mq = mesh if mesh_query is None else mesh_query
    cam_center = pose_query.inverse().translation
    cv = contour_vertices(mq, cam_center)
    if len(cv) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2)), len(sil)
    proj = K.project_camera_points(pose_query.apply(mq.vertices[cv]))
    d, k = cKDTree(proj).query(sil)
    keep = d <= max_dist
    ref = K.project_camera_points(pose_ref.apply(mesh.vertices[cv[k[keep]]]))
    dropped = int((~keep).sum())
    if dropped:
        log.debug("silhouette: %d of %d points dropped", dropped, len(sil))
    return ref, sil[keep], dropped


def contour_polyline(mesh: Mesh, pose: RigidTransform, K: CameraIntrinsics, spacing: float = 4.0,
                     region: np.ndarray | None = None) -> np.ndarray:
    """Projected contour-generator vertices, optionally limited to ``region`` (bool image)."""
    cv = contour_vertices(mesh, pose.inverse().translation)
    if len(cv) == 0:
        return np.zeros((0, 2))
    P = pose.apply(mesh.vertices[cv])
    pts = K.project_camera_points(P[P[:, 2] > 0])
    pts = pts[K.contains(pts)]
    if region is not None and len(pts):
        r = np.rint(pts).astype(int)
        r[:, 0] = np.clip(r[:, 0], 0, K.image_width - 1)
        r[:, 1] = np.clip(r[:, 1], 0, K.image_height - 1)
        pts = pts[region[r[:, 1], r[:, 0]]]
    if len(pts) == 0:
        return pts
    # thin to roughly uniform spacing, keeping lowest-index representatives
    key = np.floor(pts / spacing).astype(np.int64)
    _, first = np.unique(key, axis=0, return_index=True)
    return pts[np.sort(first)]


# -- energy -------------------------------------------------------------------------------------


def boundary_vertices(field_: GridWarpField, face_mask: np.ndarray | None) -> np.ndarray:
    """Vertices whose incident cells all lie outside the face mask dilated by one cell."""
    if face_mask is None:
        return np.zeros(0, dtype=np.int64)
    H, W = face_mask.shape
    cw, ch = field_.cell_size
    ys, xs = np.nonzero(face_mask)
    cell = np.zeros((field_.rows, field_.cols), dtype=bool)
    if len(ys):
        ci = np.clip(((ys + 0.5) / ch).astype(np.int64), 0, field_.rows - 1)
        cj = np.clip(((xs + 0.5) / cw).astype(np.int64), 0, field_.cols - 1)
        cell[ci, cj] = True
    cell = ndimage.binary_dilation(cell, structure=np.ones((3, 3), bool))
    touched = np.zeros((field_.rows + 1, field_.cols + 1), dtype=bool)
    for di in (0, 1):
        for dj in (0, 1):
            touched[di:di + field_.rows, dj:dj + field_.cols] |= cell
    return np.flatnonzero(~touched.ravel())


def _similarity_projectors(field_: GridWarpField):
    """Per-quad ``I - A A^+`` (8x8) on interleaved (x, y) corner coordinates, plus corner ids."""
    V = field_.source_vertices
    i, j = np.mgrid[0:field_.rows, 0:field_.cols]
    i, j = i.ravel(), j.ravel()
    ids = np.stack([field_.vid(i, j), field_.vid(i, j + 1), field_.vid(i + 1, j + 1), field_.vid(i + 1, j)], 1)
    src = V.reshape(-1, 2)[ids]  # (Q, 4, 2)
    Q = len(ids)
    A = np.zeros((Q, 8, 4))
    A[:, 0::2, 0] = src[:, :, 0]
    A[:, 0::2, 1] = -src[:, :, 1]
    A[:, 0::2, 2] = 1.0
    A[:, 1::2, 0] = src[:, :, 1]
    A[:, 1::2, 1] = src[:, :, 0]
    A[:, 1::2, 3] = 1.0
    proj = np.eye(8)[None] - A @ np.linalg.pinv(A)
    return proj, ids


def _term_rows(field_: GridWarpField, con: WarpConstraints):
    """Sparse least-squares blocks ``(name, weight, M, rhs)`` with ``M`` acting on interleaved (x, y)."""
    nv = field_.n_vertices
    blocks = []

    def anchor_block(src, dst):
        ids, w, inside = field_.anchors(src)
        if not np.all(inside):
            raise WarpError("a constrained point lies outside the grid")
        n = len(src)
        rows = np.repeat(np.arange(n), 4)
        Mx = sp.csr_matrix((w.ravel(), (2 * rows, 2 * ids.ravel())), shape=(2 * n, 2 * nv))
        My = sp.csr_matrix((w.ravel(), (2 * rows + 1, 2 * ids.ravel() + 1)), shape=(2 * n, 2 * nv))
        return Mx + My, dst.ravel()

    if len(con.source_points):
        M, r = anchor_block(con.source_points, con.target_points)
        blocks.append(("data", 1.0, M, r))
    if con.alpha > 0:
        proj, ids = _similarity_projectors(field_)
        Q = len(ids)
        cols = np.empty((Q, 8), dtype=np.int64)
        cols[:, 0::2] = 2 * ids
        cols[:, 1::2] = 2 * ids + 1
        rows = np.arange(8 * Q).reshape(Q, 8)
        M = sp.csr_matrix((proj.ravel(), (np.repeat(rows.ravel(), 8), np.tile(cols, (1, 8)).ravel())),
                          shape=(8 * Q, 2 * nv))
        blocks.append(("similarity", con.alpha, M, np.zeros(8 * Q)))
    if con.beta > 0:
        bv = boundary_vertices(field_, con.face_mask)
        if len(bv):
            cols = np.stack([2 * bv, 2 * bv + 1], 1).ravel()
            M = sp.csr_matrix((np.ones(len(cols)), (np.arange(len(cols)), cols)), shape=(len(cols), 2 * nv))
            blocks.append(("boundary", con.beta, M, field_.source_vertices.reshape(-1, 2)[bv].ravel()))
    if con.gamma > 0 and len(con.silhouette_source):
        M, r = anchor_block(con.silhouette_source, con.silhouette_target)
        blocks.append(("silhouette", con.gamma, M, r))
    return blocks


def warp_energy(field_: GridWarpField, con: WarpConstraints, vertices: np.ndarray) -> dict:
    """Unweighted value of every term at ``vertices`` plus the weighted total under ``"total"``."""
    x = np.asarray(vertices, dtype=float).ravel()
    out = {"data": 0.0, "similarity": 0.0, "boundary": 0.0, "silhouette": 0.0}
    total = 0.0
    for name, w, M, r in _term_rows(field_, con):
        e = float(np.sum((M @ x - r) ** 2))
        out[name] = e
        total += w * e
    out["total"] = total
    return out


def normal_equations(field_: GridWarpField, con: WarpConstraints):
    nv = field_.n_vertices
    N = sp.csr_matrix((2 * nv, 2 * nv))
    rhs = np.zeros(2 * nv)
    for _, w, M, r in _term_rows(field_, con):
        N = N + w * (M.T @ M)
        rhs += w * (M.T @ r)
    return N.tocsc(), rhs


def solve_grid_warp(field_: GridWarpField, con: WarpConstraints) -> GridWarpField:
    """Minimise the weighted sum of data, similarity, boundary and silhouette terms in one sparse solve."""
    N, rhs = normal_equations(field_, con)
    if N.nnz == 0:
        raise WarpError("singular warp system: every term is empty or has zero weight")
    try:
        x = splu(N).solve(rhs)
    except RuntimeError as exc:
        raise WarpError(f"singular warp system: {exc}") from None
    resid = np.linalg.norm(N @ x - rhs)
    if not np.all(np.isfinite(x)) or resid > 1e-6 * max(np.linalg.norm(rhs), 1.0):
        raise WarpError(f"singular warp system (normal-equation residual {resid:.3g})")
    V = x.reshape(field_.rows + 1, field_.cols + 1, 2)
    out = GridWarpField(field_.rows, field_.cols, field_.width, field_.height, V)
    out.energies = warp_energy(field_, con, V)
    return out


# -- rendering ----------------------------------------------------------------------------------


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _inverse_bilinear(p, a, b, c, d):
    """Local ``(u, v)`` of points ``p`` in quads ``a b c d`` (u along a->b, v along a->d)."""
    e, f = b - a, d - a
    g = a - b + c - d
    h = p - a
    k2 = _cross(g, f)
    k1 = _cross(e, f) + _cross(h, g)
    k0 = _cross(h, e)
    lin = np.abs(k2) < 1e-9 * np.maximum(np.abs(k1), 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = np.sqrt(np.maximum(k1 * k1 - 4 * k0 * k2, 0.0))
        v_lin = -k0 / k1
        v1 = np.where(lin, v_lin, (-k1 - disc) / (2 * k2))
        v2 = np.where(lin, v_lin, (-k1 + disc) / (2 * k2))

        def u_of(v):
            dx = e[..., 0] + g[..., 0] * v
            dy = e[..., 1] + g[..., 1] * v
            use_x = np.abs(dx) >= np.abs(dy)
            return np.where(use_x, (h[..., 0] - f[..., 0] * v) / dx, (h[..., 1] - f[..., 1] * v) / dy)

        u1, u2 = u_of(v1), u_of(v2)
    tol = 1e-9
    ok1 = (u1 >= -tol) & (u1 <= 1 + tol) & (v1 >= -tol) & (v1 <= 1 + tol)
    u = np.where(ok1, u1, u2)
    v = np.where(ok1, v1, v2)
    ok = ok1 | ((u2 >= -tol) & (u2 <= 1 + tol) & (v2 >= -tol) & (v2 <= 1 + tol))
    return np.clip(u, 0, 1), np.clip(v, 0, 1), ok


def warp_coordinates(field_: GridWarpField, out_shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source coordinates ``(x, y)`` for every output pixel and a coverage mask."""
    H, W = out_shape[:2]
    src = field_.source_vertices
    tgt = field_.target_vertices if field_.target_vertices is not None else src
    sx = np.full((H, W), np.nan)
    sy = np.full((H, W), np.nan)
    i, j = np.mgrid[0:field_.rows, 0:field_.cols]
    i, j = i.ravel(), j.ravel()
    a, b, c, d = tgt[i, j], tgt[i, j + 1], tgt[i + 1, j + 1], tgt[i + 1, j]
    quad = np.stack([a, b, c, d], 1)
    lo = np.maximum(np.ceil(quad.min(1) - 1e-9).astype(np.int64), 0)
    hi = np.minimum(np.floor(quad.max(1) + 1e-9).astype(np.int64), [W - 1, H - 1])
    keep = np.all(hi >= lo, axis=1)
    q = np.flatnonzero(keep)
    bw = hi[q, 0] - lo[q, 0] + 1
    bh = hi[q, 1] - lo[q, 1] + 1
    cnt = bw * bh
    owner = np.repeat(np.arange(len(q)), cnt)
    start = np.concatenate([[0], np.cumsum(cnt)])[:-1]
    local = np.arange(int(cnt.sum())) - np.repeat(start, cnt)
    px = lo[q, 0][owner] + local % np.repeat(bw, cnt)
    py = lo[q, 1][owner] + local // np.repeat(bw, cnt)
    qq = q[owner]
    p = np.stack([px, py], 1).astype(float)
    u, v, ok = _inverse_bilinear(p, a[qq], b[qq], c[qq], d[qq])
    cw, ch = field_.cell_size
    x0 = src[i[qq], j[qq], 0]
    y0 = src[i[qq], j[qq], 1]
    # later quads overwrite earlier ones on shared edges; either choice maps to the same source point
    sx[py[ok], px[ok]] = x0[ok] + u[ok] * cw
    sy[py[ok], px[ok]] = y0[ok] + v[ok] * ch
    return sx, sy, np.isfinite(sx)


def render_warp(image: np.ndarray, field_: GridWarpField, out_shape=None):
    """Inverse-map every output pixel through its warped quad and sample the source bilinearly.

    Returns ``(warped, valid)``; pixels covered by no quad or mapping outside the
    source are zero and marked invalid.
    """
    img = np.asarray(image, dtype=float)
    shape = img.shape[:2] if out_shape is None else out_shape
    sx, sy, cov = warp_coordinates(field_, shape)
    out = np.zeros(tuple(shape[:2]) + img.shape[2:])
    vals, inside = bilinear_sample(img, sx[cov], sy[cov])
    out[cov] = vals
    valid = np.zeros(shape[:2], dtype=bool)
    valid[cov] = inside
    out[~valid] = 0.0
    return out, valid


def mesh_pixel_map(mesh_src: Mesh, src_pose: RigidTransform, K_src: CameraIntrinsics,
                   mesh_dst: Mesh, dst_pose: RigidTransform, K_dst: CameraIntrinsics,
                   depth_tol: float = 1.0):
    """For every destination pixel covered by ``mesh_dst``, where the same surface point lands in the
    source camera.  Each triangle maps by its plane-induced homography.

    Returns ``(x, y, valid)`` source coordinates; ``valid`` also requires the point
    to be unoccluded in the source view.
    """
    Pd = dst_pose.apply(mesh_dst.vertices)
    ras = rasterize(Pd, mesh_dst.faces, K_dst)
    m = ras.mask
    f = mesh_dst.faces[ras.face[m]]
    b = ras.bary[m]
    Ps = src_pose.apply(mesh_src.vertices)
    X = np.einsum("nk,nkd->nd", b, Ps[f])
    H, W = K_dst.size
    x = np.full((H, W), np.nan)
    y = np.full((H, W), np.nan)
    valid = np.zeros((H, W), dtype=bool)
    front = X[:, 2] > 1e-6
    uv = np.full((len(X), 2), np.nan)
    uv[front] = K_src.project_camera_points(X[front])
    src_ras = rasterize(Ps, mesh_src.faces, K_src)
    inside = front & K_src.contains(np.nan_to_num(uv, nan=-1e9))
    ui = np.clip(np.rint(np.nan_to_num(uv[:, 0])).astype(np.int64), 0, K_src.image_width - 1)
    vi = np.clip(np.rint(np.nan_to_num(uv[:, 1])).astype(np.int64), 0, K_src.image_height - 1)
    vis = inside & (X[:, 2] <= src_ras.depth[vi, ui] + depth_tol)
    x[m] = uv[:, 0]
    y[m] = uv[:, 1]
    valid[m] = vis
    return x, y, valid
