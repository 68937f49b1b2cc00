"""Mesh-to-mesh distance after ICP, and image error metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform, umeyama
from .mesh import ClosestPointQuery, Mesh, intersect_rays, vertex_face_table

log = logging.getLogger(__name__)


class ICPDivergence(RuntimeError):
    pass


def icp(src: np.ndarray, target: Mesh, init: RigidTransform | None = None, iters: int = 30,
        tol: float = 1e-10, k: int = 8) -> tuple[RigidTransform, float]:
    """Point-to-plane ICP of ``src`` points onto ``target``; returns ``(transform, rms)``.

    Each step linearises the rotation and solves for the motion that best closes
    the residuals along the closest faces' normals.  Steps that raise the
    point-to-surface RMS are halved; when none helps the current pose is a local
    minimum and is returned.  A non-finite error raises :class:`ICPDivergence`.
    """
    T = RigidTransform.identity() if init is None else init
    cpq = ClosestPointQuery(target, k)
    fn = target.face_normals()

    def residuals(T_):
        moved = T_.apply(src)
        if not np.all(np.isfinite(moved)):
            raise ICPDivergence("non-finite ICP points")
        q, f, _, d = cpq.query(moved)
        return moved, q, fn[f], float(np.sqrt(np.mean(d**2)))

    moved, q, n, rms = residuals(T)
    for _ in range(iters):
        if rms <= 1e-12:
            break
        J = np.hstack([np.cross(moved, n), n])
        r = np.einsum("ij,ij->i", n, q - moved)
        step = np.linalg.lstsq(J, r, rcond=1e-12)[0]
        for _ in range(8):
            T_new = RigidTransform.from_rotvec(step[:3], step[3:]) @ T
            m2, q2, n2, rms2 = residuals(T_new)
            if rms2 <= rms * (1 + 1e-12):
                break
            step = 0.5 * step
        else:
            break
        done = rms - rms2 <= tol * max(rms, 1.0)
        T, moved, q, n, rms = T_new, m2, q2, n2, rms2
        if done:
            break
    return T, rms


def paired_ray_hits(origins: np.ndarray, directions: np.ndarray, tri: np.ndarray, eps: float = 1e-12):
    """Moller-Trumbore test of ray ``i`` against triangle ``i`` (both directions).

    Returns the signed hit parameter (``nan`` on a miss).
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = b - a, c - a
    pv = np.cross(directions, e2)
    det = np.einsum("ij,ij->i", e1, pv)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origins - a
    u = np.einsum("ij,ij->i", s, pv) * inv
    qv = np.cross(s, e1)
    v = np.einsum("ij,ij->i", directions, qv) * inv
    t = np.einsum("ij,ij->i", e2, qv) * inv
    tol = 1e-12
    ok &= (u >= -tol) & (v >= -tol) & (u + v <= 1 + tol)
    return np.where(ok, t, np.nan)


def normal_ray_distances(src: Mesh, target: Mesh, k: int = 24) -> np.ndarray:
    """Distance from each ``src`` vertex to ``target`` along the vertex normal (either way).

    Candidate faces are those incident to the ``k`` target vertices nearest to the
    source vertex; vertices whose ray hits none of them fall back to the closest-point distance.
    """
    V = src.vertices
    N = src.vertex_normals()
    k = min(k, len(target.vertices))
    _, nn = cKDTree(target.vertices).query(V, k=k)
    table = vertex_face_table(target)
    cand = table[nn.reshape(len(V), -1)].reshape(len(V), -1)
    n, m = cand.shape
    valid = cand >= 0
    faces = np.where(valid, cand, 0)
    tri = target.triangles[faces.ravel()]
    t = paired_ray_hits(np.repeat(V, m, axis=0), np.repeat(N, m, axis=0), tri).reshape(n, m)
    t[~valid] = np.nan
    d = np.abs(t)
    with np.errstate(all="ignore"):
        dist = np.nanmin(np.where(np.isnan(d), np.inf, d), axis=1)
    miss = ~np.isfinite(dist)
    if miss.any():
        dist[miss] = ClosestPointQuery(target).query(V[miss])[3]
    return dist


def normal_ray_distances_exhaustive(src: Mesh, target: Mesh, chunk: int = 16) -> np.ndarray:
    """Same measure testing every target triangle (reference implementation)."""
    V = src.vertices
    N = src.vertex_normals()
    tri = target.triangles
    out = np.empty(len(V))
    for s in range(0, len(V), chunk):
        t, _ = intersect_rays(V[s:s + chunk], N[s:s + chunk], tri, both_sides=True)
        out[s:s + chunk] = np.abs(t).min(axis=1)
    # a ray starting exactly on the surface has t == 0, which the intersector reports as a miss
    on_surface = ClosestPointQuery(target).query(V)[3]
    out = np.where(on_surface < 1e-9, on_surface, out)
    miss = ~np.isfinite(out)
    out[miss] = on_surface[miss]
    return out


@dataclass
class MeshEvaluation:
    mean_distance: float
    distances: np.ndarray
    transform: RigidTransform
    icp_rms: float


def eval_mesh(recon: Mesh, truth: Mesh, recon_landmarks: np.ndarray | None = None,
              truth_landmarks: np.ndarray | None = None, region: np.ndarray | None = None,
              icp_iters: int = 30, align: bool = True) -> MeshEvaluation:
    """Align ``recon`` to ``truth`` (rigid landmark initialisation, then ICP) and report
    the mean normal-ray distance over ``region`` vertices (all by default)."""
    T = RigidTransform.identity()
    rms = 0.0
    if align:
        if recon_landmarks is not None and truth_landmarks is not None:
            sim = umeyama(np.asarray(recon_landmarks, float), np.asarray(truth_landmarks, float), with_scale=False)
            T = RigidTransform(sim.rotation, sim.translation)
        idx = np.arange(len(recon.vertices)) if region is None else np.asarray(region)
        T, rms = icp(recon.vertices[idx], truth, T, icp_iters)
    moved = recon.with_vertices(T.apply(recon.vertices))
    d = normal_ray_distances(moved, truth)
    if region is not None:
        d = d[np.asarray(region)]
    return MeshEvaluation(float(d.mean()), d, T, rms)


def masked_mae(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute difference over ``mask`` (all channels averaged)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    d = np.abs(np.asarray(a, float) - np.asarray(b, float))
    if d.ndim == 3:
        d = d.mean(axis=2)
    return float(d[mask].mean())


def luma(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    return rgb @ np.array([0.299, 0.587, 0.114]) if rgb.ndim == 3 else rgb
