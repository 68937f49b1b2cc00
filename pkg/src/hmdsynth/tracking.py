"""Head-to-HMD initial alignment and per-frame expression tracking."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .facemodel import BilinearFaceModel, ExpressionWeights, FittingError, _vec, evaluate_model
from .geometry import (CameraIntrinsics, RigCalibration, RigidTransform, pose_jacobian,
                       projection_jacobian)
from .mesh import Mesh, intersect_rays
from .optim import ConvergenceError, levenberg_marquardt

log = logging.getLogger(__name__)

GROUP_MAXIMA = {"mouth": 20, "nose": 5, "jaw": 11, "brow": 5, "eye": 6}


class TrackingError(RuntimeError):
    pass


def _group(label: str) -> str:
    return label.split("_")[0]


@dataclass
class LandmarkFrame:
    """Labelled 2D observations for one time step.

    ``face`` holds mouth/nose/jaw points in the face image, ``eye_left`` and
    ``eye_right`` hold brow/eye-boundary points in the eye images.  Labels not
    present in ``visibility`` are visible.
    """

    frame_index: int
    face: dict
    eye_left: dict = field(default_factory=dict)
    eye_right: dict = field(default_factory=dict)
    hmd_dots: np.ndarray | None = None
    visibility: dict = field(default_factory=dict)
    timestamp: float = 0.0

    def __post_init__(self):
        self.face = {k: np.asarray(v, dtype=float) for k, v in self.face.items()}
        self.eye_left = {k: np.asarray(v, dtype=float) for k, v in self.eye_left.items()}
        self.eye_right = {k: np.asarray(v, dtype=float) for k, v in self.eye_right.items()}
        if self.hmd_dots is not None:
            self.hmd_dots = np.asarray(self.hmd_dots, dtype=float).reshape(-1, 2)
        counts: dict = {}
        for group_dict, tag in ((self.face, "face"), (self.eye_left, "left"), (self.eye_right, "right")):
            for k in group_dict:
                key = (tag, _group(k))
                counts[key] = counts.get(key, 0) + 1
        for (tag, g), n in counts.items():
            if n > GROUP_MAXIMA.get(g, 0):
                raise ValueError(f"{tag} image has {n} '{g}' landmarks, more than {GROUP_MAXIMA.get(g, 0)}")

    def visible(self, which: str = "face") -> dict:
        pts = {"face": self.face, "left": self.eye_left, "right": self.eye_right}[which]
        return {k: v for k, v in pts.items() if self.visibility.get(k, True)}

    def check_bounds(self, face_cam: CameraIntrinsics, eye_left: CameraIntrinsics,
                     eye_right: CameraIntrinsics) -> None:
        for pts, K, tag in ((self.face, face_cam, "face"), (self.eye_left, eye_left, "left eye"),
                            (self.eye_right, eye_right, "right eye")):
            for k, uv in pts.items():
                if not K.contains(uv):
                    raise ValueError(f"landmark {k} outside the {tag} image")

    def to_dict(self) -> dict:
        d = {
            "frame": int(self.frame_index),
            "timestamp": float(self.timestamp),
            "face": {k: list(map(float, v)) for k, v in sorted(self.face.items())},
            "eye_left": {k: list(map(float, v)) for k, v in sorted(self.eye_left.items())},
            "eye_right": {k: list(map(float, v)) for k, v in sorted(self.eye_right.items())},
            "visibility": {k: bool(v) for k, v in sorted(self.visibility.items())},
        }
        if self.hmd_dots is not None:
            d["hmd_dots"] = self.hmd_dots.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LandmarkFrame":
        return cls(frame_index=int(d["frame"]), face=d.get("face", {}), eye_left=d.get("eye_left", {}),
                   eye_right=d.get("eye_right", {}), hmd_dots=d.get("hmd_dots"),
                   visibility=d.get("visibility", {}), timestamp=float(d.get("timestamp", 0.0)))


def save_landmarks(path, frame: LandmarkFrame) -> None:
    Path(path).write_text(json.dumps(frame.to_dict(), indent=1, sort_keys=True))


def load_landmarks(path) -> LandmarkFrame:
    return LandmarkFrame.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AlignmentState:
    head_to_hmd: RigidTransform
    hmd_to_face: RigidTransform
    expression: ExpressionWeights
    previous_expression: ExpressionWeights

    def head_to_face(self) -> RigidTransform:
        return self.hmd_to_face @ self.head_to_hmd


@dataclass
class TrackerConfig:
    lam: float = 1.0  # eye-camera weight during initial alignment
    lam1: float = 2.0  # eye-camera weight during expression tracking
    lam2: float = 2.0  # temporal smoothness
    lam3: float = 0.7  # statistical prior
    dz: float = 30.0  # eye-to-camera distance used to seed the alignment (mm)
    max_iter: int = 50
    tol: float = 1e-12
    max_rounds: int = 30  # correspondence refresh rounds
    correspondence: str = "raycast"  # or "semantic"
    min_visible_fraction: float = 0.5

    def __post_init__(self):
        for k in ("lam", "lam1", "lam2", "lam3"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.dz <= 0:
            raise ValueError("dz must be positive")
        if self.correspondence not in ("raycast", "semantic"):
            raise ValueError("correspondence must be 'raycast' or 'semantic'")


# -- correspondences -----------------------------------------------------------------------


def _nearest_vertex(tree: cKDTree, pts: np.ndarray) -> np.ndarray:
    """Nearest vertex per point; exact distance ties go to the lowest index."""
    k = min(4, tree.n)
    d, idx = tree.query(pts, k=k)
    d = d.reshape(len(pts), -1)
    idx = idx.reshape(len(pts), -1)
    best = np.where(d <= d[:, :1], idx, np.iinfo(np.int64).max)
    return best.min(axis=1)


def raycast_landmarks(mesh: Mesh, K: CameraIntrinsics, T: RigidTransform, landmarks: dict):
    """Closest intersection (model frame) of each landmark's pixel ray with ``mesh``.

    ``T`` maps model coordinates into the camera frame.  Returns
    ``({label: point}, [missed labels])``.
    """
    P = T.apply(mesh.vertices)
    tri_cam = P[mesh.faces]
    in_front = np.all(tri_cam[:, :, 2] > 1e-6, axis=1)
    z = np.where(tri_cam[:, :, 2] > 1e-6, tri_cam[:, :, 2], 1.0)
    u = K.fx * tri_cam[:, :, 0] / z + K.cx
    v = K.fy * tri_cam[:, :, 1] / z + K.cy
    umin, umax, vmin, vmax = u.min(1), u.max(1), v.min(1), v.max(1)
    hits, misses = {}, []
    for label, uv in landmarks.items():
        uv = np.asarray(uv, dtype=float)
        cand = np.flatnonzero(in_front & (umin <= uv[0] + 1e-6) & (umax >= uv[0] - 1e-6)
                              & (vmin <= uv[1] + 1e-6) & (vmax >= uv[1] - 1e-6))
        if len(cand) == 0:
            misses.append(label)
            continue
        d = K.rays(uv)
        t, bary = intersect_rays(np.zeros(3), d[None], tri_cam[cand])
        j = int(np.argmin(t[0]))
        if not np.isfinite(t[0, j]):
            misses.append(label)
            continue
        hits[label] = bary[0, j] @ mesh.vertices[mesh.faces[cand[j]]]
    return hits, misses


def correspond_landmarks(mesh: Mesh, K: CameraIntrinsics, T: RigidTransform, landmarks: dict):
    """Pair each landmark with the mesh vertex nearest to where its pixel ray hits the mesh.

    Returns ``(pairs, misses)`` where ``pairs`` is a list of ``(label, uv, vertex)``
    and ``misses`` lists labels whose ray does not hit the mesh.
    """
    hits, misses = raycast_landmarks(mesh, K, T, landmarks)
    if misses:
        log.debug("%d landmark rays missed the mesh: %s", len(misses), misses)
    if not hits:
        return [], misses
    labels = list(hits)
    vids = _nearest_vertex(cKDTree(mesh.vertices), np.array([hits[k] for k in labels]))
    return [(k, np.asarray(landmarks[k], dtype=float), int(v)) for k, v in zip(labels, vids)], misses


# -- initial alignment ---------------------------------------------------------------------


@dataclass
class AlignmentResult:
    head_to_hmd: RigidTransform
    face_rms: float
    eye_rms: float
    rounds: int
    cost_history: list
    misses: int


def _views(frames, rig: RigCalibration):
    """Observation groups ``(K, camera_from_hmd, {label: uv}, weight_key)`` over all frames."""
    out = []
    for lf, hmd_to_face in frames:
        out.append((rig.face_cam, hmd_to_face, lf.visible("face"), "face"))
        for side, which in (("left", "left"), ("right", "right")):
            pts = lf.visible(which)
            if pts:
                out.append((rig.eye_cam(side), rig.hmd_to_eye(side), pts, "eye"))
    return out


def _consensus(mesh, views, T, tree):
    """Per-(group, label) vertex: nearest to the mean ray hit over all views of that label."""
    acc: dict = {}
    misses = 0
    for K, cam_from_hmd, pts, kind in views:
        hits, miss = raycast_landmarks(mesh, K, cam_from_hmd @ T, pts)
        misses += len(miss)
        for k, p in hits.items():
            acc.setdefault((kind, k), []).append(p)
    keys = sorted(acc)
    if not keys:
        return {}, misses
    mean = np.array([np.mean(acc[k], axis=0) for k in keys])
    vids = _nearest_vertex(tree, mean)
    return dict(zip(keys, (int(v) for v in vids))), misses


def _alignment_problem(mesh, views, corr, lam):
    rows = []
    for K, cam_from_hmd, pts, kind in views:
        w = 1.0 if kind == "face" else np.sqrt(lam)
        if w == 0:
            continue
        labels = [k for k in pts if (kind, k) in corr]
        if not labels:
            continue
        X = mesh.vertices[[corr[(kind, k)] for k in labels]]
        uv = np.array([pts[k] for k in labels])
        rows.append((K, cam_from_hmd, X, uv, w, kind))

    def residual_jac(T):
        rs, Js = [], []
        for K, C, X, uv, w, _ in rows:
            Ph = T.apply(X)  # HMD frame, where the left increment acts
            Pc = C.apply(Ph)
            if np.any(Pc[:, 2] <= 0):
                return None
            r = K.project_camera_points(Pc) - uv
            J = np.einsum("nij,jk,nkl->nil", projection_jacobian(K, Pc), C.rotation, pose_jacobian(Ph))
            rs.append(w * r.ravel())
            Js.append(w * J.reshape(-1, 6))
        if not rs:
            return np.zeros(0), np.zeros((0, 6))
        return np.concatenate(rs), np.vstack(Js)

    return rows, residual_jac


def _rms_by_kind(rows, T):
    out = {"face": [], "eye": []}
    for K, C, X, uv, w, kind in rows:
        out[kind].append(((K.project_camera_points(C.apply(T.apply(X))) - uv) ** 2).sum(1))
    return {k: float(np.sqrt(np.mean(np.concatenate(v)))) if v else 0.0 for k, v in out.items()}


def initial_alignment(model: BilinearFaceModel, cid, frames: list, rig: RigCalibration,
                      cfg: TrackerConfig = TrackerConfig(),
                      init: RigidTransform | None = None) -> AlignmentResult:
    """Estimate the head-to-HMD transform from neutral-expression frames.

    ``frames`` is a list of ``(LandmarkFrame, hmd_to_face)``.  Starts from the
    identity rotation and translation ``(0, 0, dz)`` unless ``init`` is given and
    alternates Levenberg-Marquardt on the face/eye reprojection energy with
    correspondence updates until the correspondences stop changing.
    """
    if len(frames) < 2:
        raise TrackingError("initial alignment needs at least two frames")
    mesh = evaluate_model(model, cid, model.neutral())
    tree = cKDTree(mesh.vertices)
    views = _views(frames, rig)
    T = init or RigidTransform(np.eye(3), [0.0, 0.0, cfg.dz])
    history: list = []
    corr_prev = None
    misses = 0
    rounds = 0
    rows: list = []
    for rounds in range(1, cfg.max_rounds + 1):
        if cfg.correspondence == "semantic":
            corr = {}
            for _, _, pts, kind in views:
                for k in pts:
                    if k in model.landmark_vertex_ids:
                        corr[(kind, k)] = model.landmark_vertex_ids[k]
        else:
            corr, misses = _consensus(mesh, views, T, tree)
        if corr == corr_prev:
            break
        rows, residual_jac = _alignment_problem(mesh, views, corr, cfg.lam)
        if not any(kind == "face" for *_, kind in rows):
            raise TrackingError("no face landmark could be put in correspondence")
        res = levenberg_marquardt(residual_jac, T, lambda T, d: T.perturbed(d),
                                  max_iter=cfg.max_iter, tol=cfg.tol)
        if len(res.history) > 1 and res.history[-1] > res.history[0]:
            raise ConvergenceError("alignment cost increased")
        history.extend(res.history)
        T = res.x
        corr_prev = corr
        if cfg.correspondence == "semantic":
            break
    rms = _rms_by_kind(rows, T)
    log.info("initial alignment: %d rounds, face rms %.3g px, eye rms %.3g px", rounds, rms["face"], rms["eye"])
    return AlignmentResult(T, rms["face"], rms["eye"], rounds, history, misses)


# -- expression tracking -------------------------------------------------------------------


def _observations(model, frame: LandmarkFrame, state: AlignmentState, rig: RigCalibration, lam1):
    """Per-camera landmark groups ``(K, head_to_cam, vertex ids, uv, weight)``."""
    obs = []
    face = frame.visible("face")
    labels = [k for k in sorted(face) if k in model.landmark_vertex_ids]
    if labels:
        obs.append((rig.face_cam, state.head_to_face(), model.landmark_ids(labels),
                    np.array([face[k] for k in labels]), 1.0))
    for side in ("left", "right"):
        pts = frame.visible(side)
        labels = [k for k in sorted(pts) if k in model.landmark_vertex_ids]
        if labels and lam1 > 0:
            obs.append((rig.eye_cam(side), rig.hmd_to_eye(side) @ state.head_to_hmd,
                        model.landmark_ids(labels), np.array([pts[k] for k in labels]), np.sqrt(lam1)))
    return obs


def expression_system(model: BilinearFaceModel, cid, frame: LandmarkFrame, state: AlignmentState,
                      rig: RigCalibration, cfg: TrackerConfig):
    """Stacked linear least-squares system ``A x ~ b`` for the non-anchor expression weights.

    Projections are linearised about ``state.previous_expression``.
    """
    E = model.expression_dim
    basis = model.expression_basis(cid)  # (Nv, 3, E)
    x0 = _vec(state.previous_expression)
    rows_A, rows_b = [], []
    for K, T, ids, uv, w in _observations(model, frame, state, rig, cfg.lam1):
        Bv = basis[ids]  # (n, 3, E)
        X0 = Bv @ x0
        P0 = T.apply(X0)
        if np.any(P0[:, 2] <= 0):
            raise TrackingError("landmark vertex behind camera")
        pix0 = K.project_camera_points(P0)
        Jp = np.einsum("nij,jk,nkl->nil", projection_jacobian(K, P0), T.rotation, Bv[:, :, 1:])
        rows_A.append(w * Jp.reshape(-1, E - 1))
        rows_b.append(w * (uv - pix0).ravel() + w * Jp.reshape(-1, E - 1) @ x0[1:])
    if not rows_A:
        raise TrackingError("no usable landmarks")
    prev = x0[1:]
    if cfg.lam2 > 0:
        rows_A.append(np.sqrt(cfg.lam2) * np.eye(E - 1))
        rows_b.append(np.sqrt(cfg.lam2) * prev)
    if cfg.lam3 > 0:
        rows_A.append(np.diag(np.sqrt(cfg.lam3) / model.expression_prior_scale[1:]))
        rows_b.append(np.zeros(E - 1))
    return np.vstack(rows_A), np.concatenate(rows_b)


def statistical_energy(model: BilinearFaceModel, cexp) -> float:
    """``c^T D c`` with ``D = diag(1 / theta^2)`` over the full expression vector."""
    c = _vec(cexp)
    return float(c @ (c / model.expression_prior_scale**2))


def track_expression(model: BilinearFaceModel, cid, frame: LandmarkFrame, state: AlignmentState,
                     rig: RigCalibration, cfg: TrackerConfig = TrackerConfig()) -> ExpressionWeights:
    """One linear least-squares solve for the frame's expression weights.

    The previous expression is returned unchanged when too few face landmarks
    are visible.
    """
    n_face = len(frame.face)
    if n_face and len(frame.visible("face")) < cfg.min_visible_fraction * n_face:
        log.info("frame %d: too few visible face landmarks, carrying expression forward", frame.frame_index)
        return state.previous_expression
    A, b = expression_system(model, cid, frame, state, rig, cfg)
    AtA = A.T @ A
    cond = np.linalg.cond(AtA)
    if not np.isfinite(cond) or cond > 1e14:
        raise FittingError(f"singular expression normal equations (condition {cond:.3g})")
    x = np.linalg.solve(AtA, A.T @ b)
    return ExpressionWeights(np.concatenate([[_vec(state.previous_expression)[0]], x]))


def reprojection_rms(model: BilinearFaceModel, cid, cexp, frame: LandmarkFrame, state: AlignmentState,
                     rig: RigCalibration) -> float:
    """RMS pixel distance between visible landmarks and the projected model vertices."""
    mesh = evaluate_model(model, cid, cexp)
    sq = []
    for K, T, ids, uv, _ in _observations(model, frame, state, rig, 1.0):
        sq.append(((K.project_camera_points(T.apply(mesh.vertices[ids])) - uv) ** 2).sum(1))
    return float(np.sqrt(np.mean(np.concatenate(sq)))) if sq else 0.0
