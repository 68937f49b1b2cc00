"""Bilinear face model and the two-stage identity fit (sparse cloud, then 2D landmarks).

Weight layout used throughout: component 0 of both the identity and the
expression vector is the *anchor* mode (mean head, neutral expression); the
remaining components are displacement modes.  The neutral expression is
therefore ``e_0`` and "no expression activation" means components ``1:`` are zero.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform, SimilarityTransform, umeyama
from .mesh import ClosestPointQuery, Mesh

log = logging.getLogger(__name__)

TENSOR_MAGIC = b"BLFM"


class FittingError(RuntimeError):
    pass


@dataclass(frozen=True)
class IdentityWeights:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("identity weights must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class ExpressionWeights:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("expression weights must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def neutral(cls, dim: int) -> "ExpressionWeights":
        v = np.zeros(dim)
        v[0] = 1.0
        return cls(v)


def _vec(w) -> np.ndarray:
    return np.asarray(getattr(w, "values", w), dtype=float)


@dataclass
class BilinearFaceModel:
    core_tensor: np.ndarray  # (V, I, E), V = 3 * vertex_count
    faces: np.ndarray  # (F, 3) topology shared by every generated mesh
    landmark_vertex_ids: dict[str, int]
    identity_prior_mean: np.ndarray
    identity_prior_scale: np.ndarray
    expression_prior_scale: np.ndarray
    canonical_points: np.ndarray | None = field(default=None, repr=False)  # (Nv, 3) texture lookup coords

    def __post_init__(self):
        self.core_tensor = np.asarray(self.core_tensor, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        V, I, E = self.core_tensor.shape
        if V % 3:
            raise ValueError("vertex-coordinate dimension must be divisible by 3")
        self.identity_prior_mean = np.asarray(self.identity_prior_mean, dtype=float)
        self.identity_prior_scale = np.asarray(self.identity_prior_scale, dtype=float)
        self.expression_prior_scale = np.asarray(self.expression_prior_scale, dtype=float)
        if self.identity_prior_mean.shape != (I,) or self.identity_prior_scale.shape != (I,):
            raise ValueError("identity priors must have length I")
        if self.expression_prior_scale.shape != (E,):
            raise ValueError("expression prior scale must have length E")
        if np.any(self.identity_prior_scale <= 0) or np.any(self.expression_prior_scale <= 0):
            raise ValueError("prior scales must be strictly positive")
        bad = [k for k, v in self.landmark_vertex_ids.items() if not 0 <= v < V // 3]
        if bad:
            raise ValueError(f"landmark vertex ids out of range: {bad}")

    @property
    def identity_dim(self) -> int:
        return self.core_tensor.shape[1]

    @property
    def expression_dim(self) -> int:
        return self.core_tensor.shape[2]

    @property
    def vertex_count(self) -> int:
        return self.core_tensor.shape[0] // 3

    def neutral(self) -> ExpressionWeights:
        return ExpressionWeights.neutral(self.expression_dim)

    def landmark_ids(self, labels) -> np.ndarray:
        try:
            return np.array([self.landmark_vertex_ids[k] for k in labels], dtype=np.int64)
        except KeyError as e:
            raise FittingError(f"unknown landmark label {e.args[0]!r}") from None

    def identity_basis(self, cexp) -> np.ndarray:
        """``B x_3 cexp`` as ``(vertex_count, 3, I)``: vertices are linear in the identity weights."""
        return (self.core_tensor @ _vec(cexp)).reshape(self.vertex_count, 3, self.identity_dim)

    def expression_basis(self, cid) -> np.ndarray:
        """``B x_2 cid`` as ``(vertex_count, 3, E)``."""
        return np.einsum("vie,i->ve", self.core_tensor, _vec(cid)).reshape(
            self.vertex_count, 3, self.expression_dim)


def evaluate_model(model: BilinearFaceModel, cid, cexp) -> Mesh:
    """Mesh vertices ``M = B x_2 cid x_3 cexp``."""
    cid, cexp = _vec(cid), _vec(cexp)
    if cid.shape != (model.identity_dim,) or cexp.shape != (model.expression_dim,):
        raise ValueError(
            f"weight dimensions {cid.shape}/{cexp.shape} do not match the tensor "
            f"({model.identity_dim}, {model.expression_dim})")
    v = np.einsum("vie,i,e->v", model.core_tensor, cid, cexp)
    return Mesh(v.reshape(-1, 3), model.faces)


@dataclass(frozen=True)
class SparseCloud:
    points: np.ndarray
    anchor_landmarks: dict[str, np.ndarray]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if len(self.anchor_landmarks) < 7:
            raise ValueError("a sparse cloud needs at least 7 labelled anchor landmarks")
        object.__setattr__(self, "anchor_landmarks",
                           {k: np.asarray(v, dtype=float) for k, v in self.anchor_landmarks.items()})


class CloudFit(NamedTuple):
    identity: IdentityWeights
    transform: SimilarityTransform
    history: list
    rms: float


def _corr_points(verts, vids, w):
    return np.einsum("nk,nkd->nd", w, verts[vids])


def _closest(verts: np.ndarray, faces: np.ndarray, X: np.ndarray, mode: str):
    """Closest model points to ``X``: ``(points, vertex ids (N, 3), barycentrics (N, 3), normals)``."""
    mesh = Mesh(verts, faces)
    if mode == "vertex":
        _, vid = cKDTree(verts).query(X)
        vids = np.repeat(vid[:, None], 3, axis=1)
        w = np.zeros((len(vid), 3))
        w[:, 0] = 1.0
        return verts[vid], vids, w, mesh.vertex_normals()[vid]
    if mode == "surface":
        q, f, bary, _ = ClosestPointQuery(mesh).query(X)
        return q, faces[f], bary, mesh.face_normals()[f]
    raise ValueError(f"unknown correspondence mode {mode!r}")


def fit_identity_to_cloud(
    model: BilinearFaceModel,
    cloud: SparseCloud,
    iters: int = 50,
    n_samples: int | None = None,
    seed: int = 0,
    correspondence: str = "surface",
    tol: float = 1e-10,
    tangent_weight: float = 1e-3,
) -> CloudFit:
    """Fit ``s, R, t`` and the identity weights to a sparse point cloud.

    The similarity is initialised from the labelled anchors.  Each iteration
    finds the closest model point of every cloud point (surface point, or
    vertex with ``correspondence="vertex"``) and takes a damped Gauss-Newton
    step on point-to-plane residuals plus ``tangent_weight`` times the
    point-to-point residuals.  Identity component 0 stays at its prior value
    (the bilinear model is otherwise scale-ambiguous under ``s``).  A step is
    kept only if the summed squared closest-point distance drops, so the
    objective never increases.
    """
    pts = cloud.points
    if len(pts) == 0:
        raise FittingError("empty point cloud")
    rng = np.random.default_rng(seed)
    if n_samples is not None and n_samples < len(pts):
        pts = pts[np.sort(rng.choice(len(pts), n_samples, replace=False))]

    basis = model.identity_basis(model.neutral())  # (Nv, 3, I)
    c = model.identity_prior_mean.copy()
    free = np.arange(1, model.identity_dim)

    labels = sorted(cloud.anchor_landmarks)
    vids = model.landmark_ids(labels)
    anchors = np.array([cloud.anchor_landmarks[k] for k in labels])
    sim = umeyama((basis @ c)[vids], anchors)

    def energy(sim, c):
        X = sim.inverse_apply(pts)
        q, cv, cw, n = _closest(basis @ c, model.faces, X, correspondence)
        return float(sim.scale**2 * ((q - X) ** 2).sum()), cv, cw, n

    e, cv, cw, nrm = energy(sim, c)
    history = [e]
    lam = 1e-4
    n_par = 7 + len(free)
    for it in range(iters):
        if e <= 1e-20 * len(pts):
            break
        sR = sim.scale * sim.rotation
        M = _corr_points(basis @ c, cv, cw)
        W = M @ sR.T + sim.translation
        r = W - pts  # (N, 3)
        G = np.einsum("nk,nkdi->ndi", cw, basis[cv])[:, :, free]  # (N, 3, F)
        J = np.zeros((len(pts), 3, n_par))
        J[:, :, 0] = W - sim.translation  # log-scale
        SRM = M @ sR.T
        J[:, 0, 1:4] = np.column_stack([np.zeros(len(pts)), SRM[:, 2], -SRM[:, 1]])
        J[:, 1, 1:4] = np.column_stack([-SRM[:, 2], np.zeros(len(pts)), SRM[:, 0]])
        J[:, 2, 1:4] = np.column_stack([SRM[:, 1], -SRM[:, 0], np.zeros(len(pts))])
        J[:, :, 4:7] = np.eye(3)
        J[:, :, 7:] = np.einsum("ij,njf->nif", sR, G)
        nw = nrm @ sim.rotation.T
        A = np.vstack([np.einsum("nd,ndp->np", nw, J), np.sqrt(tangent_weight) * J.reshape(-1, n_par)])
        b = np.concatenate([np.einsum("nd,nd->n", nw, r), np.sqrt(tangent_weight) * r.ravel()])
        H = A.T @ A
        g = A.T @ b
        accepted = False
        while lam < 1e12:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
            R_new = RigidTransform.from_rotvec(step[1:4]).rotation @ sim.rotation
            sim_new = SimilarityTransform(sim.scale * np.exp(step[0]), R_new, sim.translation + step[4:7])
            c_new = c.copy()
            c_new[free] += step[7:]
            e_new, cv_new, cw_new, n_new = energy(sim_new, c_new)
            if e_new < e:
                sim, c, cv, cw, nrm = sim_new, c_new, cv_new, cw_new, n_new
                lam = max(lam / 10, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted:
            break
        prev, e = e, e_new
        history.append(e)
        if prev - e <= tol * max(prev, 1e-300):
            break
    rms = float(np.sqrt(history[-1] / len(pts)))
    log.debug("cloud fit: %d iterations, rms %.3g mm", len(history) - 1, rms)
    return CloudFit(IdentityWeights(c), sim, history, rms)


def _project_h(P, X):
    Xh = X @ P[:, :3].T + P[:, 3]
    return Xh[:, :2] / Xh[:, 2:3], Xh


def landmark_objective(model, frames, cid, prior, lam, transform=None) -> float:
    """Value of the landmark reprojection energy plus the prior term."""
    r = _landmark_residuals(model, frames, _vec(cid), _vec(prior), lam, transform)[0]
    return float(r @ r)


def _landmark_residuals(model, frames, c, c0, lam, transform):
    sim = transform or SimilarityTransform.identity()
    basis = model.identity_basis(model.neutral())
    theta = model.identity_prior_scale
    rs, Js = [], []
    for P, landmarks in frames:
        P = np.asarray(P, dtype=float)
        labels = list(landmarks)
        ids = model.landmark_ids(labels)
        obs = np.array([landmarks[k] for k in labels], dtype=float)
        Bj = basis[ids]  # (K, 3, I)
        A = sim.scale * np.einsum("ab,kbi->kai", sim.rotation, Bj)
        Y = A @ c + sim.translation
        uv, Xh = _project_h(P, Y)
        rs.append((uv - obs).ravel())
        dXh = np.einsum("ab,kbi->kai", P[:, :3], A)  # (K, 3, I)
        z = Xh[:, 2]
        J = np.empty((len(ids), 2, len(c)))
        J[:, 0] = dXh[:, 0] / z[:, None] - (Xh[:, 0] / z**2)[:, None] * dXh[:, 2]
        J[:, 1] = dXh[:, 1] / z[:, None] - (Xh[:, 1] / z**2)[:, None] * dXh[:, 2]
        Js.append(J.reshape(-1, len(c)))
    w = np.sqrt(lam) / theta
    rs.append(w * (c - c0))
    Js.append(np.diag(w))
    return np.concatenate(rs), np.vstack(Js)


def fit_identity_to_landmarks(
    model: BilinearFaceModel,
    frames: list,
    prior,
    lam: float = 1.0,
    transform: SimilarityTransform | None = None,
    max_iter: int = 50,
    grad_tol: float = 1e-8,
) -> IdentityWeights:
    """Refine identity weights from 2D landmarks seen through fixed 3x4 projections.

    ``frames`` is a list of ``(P_i, {label: (u, v)})``; ``transform`` places the
    model in the projections' world frame (typically the cloud-fit similarity).
    Gauss-Newton with backtracking; stops when the gradient norm drops below
    ``grad_tol`` or after ``max_iter`` iterations.
    """
    if lam < 0:
        raise FittingError("lambda must be non-negative")
    if not frames:
        raise FittingError("need at least one frame")
    c0 = _vec(prior).copy()
    c = c0.copy()
    r, J = _landmark_residuals(model, frames, c, c0, lam, transform)
    cost = r @ r
    for _ in range(max_iter):
        g = J.T @ r
        if np.linalg.norm(g) < grad_tol:
            break
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        t = 1.0
        while t > 1e-6:
            c_try = c + t * step
            r_try, J_try = _landmark_residuals(model, frames, c_try, c0, lam, transform)
            if r_try @ r_try <= cost:
                break
            t *= 0.5
        else:
            break
        if np.linalg.norm(t * step) <= 1e-15 * max(1.0, np.linalg.norm(c)):
            c, r, J, cost = c_try, r_try, J_try, r_try @ r_try
            break
        c, r, J, cost = c_try, r_try, J_try, r_try @ r_try
    return IdentityWeights(c)


# -- persistence ---------------------------------------------------------------------------


def save_tensor(path, tensor: np.ndarray) -> None:
    """Little-endian float64 payload after a 16-byte header ``magic, V, I, E``."""
    tensor = np.ascontiguousarray(tensor, dtype="<f8")
    V, I, E = tensor.shape
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + struct.pack("<III", V, I, E))
        fh.write(tensor.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a bilinear tensor file")
    V, I, E = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw, dtype="<f8", offset=16)
    if data.size != V * I * E:
        raise ValueError(f"{path}: payload size {data.size} != {V}*{I}*{E}")
    return data.reshape(V, I, E).astype(float)


def save_model(tensor_path, meta_path, model: BilinearFaceModel) -> None:
    save_tensor(tensor_path, model.core_tensor)
    meta = {
        "faces": model.faces.tolist(),
        "landmark_vertex_ids": {k: int(v) for k, v in model.landmark_vertex_ids.items()},
        "identity_prior_mean": model.identity_prior_mean.tolist(),
        "identity_prior_scale": model.identity_prior_scale.tolist(),
        "expression_prior_scale": model.expression_prior_scale.tolist(),
    }
    if model.canonical_points is not None:
        meta["canonical_points"] = np.asarray(model.canonical_points).tolist()
    Path(meta_path).write_text(json.dumps(meta))


def load_model(tensor_path, meta_path) -> BilinearFaceModel:
    meta = json.loads(Path(meta_path).read_text())
    uv = meta.get("canonical_points")
    return BilinearFaceModel(
        core_tensor=load_tensor(tensor_path),
        faces=np.asarray(meta["faces"], dtype=np.int64),
        landmark_vertex_ids={k: int(v) for k, v in meta["landmark_vertex_ids"].items()},
        identity_prior_mean=meta["identity_prior_mean"],
        identity_prior_scale=meta["identity_prior_scale"],
        expression_prior_scale=meta["expression_prior_scale"],
        canonical_points=None if uv is None else np.asarray(uv, dtype=float),
    )
