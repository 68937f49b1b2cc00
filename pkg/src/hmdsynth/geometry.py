"""Pinhole cameras, rigid/similarity transforms, PnP and the HMD rig chain.

Conventions: points are row vectors ``(N, 3)`` in millimetres, pixels are
``(N, 2)`` with the origin at the centre of the top-left pixel.  A transform
named ``a_to_b`` maps coordinates expressed in frame ``a`` into frame ``b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .optim import levenberg_marquardt


class GeometryError(ValueError):
    pass


def _frozen(a, shape=None) -> np.ndarray:
    a = np.array(a, dtype=float)
    if shape is not None and a.shape != shape:
        raise GeometryError(f"expected shape {shape}, got {a.shape}")
    a.setflags(write=False)
    return a


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for ``(..., 3)`` vectors."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotation_is_valid(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(
        np.abs(R.T @ R - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol
    )


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.image_width and 0 <= self.cy < self.image_height):
            raise GeometryError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def size(self) -> tuple[int, int]:
        """``(height, width)``, numpy order."""
        return (self.image_height, self.image_width)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            int(round(self.image_width * factor)),
            int(round(self.image_height * factor)),
        )

    def project_camera_points(self, P: np.ndarray) -> np.ndarray:
        """Pinhole projection of camera-frame points; raises for z <= 0."""
        P = np.asarray(P, dtype=float)
        z = P[..., 2]
        if np.any(z <= 0):
            raise GeometryError("point behind camera")
        return np.stack(
            [self.fx * P[..., 0] / z + self.cx, self.fy * P[..., 1] / z + self.cy], axis=-1
        )

    def rays(self, uv: np.ndarray) -> np.ndarray:
        """Unnormalised ray directions (z = 1) through pixels."""
        uv = np.asarray(uv, dtype=float)
        return np.stack(
            [(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy, np.ones(uv.shape[:-1])],
            axis=-1,
        )

    def contains(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= -0.5 + margin)
            & (uv[..., 0] <= self.image_width - 0.5 - margin)
            & (uv[..., 1] >= -0.5 + margin)
            & (uv[..., 1] <= self.image_height - 0.5 - margin)
        )

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                    width=self.image_width, height=self.image_height)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        if not rotation_is_valid(self.rotation):
            raise GeometryError("rotation is not orthonormal with det 1")
        if not np.all(np.isfinite(self.translation)):
            raise GeometryError("translation is not finite")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix(), translation)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @property
    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def apply(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """``(self @ other).apply(x) == self.apply(other.apply(x))``."""
        R = nearest_rotation(self.rotation @ other.rotation)
        return RigidTransform(R, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def perturbed(self, delta: np.ndarray) -> "RigidTransform":
        """Left-multiplied increment ``exp(delta[:3]), delta[3:]`` (tangent at the output frame)."""
        delta = np.asarray(delta, dtype=float)
        return RigidTransform.from_rotvec(delta[:3], delta[3:]) @ self

    def angle_to(self, other: "RigidTransform") -> float:
        return float(np.linalg.norm(Rotation.from_matrix(self.rotation.T @ other.rotation).as_rotvec()))

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.ravel().tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.reshape(np.asarray(d["rotation"], dtype=float), (3, 3)), d["translation"])


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError("scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        if not rotation_is_valid(self.rotation):
            raise GeometryError("rotation is not orthonormal with det 1")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(X, dtype=float) @ self.rotation.T) + self.translation

    def inverse_apply(self, Y: np.ndarray) -> np.ndarray:
        return ((np.asarray(Y, dtype=float) - self.translation) @ self.rotation) / self.scale

    def to_dict(self) -> dict:
        return {"scale": self.scale, "rotation": self.rotation.ravel().tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(float(d["scale"]), np.reshape(np.asarray(d["rotation"], dtype=float), (3, 3)),
                   d["translation"])


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity (or rigid) transform taking ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3 or len(src) < 3:
        raise GeometryError("umeyama needs matching (N>=3, 3) point sets")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = U @ np.diag(D) @ Vt
    var_s = (xs**2).sum() / len(src)
    s = float((S * D).sum() / var_s) if with_scale else 1.0
    return SimilarityTransform(s, R, mu_d - s * R @ mu_s)


def project(K: CameraIntrinsics, T: RigidTransform, X: np.ndarray) -> np.ndarray:
    """Project model points ``X`` through extrinsic ``T`` and intrinsics ``K``."""
    return K.project_camera_points(T.apply(X))


def projection_jacobian(K: CameraIntrinsics, P: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera point), shape ``(N, 2, 3)``."""
    P = np.atleast_2d(P)
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    J = np.zeros((len(P), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z**2
    return J


def pose_jacobian(P: np.ndarray) -> np.ndarray:
    """d(point)/d(left increment) for points already in the increment's frame, ``(N, 3, 6)``."""
    P = np.atleast_2d(P)
    J = np.zeros((len(P), 3, 6))
    J[:, :, :3] = -skew(P)
    J[:, :, 3:] = np.eye(3)
    return J


@dataclass(frozen=True)
class PointCorrespondences:
    object_points: np.ndarray
    image_points: np.ndarray

    def __post_init__(self):
        obj = _frozen(self.object_points)
        img = _frozen(self.image_points)
        if obj.ndim != 2 or obj.shape[1] != 3 or img.ndim != 2 or img.shape[1] != 2:
            raise GeometryError("object points must be (N, 3) and image points (N, 2)")
        if len(obj) != len(img):
            raise GeometryError("object and image point counts differ")
        if len(obj) < 4:
            raise GeometryError("degenerate PnP input: fewer than 4 points")
        if len(np.unique(obj, axis=0)) != len(obj):
            raise GeometryError("duplicate object points")
        object.__setattr__(self, "object_points", obj)
        object.__setattr__(self, "image_points", img)


def _normalise_2d(x):
    mu = x.mean(0)
    d = np.sqrt(((x - mu) ** 2).sum(1)).mean()
    s = np.sqrt(2) / max(d, 1e-12)
    T = np.array([[s, 0, -s * mu[0]], [0, s, -s * mu[1]], [0, 0, 1]])
    return (x - mu) * s, T


def _homography(src, dst):
    """DLT homography with Hartley normalisation, ``dst ~ H src``."""
    a, Ta = _normalise_2d(src)
    b, Tb = _normalise_2d(dst)
    n = len(src)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = a
    A[0::2, 2] = 1
    A[0::2, 6:8] = -b[:, :1] * a
    A[0::2, 8] = -b[:, 0]
    A[1::2, 3:5] = a
    A[1::2, 5] = 1
    A[1::2, 6:8] = -b[:, 1:2] * a
    A[1::2, 8] = -b[:, 1]
    H = np.linalg.svd(A)[2][-1].reshape(3, 3)
    return np.linalg.inv(Tb) @ H @ Ta


def _planar_init(obj, xn):
    """Pose from a homography between the points' best-fit plane and normalised pixels."""
    c = obj.mean(0)
    Vt = np.linalg.svd(obj - c)[2]
    Q = Vt.copy()
    if np.linalg.det(Q) < 0:
        Q[2] *= -1
    local = (obj - c) @ Q.T
    H = _homography(local[:, :2], xn)
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if (lam * h3)[2] < 0:
        lam = -lam
    r1, r2, t = lam * h1, lam * h2, lam * h3
    R_local = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    R = R_local @ Q
    return RigidTransform(R, t - R @ c)


def _dlt_init(obj, xn):
    n = len(obj)
    Xh = np.hstack([obj, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:2] * Xh
    P = np.linalg.svd(A)[2][-1].reshape(3, 4)
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    scale = np.cbrt(np.linalg.det(M))
    R = nearest_rotation(M / scale)
    return RigidTransform(R, P[:, 3] / scale)


def _pnp_refine(obj, img, K, T0, max_iter=100):
    def residual_jac(T):
        P = T.apply(obj)
        if np.any(P[:, 2] <= 0):
            return None
        r = (K.project_camera_points(P) - img).ravel()
        J = np.einsum("nij,njk->nik", projection_jacobian(K, P), pose_jacobian(P)).reshape(-1, 6)
        return r, J

    return levenberg_marquardt(residual_jac, T0, lambda T, d: T.perturbed(d),
                               max_iter=max_iter, tol=1e-15)


def solve_pnp(corr: PointCorrespondences, K: CameraIntrinsics) -> tuple[RigidTransform, float]:
    """Object-to-camera pose minimising squared reprojection error.

    Linear initialisation (homography for planar targets, DLT otherwise) followed by
    Levenberg-Marquardt with axis-angle increments. Returns ``(pose, rms_px)``.
    """
    obj, img = corr.object_points, corr.image_points
    centred = obj - obj.mean(0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise GeometryError("degenerate PnP input: collinear object points")
    xn = K.rays(img)[:, :2]
    planar = sv[2] <= 1e-6 * sv[0]
    candidates = [_planar_init(obj, xn)]
    if not planar and len(obj) >= 6:
        candidates.insert(0, _dlt_init(obj, xn))
    best = None
    for T0 in candidates:
        if np.any(T0.apply(obj)[:, 2] <= 0):
            continue
        res = _pnp_refine(obj, img, K, T0)
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise GeometryError("degenerate PnP input: no valid initial pose")
    rms = float(np.sqrt(2.0 * best.cost / len(obj)))
    return best.x, rms


def compose_rig(checker_to_face: RigidTransform, checker_to_eye: RigidTransform,
                hmd_to_face: RigidTransform) -> RigidTransform:
    """``M_{c->e} M_{c->f}^{-1} M_{h->f}``: maps HMD-frame points into the eye camera frame."""
    M = checker_to_eye.matrix @ np.linalg.inv(checker_to_face.matrix) @ hmd_to_face.matrix
    return RigidTransform(nearest_rotation(M[:3, :3]), M[:3, 3])


@dataclass(frozen=True)
class RigCalibration:
    """Intrinsics plus the checkerboard-bridged extrinsics of the three-camera rig.

    ``eye_left_to_hmd`` / ``eye_right_to_hmd`` are derived with :func:`compose_rig`
    and, like the product they come from, map HMD-frame coordinates into the
    respective eye camera frame.  ``hmd_dots`` holds the coplanar tracking dot
    layout in the HMD frame (mm), used for per-frame HMD pose estimation.
    """

    face_cam: CameraIntrinsics
    eye_cam_left: CameraIntrinsics
    eye_cam_right: CameraIntrinsics
    checker_to_face: RigidTransform
    checker_to_eye_left: RigidTransform
    checker_to_eye_right: RigidTransform
    hmd_to_face: RigidTransform
    hmd_dots: np.ndarray | None = None
    eye_left_to_hmd: RigidTransform = field(init=False)
    eye_right_to_hmd: RigidTransform = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "eye_left_to_hmd",
                           compose_rig(self.checker_to_face, self.checker_to_eye_left, self.hmd_to_face))
        object.__setattr__(self, "eye_right_to_hmd",
                           compose_rig(self.checker_to_face, self.checker_to_eye_right, self.hmd_to_face))
        if self.hmd_dots is not None:
            object.__setattr__(self, "hmd_dots", _frozen(self.hmd_dots))

    def eye_cam(self, side: str) -> CameraIntrinsics:
        return self.eye_cam_left if side == "left" else self.eye_cam_right

    def hmd_to_eye(self, side: str) -> RigidTransform:
        return self.eye_left_to_hmd if side == "left" else self.eye_right_to_hmd

    def hmd_pose_from_dots(self, dot_pixels: np.ndarray) -> tuple[RigidTransform, float]:
        if self.hmd_dots is None:
            raise GeometryError("calibration carries no HMD dot layout")
        return solve_pnp(PointCorrespondences(self.hmd_dots, dot_pixels), self.face_cam)

    def to_dict(self) -> dict:
        d = {
            "face_cam": self.face_cam.to_dict(),
            "eye_cam_left": self.eye_cam_left.to_dict(),
            "eye_cam_right": self.eye_cam_right.to_dict(),
            "checker_to_face": self.checker_to_face.to_dict(),
            "checker_to_eye_left": self.checker_to_eye_left.to_dict(),
            "checker_to_eye_right": self.checker_to_eye_right.to_dict(),
            "hmd_to_face": self.hmd_to_face.to_dict(),
            "derived": {
                "eye_left_to_hmd": self.eye_left_to_hmd.to_dict(),
                "eye_right_to_hmd": self.eye_right_to_hmd.to_dict(),
            },
        }
        if self.hmd_dots is not None:
            d["hmd_dots"] = np.asarray(self.hmd_dots).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RigCalibration":
        return cls(
            face_cam=CameraIntrinsics.from_dict(d["face_cam"]),
            eye_cam_left=CameraIntrinsics.from_dict(d["eye_cam_left"]),
            eye_cam_right=CameraIntrinsics.from_dict(d["eye_cam_right"]),
            checker_to_face=RigidTransform.from_dict(d["checker_to_face"]),
            checker_to_eye_left=RigidTransform.from_dict(d["checker_to_eye_left"]),
            checker_to_eye_right=RigidTransform.from_dict(d["checker_to_eye_right"]),
            hmd_to_face=RigidTransform.from_dict(d["hmd_to_face"]),
            hmd_dots=None if d.get("hmd_dots") is None else np.asarray(d["hmd_dots"], dtype=float),
        )
