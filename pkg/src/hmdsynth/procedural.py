"""Procedural bilinear head model and analytic face textures for desk-scale fixtures.

Model frame: millimetres, x to the subject's left-to-right as seen by a facing
camera, y down, the face looking toward -z.  The origin sits between the eyes.
Textures are functions of each vertex's position on the mean head, so they
stay attached to the skin under identity and expression changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .facemodel import BilinearFaceModel
from .mesh import Mesh, _latlong_faces, orient_outward

EYE_X = 32.0
MOUTH_Y = 62.0
EYE_HALF_WIDTH = 14.0
UPPER_LID = 5.5
LOWER_LID = 5.0
IRIS_RADIUS = 5.8
PUPIL_RADIUS = 2.3


@dataclass(frozen=True)
class HeadSpec:
    rings: int = 40
    segments: int = 64
    el_density: float = 0.6  # < 1 concentrates rings near the eye line
    az_density: float = 0.45  # < 1 concentrates segments near the front
    center: tuple = (0.0, 20.0, 93.0)
    radii: tuple = (75.0, 110.0, 95.0)
    identity_dim: int = 8
    expression_dim: int = 6
    identity_prior_std: float = 0.5
    expression_prior_std: float = 0.5
    seed: int = 7  # only used for modes beyond the hand-designed ones


def _warp(s, a):
    return s * (a + (1.0 - a) * s * s)


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _g2(dx, dy, sx, sy):
    return np.exp(-0.5 * ((dx / sx) ** 2 + (dy / sy) ** 2))


def _ellipsoid(spec: HeadSpec):
    """Base points, outward normals and the face topology of the head ellipsoid."""
    i = np.arange(1, spec.rings + 1)
    el = 0.5 * np.pi * _warp(-1.0 + 2.0 * i / (spec.rings + 1), spec.el_density)
    j = np.arange(spec.segments)
    az = np.pi * _warp(-1.0 + 2.0 * j / spec.segments, spec.az_density)
    EL, AZ = np.meshgrid(el, az, indexing="ij")
    el_all = np.concatenate([[-0.5 * np.pi], EL.ravel(), [0.5 * np.pi]])
    az_all = np.concatenate([[0.0], AZ.ravel(), [0.0]])
    c = np.asarray(spec.center, dtype=float)
    r = np.asarray(spec.radii, dtype=float)
    unit = np.stack([np.cos(el_all) * np.sin(az_all), -np.sin(el_all), -np.cos(el_all) * np.cos(az_all)], 1)
    pts = c + unit * r
    normals = unit / r
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    front = _smoothstep(0.15, 0.55, np.cos(el_all) * np.cos(az_all))
    faces = _latlong_faces(spec.rings, spec.segments)
    return pts, normals, front, faces


def _nose(x, y):
    h = (4.0 * _smoothstep(-15, -5, y) + 16.0 * _smoothstep(-5, 32, y)) * (1 - _smoothstep(31, 40, y))
    sx = 5.0 + 5.0 * _smoothstep(0, 35, y)
    return h * np.exp(-0.5 * (x / sx) ** 2)


def _mean_relief(x, y):
    ax = np.abs(x)
    return (
        _nose(x, y)
        - 5.0 * _g2(ax - EYE_X, y, 12, 9)
        + 3.0 * _g2(ax - 30, y + 15, 18, 6)
        + 4.0 * _g2(ax - 45, y - 30, 15, 15)
        + 8.0 * _g2(x, y - 95, 22, 12)
        + 5.0 * _g2(x, y - MOUTH_Y, 20, 7)
    )


def _identity_modes(base, normal, front, spec: HeadSpec):
    x, y = base[:, 0], base[:, 1]
    ax = np.abs(x)
    zeros = np.zeros_like(x)
    modes = [
        np.stack([0.12 * x * np.exp(-0.5 * ((y - 45) / 40) ** 2), zeros, zeros], 1),
        np.stack([zeros, 9.0 * _smoothstep(50, 110, y), zeros], 1),
        normal * (0.5 * _nose(x, y) * front)[:, None],
        np.stack([np.sign(x) * 4.0 * _g2(ax - EYE_X, y, 14, 12), zeros, zeros], 1),
        normal * (4.0 * _g2(ax - 30, y + 15, 20, 7) * front)[:, None],
        normal * (5.0 * _g2(ax - 45, y - 30, 15, 15) * front)[:, None],
        np.stack([zeros, -8.0 * _smoothstep(-10, -90, y), zeros], 1),
    ]
    rng = np.random.default_rng(spec.seed)
    while len(modes) < spec.identity_dim - 1:
        kx, ky = rng.uniform(0.01, 0.04, 2)
        px, py = rng.uniform(0, 2 * np.pi, 2)
        modes.append(normal * (3.0 * np.sin(kx * x + px) * np.sin(ky * y + py))[:, None])
    return modes[: spec.identity_dim - 1]


def _expression_modes(base, front, spec: HeadSpec):
    x, y = base[:, 0], base[:, 1]
    ax = np.abs(x)
    zeros = np.zeros_like(x)
    lower = np.exp(-0.5 * (x / 55) ** 2) * front
    smile = _g2(ax - 22, y - MOUTH_Y, 12, 10) * front
    modes = [
        np.stack([zeros, 14.0 * _smoothstep(58, 75, y) * lower, zeros], 1),
        np.stack([6.0 * np.sign(x) * smile, -4.0 * smile, zeros], 1),
        np.stack([zeros, -6.0 * _g2(ax - 30, y + 16, 22, 9) * front, zeros], 1),
        np.stack([zeros, -0.8 * y * _g2(ax - EYE_X, y, 16, 9) * front, zeros], 1),
        np.stack([-0.35 * x * _g2(x, y - MOUTH_Y, 22, 10) * front, zeros, zeros], 1),
    ]
    rng = np.random.default_rng(spec.seed + 1)
    while len(modes) < spec.expression_dim - 1:
        kx, ky = rng.uniform(0.02, 0.06, 2)
        px, py = rng.uniform(0, 2 * np.pi, 2)
        w = 2.0 * front * np.sin(kx * x + px) * np.sin(ky * y + py)
        modes.append(np.stack([w, np.roll(w, 1) * 0.5, zeros], 1))
    return modes[: spec.expression_dim - 1]


def _lid_curves(dx):
    u = np.clip(1.0 - (dx / EYE_HALF_WIDTH) ** 2, 0.0, None)
    return -UPPER_LID * u, LOWER_LID * u


def landmark_targets() -> dict[str, tuple[float, float]]:
    """Canonical ``(x, y)`` positions defining each semantic landmark."""
    t = {}
    for k in range(12):
        a = 2 * np.pi * k / 12
        t[f"mouth_{k:02d}"] = (-22 * np.cos(a), MOUTH_Y - 9 * np.sin(a))
    for k in range(8):
        a = 2 * np.pi * k / 8
        t[f"mouth_{12 + k:02d}"] = (-13 * np.cos(a), MOUTH_Y - 3.5 * np.sin(a))
    for k, x in enumerate((-12, -6, 0, 6, 12)):
        t[f"nose_{k:02d}"] = (x, 36.0)
    jaw = [(-60, 40), (-55, 62), (-45, 82), (-30, 98), (-15, 107), (0, 110),
           (15, 107), (30, 98), (45, 82), (55, 62), (60, 40)]
    for k, p in enumerate(jaw):
        t[f"jaw_{k:02d}"] = p
    for side, ex in (("l", -EYE_X), ("r", EYE_X)):
        for k, (dx, dy) in enumerate(((-16, -15), (-8, -18), (0, -19), (8, -18), (16, -14))):
            t[f"brow_{side}_{k}"] = (ex + dx, dy)
        for k, dx in enumerate((-14, -6, 6, 14, 6, -6)):
            up, lo = _lid_curves(np.float64(dx))
            dy = 0.0 if abs(dx) == 14 else (up if k in (1, 2) else lo)
            t[f"eye_{side}_{k}"] = (ex + dx, float(dy))
    return t


FACE_GROUPS = ("mouth", "nose", "jaw")
ANCHOR_LABELS = ("eye_l_0", "eye_l_3", "eye_r_0", "eye_r_3", "nose_02", "mouth_00", "mouth_06")


def face_labels(model: BilinearFaceModel) -> list[str]:
    return sorted(k for k in model.landmark_vertex_ids if k.split("_")[0] in FACE_GROUPS)


def eye_labels(model: BilinearFaceModel, side: str) -> list[str]:
    s = side[0]
    return sorted(k for k in model.landmark_vertex_ids
                  if k.startswith(f"eye_{s}_") or k.startswith(f"brow_{s}_"))


def build_head_model(spec: HeadSpec = HeadSpec()) -> BilinearFaceModel:
    """Bilinear tensor ``(3 Nv, I, E)`` with anchor slices and a 58-point landmark table."""
    if spec.identity_dim < 2 or spec.expression_dim < 2:
        raise ValueError("need at least one displacement mode per weight vector")
    base, normal, front, faces = _ellipsoid(spec)
    mean = base + normal * (_mean_relief(base[:, 0], base[:, 1]) * front)[:, None]
    id_modes = _identity_modes(base, normal, front, spec)
    ex_modes = _expression_modes(base, front, spec)
    Nv = len(base)
    I, E = spec.identity_dim, spec.expression_dim
    B = np.zeros((Nv, 3, I, E))
    B[:, :, 0, 0] = mean
    for i, d in enumerate(id_modes, start=1):
        B[:, :, i, 0] = d
    for e, d in enumerate(ex_modes, start=1):
        B[:, :, 0, e] = d
        for i in range(1, I):
            B[:, :, i, e] = (0.05 if i % 2 else -0.05) * d  # identity-dependent expression amplitude

    mesh = orient_outward(Mesh(mean, faces))
    fr = np.flatnonzero(front > 0.5)
    ids: dict[str, int] = {}
    used = set()
    for label, (tx, ty) in landmark_targets().items():
        d = (mean[fr, 0] - tx) ** 2 + (mean[fr, 1] - ty) ** 2
        for k in np.argsort(d, kind="stable"):
            v = int(fr[k])
            if v not in used:
                used.add(v)
                ids[label] = v
                break

    prior_scale = np.full(I, spec.identity_prior_std)
    prior_scale[0] = 0.05
    exp_scale = np.full(E, spec.expression_prior_std)
    exp_scale[0] = 1.0
    return BilinearFaceModel(
        core_tensor=B.reshape(3 * Nv, I, E),
        faces=mesh.faces,
        landmark_vertex_ids=ids,
        identity_prior_mean=np.eye(I)[0],
        identity_prior_scale=prior_scale,
        expression_prior_scale=exp_scale,
        canonical_points=mean,
    )


# -- textures -------------------------------------------------------------------------------


def _noise(x, y, z):
    return (np.sin(0.21 * x + 0.7) * np.sin(0.17 * y + 1.3) + 0.5 * np.sin(0.47 * x - 0.31 * y)
            + 0.3 * np.sin(0.9 * y + 0.4 * z)) / 1.8


def _eye_layers(x, y, gaze):
    """Per-eye soft coverage of opening, iris and pupil, plus an iris radial pattern."""
    opening = np.zeros_like(x)
    iris = np.zeros_like(x)
    pupil = np.zeros_like(x)
    pattern = np.zeros_like(x)
    gx, gy = gaze
    for ex in (-EYE_X, EYE_X):
        dx = x - ex
        up, lo = _lid_curves(dx)
        s = np.minimum(y - up, lo - y)
        o = np.clip(s / 0.6 + 0.5, 0.0, 1.0) * (np.abs(dx) < EYE_HALF_WIDTH)
        r = np.hypot(dx - gx, y - gy)
        ang = np.arctan2(y - gy, dx - gx)
        opening = np.maximum(opening, o)
        iris = np.maximum(iris, o * np.clip((IRIS_RADIUS - r) / 0.6 + 0.5, 0, 1))
        pupil = np.maximum(pupil, o * np.clip((PUPIL_RADIUS - r) / 0.5 + 0.5, 0, 1))
        pattern = np.where(r < IRIS_RADIUS + 1, 0.5 + 0.5 * np.sin(9 * ang) * np.clip(r / IRIS_RADIUS, 0, 1), pattern)
    return opening, iris, pupil, pattern


def _regions(P, gaze):
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    ax = np.abs(x)
    hair = np.maximum(_smoothstep(-68, -78, y), _smoothstep(100, 125, z))
    lip_r = ((x / 21.0) ** 2 + ((y - MOUTH_Y) / 7.5) ** 2)
    lips = np.clip((1.0 - lip_r) / 0.15 + 0.5, 0, 1)
    brow_y = -16.5 + 2.5 * ((ax - 30) / 17) ** 2
    brows = np.clip((2.2 - np.abs(y - brow_y)) / 0.8 + 0.5, 0, 1) * np.clip((17 - np.abs(ax - 30)) / 2, 0, 1)
    nostril = np.clip((1 - ((ax - 6) / 3.2) ** 2 - ((y - 37) / 1.8) ** 2) / 0.3 + 0.5, 0, 1)
    opening, iris, pupil, pattern = _eye_layers(x, y, gaze)
    return dict(hair=hair, lips=lips, brows=brows, nostril=nostril, opening=opening,
                iris=iris, pupil=pupil, pattern=pattern, noise=_noise(x, y, z),
                cheek=_g2(ax - 45, y - 30, 16, 14))


def _mix(base, color, alpha):
    alpha = alpha[:, None] if base.ndim == 2 else alpha
    return base * (1 - alpha) + np.asarray(color) * alpha


def albedo_rgb(P: np.ndarray, gaze=(0.0, 0.0)) -> np.ndarray:
    """Visible-light reflectance in [0, 1] at canonical points ``(N, 3)``."""
    g = _regions(np.asarray(P, dtype=float), gaze)
    skin = np.array([0.86, 0.66, 0.55]) * (1 + 0.05 * g["noise"])[:, None]
    c = skin + np.outer(g["cheek"], [0.04, -0.03, -0.02])
    c = _mix(c, [0.72, 0.36, 0.36], g["lips"])
    c = _mix(c, [0.30, 0.21, 0.16], g["brows"])
    c = _mix(c, [0.35, 0.20, 0.17], g["nostril"])
    c = _mix(c, [0.93, 0.90, 0.87], g["opening"])
    iris = np.array([0.28, 0.42, 0.62]) * (0.75 + 0.5 * g["pattern"])[:, None]
    c = c * (1 - g["iris"])[:, None] + iris * g["iris"][:, None]
    c = _mix(c, [0.05, 0.04, 0.04], g["pupil"])
    c = _mix(c, [0.24, 0.17, 0.12], g["hair"] * (1 - g["opening"]))
    return np.clip(c, 0.0, 1.0)


def albedo_nir(P: np.ndarray, gaze=(0.0, 0.0)) -> np.ndarray:
    """Near-infrared reflectance in [0, 1]; skin and sclera are deliberately close."""
    g = _regions(np.asarray(P, dtype=float), gaze)
    c = 0.70 * (1 + 0.04 * g["noise"])
    c = _mix(c, 0.62, g["lips"])
    c = _mix(c, 0.40, g["brows"])
    c = _mix(c, 0.30, g["nostril"])
    c = _mix(c, 0.77, g["opening"])
    c = c * (1 - g["iris"]) + (0.50 + 0.12 * g["pattern"]) * g["iris"]
    c = _mix(c, 0.07, g["pupil"])
    c = _mix(c, 0.35, g["hair"] * (1 - g["opening"]))
    return np.clip(c, 0.0, 1.0)
