"""Synthetic three-camera rig and fixture directory generator.

HMD frame: origin between the eye cameras, x across, y down, z from the
device toward the wearer's face.  The front plate of the device sits at
``z = -plate_depth`` and carries the tracking dots; the face camera looks
along +z from in front of the device.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .facemodel import (BilinearFaceModel, ExpressionWeights, IdentityWeights, evaluate_model,
                        save_model)
from .geometry import CameraIntrinsics, RigCalibration, RigidTransform, SimilarityTransform
from .mesh import Mesh, write_obj
from .procedural import ANCHOR_LABELS, HeadSpec, albedo_nir, albedo_rgb, build_head_model, eye_labels, face_labels
from .render import rasterize
from .tracking import LandmarkFrame, raycast_landmarks, save_landmarks

log = logging.getLogger(__name__)

FACE_LIGHT = np.array([-0.25, -0.45, -1.0])  # direction toward the light, face camera frame


class FixtureError(ValueError):
    pass


@dataclass
class FixtureSpec:
    mode: str = "sim"  # "sim": fixed rig; "mobile": HMD pose varies and is tracked from dots
    n_frames: int = 20
    n_align: int = 10
    n_reference: int = 30
    seed: int = 0
    fps: float = 30.0
    render_images: bool = True
    # head model
    rings: int = 40
    segments: int = 64
    identity_dim: int = 8
    expression_dim: int = 6
    identity_std: float = 0.5
    # true head-to-HMD placement
    head_rotvec: tuple = (0.02, -0.015, 0.01)
    head_translation: tuple = (1.5, -2.0, 31.0)
    # cameras
    face_size: tuple = (640, 480)
    face_focal: float = 1250.0
    face_distance: float = 620.0
    eye_size: tuple = (200, 150)
    eye_focal: float = 110.0
    eye_offset: tuple = (32.0, -5.0)
    # HMD geometry
    plate_depth: float = 25.0
    plate_half_width: float = 95.0
    plate_top: float = -45.0
    plate_bottom: float = 25.0
    box_back: float = 10.0
    n_dots: int = 8
    # scripts
    pose_yaw_deg: float = 15.0
    pose_pitch_deg: float = 8.0
    pose_shift_mm: float = 20.0
    align_yaw_deg: float = 20.0
    align_pitch_deg: float = 12.0
    expression_amplitude: float = 0.6
    expression_period: float = 40.0  # frames
    gaze_amplitude: tuple = (3.5, 1.2)
    # noise
    landmark_noise_px: float = 0.0
    dot_noise_px: float = 0.0
    image_noise: float = 0.0  # 8-bit levels
    cloud_points: int = 500
    cloud_noise_mm: float = 0.0
    cloud_views: int = 4

    def __post_init__(self):
        if self.mode not in ("sim", "mobile"):
            raise FixtureError("mode must be 'sim' or 'mobile'")
        if self.n_frames < 1 or self.n_align < 2 or self.n_reference < 1:
            raise FixtureError("need >= 1 frame, >= 2 alignment frames and >= 1 reference frame")
        if self.n_dots < 4:
            raise FixtureError("need at least 4 HMD dots")
        for k in ("landmark_noise_px", "dot_noise_px", "image_noise", "cloud_noise_mm"):
            if getattr(self, k) < 0:
                raise FixtureError(f"{k} must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise FixtureError(f"unknown fixture keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "FixtureSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def head_spec(self) -> HeadSpec:
        return HeadSpec(rings=self.rings, segments=self.segments, identity_dim=self.identity_dim,
                        expression_dim=self.expression_dim)


# -- rig --------------------------------------------------------------------------------------


def _intrinsics(size, focal) -> CameraIntrinsics:
    w, h = size
    return CameraIntrinsics(focal, focal, (w - 1) / 2.0, (h - 1) / 2.0, int(w), int(h))


def hmd_dot_layout(spec: FixtureSpec) -> np.ndarray:
    """Dots spaced evenly around the front plate's rim, starting at the top-left corner."""
    x0, x1 = -spec.plate_half_width, spec.plate_half_width
    y0, y1 = spec.plate_top, spec.plate_bottom
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]])
    seg = np.linalg.norm(np.diff(corners, axis=0), axis=1)
    s = np.arange(spec.n_dots) * seg.sum() / spec.n_dots
    cum = np.concatenate([[0], np.cumsum(seg)])
    out = []
    for v in s:
        k = min(np.searchsorted(cum, v, side="right") - 1, 3)
        t = (v - cum[k]) / seg[k]
        out.append(corners[k] + t * (corners[k + 1] - corners[k]))
    pts = np.array(out)
    return np.column_stack([pts, np.full(len(pts), -spec.plate_depth)])


def hmd_box_mesh(spec: FixtureSpec) -> Mesh:
    x0, x1 = -spec.plate_half_width, spec.plate_half_width
    y0, y1 = spec.plate_top, spec.plate_bottom
    z0, z1 = -spec.plate_depth, spec.box_back
    v = np.array([[x, y, z] for z in (z0, z1) for y in (y0, y1) for x in (x0, x1)], dtype=float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [[a, b, c], [a, c, d]]
    faces = np.array(faces)
    # orient outward: flip faces whose normal points toward the box centre
    m = Mesh(v, faces)
    n = m.face_normals()
    out = np.einsum("ij,ij->i", n, m.triangles.mean(1) - v.mean(0)) < 0
    faces[out] = faces[out][:, ::-1]
    return Mesh(v, faces)


def build_rig(spec: FixtureSpec) -> RigCalibration:
    face_cam = _intrinsics(spec.face_size, spec.face_focal)
    eye_cam = _intrinsics(spec.eye_size, spec.eye_focal)
    hmd_to_face = RigidTransform(np.eye(3), [0.0, -30.0, spec.face_distance])
    checker_to_face = RigidTransform.from_rotvec([0.35, -0.2, 0.05], [-60.0, 20.0, 480.0])
    chk = {}
    for side, sx in (("left", -1.0), ("right", 1.0)):
        ex, ey = spec.eye_offset
        hmd_to_eye = RigidTransform.from_rotvec([-0.05, sx * 0.03, 0.0]) @ RigidTransform(
            np.eye(3), [-sx * ex, -ey, 0.0])
        chk[side] = hmd_to_eye @ hmd_to_face.inverse() @ checker_to_face
    return RigCalibration(face_cam, eye_cam, eye_cam, checker_to_face, chk["left"], chk["right"],
                          hmd_to_face, hmd_dots=hmd_dot_layout(spec))


# -- scripts ----------------------------------------------------------------------------------


def _pose_offset(yaw, pitch, shift) -> RigidTransform:
    """Head/HMD motion about a pivot 100 mm behind the device's front plate."""
    R = RigidTransform.from_rotvec([pitch, yaw, 0.0])
    pivot = np.array([0.0, 0.0, 100.0])
    return RigidTransform(R.rotation, pivot - R.rotation @ pivot + np.asarray(shift))


def expression_script(spec: FixtureSpec, n: int, phase: float = 0.0) -> np.ndarray:
    E = spec.expression_dim
    t = np.arange(n, dtype=float)
    out = np.zeros((n, E))
    out[:, 0] = 1.0
    for k in range(1, E):
        ph = 1.7 * k + phase
        out[:, k] = spec.expression_amplitude * 0.5 * (1 - np.cos(2 * np.pi * t / (spec.expression_period * (1 + 0.3 * k)) + ph))
        out[:, k] *= 1.0 if k != 4 else 0.6  # keep eyelids open enough for iris search
    return out


def gaze_script(spec: FixtureSpec, n: int, phase: float = 0.0) -> np.ndarray:
    t = np.arange(n, dtype=float)
    ax, ay = spec.gaze_amplitude
    return np.column_stack([ax * np.sin(2 * np.pi * t / 23.0 + phase), ay * np.sin(2 * np.pi * t / 31.0 + 0.5 + phase)])


def hmd_pose_script(spec: FixtureSpec, base: RigidTransform, n: int, phase: float = 0.0) -> list:
    if spec.mode == "sim":
        return [base] * n
    t = np.arange(n, dtype=float)
    yaw = np.deg2rad(spec.pose_yaw_deg) * np.sin(2 * np.pi * t / max(n, 2) + phase)
    pitch = np.deg2rad(spec.pose_pitch_deg) * np.sin(4 * np.pi * t / max(n, 2) + 0.3 + phase)
    sh = spec.pose_shift_mm
    shift = np.column_stack([sh * np.sin(2 * np.pi * t / max(n, 2) + 1.0 + phase),
                             0.5 * sh * np.sin(2 * np.pi * t / max(n, 2) + 2.0 + phase), np.zeros(n)])
    return [base @ _pose_offset(yaw[i], pitch[i], shift[i]) for i in range(n)]


# -- rendering --------------------------------------------------------------------------------


def background_image(K: CameraIntrinsics) -> np.ndarray:
    H, W = K.size
    v, u = np.mgrid[0:H, 0:W].astype(float)
    base = np.stack([0.55 + 0.15 * u / W, 0.60 - 0.1 * v / H, 0.65 + 0.05 * np.sin(u / 40.0)], -1)
    stripes = 0.06 * (np.sin(u / 23.0 + v / 57.0) > 0.6)
    return np.clip(base - stripes[..., None], 0, 1)


def _to_u8(img: np.ndarray, noise: float, rng) -> np.ndarray:
    x = img * 255.0
    if noise > 0:
        x = x + rng.normal(0, noise, x.shape)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


@dataclass
class RenderResult:
    image: np.ndarray  # float [0, 1]
    head_mask: np.ndarray
    occluder_mask: np.ndarray
    depth: np.ndarray


def render_face_view(model: BilinearFaceModel, mesh: Mesh, head_to_cam: RigidTransform, K: CameraIntrinsics,
                     gaze, background: np.ndarray, occluder: tuple | None = None) -> RenderResult:
    """Shaded RGB render of the head, optionally with an occluding mesh ``(Mesh, model_to_cam)``."""
    P = head_to_cam.apply(mesh.vertices)
    ras = rasterize(P, mesh.faces, K)
    img = background.copy()
    m = ras.mask
    can = ras.interpolate(model.canonical_points, mesh.faces)[m]
    n = ras.interpolate(mesh.with_vertices(P).vertex_normals(), mesh.faces)[m]
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    light = FACE_LIGHT / np.linalg.norm(FACE_LIGHT)
    shade = 0.45 + 0.55 * np.clip(n @ light, 0, 1)
    img[m] = albedo_rgb(can, gaze) * shade[:, None]
    depth = ras.depth.copy()
    occ = np.zeros_like(m)
    if occluder is not None:
        omesh, to_cam = occluder
        Q = to_cam.apply(omesh.vertices)
        oras = rasterize(Q, omesh.faces, K)
        occ = oras.mask & (oras.depth < depth)
        fn = omesh.with_vertices(Q).face_normals()
        oshade = 0.5 + 0.5 * np.clip(fn @ light, 0, 1)
        img[occ] = np.array([0.16, 0.16, 0.18]) * oshade[oras.face[occ]][:, None]
        depth = np.where(occ, oras.depth, depth)
    return RenderResult(img, m & ~occ, occ, depth)


def draw_dots(img: np.ndarray, dots_px: np.ndarray, radius: float, color=(0.15, 0.8, 0.25)) -> None:
    H, W = img.shape[:2]
    v, u = np.mgrid[0:H, 0:W]
    for x, y in dots_px:
        img[(u - x) ** 2 + (v - y) ** 2 <= radius**2] = color


def render_eye_view(model: BilinearFaceModel, mesh: Mesh, head_to_eye: RigidTransform, K: CameraIntrinsics,
                    gaze) -> np.ndarray:
    """Near-infrared render lit by an LED next to the lens; returns float gray [0, 1]."""
    P = head_to_eye.apply(mesh.vertices)
    ras = rasterize(P, mesh.faces, K, near=1.0)
    img = np.full(K.size, 0.03)
    m = ras.mask
    can = ras.interpolate(model.canonical_points, mesh.faces)[m]
    n = ras.interpolate(mesh.with_vertices(P).vertex_normals(), mesh.faces)[m]
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    pos = ras.interpolate(P, mesh.faces)[m]
    to_led = -pos / np.linalg.norm(pos, axis=1, keepdims=True)
    shade = 0.35 + 0.65 * np.clip(np.einsum("ij,ij->i", n, to_led), 0, 1)
    img[m] = albedo_nir(can, gaze) * shade
    return img


# -- landmarks -------------------------------------------------------------------------------


def _observe(mesh, ids_by_label, head_to_cam, K, occluders=(), rng=None, noise=0.0):
    """Projected landmark vertices with visibility from a ray test against the mesh and occluders."""
    labels = list(ids_by_label)
    X = mesh.vertices[[ids_by_label[k] for k in labels]]
    P = head_to_cam.apply(X)
    uv = K.project_camera_points(P)
    pts = {k: uv[i] for i, k in enumerate(labels)}
    hits, _ = raycast_landmarks(mesh, K, head_to_cam, pts)
    vis = {}
    for i, k in enumerate(labels):
        ok = bool(K.contains(uv[i], margin=1.0))
        if ok and k in hits:
            ok = np.linalg.norm(hits[k] - X[i]) < 0.5
        elif ok:
            ok = False
        if ok:
            for omesh, o_to_cam in occluders:
                oh, _ = raycast_landmarks(omesh, K, o_to_cam, {k: uv[i]})
                if k in oh and o_to_cam.apply(oh[k][None])[0, 2] < P[i, 2]:
                    ok = False
        vis[k] = ok
    if noise > 0 and rng is not None:
        pts = {k: v + rng.normal(0, noise, 2) for k, v in pts.items()}
    pts = {k: np.clip(v, [-0.5, -0.5], [K.image_width - 0.5, K.image_height - 0.5]) for k, v in pts.items()}
    return pts, vis


def observe_frame(model, mesh, index, timestamp, head_to_hmd, hmd_to_face, rig, spec, box, rng,
                  with_hmd=True) -> LandmarkFrame:
    ids = model.landmark_vertex_ids
    head_to_face = hmd_to_face @ head_to_hmd
    occl = [(box, hmd_to_face)] if with_hmd else []
    face_ids = {k: ids[k] for k in face_labels(model)}
    face, vis = _observe(mesh, face_ids, head_to_face, rig.face_cam, occl, rng, spec.landmark_noise_px)
    eyes = {}
    for side in ("left", "right"):
        e_ids = {k: ids[k] for k in eye_labels(model, side)}
        pts, v = _observe(mesh, e_ids, rig.hmd_to_eye(side) @ head_to_hmd, rig.eye_cam(side), (), rng,
                          spec.landmark_noise_px)
        eyes[side] = pts
        vis.update(v)
    dots = rig.face_cam.project_camera_points(hmd_to_face.apply(rig.hmd_dots))
    if spec.dot_noise_px > 0:
        dots = dots + rng.normal(0, spec.dot_noise_px, dots.shape)
    return LandmarkFrame(index, face, eyes["left"], eyes["right"], dots if with_hmd else None, vis, timestamp)


# -- identity fitting inputs --------------------------------------------------------------------


def _sample_surface(mesh: Mesh, weights: np.ndarray, n: int, rng) -> np.ndarray:
    tri = mesh.triangles
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    p = area * weights
    f = rng.choice(len(tri), n, p=p / p.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    b = np.column_stack([1 - s, s * (1 - r2), s * r2])
    return np.einsum("nk,nkd->nd", b, tri[f])


def identity_inputs(model: BilinearFaceModel, cid, spec: FixtureSpec, rng) -> dict:
    """Sparse cloud, 7 anchors, projection matrices and 2D landmarks in an arbitrary world frame."""
    mesh = evaluate_model(model, cid, model.neutral())
    world = SimilarityTransform(1.15, RigidTransform.from_rotvec([0.1, 2.5, -0.2]).rotation, [40.0, -15.0, 300.0])
    can = model.canonical_points
    front_face = (can[mesh.faces].mean(1)[:, 2] < 40.0).astype(float)
    pts = world.apply(_sample_surface(mesh, front_face, spec.cloud_points, rng))
    if spec.cloud_noise_mm > 0:
        pts = pts + rng.normal(0, spec.cloud_noise_mm, pts.shape)
    anchors = {k: world.apply(mesh.vertices[model.landmark_vertex_ids[k]][None])[0] for k in ANCHOR_LABELS}
    if spec.cloud_noise_mm > 0:
        anchors = {k: v + rng.normal(0, spec.cloud_noise_mm, 3) for k, v in anchors.items()}
    K = _intrinsics(spec.face_size, spec.face_focal)
    views = []
    labels = sorted(model.landmark_vertex_ids)
    X = world.apply(mesh.vertices[model.landmark_ids(labels)])
    for v in range(spec.cloud_views):
        yaw = np.deg2rad(-20 + 40 * v / max(spec.cloud_views - 1, 1))
        # camera 650 mm in front of the face, looking at it, expressed in the world frame
        head_to_cam = RigidTransform.from_rotvec([0.0, yaw, 0.0]) @ RigidTransform(np.eye(3), [0, -30, 650])
        world_to_head_R = world.rotation.T / world.scale
        Mh = np.eye(4)
        Mh[:3, :3] = world_to_head_R
        Mh[:3, 3] = -world_to_head_R @ world.translation
        P = K.matrix @ (head_to_cam.matrix @ Mh)[:3]
        Xh = X @ P[:, :3].T + P[:, 3]
        uv = Xh[:, :2] / Xh[:, 2:3]
        if spec.landmark_noise_px > 0:
            uv = uv + rng.normal(0, spec.landmark_noise_px, uv.shape)
        views.append({"projection": P.tolist(), "landmarks": {k: uv[i].tolist() for i, k in enumerate(labels)}})
    return {
        "points": pts.tolist(),
        "anchors": {k: v.tolist() for k, v in anchors.items()},
        "views": views,
        "world_from_model": world.to_dict(),
    }


# -- driver ---------------------------------------------------------------------------------


def _save_png(path, arr):
    Image.fromarray(arr).save(path)


def synth_fixture(spec: FixtureSpec, out_dir) -> Path:
    """Render a complete fixture directory and return its path."""
    out = Path(out_dir)
    for sub in ("frames", "align", "reference", "truth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    model = build_head_model(spec.head_spec())
    save_model(out / "model.tensor", out / "model.json", model)

    cid = np.zeros(spec.identity_dim)
    cid[0] = 1.0
    cid[1:] = rng.normal(0, spec.identity_std, spec.identity_dim - 1)
    cid = IdentityWeights(cid)
    head_to_hmd = RigidTransform.from_rotvec(spec.head_rotvec, spec.head_translation)
    rig = build_rig(spec)
    (out / "calibration.json").write_text(json.dumps(rig.to_dict(), indent=1))
    box = hmd_box_mesh(spec)
    neutral_mesh = evaluate_model(model, cid, model.neutral())
    write_obj(out / "truth" / "neutral.obj", neutral_mesh)

    (out / "identity_inputs.json").write_text(json.dumps(identity_inputs(model, cid, spec, rng)))

    # initial alignment frames: neutral expression, the wearer turns their head
    align_poses = []
    for i in range(spec.n_align):
        a = 2 * np.pi * i / spec.n_align
        yaw = np.deg2rad(spec.align_yaw_deg) * np.sin(a)
        pitch = np.deg2rad(spec.align_pitch_deg) * np.cos(a)
        H = rig.hmd_to_face @ _pose_offset(yaw, pitch, [0.0, 0.0, 0.0])
        align_poses.append(H)
        lf = observe_frame(model, neutral_mesh, i, i / spec.fps, head_to_hmd, H, rig, spec, box, rng)
        save_landmarks(out / "align" / f"landmarks_{i:05d}.json", lf)

    face_bg = background_image(rig.face_cam)
    _save_png(out / "clean_plate.png", _to_u8(face_bg, 0, rng))

    # reference dataset, captured without the HMD
    ref_hmd = hmd_pose_script(spec, rig.hmd_to_face, spec.n_reference, phase=0.7)
    ref_exp = expression_script(spec, spec.n_reference, phase=2.1)
    ref_exp[0] = np.eye(spec.expression_dim)[0]
    ref_gaze = 0.4 * gaze_script(spec, spec.n_reference, phase=1.3)
    entries = []
    for i in range(spec.n_reference):
        mesh = evaluate_model(model, cid, ref_exp[i])
        pose = ref_hmd[i] @ head_to_hmd
        lf = observe_frame(model, mesh, i, i / spec.fps, head_to_hmd, ref_hmd[i], rig, spec, box, rng,
                           with_hmd=False)
        labels = sorted(lf.face)
        entry = {
            "frame_id": i,
            "timestamp": i / spec.fps,
            "image": f"ref_{i:05d}.png",
            "head_to_face": pose.to_dict(),
            "expression": ref_exp[i].tolist(),
            "landmark_labels": labels,
            "landmarks": np.concatenate([lf.face[k] for k in labels]).tolist(),
        }
        entries.append(entry)
        if spec.render_images:
            r = render_face_view(model, mesh, pose, rig.face_cam, ref_gaze[i], face_bg)
            _save_png(out / "reference" / entry["image"], _to_u8(r.image, spec.image_noise, rng))
    (out / "reference" / "manifest.json").write_text(json.dumps({"entries": entries}, indent=1))

    # query frames
    hmd = hmd_pose_script(spec, rig.hmd_to_face, spec.n_frames)
    exps = expression_script(spec, spec.n_frames)
    gaze = gaze_script(spec, spec.n_frames)
    truth_frames = []
    for i in range(spec.n_frames):
        mesh = evaluate_model(model, cid, exps[i])
        t = i / spec.fps
        lf = observe_frame(model, mesh, i, t, head_to_hmd, hmd[i], rig, spec, box, rng)
        save_landmarks(out / "frames" / f"landmarks_{i:05d}.json", lf)
        truth_frames.append({"frame": i, "timestamp": t, "hmd_to_face": hmd[i].to_dict(),
                             "expression": exps[i].tolist(), "gaze": gaze[i].tolist()})
        if not spec.render_images:
            continue
        pose = hmd[i] @ head_to_hmd
        gt = render_face_view(model, mesh, pose, rig.face_cam, gaze[i], face_bg)
        q = render_face_view(model, mesh, pose, rig.face_cam, gaze[i], face_bg, occluder=(box, hmd[i]))
        qimg = q.image
        dots = rig.face_cam.project_camera_points(hmd[i].apply(rig.hmd_dots))
        dot_vis = q.occluder_mask[np.clip(np.rint(dots[:, 1]).astype(int), 0, rig.face_cam.image_height - 1),
                                  np.clip(np.rint(dots[:, 0]).astype(int), 0, rig.face_cam.image_width - 1)]
        draw_dots(qimg, dots[dot_vis], radius=3.0)
        _save_png(out / "truth" / f"gt_{i:05d}.png", _to_u8(gt.image, 0, rng))
        _save_png(out / "truth" / f"hmd_mask_{i:05d}.png", (q.occluder_mask * 255).astype(np.uint8))
        _save_png(out / "frames" / f"face_{i:05d}.png", _to_u8(qimg, spec.image_noise, rng))
        for side in ("left", "right"):
            eimg = render_eye_view(model, mesh, rig.hmd_to_eye(side) @ head_to_hmd, rig.eye_cam(side), gaze[i])
            _save_png(out / "frames" / f"eye_{side}_{i:05d}.png", _to_u8(eimg, spec.image_noise, rng))

    truth = {
        "identity": cid.values.tolist(),
        "head_to_hmd": head_to_hmd.to_dict(),
        "align_hmd_to_face": [p.to_dict() for p in align_poses],
        "frames": truth_frames,
    }
    (out / "truth" / "truth.json").write_text(json.dumps(truth, indent=1))
    (out / "fixture.yaml").write_text(yaml.safe_dump(_plain(asdict(spec)), sort_keys=True))
    log.info("fixture written to %s", out)
    return out


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
