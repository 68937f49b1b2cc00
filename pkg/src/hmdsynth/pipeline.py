"""End-to-end driver: identity and alignment setup, then per frame track, retrieve, warp,
synthesise the eyes and composite."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage
from scipy.spatial import ConvexHull

from . import compose as cmp
from .color import LabImage, gray_to_L
from .eye import (SKIN, EyeError, EyeSegmentation, locate_iris_pupil, propagate_color, refine_eye, segment_eye,
                  select_seeds, transfer_luminance)
from .evaluation import eval_mesh, luma, masked_mae
from .facemodel import (BilinearFaceModel, ExpressionWeights, IdentityWeights, SparseCloud, evaluate_model,
                        fit_identity_to_cloud, fit_identity_to_landmarks, load_model)
from .geometry import RigCalibration, RigidTransform, SimilarityTransform
from .mesh import Mesh, read_obj
from .render import bilinear_sample, fill_polygon, rasterize
from .retrieval import DatasetIndex, RetrievalQuery, pose_angles, retrieve_reference
from .tracking import (AlignmentState, LandmarkFrame, TrackerConfig, initial_alignment, load_landmarks,
                       reprojection_rms, track_expression)
from .warping import (GridWarpField, WarpConstraints, contour_polyline, mesh_pixel_map, project_mesh_correspondences,
                      render_warp, silhouette_pairs, solve_grid_warp)

log = logging.getLogger(__name__)

STAGES = ("track", "retrieve", "warp", "eyes", "compose")
STAGE_GROUPS = {"tracking": ("track",), "eye_colorization": ("eyes",), "face_synthesis": ("retrieve", "warp", "compose")}


class ConfigError(ValueError):
    pass


# -- configuration --------------------------------------------------------------------------------


@dataclass
class PathsConfig:
    dataset: str = "."
    calibration: str | None = None
    tensor: str | None = None
    model_meta: str | None = None
    identity: str | None = None  # identity weights JSON, or cloud/landmark inputs to fit from
    align_dir: str | None = None
    frames_dir: str | None = None
    reference_manifest: str | None = None
    clean_plate: str | None = None
    truth_dir: str | None = None
    output: str = "out"

    def resolved(self, base: Path) -> "PathsConfig":
        root = (base / self.dataset).resolve()
        defaults = {
            "calibration": "calibration.json", "tensor": "model.tensor", "model_meta": "model.json",
            "identity": "identity_inputs.json", "align_dir": "align", "frames_dir": "frames",
            "reference_manifest": "reference/manifest.json", "clean_plate": "clean_plate.png", "truth_dir": "truth",
        }
        out = {"dataset": str(root), "output": str((base / self.output).resolve())}
        for k, d in defaults.items():
            v = getattr(self, k)
            out[k] = str(root / d) if v is None else str((base / v).resolve())
        return PathsConfig(**out)


@dataclass
class StageToggles:
    track: bool = True
    retrieve: bool = True
    warp: bool = True
    eyes: bool = True
    compose: bool = True


@dataclass
class IdentityConfig:
    cloud_iters: int = 50
    landmark_lam: float = 1.0
    n_samples: int | None = None


@dataclass
class RetrievalConfig:
    w1: float = 1e-4
    w2: float = 1e-2


@dataclass
class WarpConfig:
    rows: int = 24
    cols: int = 32
    alpha: float = 1.0
    beta: float = 5.0
    gamma: float = 10.0
    silhouette_spacing: float = 4.0
    silhouette_max_dist: float = 6.0


@dataclass
class EyeConfig:
    seed_threshold: float = 0.06
    seed_step: int = 2
    color_alpha: float = 100.0
    alpha1: float = 1.0
    alpha2: float = 0.5
    region_dilate: int = 3  # eye-camera pixels added around the lid outline


@dataclass
class ComposeConfig:
    band: float = 4.0
    levels: int = 4
    hmd_dilate: float = 20.0
    histogram: bool = True


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    mode: str = "sim"
    frames: list | None = None  # [start, stop) or None for all
    workers: int = 1
    dump_debug: bool = False
    stages: StageToggles = field(default_factory=StageToggles)
    identity: IdentityConfig = field(default_factory=IdentityConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    warp: WarpConfig = field(default_factory=WarpConfig)
    eye: EyeConfig = field(default_factory=EyeConfig)
    compose: ComposeConfig = field(default_factory=ComposeConfig)

    def __post_init__(self):
        if self.mode not in ("sim", "mobile"):
            raise ConfigError("mode must be 'sim' or 'mobile'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.frames is not None and (len(self.frames) != 2 or self.frames[0] > self.frames[1]):
            raise ConfigError("frames must be [start, stop) with start <= stop")
        for sect in (self.retrieval, self.warp, self.eye, self.compose):
            for f in fields(sect):
                v = getattr(sect, f.name)
                if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                    raise ConfigError(f"{f.name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d or {})

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        cfg = cls.from_dict(yaml.safe_load(path.read_text()) or {})
        cfg.paths = cfg.paths.resolved(path.parent)
        cfg.check_paths()
        return cfg

    def check_paths(self) -> None:
        p = self.paths
        missing = [k for k in ("calibration", "tensor", "model_meta", "align_dir", "frames_dir", "reference_manifest")
                   if not Path(getattr(p, k)).exists()]
        if missing:
            raise ConfigError("missing inputs: " + ", ".join(f"{k}={getattr(p, k)}" for k in missing))


def _build(cls, d):
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kw = {}
    defaults = cls()
    for k, v in d.items():
        cur = getattr(defaults, k)
        kw[k] = _build(type(cur), v) if is_dataclass(cur) and isinstance(v, dict) else v
    return cls(**kw)


# -- inputs -----------------------------------------------------------------------------------------


def _read_rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=float)


def _read_gray(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=float)


@dataclass
class FrameBundle:
    index: int
    face: np.ndarray  # (H, W, 3) 0..255
    eye_left: np.ndarray  # (h, w) 0..255
    eye_right: np.ndarray
    landmarks: LandmarkFrame
    timestamp: float

    def __post_init__(self):
        if self.face is None or self.eye_left is None or self.eye_right is None:
            raise ValueError("a frame bundle needs the face and both eye images")
        if self.landmarks.frame_index != self.index:
            raise ValueError("landmark frame index does not match the bundle")


def load_bundle(frames_dir, index: int) -> FrameBundle:
    d = Path(frames_dir)
    lf = load_landmarks(d / f"landmarks_{index:05d}.json")
    return FrameBundle(index, _read_rgb(d / f"face_{index:05d}.png"), _read_gray(d / f"eye_left_{index:05d}.png"),
                       _read_gray(d / f"eye_right_{index:05d}.png"), lf, lf.timestamp)


def frame_indices(frames_dir) -> list:
    ids = set()
    for p in Path(frames_dir).glob("face_*.png"):
        ids.add(int(p.stem.split("_")[-1]))
    for p in Path(frames_dir).glob("landmarks_*.json"):
        ids.add(int(p.stem.split("_")[-1]))
    return sorted(ids)


def fit_identity(model: BilinearFaceModel, path, cfg: IdentityConfig) -> IdentityWeights:
    """Identity weights from a JSON file holding either ``identity`` or fitting inputs."""
    data = json.loads(Path(path).read_text())
    if "identity" in data:
        return IdentityWeights(np.asarray(data["identity"], float))
    cloud = SparseCloud(np.asarray(data["points"]), {k: np.asarray(v) for k, v in data["anchors"].items()})
    fit = fit_identity_to_cloud(model, cloud, iters=cfg.cloud_iters, n_samples=cfg.n_samples)
    views = [(np.asarray(v["projection"]), {k: np.asarray(u) for k, u in v["landmarks"].items()})
             for v in data.get("views", [])]
    if not views:
        return fit.identity
    return fit_identity_to_landmarks(model, views, fit.identity, lam=cfg.landmark_lam, transform=fit.transform)


# -- per-frame helpers ----------------------------------------------------------------------------


def hmd_region(dots_px: np.ndarray, shape, dilate: float) -> np.ndarray:
    """Convex hull of the HMD dots grown by ``dilate`` pixels."""
    pts = np.asarray(dots_px, dtype=float)
    if len(pts) < 3:
        return np.zeros(shape, dtype=bool)
    hull = pts[ConvexHull(pts).vertices]
    inside = fill_polygon(shape, hull)
    if dilate > 0:
        inside = ndimage.distance_transform_edt(~inside) <= dilate
    return inside


def _eye_points(frame: LandmarkFrame, model: BilinearFaceModel, side: str) -> np.ndarray | None:
    pts = frame.eye_left if side == "left" else frame.eye_right
    key = "l" if side == "left" else "r"
    labels = [f"eye_{key}_{i}" for i in range(6)]
    if not all(k in pts for k in labels):
        return None
    return np.array([pts[k] for k in labels], dtype=float)


@dataclass
class TrackedFrame:
    index: int
    timestamp: float
    hmd_to_face: RigidTransform
    expression: ExpressionWeights
    reprojection_rms: float
    reference_id: int | None = None
    times: dict = field(default_factory=dict)


@dataclass
class EyeSynthesis:
    image: np.ndarray  # (h, w, 3) 0..255 in the eye camera
    region: np.ndarray  # (h, w) bool
    seeds: int
    chroma_energy: dict


def synthesize_eye(I: np.ndarray, M_rgb: np.ndarray, M_valid: np.ndarray, eye_pts: np.ndarray,
                   cfg: EyeConfig) -> EyeSynthesis:
    """Colour an NIR eye image from a reference rendered into the same camera."""
    M = LabImage.from_rgb8(M_rgb)
    I_L = transfer_luminance(gray_to_L(I), M.L, mask_I=M_valid, mask_M=M_valid)
    seeds = select_seeds(I_L, M, threshold=cfg.seed_threshold, step=cfg.seed_step, mask=M_valid)
    if len(seeds) == 0:
        raise EyeError("no colour seeds")
    a, b = propagate_color(I_L, seeds, alpha=cfg.color_alpha)
    C = LabImage(I_L, a, b)
    iris, pupil = locate_iris_pupil(I, eye_pts)
    seg = segment_eye(I.shape, eye_pts, iris, pupil)
    try:
        r_iris, r_pupil = locate_iris_pupil(M.L * 2.55, eye_pts)
        ref_seg = segment_eye(I.shape, eye_pts, r_iris, r_pupil)
    except EyeError:
        ref_seg = EyeSegmentation(seg.labels.copy(), seg.iris, seg.pupil)
    ref_seg.labels[~M_valid] = SKIN
    res = refine_eye(C, M, seg, None, cfg.alpha1, cfg.alpha2, reference_seg=ref_seg,
                     seed_threshold=cfg.seed_threshold, seed_step=cfg.seed_step)
    region = ndimage.binary_dilation(seg.omega, iterations=cfg.region_dilate) if cfg.region_dilate else seg.omega
    return EyeSynthesis(res.image.to_rgb8().astype(float), region, len(seeds),
                        {k: v["total"] for k, v in res.energies.items()})


# -- report ---------------------------------------------------------------------------------------


@dataclass
class EvalReport:
    frames: list = field(default_factory=list)  # per-frame dicts
    skipped: list = field(default_factory=list)
    mesh_distance_mm: float | None = None
    stage_ms: dict = field(default_factory=dict)  # totals per stage
    group_ms: dict = field(default_factory=dict)  # totals per stage group
    alignment: dict = field(default_factory=dict)

    @property
    def mean_intensity_error(self) -> float | None:
        v = [f["mae"] for f in self.frames if f.get("mae") is not None]
        return float(np.mean(v)) if v else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_intensity_error"] = self.mean_intensity_error
        return d


# -- pipeline ---------------------------------------------------------------------------------------


class Pipeline:
    """Holds loaded inputs and runs the stages; :func:`run_pipeline` is the usual entry point."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        p = cfg.paths
        self.rig = RigCalibration.from_dict(json.loads(Path(p.calibration).read_text()))
        self.model = load_model(p.tensor, p.model_meta)
        self.index = DatasetIndex.load(p.reference_manifest)
        plate = Path(p.clean_plate) if p.clean_plate else None
        self.plate = _read_rgb(plate) if plate is not None and plate.exists() else None
        if self.plate is None:
            log.warning("no clean plate found; background inside the HMD region comes from the reference")
        self.out = Path(p.output)
        self._ref_cache: dict = {}

    # setup ------------------------------------------------------------------------------------

    def setup(self, report: EvalReport):
        t0 = time.perf_counter()
        ident = Path(self.cfg.paths.identity) if self.cfg.paths.identity else None
        if ident is not None and ident.exists():
            self.cid = fit_identity(self.model, ident, self.cfg.identity)
        else:
            log.warning("no identity inputs; using the prior mean identity")
            self.cid = IdentityWeights(self.model.identity_prior_mean.copy())
        self.neutral_mesh = evaluate_model(self.model, self.cid, self.model.neutral())
        t1 = time.perf_counter()
        frames = []
        for path in sorted(Path(self.cfg.paths.align_dir).glob("landmarks_*.json")):
            lf = load_landmarks(path)
            if lf.hmd_dots is None:
                continue
            frames.append((lf, self.rig.hmd_pose_from_dots(lf.hmd_dots)[0]))
        res = initial_alignment(self.model, self.cid, frames, self.rig, self.cfg.tracker)
        self.head_to_hmd = res.head_to_hmd
        t2 = time.perf_counter()
        report.alignment = {"face_rms_px": res.face_rms, "eye_rms_px": res.eye_rms, "rounds": res.rounds,
                            "head_to_hmd": res.head_to_hmd.to_dict(), "identity": self.cid.values.tolist(),
                            "identity_ms": 1e3 * (t1 - t0), "alignment_ms": 1e3 * (t2 - t1)}
        truth = Path(self.cfg.paths.truth_dir or "") / "neutral.obj"
        if self.cfg.paths.truth_dir and truth.exists():
            gt = read_obj(truth)
            ids = self.model.landmark_ids(sorted(self.model.landmark_vertex_ids))
            ev = eval_mesh(self.neutral_mesh, gt, self.neutral_mesh.vertices[ids], gt.vertices[ids])
            report.mesh_distance_mm = ev.mean_distance

    # sequential part ------------------------------------------------------------------------------

    def _hmd_pose(self, lf: LandmarkFrame) -> RigidTransform:
        if self.cfg.mode == "mobile":
            if lf.hmd_dots is None:
                raise RuntimeError("mobile mode needs HMD dots in every frame")
            return self.rig.hmd_pose_from_dots(lf.hmd_dots)[0]
        return self.rig.hmd_to_face

    def track(self, indices: list, report: EvalReport) -> list:
        """Ordered pass: HMD pose, expression and reference retrieval for every frame."""
        cfg = self.cfg
        prev = self.model.neutral()
        prev_ref = None
        out = []
        for i in indices:
            path = Path(cfg.paths.frames_dir) / f"landmarks_{i:05d}.json"
            if not path.exists():
                log.warning("frame %d: landmark file missing, skipped", i)
                report.skipped.append({"frame": i, "reason": "missing landmarks"})
                continue
            try:
                lf = load_landmarks(path)
                times = {}
                t0 = time.perf_counter()
                H = self._hmd_pose(lf)
                state = AlignmentState(self.head_to_hmd, H, prev, prev)
                cexp = track_expression(self.model, self.cid, lf, state, self.rig, cfg.tracker) \
                    if cfg.stages.track else prev
                rms = reprojection_rms(self.model, self.cid, cexp, lf, state, self.rig)
                times["track"] = 1e3 * (time.perf_counter() - t0) if cfg.stages.track else 0.0
                t0 = time.perf_counter()
                ref = None
                if cfg.stages.retrieve:
                    q = RetrievalQuery(np.array(pose_angles(H @ self.head_to_hmd)),
                                       None if prev_ref is None else prev_ref.landmarks,
                                       None if prev_ref is None else prev_ref.timestamp,
                                       cfg.retrieval.w1, cfg.retrieval.w2)
                    ref = retrieve_reference(self.index, q)
                    prev_ref = self.index.by_id(ref)
                times["retrieve"] = 1e3 * (time.perf_counter() - t0) if cfg.stages.retrieve else 0.0
            except Exception as exc:  # noqa: BLE001 - a failed frame must not stop the stream
                log.error("frame %d: tracking failed (%s), skipped", i, exc)
                report.skipped.append({"frame": i, "reason": f"tracking: {exc}"})
                continue
            prev = cexp
            out.append(TrackedFrame(i, lf.timestamp, H, cexp, rms, ref, times))
        return out

    # per-frame synthesis ----------------------------------------------------------------------------

    def _reference(self, ref_id: int):
        if ref_id not in self._ref_cache:
            e = self.index.by_id(ref_id)
            img = _read_rgb(self.index.root / e.image)
            pose = RigidTransform.from_dict(e.extra["head_to_face"])
            cexp = ExpressionWeights(np.asarray(e.extra.get("expression", self.model.neutral().values), float))
            mesh = evaluate_model(self.model, self.cid, cexp)
            self._ref_cache[ref_id] = (img, pose, mesh)
        return self._ref_cache[ref_id]

    def warp_reference(self, ref_img, ref_pose, ref_mesh, q_pose, q_mesh, debug=None):
        K = self.rig.face_cam
        wc = self.cfg.warp
        src, dst, _ = project_mesh_correspondences(ref_mesh, ref_pose, q_pose, K, mesh_query=q_mesh)
        sil = contour_polyline(q_mesh, q_pose, K, spacing=wc.silhouette_spacing)
        s_ref, s_q = np.zeros((0, 2)), np.zeros((0, 2))
        if len(sil):
            s_ref, s_q, _ = silhouette_pairs(ref_mesh, ref_pose, q_pose, K, sil, wc.silhouette_max_dist, q_mesh)
        face_mask = rasterize(ref_pose.apply(ref_mesh.vertices), ref_mesh.faces, K).mask
        con = WarpConstraints(src, dst, s_ref, s_q, face_mask, wc.alpha, wc.beta, wc.gamma)
        field_ = solve_grid_warp(GridWarpField(wc.rows, wc.cols, K.image_width, K.image_height), con)
        if debug is not None:
            debug["warp_energies"] = field_.energies
        return render_warp(ref_img, field_)

    def eye_images(self, bundle: FrameBundle, tf: TrackedFrame, q_mesh: Mesh, ref_img, ref_pose, ref_mesh):
        """Per side: (RGB in the face view, face-view mask) or ``None`` when the eye stage fails."""
        K = self.rig.face_cam
        q_pose = tf.hmd_to_face @ self.head_to_hmd
        out = {}
        for side, I in (("left", bundle.eye_left), ("right", bundle.eye_right)):
            try:
                Ke = self.rig.eye_cam(side)
                eye_pose = self.rig.hmd_to_eye(side) @ self.head_to_hmd
                pts = _eye_points(bundle.landmarks, self.model, side)
                if pts is None:
                    raise EyeError("eye landmarks missing")
                x, y, valid = mesh_pixel_map(ref_mesh, ref_pose, K, q_mesh, eye_pose, Ke)
                M = np.zeros(Ke.size + (3,))
                vals, inside = bilinear_sample(ref_img, x[valid], y[valid])
                M[valid] = vals
                M_valid = valid.copy()
                M_valid[valid] = inside
                syn = synthesize_eye(I, M, M_valid, pts, self.cfg.eye)
                fx, fy, fvalid = mesh_pixel_map(q_mesh, eye_pose, Ke, q_mesh, q_pose, K)
                img = np.zeros(K.size + (3,))
                v, ins = bilinear_sample(syn.image, fx[fvalid], fy[fvalid])
                img[fvalid] = v
                reg, _ = bilinear_sample(syn.region.astype(float), fx[fvalid], fy[fvalid])
                mask = np.zeros(K.size, dtype=bool)
                mask[fvalid] = ins & (reg > 0.5)
                out[side] = (img, mask)
            except Exception as exc:  # noqa: BLE001 - eye failure falls back to the warped reference
                log.warning("frame %d: %s eye synthesis skipped (%s)", tf.index, side, exc)
                out[side] = None
        return out

    def synthesize(self, tf: TrackedFrame) -> tuple[np.ndarray, dict]:
        cfg = self.cfg
        bundle = load_bundle(cfg.paths.frames_dir, tf.index)
        query = bundle.face
        times = dict(tf.times)
        debug = {} if cfg.dump_debug else None
        if not (cfg.stages.compose and tf.reference_id is not None):
            for s in ("warp", "eyes", "compose"):
                times[s] = 0.0
            return np.clip(np.rint(query), 0, 255).astype(np.uint8), times
        K = self.rig.face_cam
        q_pose = tf.hmd_to_face @ self.head_to_hmd
        q_mesh = evaluate_model(self.model, self.cid, tf.expression)
        ref_img, ref_pose, ref_mesh = self._reference(tf.reference_id)

        t0 = time.perf_counter()
        if cfg.stages.warp:
            warped, wvalid = self.warp_reference(ref_img, ref_pose, ref_mesh, q_pose, q_mesh, debug)
        else:
            warped, wvalid = ref_img.copy(), np.ones(K.size, dtype=bool)
        times["warp"] = 1e3 * (time.perf_counter() - t0) if cfg.stages.warp else 0.0

        t0 = time.perf_counter()
        eyes = self.eye_images(bundle, tf, q_mesh, ref_img, ref_pose, ref_mesh) if cfg.stages.eyes else {}
        times["eyes"] = 1e3 * (time.perf_counter() - t0) if cfg.stages.eyes else 0.0

        t0 = time.perf_counter()
        lf = bundle.landmarks
        dots = lf.hmd_dots if lf.hmd_dots is not None else \
            K.project_camera_points(tf.hmd_to_face.apply(self.rig.hmd_dots))
        result, labels = self.composite(query, dots, warped, wvalid, q_pose, q_mesh, eyes)
        times["compose"] = 1e3 * (time.perf_counter() - t0)
        if debug is not None:
            d = self.out / "debug"
            d.mkdir(parents=True, exist_ok=True)
            Image.fromarray(cmp.LABEL_COLORS[labels]).save(d / f"labels_{tf.index:05d}.png")
            Image.fromarray(np.clip(np.rint(warped), 0, 255).astype(np.uint8)).save(d / f"warped_{tf.index:05d}.png")
            (d / f"frame_{tf.index:05d}.json").write_text(json.dumps(debug, indent=1, default=float))
        return result, times

    def composite(self, query, dots: np.ndarray, warped, wvalid, q_pose, q_mesh, eyes):
        K = self.rig.face_cam
        cc = self.cfg.compose
        shape = K.size
        region = hmd_region(dots, shape, cc.hmd_dilate)
        head = rasterize(q_pose.apply(q_mesh.vertices), q_mesh.faces, K).mask
        labels = np.full(shape, cmp.QUERY_KEEP)
        labels[region & head] = cmp.HEAD_REF
        labels[region & ~head] = cmp.BACKGROUND if self.plate is not None else cmp.HEAD_REF
        ref = warped.copy()
        fill = self.plate if self.plate is not None else query
        ref[~wvalid] = fill[~wvalid]
        if cc.histogram:
            overlap = head & ~region & wvalid
            if overlap.sum() > 50:
                ref = cmp.match_histogram(ref, query, overlap)
        sources = [query, ref]
        groups = [[cmp.QUERY_KEEP], [cmp.HEAD_REF]]
        for side, lab in (("left", cmp.EYE_LEFT), ("right", cmp.EYE_RIGHT)):
            e = eyes.get(side)
            if e is None:
                continue
            img, mask = e
            m = mask & region
            labels[m] = lab
            src = ref.copy()
            src[m] = img[m]
            sources.append(src)
            groups.append([lab])
        if self.plate is not None:
            sources.append(self.plate)
            groups.append([cmp.BACKGROUND])
        present = [i for i, g in enumerate(groups) if np.isin(labels, g).any()]
        sources = [sources[i] for i in present]
        groups = [groups[i] for i in present]
        mask = cmp.feathered_weights(labels, groups, cc.band)
        out = cmp.blend_pyramid(sources, mask, cc.levels) if len(sources) > 1 else sources[0]
        return np.clip(np.rint(out), 0, 255).astype(np.uint8), labels


def _frame_metrics(truth_dir, index: int, result: np.ndarray) -> dict:
    d = Path(truth_dir) if truth_dir else None
    if d is None:
        return {}
    gt_p, m_p = d / f"gt_{index:05d}.png", d / f"hmd_mask_{index:05d}.png"
    if not (gt_p.exists() and m_p.exists()):
        return {}
    gt = _read_rgb(gt_p)
    mask = _read_gray(m_p) > 127
    face = np.abs(gt - _read_rgb(Path(d).parent / "clean_plate.png")).sum(-1) > 0 \
        if (Path(d).parent / "clean_plate.png").exists() else mask
    return {"mae": masked_mae(luma(result), luma(gt), mask),
            "mae_face": masked_mae(luma(result), luma(gt), mask & face),
            "mae_rgb": masked_mae(result, gt, mask)}


def run_pipeline(cfg: PipelineConfig) -> EvalReport:
    """Run every stage over the configured frames, writing ``frames/out_*.png`` and ``report.json``."""
    report = EvalReport()
    pipe = Pipeline(cfg)
    out_frames = pipe.out / "frames"
    out_frames.mkdir(parents=True, exist_ok=True)
    pipe.setup(report)
    indices = frame_indices(cfg.paths.frames_dir)
    if cfg.frames is not None:
        a, b = cfg.frames
        indices = list(range(a, b))
    tracked = pipe.track(indices, report)

    def work(tf: TrackedFrame):
        try:
            img, times = pipe.synthesize(tf)
        except Exception as exc:  # noqa: BLE001 - per-frame failures are reported, not fatal
            log.error("frame %d: synthesis failed (%s), skipped", tf.index, exc)
            return tf, None, {"reason": f"synthesis: {exc}"}
        Image.fromarray(img).save(out_frames / f"out_{tf.index:05d}.png")
        return tf, img, times

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(work, tracked))
    else:
        results = [work(tf) for tf in tracked]
    totals = {s: 0.0 for s in STAGES}
    for tf, img, times in results:
        if img is None:
            report.skipped.append({"frame": tf.index, **times})
            continue
        entry = {"frame": tf.index, "reference": tf.reference_id, "reprojection_rms_px": tf.reprojection_rms,
                 "expression": tf.expression.values.tolist(), "times_ms": times}
        entry.update(_frame_metrics(cfg.paths.truth_dir, tf.index, img))
        report.frames.append(entry)
        for s in STAGES:
            totals[s] += times.get(s, 0.0)
    report.skipped.sort(key=lambda d: d["frame"])
    report.stage_ms = totals
    report.group_ms = {g: sum(totals[s] for s in ss) for g, ss in STAGE_GROUPS.items()}
    (pipe.out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    log.info("processed %d frames, skipped %d", len(report.frames), len(report.skipped))
    return report
