import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmdsynth.facemodel import ExpressionWeights, evaluate_model
from hmdsynth.fixture import FixtureSpec
from hmdsynth.geometry import CameraIntrinsics, RigidTransform, project
from hmdsynth.mesh import intersect_rays, uv_sphere
from hmdsynth.tracking import (
    AlignmentState,
    LandmarkFrame,
    TrackerConfig,
    TrackingError,
    correspond_landmarks,
    expression_system,
    initial_alignment,
    load_landmarks,
    reprojection_rms,
    save_landmarks,
    statistical_energy,
    track_expression,
)

from conftest import TrackingScene, seeds


@pytest.fixture(scope="module")
def scene(head_model):
    return TrackingScene(head_model, FixtureSpec(mode="mobile"), n_query=8)


@pytest.fixture(scope="module")
def noisy_scene(head_model):
    return TrackingScene(head_model, FixtureSpec(mode="mobile", landmark_noise_px=0.5), n_query=8, seed=4)


def _state(scene, i, prev=None):
    prev = scene.expressions[i - 1] if prev is None else prev
    return AlignmentState(scene.head_to_hmd, scene.hmd[i], ExpressionWeights(prev), ExpressionWeights(prev))


# -- correspondences -------------------------------------------------------------------------------


def test_landmark_on_vertex_returns_vertex(head_model):
    K = CameraIntrinsics(1000.0, 1000.0, 320.0, 240.0, 640, 480)
    T = RigidTransform(np.eye(3), [0.0, -20.0, 600.0])
    mesh = evaluate_model(head_model, head_model.identity_prior_mean, head_model.neutral())
    v = head_model.landmark_vertex_ids["nose_02"]
    uv = project(K, T, mesh.vertices[v][None])[0]
    pairs, misses = correspond_landmarks(mesh, K, T, {"nose_02": uv})
    assert misses == [] and pairs[0][2] == v


def test_missing_ray_is_dropped(head_model):
    K = CameraIntrinsics(1000.0, 1000.0, 320.0, 240.0, 640, 480)
    T = RigidTransform(np.eye(3), [0.0, 0.0, 600.0])
    mesh = evaluate_model(head_model, head_model.identity_prior_mean, head_model.neutral())
    pairs, misses = correspond_landmarks(mesh, K, T, {"far": np.array([2.0, 2.0])})
    assert pairs == [] and misses == ["far"]


def _oracle_vertex(mesh, K, T, uv):
    tri = T.apply(mesh.vertices)[mesh.faces]
    t, bary = intersect_rays(np.zeros(3), K.rays(uv)[None], tri)
    j = int(np.argmin(t[0]))
    if not np.isfinite(t[0, j]):
        return None
    hit = bary[0, j] @ mesh.vertices[mesh.faces[j]]
    d = np.linalg.norm(mesh.vertices - hit, axis=1)
    return int(np.flatnonzero(d == d.min())[0])


@given(seeds)
@settings(max_examples=15)
def test_correspondence_matches_bruteforce_on_sphere(seed):
    rng = np.random.default_rng(seed)
    mesh = uv_sphere(50.0, 24, 48)
    K = CameraIntrinsics(800.0, 800.0, 320.0, 240.0, 640, 480)
    T = RigidTransform.from_rotvec(rng.normal(scale=0.5, size=3), [0.0, 0.0, 400.0])
    pts = {f"p{i}": rng.uniform([220, 140], [420, 340]) for i in range(10)}
    pairs, misses = correspond_landmarks(mesh, K, T, pts)
    got = {k: v for k, _, v in pairs}
    for k, uv in pts.items():
        ref = _oracle_vertex(mesh, K, T, uv)
        if ref is None:
            assert k in misses
        else:
            assert got[k] == ref


def test_landmark_file_round_trip(tmp_path, scene):
    lf = scene.frames[0]
    save_landmarks(tmp_path / "l.json", lf)
    back = load_landmarks(tmp_path / "l.json")
    assert back.face.keys() == lf.face.keys()
    assert all(np.allclose(back.face[k], lf.face[k]) for k in lf.face)
    assert np.allclose(back.hmd_dots, lf.hmd_dots)
    assert back.visibility == lf.visibility


def test_landmark_group_maxima():
    with pytest.raises(ValueError):
        LandmarkFrame(0, {f"nose_{i}": (0.0, 0.0) for i in range(6)})


# -- initial alignment ----------------------------------------------------------------------------


def test_alignment_zero_noise(scene):
    res = initial_alignment(scene.model, scene.cid, scene.align, scene.rig, TrackerConfig())
    assert res.head_to_hmd.angle_to(scene.head_to_hmd) < 1e-5
    assert np.linalg.norm(res.head_to_hmd.translation - scene.head_to_hmd.translation) < 1e-3


def test_alignment_needs_two_frames(scene):
    with pytest.raises(TrackingError):
        initial_alignment(scene.model, scene.cid, scene.align[:1], scene.rig)


def test_alignment_ignores_eyes_when_lambda_zero(scene):
    cfg = TrackerConfig(lam=0.0)
    a = initial_alignment(scene.model, scene.cid, scene.align, scene.rig, cfg)
    rng = np.random.default_rng(0)
    shaken = []
    for lf, H in scene.align:
        lf2 = LandmarkFrame(lf.frame_index, lf.face, {k: v + rng.normal(scale=3, size=2) for k, v in lf.eye_left.items()},
                            {k: v + rng.normal(scale=3, size=2) for k, v in lf.eye_right.items()},
                            lf.hmd_dots, lf.visibility, lf.timestamp)
        shaken.append((lf2, H))
    b = initial_alignment(scene.model, scene.cid, shaken, scene.rig, cfg)
    assert np.allclose(a.head_to_hmd.matrix, b.head_to_hmd.matrix, atol=1e-12)


def test_alignment_cost_monotone(scene):
    res = initial_alignment(scene.model, scene.cid, scene.align, scene.rig, TrackerConfig(correspondence="semantic"))
    h = res.cost_history
    assert all(b <= a for a, b in zip(h, h[1:]))


def test_alignment_with_landmark_noise(noisy_scene):
    s = noisy_scene
    res = initial_alignment(s.model, s.cid, s.align, s.rig)
    assert np.linalg.norm(res.head_to_hmd.translation - s.head_to_hmd.translation) <= 1.0


# -- expression tracking -------------------------------------------------------------------------


def test_neutral_is_fixed_point(head_model):
    s = TrackingScene(head_model, FixtureSpec(mode="mobile", expression_amplitude=0.0), n_query=2)
    for lam2, lam3 in ((0.0, 0.0), (2.0, 0.7), (10.0, 5.0)):
        cfg = TrackerConfig(lam2=lam2, lam3=lam3)
        c = track_expression(s.model, s.cid, s.frames[1], _state(s, 1, head_model.neutral().values), s.rig, cfg)
        assert np.allclose(c.values, head_model.neutral().values, atol=1e-6)


def test_strong_prior_zeroes_weights(scene):
    cfg = TrackerConfig(lam2=0.0, lam3=1e12)
    c = track_expression(scene.model, scene.cid, scene.frames[3], _state(scene, 3), scene.rig, cfg)
    # component 0 is the fixed neutral anchor; the solved components vanish
    assert np.allclose(c.values[1:], 0.0, atol=1e-6)


def test_recovers_scripted_expression(scene):
    cfg = TrackerConfig(lam2=0.0, lam3=0.0)
    for i in range(1, len(scene.frames)):
        c = track_expression(scene.model, scene.cid, scene.frames[i], _state(scene, i), scene.rig, cfg)
        assert np.abs(c.values - scene.expressions[i]).max() < 1e-3


def test_solution_satisfies_normal_equations(scene):
    cfg = TrackerConfig()
    st_ = _state(scene, 4)
    c = track_expression(scene.model, scene.cid, scene.frames[4], st_, scene.rig, cfg)
    A, b = expression_system(scene.model, scene.cid, scene.frames[4], st_, scene.rig, cfg)
    x = c.values[1:]
    assert np.linalg.norm(A.T @ A @ x - A.T @ b) < 1e-8 * np.linalg.norm(A.T @ b)


def test_temporal_weight_sweep_monotone(scene):
    prev = scene.expressions[0]
    dist = []
    for lam2 in (0.0, 0.1, 1.0, 10.0, 100.0, 1000.0):
        cfg = TrackerConfig(lam2=lam2, lam3=0.0)
        c = track_expression(scene.model, scene.cid, scene.frames[5], _state(scene, 5, prev), scene.rig, cfg)
        dist.append(np.linalg.norm(c.values - prev))
    assert all(b <= a + 1e-12 for a, b in zip(dist, dist[1:]))


@given(st.lists(st.floats(-2, 2), min_size=5, max_size=5), st.lists(st.floats(-2, 2), min_size=5, max_size=5))
@settings(max_examples=50)
def test_statistical_energy_quadratic_form(head_model, a, b):
    a = np.concatenate([[1.0], a])
    b = np.concatenate([[1.0], b])
    D = np.diag(1.0 / head_model.expression_prior_scale**2)
    assert np.isclose(statistical_energy(head_model, a), a @ D @ a, rtol=1e-12)
    assert np.isclose(statistical_energy(head_model, b), b @ D @ b, rtol=1e-12)


def test_noise_reprojection_rms(noisy_scene):
    s = noisy_scene
    cfg = TrackerConfig()
    prev = s.model.neutral().values
    for i, lf in enumerate(s.frames):
        st_ = AlignmentState(s.head_to_hmd, s.hmd[i], ExpressionWeights(prev), ExpressionWeights(prev))
        c = track_expression(s.model, s.cid, lf, st_, s.rig, cfg)
        assert reprojection_rms(s.model, s.cid, c, lf, st_, s.rig) <= 2.0
        prev = c.values


def test_carry_forward_when_occluded(scene):
    lf = scene.frames[2]
    hidden = {k: False for k in lf.face}
    lf2 = LandmarkFrame(lf.frame_index, lf.face, lf.eye_left, lf.eye_right, lf.hmd_dots, hidden, lf.timestamp)
    st_ = _state(scene, 2)
    assert track_expression(scene.model, scene.cid, lf2, st_, scene.rig) is st_.previous_expression
