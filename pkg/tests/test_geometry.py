import numpy as np
import pytest
from hypothesis import given, settings

from hmdsynth.geometry import (
    CameraIntrinsics,
    GeometryError,
    PointCorrespondences,
    RigCalibration,
    RigidTransform,
    compose_rig,
    project,
    solve_pnp,
    umeyama,
)

from conftest import random_transform, seeds


def homogeneous_project(K, T, X):
    """Oracle: 3x4 projection matrix on homogeneous points."""
    P = K.matrix @ T.matrix[:3]
    x = np.hstack([X, np.ones((len(X), 1))]) @ P.T
    return x[:, :2] / x[:, 2:]


def test_project_optical_axis():
    K = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 2, 2)
    assert np.allclose(project(K, RigidTransform.identity(), np.array([[0.0, 0.0, 1.0]])), [[0.0, 0.0]])


def test_project_known_pixel():
    K = CameraIntrinsics(100.0, 100.0, 320.0, 240.0, 640, 480)
    assert np.allclose(project(K, RigidTransform.identity(), np.array([[1.0, 0.0, 2.0]])), [[370.0, 240.0]])


def test_project_behind_camera():
    K = CameraIntrinsics(100.0, 100.0, 320.0, 240.0, 640, 480)
    with pytest.raises(GeometryError, match="behind camera"):
        project(K, RigidTransform.identity(), np.array([[0.0, 0.0, -1.0]]))


@given(seeds)
@settings(max_examples=50)
def test_project_matches_homogeneous_oracle(seed):
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(*rng.uniform(200, 900, 2), *rng.uniform(100, 300, 2), 640, 480)
    T = RigidTransform.from_rotvec(rng.normal(scale=0.3, size=3), rng.normal(scale=20, size=3) + [0, 0, 500])
    X = rng.normal(scale=50, size=(20, 3))
    assert np.allclose(project(K, T, X), homogeneous_project(K, T, X), atol=1e-9, rtol=0)


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        CameraIntrinsics(-1.0, 1.0, 0.0, 0.0, 10, 10)
    with pytest.raises(GeometryError):
        CameraIntrinsics(1.0, 1.0, 10.0, 0.0, 10, 10)


def test_rigid_rejects_non_rotation():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


@given(seeds)
@settings(max_examples=100)
def test_compose_invert_round_trip(seed):
    T = random_transform(np.random.default_rng(seed))
    I4 = (T @ T.inverse()).matrix
    assert np.allclose(I4, np.eye(4), atol=1e-9)
    assert np.allclose((T.inverse() @ T).matrix, np.eye(4), atol=1e-9)


@given(seeds)
@settings(max_examples=50)
def test_compose_matches_matrix_product(seed):
    rng = np.random.default_rng(seed)
    A, B = random_transform(rng), random_transform(rng)
    assert np.allclose((A @ B).matrix, A.matrix @ B.matrix, atol=1e-9)
    X = rng.normal(size=(5, 3))
    assert np.allclose((A @ B).apply(X), A.apply(B.apply(X)), atol=1e-9)


def _correspondences(rng, K, T, n=20, planar=False):
    X = rng.uniform(-60, 60, size=(n, 3))
    if planar:
        X[:, 2] = 0.0
    return X, project(K, T, X)


@given(seeds)
@settings(max_examples=30)
def test_pnp_recovers_pose(seed):
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(800.0, 800.0, 320.0, 240.0, 640, 480)
    T = RigidTransform.from_rotvec(rng.normal(scale=0.3, size=3), [*rng.normal(scale=10, size=2), 600.0])
    X, x = _correspondences(rng, K, T)
    T_hat, rms = solve_pnp(PointCorrespondences(X, x), K)
    assert T_hat.angle_to(T) < 1e-6
    assert np.allclose(T_hat.translation, T.translation, atol=1e-5)
    assert rms < 1e-6
    assert np.allclose(project(K, T_hat, X), x, atol=1e-6)


@given(seeds)
@settings(max_examples=30)
def test_pnp_planar_points(seed):
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(800.0, 800.0, 320.0, 240.0, 640, 480)
    T = RigidTransform.from_rotvec(rng.normal(scale=0.3, size=3), [0.0, 0.0, 500.0])
    X, x = _correspondences(rng, K, T, n=8, planar=True)
    T_hat, _ = solve_pnp(PointCorrespondences(X, x), K)
    assert T_hat.angle_to(T) < 1e-6


def test_pnp_identity_frontal_plane():
    K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    g = np.linspace(-50, 50, 4)
    X = np.array([[a, b, 400.0] for a in g for b in g])
    T_hat, _ = solve_pnp(PointCorrespondences(X, project(K, RigidTransform.identity(), X)), K)
    assert T_hat.angle_to(RigidTransform.identity()) < 1e-6
    assert np.allclose(T_hat.translation, 0.0, atol=1e-5)


def test_pnp_noise_rms():
    rng = np.random.default_rng(3)
    K = CameraIntrinsics(800.0, 800.0, 320.0, 240.0, 640, 480)
    rms_all = []
    for _ in range(50):
        T = RigidTransform.from_rotvec(rng.normal(scale=0.2, size=3), [0.0, 0.0, 600.0])
        X, x = _correspondences(rng, K, T)
        _, rms = solve_pnp(PointCorrespondences(X, x + rng.normal(size=x.shape)), K)
        rms_all.append(rms)
    assert max(rms_all) <= 2.0


def test_pnp_degenerate_inputs():
    K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    with pytest.raises(GeometryError, match="degenerate"):
        PointCorrespondences(np.zeros((3, 3)) + np.arange(3)[:, None], np.zeros((3, 2)))
    X = np.column_stack([np.arange(6.0), np.zeros(6), np.full(6, 100.0)])
    with pytest.raises(GeometryError, match="degenerate"):
        solve_pnp(PointCorrespondences(X, np.zeros((6, 2))), K)


def test_compose_rig_trivial_cases(rng):
    I = RigidTransform.identity()
    assert np.allclose(compose_rig(I, I, I).matrix, np.eye(4))
    A, H = random_transform(rng), random_transform(rng)
    assert np.allclose(compose_rig(A, A, H).matrix, H.matrix, atol=1e-9)


@given(seeds)
@settings(max_examples=50)
def test_compose_rig_matches_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    cf, ce, hf = (random_transform(rng) for _ in range(3))
    oracle = ce.matrix @ np.linalg.inv(cf.matrix) @ hf.matrix
    assert np.allclose(compose_rig(cf, ce, hf).matrix, oracle, atol=1e-9)


@given(seeds)
@settings(max_examples=50)
def test_rig_invariant_to_checker_frame(seed):
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    cf, cl, cr, hf, G = (random_transform(rng) for _ in range(5))
    a = RigCalibration(K, K, K, cf, cl, cr, hf)
    # re-expressing the checkerboard frame right-multiplies every checker_to_* by a common transform
    b = RigCalibration(K, K, K, cf @ G, cl @ G, cr @ G, hf)
    assert np.allclose(a.eye_left_to_hmd.matrix, b.eye_left_to_hmd.matrix, atol=1e-9)
    assert np.allclose(a.eye_right_to_hmd.matrix, b.eye_right_to_hmd.matrix, atol=1e-9)


def test_rig_dict_round_trip(rng):
    K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    cal = RigCalibration(K, K, K, *(random_transform(rng) for _ in range(4)), hmd_dots=rng.normal(size=(8, 3)))
    back = RigCalibration.from_dict(cal.to_dict())
    assert np.allclose(back.eye_left_to_hmd.matrix, cal.eye_left_to_hmd.matrix, atol=1e-12)
    assert np.allclose(back.hmd_dots, cal.hmd_dots)


@given(seeds)
@settings(max_examples=50)
def test_umeyama_recovers_similarity(seed):
    rng = np.random.default_rng(seed)
    T = random_transform(rng)
    s = rng.uniform(0.5, 2.0)
    X = rng.normal(size=(7, 3)) * 50
    Y = s * X @ T.rotation.T + T.translation
    sim = umeyama(X, Y)
    assert abs(sim.scale - s) < 1e-9 * s
    assert np.allclose(sim.apply(X), Y, atol=1e-8)
    assert np.allclose(sim.inverse_apply(Y), X, atol=1e-8)
