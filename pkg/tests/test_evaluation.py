import numpy as np
import pytest

from hmdsynth.evaluation import (
    ICPDivergence,
    eval_mesh,
    icp,
    luma,
    masked_mae,
    normal_ray_distances,
    normal_ray_distances_exhaustive,
)
from hmdsynth.facemodel import evaluate_model
from hmdsynth.geometry import RigidTransform
from hmdsynth.mesh import closest_points_bruteforce, uv_sphere


@pytest.fixture(scope="module")
def head(head_model):
    return evaluate_model(head_model, head_model.identity_prior_mean, head_model.neutral())


def test_identical_meshes(head):
    ev = eval_mesh(head, head)
    assert ev.mean_distance < 1e-9
    assert ev.icp_rms < 1e-9


def test_normal_offset_sphere():
    s = uv_sphere(50.0, 24, 48)
    big = s.with_vertices(s.vertices + s.vertex_normals())
    ev = eval_mesh(big, s)
    assert ev.mean_distance == pytest.approx(1.0, rel=0.02)


def test_normal_offset_head_without_alignment(head):
    moved = head.with_vertices(head.vertices + head.vertex_normals())
    ev = eval_mesh(moved, head, align=False)
    assert ev.mean_distance == pytest.approx(1.0, rel=0.05)


def test_noisy_mesh_matches_exhaustive(head):
    rng = np.random.default_rng(0)
    noisy = head.with_vertices(head.vertices + rng.normal(scale=0.4, size=head.vertices.shape))
    fast = normal_ray_distances(noisy, head)
    slow = normal_ray_distances_exhaustive(noisy, head)
    assert abs(fast.mean() - slow.mean()) <= 0.01 * slow.mean()
    assert np.mean(np.isclose(fast, slow, atol=1e-9)) > 0.95
    # along-normal and closest-triangle distances agree on average for small noise
    closest = closest_points_bruteforce(head, noisy.vertices)[-1]
    assert fast.mean() >= closest.mean() - 1e-9
    assert fast.mean() <= 1.5 * closest.mean()


def test_icp_recovers_small_motion(head):
    T = RigidTransform.from_rotvec([0.02, -0.03, 0.01], [1.5, -1.0, 0.8])
    src = T.inverse().apply(head.vertices)
    est, rms = icp(src, head, iters=60)
    assert est.angle_to(T) < 1e-6
    assert np.abs(est.translation - T.translation).max() < 1e-5
    assert rms < 1e-6


def test_icp_divergence_reported(head):
    bad = head.vertices.copy()
    bad[0] = np.nan
    with pytest.raises(ICPDivergence):
        icp(bad, head)


def test_landmark_initialisation(head, head_model):
    T = RigidTransform.from_rotvec([0.4, 0.8, -0.3], [40.0, -25.0, 10.0])
    moved = head.with_vertices(T.inverse().apply(head.vertices))
    ids = np.array(sorted(head_model.landmark_vertex_ids.values()))
    ev = eval_mesh(moved, head, moved.vertices[ids], head.vertices[ids])
    assert ev.mean_distance < 1e-6


def test_region_subset(head):
    moved = head.with_vertices(head.vertices + head.vertex_normals())
    region = np.arange(0, len(head.vertices), 7)
    ev = eval_mesh(moved, head, region=region, align=False)
    assert len(ev.distances) == len(region)


def test_masked_mae():
    a = np.zeros((4, 4, 3))
    b = np.zeros((4, 4, 3))
    b[0, 0] = [3, 6, 9]
    m = np.zeros((4, 4), bool)
    m[0, :2] = True
    assert masked_mae(a, b, m) == pytest.approx(3.0)
    assert masked_mae(a, b, np.zeros((4, 4), bool)) == 0.0
    assert luma(np.ones((2, 2, 3))) == pytest.approx(np.ones((2, 2)))
