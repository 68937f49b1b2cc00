import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from hmdsynth.fixture import FixtureSpec, synth_fixture
from hmdsynth.geometry import CameraIntrinsics, RigidTransform
from hmdsynth.procedural import HeadSpec, build_head_model

settings.register_profile(
    "repo", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

seeds = st.integers(0, 2**31 - 1)


def random_transform(rng, tscale=100.0) -> RigidTransform:
    return RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(scale=tscale, size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cam():
    return CameraIntrinsics(500.0, 520.0, 319.5, 239.5, 640, 480)


@pytest.fixture(scope="session")
def head_model():
    return build_head_model(HeadSpec())


@pytest.fixture(scope="session")
def sim_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("fx_sim")
    synth_fixture(FixtureSpec(mode="sim"), root)
    return root


class TrackingScene:
    """In-memory rig, head placement and landmark observations built with the fixture helpers."""

    def __init__(self, model, spec: FixtureSpec, n_query: int = 10, seed: int = 0):
        from hmdsynth.facemodel import evaluate_model
        from hmdsynth.fixture import (
            _pose_offset, build_rig, expression_script, hmd_box_mesh, hmd_pose_script, observe_frame,
        )

        rng = np.random.default_rng(seed)
        self.model, self.spec = model, spec
        cid = np.zeros(model.identity_dim)
        cid[0] = 1.0
        cid[1:] = rng.normal(0, spec.identity_std, model.identity_dim - 1)
        self.cid = cid
        self.head_to_hmd = RigidTransform.from_rotvec(spec.head_rotvec, spec.head_translation)
        self.rig = build_rig(spec)
        box = hmd_box_mesh(spec)
        neutral = evaluate_model(model, cid, model.neutral())
        self.align = []
        for i in range(spec.n_align):
            a = 2 * np.pi * i / spec.n_align
            H = self.rig.hmd_to_face @ _pose_offset(np.deg2rad(spec.align_yaw_deg) * np.sin(a),
                                                    np.deg2rad(spec.align_pitch_deg) * np.cos(a), [0.0, 0.0, 0.0])
            self.align.append((observe_frame(model, neutral, i, i / spec.fps, self.head_to_hmd, H, self.rig,
                                             spec, box, rng), H))
        self.expressions = expression_script(spec, n_query)
        self.hmd = hmd_pose_script(spec, self.rig.hmd_to_face, n_query)
        self.frames = []
        for i in range(n_query):
            mesh = evaluate_model(model, cid, self.expressions[i])
            self.frames.append(observe_frame(model, mesh, i, i / spec.fps, self.head_to_hmd, self.hmd[i],
                                             self.rig, spec, box, rng))
