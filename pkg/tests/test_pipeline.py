import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

from hmdsynth.cli import main
from hmdsynth.fixture import FixtureSpec, FixtureError, synth_fixture
from hmdsynth.mesh import uv_sphere, write_obj
from hmdsynth.pipeline import (
    STAGE_GROUPS,
    ConfigError,
    EvalReport,
    Pipeline,
    PipelineConfig,
    frame_indices,
    hmd_region,
    run_pipeline,
)


def config_for(dataset, output, **kw) -> PipelineConfig:
    cfg = PipelineConfig.from_dict({"paths": {"dataset": str(dataset), "output": str(output)}, **kw})
    cfg.paths = cfg.paths.resolved(Path("/"))
    cfg.check_paths()
    return cfg


# -- config -----------------------------------------------------------------------------------------


def test_config_yaml_round_trip():
    cfg = PipelineConfig.from_dict({"mode": "mobile", "frames": [2, 5], "warp": {"rows": 10, "gamma": 3.0},
                                    "tracker": {"lam2": 0.5}})
    back = PipelineConfig.from_dict(yaml.safe_load(cfg.to_yaml()))
    assert back == cfg
    assert back.warp.rows == 10 and back.tracker.lam2 == 0.5 and back.warp.cols == PipelineConfig().warp.cols


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"warp": {"rowz": 3}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"mode": "vr"})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"frames": [5, 2]})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"compose": {"band": -1.0}})


def test_missing_inputs_reported(tmp_path):
    cfg = PipelineConfig.from_dict({"paths": {"dataset": str(tmp_path)}})
    cfg.paths = cfg.paths.resolved(Path("/"))
    with pytest.raises(ConfigError, match="calibration"):
        cfg.check_paths()


def test_hmd_region_covers_dots():
    dots = np.array([[100.0, 100.0], [200.0, 100.0], [200.0, 150.0], [100.0, 150.0]])
    m = hmd_region(dots, (240, 320), 5.0)
    assert m[125, 150] and m[97, 97] and not m[10, 10]


# -- fixture ----------------------------------------------------------------------------------------


def test_fixture_frame_count(tmp_path):
    spec = FixtureSpec(n_frames=10, n_align=3, n_reference=4, render_images=False)
    root = synth_fixture(spec, tmp_path)
    assert frame_indices(root / "frames") == list(range(10))
    assert len(json.loads((root / "truth" / "truth.json").read_text())["frames"]) == 10
    assert FixtureSpec.load(root / "fixture.yaml") == spec


def test_fixture_spec_validation():
    with pytest.raises(FixtureError):
        FixtureSpec(mode="vr")
    with pytest.raises(FixtureError):
        FixtureSpec.from_dict({"n_frame": 3})


def test_static_pose_retrieves_first_reference(tmp_path):
    spec = FixtureSpec(n_frames=6, n_align=4, n_reference=8, render_images=False,
                       pose_yaw_deg=0.0, pose_pitch_deg=0.0, pose_shift_mm=0.0)
    root = synth_fixture(spec, tmp_path / "fx")
    cfg = config_for(root, tmp_path / "out")
    pipe = Pipeline(cfg)
    report = EvalReport()
    pipe.setup(report)
    tracked = pipe.track(list(range(6)), report)
    assert [t.reference_id for t in tracked] == [0] * 6


# -- runs on the shared simulation fixture -----------------------------------------------------------


def test_stages_off_copy_query_through(sim_fixture, tmp_path):
    cfg = config_for(sim_fixture, tmp_path, frames=[0, 2],
                     stages={"track": False, "retrieve": False, "warp": False, "eyes": False, "compose": False})
    report = run_pipeline(cfg)
    assert len(report.frames) == 2
    for i in (0, 1):
        out = np.asarray(Image.open(tmp_path / "frames" / f"out_{i:05d}.png"))
        q = np.asarray(Image.open(sim_fixture / "frames" / f"face_{i:05d}.png").convert("RGB"))
        assert np.array_equal(out, q)
    assert all(v == 0.0 for v in report.stage_ms.values())


def test_missing_landmarks_skip_frame(sim_fixture, tmp_path):
    fx = tmp_path / "fx"
    shutil.copytree(sim_fixture, fx)
    (fx / "frames" / "landmarks_00001.json").unlink()
    report = run_pipeline(config_for(fx, tmp_path / "out", frames=[0, 3], stages={"eyes": False}))
    assert [f["frame"] for f in report.frames] == [0, 2]
    assert report.skipped == [{"frame": 1, "reason": "missing landmarks"}]


@pytest.mark.slow
def test_pipeline_deterministic_and_timed(sim_fixture, tmp_path):
    a = run_pipeline(config_for(sim_fixture, tmp_path / "a", frames=[0, 2]))
    b = run_pipeline(config_for(sim_fixture, tmp_path / "b", frames=[0, 2], workers=2))
    for i in (0, 1):
        assert (tmp_path / "a" / "frames" / f"out_{i:05d}.png").read_bytes() == \
               (tmp_path / "b" / "frames" / f"out_{i:05d}.png").read_bytes()
    assert set(a.group_ms) == set(STAGE_GROUPS) and all(v > 0 for v in a.group_ms.values())
    assert a.mean_intensity_error == b.mean_intensity_error
    assert a.mesh_distance_mm is not None and a.mesh_distance_mm < 3.0
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["mean_intensity_error"] == a.mean_intensity_error


# -- command line -------------------------------------------------------------------------------------


def test_cli_print_config(capsys):
    assert main(["run", "--print-config", "--mode", "mobile", "--frames", "3..7"]) == 0
    cfg = yaml.safe_load(capsys.readouterr().out)
    assert cfg["mode"] == "mobile" and cfg["frames"] == [3, 7]


def test_cli_run_needs_config():
    assert main(["run"]) == 2


def test_cli_eval_mesh(tmp_path, capsys):
    s = uv_sphere(40.0, 12, 24)
    write_obj(tmp_path / "a.obj", s)
    write_obj(tmp_path / "b.obj", s.with_vertices(s.vertices + 0.5 * s.vertex_normals()))
    assert main(["eval-mesh", str(tmp_path / "a.obj"), str(tmp_path / "a.obj")]) == 0
    assert json.loads(capsys.readouterr().out)["mean_distance_mm"] < 1e-9
    assert main(["eval-mesh", str(tmp_path / "b.obj"), str(tmp_path / "a.obj"), "--no-align"]) == 0
    assert json.loads(capsys.readouterr().out)["mean_distance_mm"] == pytest.approx(0.5, rel=0.05)


def test_cli_fixture_print_spec(capsys):
    assert main(["fixture", "--print-spec"]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["n_frames"] == 20
