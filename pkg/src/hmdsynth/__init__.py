"""Head-mounted display removal: face model fitting, tracking, reference retrieval, warping,
NIR eye colourisation and compositing."""

from .color import LabImage
from .compose import blend_pyramid, feathered_weights, match_histogram
from .evaluation import eval_mesh
from .eye import locate_iris_pupil, propagate_color, refine_eye, select_seeds
from .facemodel import BilinearFaceModel, evaluate_model, fit_identity_to_cloud, fit_identity_to_landmarks
from .fixture import FixtureSpec, synth_fixture
from .geometry import CameraIntrinsics, RigCalibration, RigidTransform, solve_pnp
from .pipeline import EvalReport, PipelineConfig, run_pipeline
from .retrieval import DatasetIndex, RetrievalQuery, pose_angles, retrieve_reference
from .tracking import TrackerConfig, initial_alignment, track_expression
from .warping import GridWarpField, WarpConstraints, render_warp, solve_grid_warp

__version__ = "0.1.0"
