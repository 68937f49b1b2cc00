"""Parameter sweeps behind the tuning notes: eye refinement gradient weight and warp silhouette weight."""
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from hmdsynth.eye import class_chroma_error, class_transfer, refine_eye  # noqa: E402
from hmdsynth.procedural import HeadSpec, build_head_model  # noqa: E402
from hmdsynth.warping import solve_grid_warp, warp_energy  # noqa: E402
from test_acceptance import _head_warp_problem  # noqa: E402
from test_eye import _red_eye  # noqa: E402


def eye_sweep(seeds=(6, 7, 8), alpha2=(1.0, 0.5, 0.2, 0.1, 0.05, 0.0)):
    print("red-eye chroma error ratio (after / before), alpha1 = 1")
    print("seed  transfer  " + "  ".join(f"a2={a:<5g}" for a in alpha2))
    for s in seeds:
        seg, ref, C = _red_eye(np.random.default_rng(s))
        before = class_chroma_error(C, seg, ref)
        tr = class_chroma_error(class_transfer(C, ref, seg), seg, ref) / before
        row = [class_chroma_error(refine_eye(C, ref, seg, alpha2=a).image, seg, ref) / before for a in alpha2]
        print(f"{s:<5d} {tr:<9.3f} " + "  ".join(f"{r:<8.3f}" for r in row))


def gamma_sweep(gammas=(0.0, 0.1, 1.0, 10.0, 100.0, 1000.0)):
    field, con = _head_warp_problem(build_head_model(HeadSpec()))
    print("\nsilhouette residual (evaluated at gamma = 1) per solve weight")
    for g in gammas:
        con.gamma = g
        out = solve_grid_warp(field, con)
        con.gamma = 1.0
        print(f"gamma={g:<7g} {warp_energy(field, con, out.target_vertices)['silhouette']:.4g}")


if __name__ == "__main__":
    eye_sweep()
    gamma_sweep()
