"""Command line: ``run``, ``fixture`` and ``eval-mesh``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .evaluation import eval_mesh
from .fixture import FixtureSpec, _plain, synth_fixture
from .mesh import read_obj
from .pipeline import PipelineConfig, run_pipeline

log = logging.getLogger("hmdsynth")


def _frame_range(text: str) -> list:
    try:
        a, b = text.split("..")
        return [int(a), int(b)]
    except ValueError:
        raise argparse.ArgumentTypeError("expected a..b (start inclusive, stop exclusive)") from None


def _cmd_run(args) -> int:
    if args.config is None:
        cfg = PipelineConfig()
    else:
        cfg = PipelineConfig.from_dict(yaml.safe_load(Path(args.config).read_text()) or {})
    if args.frames is not None:
        cfg.frames = args.frames
    if args.mode is not None:
        cfg.mode = args.mode
    if args.dump_debug:
        cfg.dump_debug = True
    if args.workers is not None:
        cfg.workers = args.workers
    cfg.__post_init__()
    if args.print_config:
        sys.stdout.write(cfg.to_yaml())
        return 0
    if args.config is None:
        log.error("run needs --config")
        return 2
    cfg.paths = cfg.paths.resolved(Path(args.config).parent)
    cfg.check_paths()
    report = run_pipeline(cfg)
    summary = {
        "frames": len(report.frames),
        "skipped": len(report.skipped),
        "mean_intensity_error": report.mean_intensity_error,
        "mesh_distance_mm": report.mesh_distance_mm,
        "group_ms": report.group_ms,
        "output": cfg.paths.output,
    }
    print(json.dumps(summary, indent=1))
    return 0


def _cmd_fixture(args) -> int:
    spec = FixtureSpec.load(args.spec) if args.spec else FixtureSpec()
    if args.print_spec:
        sys.stdout.write(yaml.safe_dump(_plain(spec.__dict__), sort_keys=True))
        return 0
    if args.out is None:
        log.error("fixture needs --out")
        return 2
    print(synth_fixture(spec, args.out))
    return 0


def _cmd_eval_mesh(args) -> int:
    a, b = read_obj(args.a), read_obj(args.b)
    lm_a = lm_b = None
    if len(a.vertices) == len(b.vertices) and not args.no_landmarks:
        # shared topology: every vertex is a landmark for the initial rigid fit
        lm_a, lm_b = a.vertices, b.vertices
    res = eval_mesh(a, b, lm_a, lm_b, align=not args.no_align)
    print(json.dumps({"mean_distance_mm": res.mean_distance, "max_distance_mm": float(np.max(res.distances)),
                      "icp_rms_mm": res.icp_rms}, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmdsynth", description="Remove an HMD from face video using a pre-captured reference set.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the pipeline on a dataset")
    r.add_argument("--config", type=str, default=None)
    r.add_argument("--frames", type=_frame_range, default=None, help="a..b, stop exclusive")
    r.add_argument("--mode", choices=("sim", "mobile"), default=None)
    r.add_argument("--dump-debug", action="store_true")
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    r.set_defaults(func=_cmd_run)

    f = sub.add_parser("fixture", help="render a synthetic dataset")
    f.add_argument("--spec", type=str, default=None)
    f.add_argument("--out", type=str, default=None)
    f.add_argument("--print-spec", action="store_true")
    f.set_defaults(func=_cmd_fixture)

    e = sub.add_parser("eval-mesh", help="mean normal-ray distance between two meshes after ICP")
    e.add_argument("a")
    e.add_argument("b")
    e.add_argument("--no-align", action="store_true")
    e.add_argument("--no-landmarks", action="store_true", help="start ICP from the identity")
    e.set_defaults(func=_cmd_eval_mesh)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
