"""Render a synthetic dataset; thin wrapper over ``hmdsynth fixture``."""
import argparse
import sys

from hmdsynth.cli import main

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out")
    p.add_argument("--spec", default=None, help="YAML fixture spec; defaults when omitted")
    args = p.parse_args()
    argv = ["fixture", "--out", args.out] + (["--spec", args.spec] if args.spec else [])
    sys.exit(main(argv))
