#!/usr/bin/env python3
"""Run every pipeline stage for one preset and print where things went.

    python scripts/run_pipeline.py scripts/presets/reduced.yaml
    python scripts/run_pipeline.py scripts/presets/reference.yaml -o runs/ref2

Stages: synth, dataset, train, eval (train and test split), localize on the
first ``--localize`` defect images, explain the first ``--explain`` of them.
"""

import argparse
import sys
import time

from gftdefect.cli import run
from gftdefect.config import load_config
from gftdefect.data import DEFECT, read_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("-o", "--output-dir")
    ap.add_argument("--localize", type=int, default=50, help="defect images to localize")
    ap.add_argument("--explain", type=int, default=15, help="defect images to explain")
    args = ap.parse_args()

    base = ["-c", args.config] + (["-o", args.output_dir] if args.output_dir else [])
    out = load_config(args.config, [("output_dir", args.output_dir)] if args.output_dir else []).output_dir

    def stage(*argv):
        t0 = time.perf_counter()
        code = run([*argv[:1], *base, *argv[1:]])
        print(f"[{argv[0]}] exit {code} in {time.perf_counter() - t0:.1f}s", flush=True)
        if code:
            sys.exit(code)

    stage("synth")
    stage("dataset")
    stage("train")
    stage("eval", "--split", "train")
    stage("eval", "--split", "test")
    defects = [str(p) for p, lab, _ in read_manifest(f"{out}/synth/manifest.csv") if lab == DEFECT]
    stage("localize", *defects[: args.localize])
    stage("explain", *defects[: args.explain])


if __name__ == "__main__":
    main()
