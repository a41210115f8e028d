#!/usr/bin/env python3
"""End-to-end toy study: discover core/spurious features for every toy class
with the oracle segmenter, then score the verdicts against the planted
ground truth.

    python scripts/run_toy_discovery.py runs/toy --seed 0 --jobs 4
"""
import argparse
import json
import sys
from pathlib import Path

from prompt_explainer.cli import main as cli
from prompt_explainer.discovery import write_annotations
from prompt_explainer.toy import build_world


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="toy discovery + agreement")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ann = out / "ground_truth.csv"
    write_annotations(ann, build_world(0).annotations())
    code = cli(["discover", "--seed", str(args.seed), "--jobs", str(args.jobs), "--out", str(out / "discover")])
    if code:
        return code
    code = cli(["agreement", "--verdicts", str(out / "discover"), "--annotations", str(ann),
                "--out", str(out / "agreement"), "--seed", str(args.seed)])
    if code == 0:
        rep = json.loads((out / "agreement" / "report.json").read_text())
        print(f"agreement with ground truth: {rep['agreement']['overall']}")
        cli(["report", "--run", str(out / "discover")])
    return code


if __name__ == "__main__":
    sys.exit(main())
