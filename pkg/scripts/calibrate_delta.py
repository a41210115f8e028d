#!/usr/bin/env python3
"""Sweep the core/spurious threshold over the r samples of a finished
discover run and print the agreement with an annotation file at each value.

    python scripts/calibrate_delta.py runs/toy/discover runs/toy/ground_truth.csv
"""
import argparse
import sys

import numpy as np

from prompt_explainer.discovery import agreement, classify_feature, read_annotations
from prompt_explainer.runs import load_report


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="threshold sweep")
    p.add_argument("run")
    p.add_argument("annotations")
    p.add_argument("--grid", default="0.01:0.30:0.01", help="start:stop:step")
    args = p.parse_args(argv)
    audits = [a for a in load_report(args.run)["discovery"]["audits"] if a["r_samples"]]
    ann = read_annotations(args.annotations)
    start, stop, step = (float(x) for x in args.grid.split(":"))
    print("delta,agreement,n")
    for d in np.arange(start, stop + step / 2, step):
        verdicts = {(a["class"], a["feature"]): classify_feature(a["r_samples"], float(d)) for a in audits}
        rep = agreement(verdicts, ann)
        print(f"{d:.3f},{rep.overall},{rep.n}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
