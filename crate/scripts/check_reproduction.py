#!/usr/bin/env python3
"""Compare a full-corpus run against the reference results.

Usage: check_reproduction.py RUNS_DIR

RUNS_DIR is the --run-dir root `make reproduce` wrote into: report.json from
build-dataset plus one subdirectory per training configuration. Prints one
line per criterion and exits nonzero if any bound is missed.
"""

import json
import sys
from pathlib import Path

# Reference dataset statistics, checked to +/-10% (the embedding file and
# banned-action list admit small build-to-build differences).
DATASET_REF = {
    "images": 6407,
    "captions_used": 14928,
    "instances": 19559,
    "captions_per_image": 2.33,
    "pairs_per_caption": 1.31,
}

# Reference metric rows (acc_y, F1_y, r_x, r_y, R2, IoU), checked to +/-3
# absolute points per metric.
METRIC_KEYS = ["acc_y", "f1_y", "r_x", "r_y", "r2", "iou"]
RUN_REF = {
    "triplet-avg": [77.9, 77.7, 70.4, 67.6, 47.3, 12.1],
    "caption-avg": [77.8, 77.7, 80.0, 60.4, 53.8, 13.8],
    "caption-bilstm": [79.4, 79.5, 80.0, 64.9, 56.6, 15.0],
}


def verdict(criterion, ok, detail):
    print(f"[reproduce] {criterion}: {'PASS' if ok else 'FAIL'} — {detail}")
    return ok


def aggregate(root, run):
    with open(root / run / "metrics-aggregate.json") as f:
        return json.load(f)


def main():
    root = Path(sys.argv[1])
    ok = True

    with open(root / "report.json") as f:
        report = json.load(f)
    misses = [
        f"{k}={report[k]} (ref {v})"
        for k, v in DATASET_REF.items()
        if abs(report[k] - v) > 0.10 * v
    ]
    ok &= verdict(
        "criterion 7 (dataset statistics, +/-10%)",
        not misses,
        "; ".join(misses) or "all five statistics in range",
    )

    crit = {"triplet-avg": 8, "caption-avg": 9, "caption-bilstm": 9}
    for run, refs in RUN_REF.items():
        got = aggregate(root, run)
        misses = [
            f"{k}={got[k]:.1f} (ref {r})"
            for k, r in zip(METRIC_KEYS, refs)
            if abs(got[k] - r) > 3.0
        ]
        ok &= verdict(
            f"criterion {crit[run]} ({run}, +/-3 points)",
            not misses,
            "; ".join(misses) or "all six metrics in range",
        )

    full = aggregate(root, "caption-avg")
    ablated = aggregate(root, "caption-no-so-avg")
    collapsed = (
        ablated["iou"] < 0.5 * full["iou"] and ablated["r_y"] < 0.5 * full["r_y"]
    )
    ok &= verdict(
        "criterion 10 (no-boxes ablation collapses)",
        collapsed,
        f"IoU {full['iou']:.1f} -> {ablated['iou']:.1f}, "
        f"r_y {full['r_y']:.1f} -> {ablated['r_y']:.1f}",
    )

    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
