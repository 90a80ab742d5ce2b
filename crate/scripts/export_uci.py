#!/usr/bin/env python3
"""Export UCI classification tasks to plain CSV for the benchmark harness.

The raw files come from the `keel-ds` wheel (pip install --no-deps keel-ds),
which bundles KEEL's copies of the UCI repository tasks. Every CSV gets a
header row `f0,...,f{D-1},label`.
"""
import argparse
import os
import sys

TASKS = {
    # output name -> KEEL raw file
    "australian": "australian",
    "breast_cancer": "wisconsin",
    "vehicle": "vehicle",
    "ionosphere": "ionosphere",
    "satimage": "satimage",
}


def keel_raw_dir():
    import keel_ds

    return os.path.join(os.path.dirname(keel_ds.__file__), "data", "balanced", "raw")


def export(src, dst):
    rows = []
    with open(src) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("@"):
                continue
            cells = [c.strip() for c in line.split(",")]
            rows.append(cells)
    width = len(rows[0])
    with open(dst, "w") as out:
        out.write(",".join([f"f{i}" for i in range(width - 1)] + ["label"]) + "\n")
        for r in rows:
            out.write(",".join(r) + "\n")
    return len(rows), width - 1


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    ap.add_argument("tasks", nargs="*", default=["australian", "breast_cancer", "vehicle"])
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    raw = keel_raw_dir()
    for name in args.tasks:
        if name not in TASKS:
            sys.exit(f"unknown task {name}; known: {', '.join(TASKS)}")
        n, d = export(os.path.join(raw, TASKS[name] + ".dat"), os.path.join(args.out, name + ".csv"))
        print(f"{name}: N={n} D={d}")


if __name__ == "__main__":
    main()
