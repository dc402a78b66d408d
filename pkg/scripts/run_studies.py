#!/usr/bin/env python3
"""End-to-end study pipeline: collect, train, then run every bundled preset
and the histogram, writing all artifacts into one output directory."""

import argparse
import pathlib
import subprocess
import sys


def sh(*argv):
    print("+", " ".join(str(a) for a in argv))
    subprocess.run([sys.executable, "-m", "entpick.cli", *map(str, argv)], check=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="studies")
    ap.add_argument("--seed", type=int, default=20240601)
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = out / "dataset.jsonl"
    model = out / "model.json"

    sh("collect", "--n", 200, "--seed", args.seed, "--out", dataset)
    sh("train", dataset, "--seed", 7, "--out", model)
    sh("experiment", "HISTOGRAM", "--n", 200, "--seed", args.seed,
       "--out", out / "histogram.json")
    for preset in ("TABLE1", "TABLE2", "TABLE3", "TABLE4"):
        argv = ["experiment", preset]
        if preset in ("TABLE1", "TABLE4"):
            argv.append(model)
        argv += ["--episodes", args.episodes, "--seed", args.seed,
                 "--workers", args.workers, "--out", out / f"{preset.lower()}.json"]
        sh(*argv)
    print(f"\nall reports in {out}/")


if __name__ == "__main__":
    main()
