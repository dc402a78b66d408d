#!/usr/bin/env python3
"""Calibration diagnostics for the default simulator configuration.

Prints the collected-mass distribution, model fit quality, fresh-heap
prediction bias, histogram mode counts, and a reduced-size directional
sweep of the four study presets. Run after touching simulator defaults.
"""

import argparse
import time

import numpy as np

from entpick import experiments as ex
from entpick import mdn, pipeline, select, sim
from entpick.sim import PatchObservation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=60)
    ap.add_argument("--seed", type=int, default=101)
    ap.add_argument("--tables", default="1,2,3,4")
    args = ap.parse_args()

    cfg = sim.SimConfig()
    t0 = time.perf_counter()
    ds = pipeline.run_collection(cfg, 200, seed=args.seed)
    masses = np.array(ds.masses())
    print("collect 200: %.1fs  pcts10/50/70 %s  std %.1f  min %.1f max %.1f"
          % (time.perf_counter() - t0, np.percentile(masses, [10, 50, 70]).round(1),
             masses.std(), masses.min(), masses.max()))

    t0 = time.perf_counter()
    model = mdn.train(ds, mdn.ModelConfig(seed=7))
    errs, sigs = [], []
    for r in ds.eval_rows():
        mu, s = mdn.mixture_moments(mdn.mdn_forward(model, PatchObservation(r.patch, r.z_cm)))
        errs.append(r.mass_g - mu)
        sigs.append(s)
    print("train: %.1fs  eval resid std %.2f  sigma_hat %.2f"
          % (time.perf_counter() - t0, np.std(errs), np.mean(sigs)))

    rng = np.random.default_rng(0)
    biases = []
    for i in range(120):
        heap = sim.init_heap(cfg, 50_000 + i)
        x = int(rng.integers(80, 345))
        y = int(rng.integers(80, 229))
        z = float(rng.choice([2.0, 3.0, 4.0]))
        if sim.local_median_height(heap, x, y) - z * 10 < cfg.clearance_mm:
            continue
        mu, _ = select.score_candidate(model, heap, x, y, z)
        sim.apply_pregrasp(heap, x, y, z, rng, cfg)
        out = sim.execute_grasp(heap, x, y, z, rng, cfg)
        biases.append(out.grasped_mass - mu)
    print("fresh-heap bias: mean %.2f std %.2f" % (np.mean(biases), np.std(biases)))

    hist = ex.mass_histogram(ds, 2.0, split="train")
    ds1 = pipeline.run_collection(cfg, 200, zpool=(3.0,), seed=args.seed)
    hist1 = ex.mass_histogram(ds1, 2.0, split="train")
    print("modes: multi-z %d  single-z %d" % (ex.count_modes(hist), ex.count_modes(hist1)))

    wanted = set(args.tables.split(","))
    if "1" in wanted:
        t0 = time.perf_counter()
        r = ex.run_experiment(ex.preset("TABLE1", episodes=args.episodes, seed=5), cfg, model)
        print("TABLE1 (%.0fs):" % (time.perf_counter() - t0))
        for c in r.cells:
            print("  %-9s target %5.1f: %5.1f +- %4.1f" % (c["arm"], c["target_g"],
                                                           c["mean_pct"], c["std_pct"]))
        print("  counts:", r.counts)
    if "2" in wanted:
        t0 = time.perf_counter()
        r = ex.run_experiment(ex.preset("TABLE2", episodes=args.episodes, seed=6,
                                        drops_g=(3.0, 5.0, 10.0)), cfg)
        print("TABLE2 (%.0fs):" % (time.perf_counter() - t0))
        for c in r.cells:
            print("  %-13s drop %4.1f band %.0f: %5.1f +- %4.1f" % (
                c["arm"], c["target_g"], c["band_g"], c["mean_pct"], c["std_pct"]))
    if "3" in wanted:
        t0 = time.perf_counter()
        r = ex.run_experiment(ex.preset("TABLE3", episodes=args.episodes, seed=7), cfg)
        print("TABLE3 (%.0fs):" % (time.perf_counter() - t0))
        for c in r.cells:
            print("  %-11s band %.0f: %5.1f +- %4.1f" % (c["arm"], c["band_g"],
                                                         c["mean_pct"], c["std_pct"]))
    if "4" in wanted:
        t0 = time.perf_counter()
        r = ex.run_experiment(ex.preset("TABLE4", episodes=args.episodes, seed=8), cfg, model)
        print("TABLE4 (%.0fs):" % (time.perf_counter() - t0))
        for c in r.cells:
            print("  %-9s target %5.1f band %.0f: %5.1f +- %4.1f" % (
                c["arm"], c["target_g"], c["band_g"], c["mean_pct"], c["std_pct"]))
        for rr in r.regrasp:
            print("  regrasp %-9s target %5.1f: %.0f%%" % (rr["arm"], rr["target_g"], rr["rate_pct"]))


if __name__ == "__main__":
    main()
