"""Study presets and bootstrap evaluation.

Four bundled presets compare the pipeline's ingredients head to head, each
cell reporting a bootstrap mean +- std success rate over seeded episodes on
independent heaps:

  TABLE1    selection margin: alpha in {0, 1}; success = grasped mass above
            target - 2 g, at the 10th/50th/70th percentile targets.
  TABLE2    loosening: pre-grasp on/off before random grasps, then a fixed
            drop (3/4/5/10/15 g) discarded by post-grasping without spines;
            success = final within +-2 g of (grasped - drop). Loads under
            drop + 5 g are re-grasped.
  TABLE3    spines on/off for a 10 g post-grasp drop after loosened random
            grasps, bands +-2..5 g; loads under 15 g are re-grasped.
  TABLE4    the full pipeline (alpha 1, pre-grasp, spined post-grasp) against
            a baseline that picks at alpha 0 with pre-grasp and no post-grasp,
            at the three percentile targets and bands +-2/3/4 g.

Percentile targets are nearest-rank percentiles of the model's training
masses, which the training log carries. An episode mass ledger (heap loss
vs placed + discarded) is accumulated into every report.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, asdict
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import mdn, pipeline
from .pipeline import EpisodeConfig
from .select import SelectionConfig, select_grasp
from .sim import (ScaleState, SimConfig, Z_POOL_DEEP, apply_pregrasp,
                  execute_grasp, init_heap, make_gripper_load, release_mass,
                  total_mass)

# Reference targets reported for the imitation-cabbage class at the
# 10th/50th/70th percentiles on the original hardware; annotation only,
# never an assertion target.
REFERENCE_TARGETS_G = {"imitation_cabbage": (22.0, 46.0, 56.0)}

PRESET_NAMES = ("TABLE1", "TABLE2", "TABLE3", "TABLE4")


@dataclass
class ExperimentPreset:
    name: str
    flags: dict
    targets: tuple | None = (10, 50, 70)   # percentiles of training masses
    episodes: int = 200
    bands: tuple = (2.0, 3.0, 4.0)
    seed: int = 20240601
    drops_g: tuple | None = None
    regrasp_margin_g: float = 5.0
    bootstrap_B: int = 2000

    def __post_init__(self):
        if self.episodes < 30:
            raise ValueError("need at least 30 episodes per cell")
        if self.targets is not None:
            if any(not 0 < p < 100 for p in self.targets):
                raise ValueError("percentiles must lie in (0, 100)")


def preset(name: str, episodes: int = 200, seed: int = 20240601,
           drops_g: tuple | None = None) -> ExperimentPreset:
    """A shipped study preset by name."""
    name = name.upper()
    if name == "TABLE1":
        return ExperimentPreset("TABLE1", flags={"alpha": (0.0, 1.0), "pregrasp": True,
                                                 "spines": True, "postgrasp": False},
                                episodes=episodes, seed=seed, bands=())
    if name == "TABLE2":
        return ExperimentPreset("TABLE2", flags={"alpha": None, "pregrasp": (False, True),
                                                 "spines": True, "postgrasp": True},
                                targets=None, episodes=episodes, seed=seed,
                                bands=(2.0,), drops_g=drops_g or (3.0, 4.0, 5.0, 10.0, 15.0))
    if name == "TABLE3":
        return ExperimentPreset("TABLE3", flags={"alpha": None, "pregrasp": True,
                                                 "spines": (False, True), "postgrasp": True},
                                targets=None, episodes=episodes, seed=seed,
                                bands=(2.0, 3.0, 4.0, 5.0), drops_g=drops_g or (10.0,))
    if name == "TABLE4":
        return ExperimentPreset("TABLE4", flags={"arms": (
            {"name": "baseline", "alpha": 0.0, "pregrasp": True, "spines": True, "postgrasp": False},
            {"name": "ours", "alpha": 1.0, "pregrasp": True, "spines": True, "postgrasp": True},
        )}, episodes=episodes, seed=seed, bands=(2.0, 3.0, 4.0))
    raise ValueError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")


@dataclass
class BootstrapReport:
    preset: str
    cells: list                 # {arm, target_g, band_g, mean_pct, std_pct}
    regrasp: list               # {arm, target_g, rate_pct}
    seeds: dict
    ledger: dict
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def nearest_rank_percentile(values, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    if len(values) == 0:
        raise ValueError("no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def percentile_targets(dataset: mdn.Dataset, ps) -> list:
    """Targets at the given percentiles of the training-split masses."""
    masses = dataset.masses("train")
    if not masses:
        raise ValueError("empty training split")
    return [nearest_rank_percentile(masses, p) for p in ps]


def success_rate(finals, target: float, band: float) -> float:
    """Fraction of final masses within +-band of the target."""
    finals = list(finals)
    if not finals:
        raise ValueError("no results")
    hits = sum(1 for f in finals if abs(f - target) <= band)
    return hits / len(finals)


def bootstrap(successes, B: int, seed: int) -> tuple:
    """Resample-with-replacement mean and std of the success rate, in percent."""
    outcomes = np.asarray(list(successes), dtype=float)
    if outcomes.size == 0:
        raise ValueError("no outcomes to resample")
    if B < 1000:
        raise ValueError("use at least 1000 bootstrap resamples")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, outcomes.size, size=(B, outcomes.size))
    rates = outcomes[idx].mean(axis=1) * 100.0
    return float(rates.mean()), float(rates.std())


# ---------------------------------------------------------------------------
# histogram
# ---------------------------------------------------------------------------

@dataclass
class Histogram:
    bin_width_g: float
    bins: list     # {lo, count}

    def counts(self):
        return [b["count"] for b in self.bins]

    def to_dict(self) -> dict:
        return {"bin_width_g": self.bin_width_g, "bins": self.bins}


def mass_histogram(dataset: mdn.Dataset, bin_width: float, split=None) -> Histogram:
    """Counts of grasped masses in fixed-width bins starting at 0."""
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    masses = dataset.masses(split)
    if not masses:
        raise ValueError("no masses to bin")
    n_bins = int(max(masses) // bin_width) + 1
    counts = [0] * n_bins
    for m in masses:
        counts[min(int(m // bin_width), n_bins - 1)] += 1
    return Histogram(bin_width, [{"lo": i * bin_width, "count": c}
                                 for i, c in enumerate(counts)])


def count_modes(hist: Histogram, window: int = 3, min_height_frac: float = 0.15,
                min_prominence_frac: float = 0.12) -> int:
    """Modes of the smoothed histogram: peaks of the window-bin moving
    average with both height and topographic prominence above fractions of
    the smoothed maximum, so Poisson zigzag in adjacent bins does not
    count as structure."""
    from scipy.signal import find_peaks
    counts = np.asarray(hist.counts(), dtype=float)
    padded = np.concatenate([[0.0], counts, [0.0]])
    kernel = np.ones(window) / window
    s = np.convolve(padded, kernel, mode="same")
    top = s.max()
    if top <= 0:
        return 0
    peaks, _ = find_peaks(s, height=min_height_frac * top,
                          prominence=min_prominence_frac * top)
    return int(len(peaks))


# ---------------------------------------------------------------------------
# episode runners
# ---------------------------------------------------------------------------

def _random_grasp_episode(sim_cfg, heap_seed, rng_seed, pregrasp, spines, drop_g,
                          regrasp_margin_g, zpool):
    """One TABLE2/TABLE3 style episode: random grasp (re-grasping light loads),
    then drop `drop_g` by post-grasping. Returns the episode summary dict."""
    heap = init_heap(sim_cfg, heap_seed)
    rng = np.random.default_rng(rng_seed)
    ctl = pipeline.ControllerConfig.from_sim(sim_cfg)
    before = total_mass(heap)
    regrasps = 0
    outcome = None
    for _ in range(30):
        x, y, z = pipeline._random_grasp_point(heap, zpool, rng, sim_cfg)
        if pregrasp:
            apply_pregrasp(heap, x, y, z, rng, sim_cfg)
        outcome = execute_grasp(heap, x, y, z, rng, sim_cfg)
        if outcome.grasped_mass < drop_g + regrasp_margin_g:
            release_mass(heap, x, y, outcome.grasped_mass, sim_cfg)
            regrasps += 1
            outcome = None
            continue
        break
    if outcome is None:
        return {"ok": False, "regrasps": regrasps, "imbalance": 0.0}
    grasped = outcome.grasped_mass
    target = grasped - drop_g
    load = make_gripper_load(outcome, sim_cfg.postgrasp, spines)
    scale = ScaleState(params=sim_cfg.scale)
    final, _ = pipeline.run_postgrasp(load, target, scale, ctl, rng, sim_cfg.postgrasp)
    imbalance = before - total_mass(heap) - grasped
    return {"ok": True, "regrasps": regrasps, "grasped": grasped, "target": target,
            "final": final, "err": abs(final - target), "imbalance": imbalance}


def _selection_episode(sim_cfg, model, heap_seed, rng_seed, target, alpha,
                       pregrasp, spines, postgrasp):
    """One TABLE1/TABLE4 style episode on a fresh heap."""
    heap = init_heap(sim_cfg, heap_seed)
    rng = np.random.default_rng(rng_seed)
    cfg = EpisodeConfig.default(sim_cfg, use_pregrasp=pregrasp,
                                use_postgrasp=postgrasp, spines=spines)
    before = total_mass(heap)
    result = pipeline.run_inference_episode(model, heap, target, alpha, cfg, rng)
    imbalance = before - total_mass(heap) - result.placed_g - result.discarded_g
    return {"status": result.status, "grasped": result.grasped_initial,
            "final": result.final_mass, "retries": result.retries,
            "imbalance": imbalance}


def _table1_episode(sim_cfg, model, heap_seed, rng_seed, target, alpha):
    """Selection study episode: single pick, no retry, success judged on the
    grasped mass itself."""
    heap = init_heap(sim_cfg, heap_seed)
    rng = np.random.default_rng(rng_seed)
    sel_cfg = SelectionConfig(target_mass_g=target, alpha=alpha)
    sel = select_grasp(model, heap, sel_cfg, clearance_mm=sim_cfg.clearance_mm)
    if sel is None:
        return {"status": "infeasible", "grasped": 0.0, "imbalance": 0.0}
    before = total_mass(heap)
    apply_pregrasp(heap, sel.x, sel.y, sel.z_cm, rng, sim_cfg)
    outcome = execute_grasp(heap, sel.x, sel.y, sel.z_cm, rng, sim_cfg)
    imbalance = before - total_mass(heap) - outcome.grasped_mass
    return {"status": "placed", "grasped": outcome.grasped_mass, "imbalance": imbalance}


def _call(payload):
    fn, args = payload
    return fn(*args)


def _map_episodes(payloads, workers: int):
    if workers <= 1:
        return [_call(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_call, payloads, chunksize=8))


def _episode_seeds(root_seed: int, n: int):
    ss = np.random.SeedSequence(root_seed)
    out = []
    for p in ss.spawn(n):
        words = p.generate_state(2)
        out.append((int(words[0]), int(words[1])))
    return out


# ---------------------------------------------------------------------------
# the studies
# ---------------------------------------------------------------------------

def _targets_from_model(model: mdn.ModelParams, percentiles) -> list:
    masses = model.training_log.get("train_masses_g")
    if not masses:
        raise ValueError("model checkpoint carries no training masses; "
                         "retrain or pass a model produced by train()")
    return [nearest_rank_percentile(masses, p) for p in percentiles]


def run_experiment(preset_obj: ExperimentPreset, sim_config: SimConfig,
                   model: mdn.ModelParams | None = None, workers: int = 1,
                   zpool=None) -> BootstrapReport:
    """Execute a study preset and aggregate bootstrap cells."""
    name = preset_obj.name.upper()
    if name in ("TABLE1", "TABLE4") and model is None:
        raise ValueError(f"{name} needs a trained model")
    if zpool is None:
        zpool = Z_POOL_DEEP

    cells = []
    regrasp = []
    counts = {"episodes": 0, "infeasible": 0, "failed_to_grasp": 0}
    imbalances = []
    boot_seed = preset_obj.seed + 104729

    if name == "TABLE1":
        targets = _targets_from_model(model, preset_obj.targets)
        for alpha in preset_obj.flags["alpha"]:
            for p, target in zip(preset_obj.targets, targets):
                seeds = _episode_seeds(_cell_seed(preset_obj.seed, alpha, p), preset_obj.episodes)
                payloads = [(_table1_episode, (sim_config, model, hs, rs, target, alpha))
                            for hs, rs in seeds]
                results = _map_episodes(payloads, workers)
                wins = [1.0 if (r["status"] == "placed" and r["grasped"] > target - 2.0) else 0.0
                        for r in results]
                mean, std = bootstrap(wins, preset_obj.bootstrap_B, boot_seed)
                cells.append({"arm": f"alpha={alpha:g}", "target_g": target,
                              "percentile": p, "band_g": None,
                              "metric": "grasped_above_target_minus_2g",
                              "mean_pct": mean, "std_pct": std})
                _tally(counts, imbalances, results)

    elif name in ("TABLE2", "TABLE3"):
        arm_key = "pregrasp" if name == "TABLE2" else "spines"
        arm_values = preset_obj.flags[arm_key]
        for arm_value in arm_values:
            pregrasp = arm_value if name == "TABLE2" else preset_obj.flags["pregrasp"]
            spines = arm_value if name == "TABLE3" else preset_obj.flags["spines"]
            for drop in preset_obj.drops_g:
                seeds = _episode_seeds(_cell_seed(preset_obj.seed, arm_value, drop),
                                       preset_obj.episodes)
                payloads = [(_random_grasp_episode,
                             (sim_config, hs, rs, pregrasp, spines, drop,
                              preset_obj.regrasp_margin_g, tuple(zpool)))
                            for hs, rs in seeds]
                results = _map_episodes(payloads, workers)
                ok = [r for r in results if r["ok"]]
                for band in preset_obj.bands:
                    wins = [1.0 if (r["ok"] and r["err"] <= band) else 0.0 for r in results]
                    mean, std = bootstrap(wins, preset_obj.bootstrap_B, boot_seed)
                    cells.append({"arm": f"{arm_key}={'on' if arm_value else 'off'}",
                                  "target_g": drop, "band_g": band,
                                  "metric": "final_within_band_of_drop_target",
                                  "mean_pct": mean, "std_pct": std})
                rate = 100.0 * sum(1 for r in results if r["regrasps"] > 0) / len(results)
                regrasp.append({"arm": f"{arm_key}={'on' if arm_value else 'off'}",
                                "target_g": drop, "rate_pct": rate})
                counts["episodes"] += len(results)
                imbalances.extend(r["imbalance"] for r in results)

    elif name == "TABLE4":
        targets = _targets_from_model(model, preset_obj.targets)
        for arm in preset_obj.flags["arms"]:
            for p, target in zip(preset_obj.targets, targets):
                seeds = _episode_seeds(_cell_seed(preset_obj.seed, arm["name"], p),
                                       preset_obj.episodes)
                payloads = [(_selection_episode,
                             (sim_config, model, hs, rs, target, arm["alpha"],
                              arm["pregrasp"], arm["spines"], arm["postgrasp"]))
                            for hs, rs in seeds]
                results = _map_episodes(payloads, workers)
                finals = [r["final"] if r["status"] == "placed" else math.inf
                          for r in results]
                for band in preset_obj.bands:
                    wins = [1.0 if abs(f - target) <= band else 0.0 for f in finals]
                    mean, std = bootstrap(wins, preset_obj.bootstrap_B, boot_seed)
                    cells.append({"arm": arm["name"], "target_g": target,
                                  "percentile": p, "band_g": band,
                                  "metric": "final_within_band",
                                  "mean_pct": mean, "std_pct": std})
                rate = 100.0 * sum(1 for r in results if r.get("retries", 0) > 0) / len(results)
                regrasp.append({"arm": arm["name"], "target_g": target, "rate_pct": rate})
                _tally(counts, imbalances, results)
    else:
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")

    ledger = {
        "episodes": counts["episodes"],
        "max_abs_imbalance_g": max((abs(i) for i in imbalances), default=0.0),
        "cumulative_imbalance_g": float(math.fsum(imbalances)),
    }
    return BootstrapReport(preset=name, cells=cells, regrasp=regrasp,
                           seeds={"root": preset_obj.seed, "bootstrap": boot_seed},
                           ledger=ledger, counts=counts)


def _run_episode_payload(sim_cfg, model, heap_seed, rng_seed, target, alpha, trace):
    heap = init_heap(sim_cfg, heap_seed)
    rng = np.random.default_rng(rng_seed)
    cfg = EpisodeConfig.default(sim_cfg, trace=trace)
    before = total_mass(heap)
    r = pipeline.run_inference_episode(model, heap, target, alpha, cfg, rng)
    imbalance = before - total_mass(heap) - r.placed_g - r.discarded_g
    return {"status": r.status, "grasped": r.grasped_initial, "final": r.final_mass,
            "retries": r.retries, "imbalance": imbalance, "events": r.events,
            "chosen": r.chosen, "predicted": r.predicted}


def run_episode_batch(sim_config: SimConfig, model: mdn.ModelParams, target: float,
                      alpha: float, episodes: int, seed: int, workers: int = 1,
                      trace: bool = True) -> tuple:
    """Independent seeded episodes at one (target, alpha); returns the
    summary dict and JSON-lines trace records."""
    seeds = _episode_seeds(seed, episodes)
    payloads = [(_run_episode_payload, (sim_config, model, hs, rs, target, alpha, trace))
                for hs, rs in seeds]
    results = _map_episodes(payloads, workers)
    finals = [r["final"] if r["status"] == "placed" else math.inf for r in results]
    summary = {
        "target_g": target,
        "alpha": alpha,
        "episodes": episodes,
        "success": {
            **{f"band_{b:.0f}g": success_rate(finals, target, b) for b in (2.0, 3.0, 4.0)},
            "above_target_minus_2g": sum(
                1 for r in results
                if r["status"] == "placed" and r["final"] > target - 2.0) / len(results),
        },
        "counts": {
            "placed": sum(1 for r in results if r["status"] == "placed"),
            "infeasible": sum(1 for r in results if r["status"] == "infeasible"),
            "failed_to_grasp": sum(1 for r in results if r["status"] == "failed_to_grasp"),
            "regrasped": sum(1 for r in results if r["retries"] > 0),
        },
        "ledger": {
            "max_abs_imbalance_g": max(abs(r["imbalance"]) for r in results),
            "cumulative_imbalance_g": float(math.fsum(r["imbalance"] for r in results)),
        },
        "seeds": {"root": seed},
    }
    traces = []
    for i, r in enumerate(results):
        for event in r["events"]:
            traces.append({"episode": i, **event})
    return summary, traces


def _cell_seed(root: int, *parts) -> int:
    h = 0
    for part in parts:
        h = zlib.crc32(str(part).encode(), h)
    return (root * 2 ** 32 + h) % (2 ** 63)


def _tally(counts, imbalances, results):
    counts["episodes"] += len(results)
    counts["infeasible"] += sum(1 for r in results if r["status"] == "infeasible")
    counts["failed_to_grasp"] += sum(1 for r in results if r["status"] == "failed_to_grasp")
    imbalances.extend(r["imbalance"] for r in results)
