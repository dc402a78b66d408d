"""Seeded tray simulator for entangled-food picking.

The world is a rectangular tray discretised into 1 mm x 1 mm columns. Each
column carries a height (mm, quantised to 0.1 mm), an entanglement level
lambda in [0, 1], and a bulk density rho (g/cm^3). A column of height h mm
therefore holds ``rho * h * 1e-3`` grams.

Grasping inserts the gripper to a depth below the local median surface and
sweeps the material above the tip plane inside the footprint (minus a small
random grip slip), plus a random number of entangled clumps torn out of the
surrounding material: the clump count is Poisson in ``kappa * mean(lambda)``
over the footprint and clump masses are log-normal. The torn-open region
then exposes fresh, settled, fully entangled material, and the loose
surface slumps toward its local level. Pre-grasping scales lambda down and
fluffs the heap (taller, proportionally less dense, mass preserved).
Post-grasping discards mass from the gripper in small gamma-distributed
quanta when the spines are engaged and in whole uncontrollable chunks when
they are not; entangled clumps hanging outside the gripper area can let go
whole in either mode. A scale model quantises, delays, and transiently
overshoots the discarded-mass readings.

All grasp/pre-grasp/post-grasp masses are computed from the exact height
deltas they apply, so mass is conserved to float precision across any
operation sequence. Operations mutate the heap in place; all randomness
flows through explicitly passed ``numpy.random.Generator`` instances.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage
from scipy.special import ndtr

PATCH_SIDE = 160           # observation window, px (1 px = 1 mm)
PATCH_MARGIN = PATCH_SIDE // 2
HEIGHT_QUANTUM_MM = 0.1
CELL_MASS_PER_MM = 1e-3    # grams per mm of height in one 1 mm^2 column, per unit rho

# insertion-depth pools (cm): deeper pool for cabbage-like material,
# shallower one for stiff material the gripper cannot push into.
Z_POOL_DEEP = (2.0, 3.0, 4.0)
Z_POOL_SHALLOW = (1.0, 1.5, 2.0)
Z_INFER_DEEP = (2.0, 2.25, 2.5, 2.75, 3.0, 3.25, 3.5, 3.75, 4.0)
Z_INFER_SHALLOW = (1.0, 1.25, 1.5, 1.75, 2.0)


def quantize_height(h):
    """Snap heights (mm) to the 0.1 mm grid."""
    return np.round(np.asarray(h, dtype=float) * 10.0) / 10.0


def quantize_mass(m: float, resolution_g: float = 0.1) -> float:
    """Round a mass to the scale resolution (round-half-even)."""
    return float(np.round(m / resolution_g) * resolution_g)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class NoiseParams:
    amp_mm: float = 1.8
    corr_mm: float = 16.0
    wear_mm: float = 2.5          # depth scale of smooth baked-in wear
    craters: tuple = (10, 40)     # count range of baked-in grasp craters
    crater_depth_mm: tuple = (3.0, 7.0)

    def __post_init__(self):
        self.craters = tuple(self.craters)
        self.crater_depth_mm = tuple(self.crater_depth_mm)


@dataclass
class ClumpParams:
    """Log-normal entangled-clump model: ln(mass) ~ N(mu, sigma^2)."""
    mu: float = 0.693147  # ln 2: median clump just under 2 g
    sigma: float = 0.45
    r_mm: float = 14.0     # radius of the region a clump is torn from

    def mean_mass_g(self) -> float:
        return math.exp(self.mu + 0.5 * self.sigma ** 2)


@dataclass
class PregraspParams:
    beta: float = 0.35     # lambda multiplier inside the loosened disk
    f: float = 1.03        # height fluff factor (density scaled by 1/f)
    r_mm: float = 40.0     # loosened-disk radius


@dataclass
class PostgraspParams:
    gamma_shape: float = 2.0
    gamma_scale: float = 0.065  # per unit cycle speed; no-spines mode uses 3x
    p_clump: float = 0.22       # per-step whole-chunk drop probability, no spines
    p_tangle: float = 0.12      # per-step whole-entangled-clump drop, any mode
    v_min: float = 0.5
    v_max: float = 2.0
    piece_g: float = 2.5        # granularity the held base mass breaks into


@dataclass
class ScaleParams:
    resolution_g: float = 0.1
    rate_hz: float = 10.0
    lag: int = 2                # reading delay, in scale samples
    transient_gain: float = 0.6  # impulse overshoot per gram landed last sample


@dataclass
class SimConfig:
    """Full simulator configuration; serialisable as a JSON document."""

    tray_mm: tuple = (424, 308, 160)
    fill_mm: float = 140.0
    noise: NoiseParams = field(default_factory=NoiseParams)
    lambda_range: tuple = (0.45, 0.95)
    rho_range: tuple = (1.35, 1.6)
    footprint_mm: tuple = (40.0, 22.5)
    eta_fill: float = 0.85
    kappa: float = 1.7
    clump_lognormal: ClumpParams = field(default_factory=ClumpParams)
    pregrasp: PregraspParams = field(default_factory=PregraspParams)
    postgrasp: PostgraspParams = field(default_factory=PostgraspParams)
    scale: ScaleParams = field(default_factory=ScaleParams)
    clearance_mm: float = 5.0
    slip_g: float = 1.3           # grip slip scale: |N(0, slip_g)| grams escape
    slump_strength: float = 0.9   # post-withdrawal resettling toward local level
    slump_reach_mm: float = 64.0

    def __post_init__(self):
        w, d, h = self.tray_mm
        if w <= 0 or d <= 0 or h <= 0:
            raise ValueError(f"tray dimensions must be positive, got {self.tray_mm}")
        if self.rho_range[0] <= 0:
            raise ValueError(f"density must be positive, got rho_range={self.rho_range}")
        if self.fill_mm < 0 or self.fill_mm > h:
            raise ValueError("fill_mm must lie within the tray depth")
        if not (0.0 <= self.lambda_range[0] <= self.lambda_range[1] <= 1.0):
            raise ValueError(f"lambda_range must be within [0, 1], got {self.lambda_range}")
        if self.footprint_mm[0] <= 0 or self.footprint_mm[1] <= 0:
            raise ValueError("footprint must be positive")
        if not 0.0 < self.pregrasp.beta < 1.0:
            raise ValueError("pregrasp beta must be in (0, 1)")
        if self.pregrasp.f <= 1.0:
            raise ValueError("pregrasp fluff factor must exceed 1")
        if not 0 < self.postgrasp.v_min <= self.postgrasp.v_max:
            raise ValueError("need 0 < v_min <= v_max")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        for key, sub in (("noise", NoiseParams), ("clump_lognormal", ClumpParams),
                         ("pregrasp", PregraspParams), ("postgrasp", PostgraspParams),
                         ("scale", ScaleParams)):
            if key in d and isinstance(d[key], dict):
                d[key] = sub(**d[key])
        for key in ("tray_mm", "lambda_range", "rho_range", "footprint_mm"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "SimConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class HeapState:
    """The simulated tray. Indexed ``heights[x, y]`` with x along the long side.

    ``lambda_fresh`` and ``rho_fresh`` remember the undisturbed entanglement
    and density fields: grasping tears out the loosened surface and exposes
    fresh, settled material, so the region a grasp disturbs reverts to them.
    """

    heights: np.ndarray       # mm, shape (W, D)
    entanglement: np.ndarray  # lambda in [0, 1]
    bulk_density: np.ndarray  # g/cm^3, > 0
    tray_mm: tuple
    rng_seed: int
    lambda_fresh: np.ndarray | None = None
    rho_fresh: np.ndarray | None = None

    def __post_init__(self):
        if self.lambda_fresh is None:
            self.lambda_fresh = self.entanglement.copy()
        if self.rho_fresh is None:
            self.rho_fresh = self.bulk_density.copy()

    @property
    def dims(self) -> tuple:
        return self.tray_mm

    def validate(self):
        w, d, h = self.tray_mm
        if self.heights.shape != (w, d):
            raise ValueError("height grid does not match tray dims")
        if self.heights.min() < -1e-9 or self.heights.max() > h + 1e-6:
            raise ValueError("heights out of tray range")
        if self.entanglement.min() < 0 or self.entanglement.max() > 1:
            raise ValueError("entanglement out of [0, 1]")
        if self.bulk_density.min() <= 0:
            raise ValueError("density must be positive")

    def copy(self) -> "HeapState":
        return HeapState(self.heights.copy(), self.entanglement.copy(),
                         self.bulk_density.copy(), self.tray_mm, self.rng_seed,
                         self.lambda_fresh.copy(), self.rho_fresh.copy())

    def state_digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.heights).tobytes())
        h.update(np.ascontiguousarray(self.entanglement).tobytes())
        h.update(np.ascontiguousarray(self.bulk_density).tobytes())
        h.update(repr(self.tray_mm).encode())
        return h.hexdigest()


@dataclass
class PatchObservation:
    """Median-normalised height patch plus the gripper insertion depth (cm)."""

    heights: np.ndarray
    insertion_depth: float | None = None

    def validate(self):
        if self.insertion_depth is not None and self.insertion_depth <= 0:
            raise ValueError("insertion depth must be positive")


@dataclass
class GraspOutcome:
    grasped_mass: float
    base_mass: float
    entangled_extra: float
    clump_masses: list


@dataclass
class GripperLoad:
    """What is currently held: a list of discrete chunks. The first
    ``n_base_chunks`` entries are pieces of the mass the fingers hold
    directly; the rest are entangled clumps hanging outside the gripper
    area, which may let go whole at any time."""

    clump_masses: list
    spines_enabled: bool = True
    n_base_chunks: int | None = None

    def __post_init__(self):
        if self.n_base_chunks is None:
            self.n_base_chunks = len(self.clump_masses)

    @property
    def remaining_mass(self) -> float:
        return math.fsum(self.clump_masses)


@dataclass
class ScaleState:
    """Discarded-mass scale: quantised, rate-limited, lagged, with impulse overshoot."""

    params: ScaleParams = field(default_factory=ScaleParams)
    readings: list = field(default_factory=list)    # (t_s, value_g) as emitted
    _event_times: list = field(default_factory=list)
    _event_cum: list = field(default_factory=list)  # cumulative mass after each event

    @property
    def true_discarded(self) -> float:
        return self._event_cum[-1] if self._event_cum else 0.0

    def add_mass(self, mass_g: float, t_s: float):
        if mass_g < 0:
            raise ValueError("cannot discard negative mass")
        self._event_times.append(t_s)
        self._event_cum.append(self.true_discarded + mass_g)

    def cumulative_at(self, t_s: float) -> float:
        i = bisect.bisect_right(self._event_times, t_s + 1e-12)
        return self._event_cum[i - 1] if i else 0.0


def read_scale(state: ScaleState, t_s: float) -> float:
    """Scale reading at time t: lagged cumulative discard plus a one-sample
    impulse overshoot, quantised to the scale resolution."""
    if t_s < 0:
        raise ValueError("time must be non-negative")
    p = state.params
    n = math.floor(t_s * p.rate_hz + 1e-9)
    t_sample = (n - p.lag) / p.rate_hz
    base = state.cumulative_at(t_sample)
    landed = base - state.cumulative_at(t_sample - 1.0 / p.rate_hz)
    value = max(0.0, quantize_mass(base + p.transient_gain * landed, p.resolution_g))
    state.readings.append((t_s, value))
    return value


# ---------------------------------------------------------------------------
# heap construction
# ---------------------------------------------------------------------------

def _smooth_fields(shape, corr_mms, rng):
    """Standardised smooth random fields on a mm grid: coarse noise, blurred
    at the given correlation lengths, normalised on the coarse grid, then
    bilinearly upsampled (at 2 mm and pixel-doubled, which is far below the
    correlation lengths in use). One field per entry of corr_mms, all drawn
    from the one generator stream."""
    step = 8
    cw = shape[0] // step + 2
    ch = shape[1] // step + 2
    n = len(corr_mms)
    coarse = rng.standard_normal((n, cw, ch)).astype(np.float32)
    for i, corr in enumerate(corr_mms):
        coarse[i] = ndimage.gaussian_filter(coarse[i], sigma=max(corr / step, 0.5),
                                            mode="reflect")
    coarse -= coarse.mean(axis=(1, 2), keepdims=True)
    sd = coarse.std(axis=(1, 2), keepdims=True)
    coarse /= np.where(sd > 0, sd, 1.0)

    half = ((shape[0] + 1) // 2, (shape[1] + 1) // 2)
    xs = (np.arange(half[0], dtype=np.float32) * 2.0 / step)
    ys = (np.arange(half[1], dtype=np.float32) * 2.0 / step)
    x0 = xs.astype(int)
    y0 = ys.astype(int)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[None, None, :]
    flat = coarse.reshape(n, -1)
    i00 = (x0[:, None] * ch + y0[None, :]).ravel()
    a = flat[:, i00].reshape(n, *half)
    b = flat[:, i00 + ch].reshape(n, *half)
    c = flat[:, i00 + 1].reshape(n, *half)
    d = flat[:, i00 + ch + 1].reshape(n, *half)
    out = (a * ((1 - fx) * (1 - fy)) + b * (fx * (1 - fy))
           + c * ((1 - fx) * fy) + d * (fx * fy))
    full = out.repeat(2, axis=1).repeat(2, axis=2)
    return full[:, :shape[0], :shape[1]]


def _smooth_field(shape, corr_mm, rng):
    return _smooth_fields(shape, [corr_mm], rng)[0]


def init_heap(config: SimConfig, seed: int) -> HeapState:
    """Build a filled tray from seeded smooth noise. Identical (config, seed)
    pairs produce bitwise-identical heaps."""
    w, d, depth = config.tray_mm
    rng = np.random.default_rng(seed)
    shape = (int(w), int(d))
    corr = config.noise.corr_mm
    f_height, f_wear, f_lam, f_rho = _smooth_fields(shape, [corr, 0.75 * corr, corr, corr], rng)
    hfield = config.fill_mm + config.noise.amp_mm * f_height
    if config.noise.amp_mm > 0:
        # a tray that has already been picked from: smooth wear plus
        # footprint-shaped craters, so model training and later picking see
        # the same kind of surface throughout a session
        hfield -= config.noise.wear_mm * np.maximum(f_wear - 0.7, 0.0)
        fw, fl = config.footprint_mm
        hw = int(fw / 2) + 1
        hl = int(fl / 2) + 1
        lo_n, hi_n = config.noise.craters
        d_lo, d_hi = config.noise.crater_depth_mm
        for _ in range(int(rng.integers(lo_n, hi_n + 1))):
            cx = int(rng.integers(hw, shape[0] - hw))
            cy = int(rng.integers(hl, shape[1] - hl))
            dent = float(rng.uniform(d_lo, d_hi))
            win = hfield[cx - hw:cx + hw, cy - hl:cy + hl]
            np.minimum(win, win.mean() - dent, out=win)
    heights = quantize_height(np.clip(hfield, 0.0, depth))

    lo, hi = config.lambda_range
    lam = lo + (hi - lo) * ndtr(f_lam)
    rlo, rhi = config.rho_range
    rho = rlo + (rhi - rlo) * ndtr(f_rho)

    heap = HeapState(heights, lam, rho, (int(w), int(d), int(depth)), int(seed))
    heap.validate()
    return heap


def total_mass(heap: HeapState) -> float:
    """Sum of rho * area * height over all columns, in grams."""
    return float(np.sum(heap.bulk_density * heap.heights) * CELL_MASS_PER_MM)


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------

def median_normalize(heights):
    """Subtract the median so the patch is relative to its own surface."""
    arr = np.asarray(heights, dtype=float)
    return arr - np.median(arr)


def batch_unit_medians(units: np.ndarray) -> np.ndarray:
    """Medians of integer height-unit rows (exact order statistics via
    partial sort). ``units`` is (N, P) of non-negative int height quanta;
    returns medians in the same units (possibly half-integral)."""
    p = units.shape[1]
    k_lo = (p + 1) // 2 - 1
    k_hi = p // 2
    part = np.partition(units, (k_lo, k_hi), axis=1)
    return (part[:, k_lo].astype(np.float64) + part[:, k_hi]) / 2.0


def patch_window(heap: HeapState, x: int, y: int):
    """The PATCH_SIDE window centred at (x, y), clipped to the tray."""
    w, d, _ = heap.tray_mm
    x0 = max(0, x - PATCH_MARGIN)
    x1 = min(w, x + PATCH_MARGIN)
    y0 = max(0, y - PATCH_MARGIN)
    y1 = min(d, y + PATCH_MARGIN)
    return heap.heights[x0:x1, y0:y1]


def height_units(heights) -> np.ndarray:
    """Heights (mm) as integer 0.1 mm quanta."""
    return (np.asarray(heights) * 10.0 + 0.5).astype(np.int64)


def local_median_height(heap: HeapState, x: int, y: int) -> float:
    """Median surface height (mm) of the observation window around (x, y)."""
    win = patch_window(heap, x, y)
    return float(batch_unit_medians(height_units(win).reshape(1, -1))[0]) / 10.0


def observe_patch(heap: HeapState, x: int, y: int) -> PatchObservation:
    """Median-normalised PATCH_SIDE x PATCH_SIDE height patch centred at (x, y).

    The insertion depth is left unset; callers fill it in. (x, y) must be at
    least PATCH_MARGIN px from every tray edge so the full patch fits.
    """
    w, d, _ = heap.tray_mm
    if not (PATCH_MARGIN <= x <= w - PATCH_MARGIN and PATCH_MARGIN <= y <= d - PATCH_MARGIN):
        raise ValueError(f"patch centre ({x}, {y}) violates the {PATCH_MARGIN} px margin")
    win = heap.heights[x - PATCH_MARGIN:x + PATCH_MARGIN, y - PATCH_MARGIN:y + PATCH_MARGIN]
    med = float(batch_unit_medians(height_units(win).reshape(1, -1))[0]) / 10.0
    return PatchObservation(win - med, None)


# ---------------------------------------------------------------------------
# grasping
# ---------------------------------------------------------------------------

def _extent(center: float, length_mm: float, n_cells: int):
    """Index range and fractional coverage of a centred 1-D extent.

    Returns (i0, i1, weights) where weights[i] is the covered fraction of
    cell i0 + i; raises when the extent leaves the tray.
    """
    lo = center - length_mm / 2.0
    hi = center + length_mm / 2.0
    if lo < 0 or hi > n_cells:
        raise ValueError("footprint outside tray")
    i0 = int(math.floor(lo))
    i1 = int(math.ceil(hi))
    idx = np.arange(i0, i1, dtype=float)
    w = np.clip(np.minimum(idx + 1.0, hi) - np.maximum(idx, lo), 0.0, 1.0)
    return i0, i1, w


def _check_floor_clearance(heap: HeapState, x, y, z_cm, clearance_mm):
    med = local_median_height(heap, x, y)
    if med - z_cm * 10.0 < clearance_mm:
        raise ValueError(
            f"insertion depth {z_cm} cm would strike the tray floor "
            f"(local median {med:.1f} mm, clearance {clearance_mm} mm)")
    return med


def _remove_into(heap, sl_x, sl_y, removal) -> float:
    """Subtract a quantised removal height field; returns the exact mass taken."""
    sub_h = heap.heights[sl_x, sl_y]
    removal = np.minimum(removal, sub_h)
    mass = float(np.sum(heap.bulk_density[sl_x, sl_y] * removal) * CELL_MASS_PER_MM)
    heap.heights[sl_x, sl_y] = sub_h - removal
    return mass


def _settle(heap: HeapState, sl_x, sl_y, mask) -> None:
    """Exposed material reverts to its fresh (settled) density; heights
    shrink to keep each column's mass exactly unchanged."""
    h = heap.heights[sl_x, sl_y]
    rho = heap.bulk_density[sl_x, sl_y]
    fresh = heap.rho_fresh[sl_x, sl_y]
    settled = quantize_height(h * rho / fresh)
    apply = mask & (settled > 0) & (h > 0)
    new_rho = np.where(apply, rho * h / np.where(settled > 0, settled, 1.0), rho)
    heap.heights[sl_x, sl_y] = np.where(apply, settled, h)
    heap.bulk_density[sl_x, sl_y] = new_rho


def _slump(heap: HeapState, sl_x, sl_y, strength, reach_mm) -> None:
    """Loose material slumps toward the local level after the gripper
    withdraws: the column-mass field relaxes toward its box average inside
    the disturbed window. Mass-exact up to one global rescale."""
    depth = float(heap.tray_mm[2])
    rho = heap.bulk_density[sl_x, sl_y]
    m = rho * heap.heights[sl_x, sl_y]
    total = m.sum()
    if total <= 0:
        return
    for _ in range(3):
        smooth = ndimage.uniform_filter(m, size=int(reach_mm), mode="nearest")
        m = (1.0 - strength) * m + strength * smooth
    np.minimum(m, rho * depth, out=m)
    m *= total / m.sum()
    heap.heights[sl_x, sl_y] = m / rho


def execute_grasp(heap: HeapState, x: int, y: int, z_cm: float,
                  rng: np.random.Generator, config: SimConfig) -> GraspOutcome:
    """Close the gripper at (x, y) with insertion depth z (cm below the local
    median surface). The gripper tip sits at (median - 10 z) mm and the
    fingers sweep the material above that plane, so each footprint cell
    yields its height above the tip plane (never more than the cell holds).
    A Poisson number of entangled clumps is torn from the surrounding
    material on top. The heap is mutated in place and the outcome masses
    equal the exact heap loss.
    """
    if z_cm <= 0:
        raise ValueError("insertion depth must be positive")
    w, d, _ = heap.tray_mm
    fw, fl = config.footprint_mm
    ix0, ix1, wx = _extent(x, fw, w)
    iy0, iy1, wy = _extent(y, fl, d)
    med = _check_floor_clearance(heap, x, y, z_cm, config.clearance_mm)

    sl_x = slice(ix0, ix1)
    sl_y = slice(iy0, iy1)
    weights = wx[:, None] * wy[None, :]
    sub_h = heap.heights[sl_x, sl_y]
    tip_plane = med - z_cm * 10.0
    depth = np.minimum(np.maximum(sub_h - tip_plane, 0.0), sub_h)
    # grip slip: a few shreds escape the closing fingers
    swept = config.eta_fill * weights * depth
    swept_g = float(np.sum(heap.bulk_density[sl_x, sl_y] * swept) * CELL_MASS_PER_MM)
    slip = abs(config.slip_g * float(rng.standard_normal()))
    grip = max(0.0, 1.0 - slip / swept_g) if swept_g > 0 else 0.0
    removal = np.minimum(quantize_height(grip * swept), sub_h)
    base_mass = float(np.sum(heap.bulk_density[sl_x, sl_y] * removal) * CELL_MASS_PER_MM)
    heap.heights[sl_x, sl_y] = sub_h - removal

    wsum = weights.sum()
    lam_bar = float(np.sum(heap.entanglement[sl_x, sl_y] * weights) / wsum)
    n_clumps = int(rng.poisson(config.kappa * lam_bar))

    cp = config.clump_lognormal
    clump_masses = []
    for _ in range(n_clumps):
        target = float(rng.lognormal(cp.mu, cp.sigma))
        reach = max(fw, fl) / 2.0 + cp.r_mm
        cx = x + float(rng.uniform(-reach, reach))
        cy = y + float(rng.uniform(-reach, reach))
        cx = min(max(cx, 0.0), w - 1.0)
        cy = min(max(cy, 0.0), d - 1.0)
        jx0 = max(0, int(cx - cp.r_mm))
        jx1 = min(w, int(cx + cp.r_mm) + 1)
        jy0 = max(0, int(cy - cp.r_mm))
        jy1 = min(d, int(cy + cp.r_mm) + 1)
        gx = np.arange(jx0, jx1, dtype=float)[:, None]
        gy = np.arange(jy0, jy1, dtype=float)[None, :]
        disk = (gx - cx) ** 2 + (gy - cy) ** 2 <= cp.r_mm ** 2
        jsl_x = slice(jx0, jx1)
        jsl_y = slice(jy0, jy1)
        region_h = heap.heights[jsl_x, jsl_y]
        avail = float(np.sum(heap.bulk_density[jsl_x, jsl_y] * region_h * disk) * CELL_MASS_PER_MM)
        if avail <= 0:
            clump_masses.append(0.0)
            continue
        scale = min(1.0, target / avail)
        removal = np.minimum(quantize_height(scale * region_h * disk), region_h)
        clump_masses.append(_remove_into(heap, jsl_x, jsl_y, removal))

    # the grasp rips out the loosened surface; what it exposes is fresh,
    # fully entangled, settled material again
    r_reset = max(config.pregrasp.r_mm, math.hypot(fw, fl) / 2.0 + cp.r_mm) + 2.0
    kx0 = max(0, int(x - r_reset))
    kx1 = min(w, int(x + r_reset) + 1)
    ky0 = max(0, int(y - r_reset))
    ky1 = min(d, int(y + r_reset) + 1)
    gx = np.arange(kx0, kx1, dtype=float)[:, None]
    gy = np.arange(ky0, ky1, dtype=float)[None, :]
    reset = (gx - x) ** 2 + (gy - y) ** 2 <= r_reset ** 2
    ksl_x = slice(kx0, kx1)
    ksl_y = slice(ky0, ky1)
    heap.entanglement[ksl_x, ksl_y] = np.where(
        reset, heap.lambda_fresh[ksl_x, ksl_y], heap.entanglement[ksl_x, ksl_y])
    _settle(heap, ksl_x, ksl_y, reset)
    if config.slump_strength > 0:
        r_slump = r_reset + config.slump_reach_mm
        mx0 = max(0, int(x - r_slump))
        mx1 = min(w, int(x + r_slump) + 1)
        my0 = max(0, int(y - r_slump))
        my1 = min(d, int(y + r_slump) + 1)
        _slump(heap, slice(mx0, mx1), slice(my0, my1),
               config.slump_strength, config.slump_reach_mm)

    extra = math.fsum(clump_masses)
    return GraspOutcome(grasped_mass=base_mass + extra, base_mass=base_mass,
                        entangled_extra=extra, clump_masses=clump_masses)


def apply_pregrasp(heap: HeapState, x: int, y: int, z_cm: float,
                   rng: np.random.Generator, config: SimConfig) -> None:
    """Lift-and-release at (x, y): scales entanglement down by beta and fluffs
    heights by f (density compensated, so local mass is unchanged) inside the
    loosening radius. Reach and floor-clearance constraints match
    execute_grasp. The motion itself is deterministic; rng is accepted for
    signature uniformity with the other heap operators.
    """
    if z_cm <= 0:
        raise ValueError("insertion depth must be positive")
    w, d, depth_mm = heap.tray_mm
    fw, fl = config.footprint_mm
    _extent(x, fw, w)
    _extent(y, fl, d)
    _check_floor_clearance(heap, x, y, z_cm, config.clearance_mm)

    pg = config.pregrasp
    r = pg.r_mm
    jx0 = max(0, int(x - r))
    jx1 = min(w, int(x + r) + 1)
    jy0 = max(0, int(y - r))
    jy1 = min(d, int(y + r) + 1)
    gx = np.arange(jx0, jx1, dtype=float)[:, None]
    gy = np.arange(jy0, jy1, dtype=float)[None, :]
    disk = (gx - x) ** 2 + (gy - y) ** 2 <= r ** 2

    sl_x = slice(jx0, jx1)
    sl_y = slice(jy0, jy1)
    heap.entanglement[sl_x, sl_y] = np.where(
        disk, heap.entanglement[sl_x, sl_y] * pg.beta, heap.entanglement[sl_x, sl_y])

    h = heap.heights[sl_x, sl_y]
    rho = heap.bulk_density[sl_x, sl_y]
    # loosening saturates: material already fluffed below the density floor
    # does not expand further (keeps density bounded over repeated passes)
    rho_floor = config.rho_range[0] / pg.f
    grow = disk & (h > 0) & (rho >= rho_floor - 1e-12)
    fluffed = np.minimum(quantize_height(pg.f * h), float(depth_mm))
    fluffed = np.where(grow, np.maximum(fluffed, h), h)
    ratio = np.where(grow & (fluffed > 0), h / np.where(fluffed > 0, fluffed, 1.0), 1.0)
    heap.bulk_density[sl_x, sl_y] = rho * ratio
    heap.heights[sl_x, sl_y] = fluffed


def release_mass(heap: HeapState, x: int, y: int, mass_g: float, config: SimConfig) -> None:
    """Return a released grasp to the heap, spread uniformly (by mass) over a
    disk around the grasp point. Exact: the heap gains precisely mass_g."""
    if mass_g < 0:
        raise ValueError("cannot release negative mass")
    if mass_g == 0:
        return
    w, d, depth_mm = heap.tray_mm
    fw, fl = config.footprint_mm
    r = math.hypot(fw, fl) / 2.0 + 15.0
    jx0 = max(0, int(x - r))
    jx1 = min(w, int(x + r) + 1)
    jy0 = max(0, int(y - r))
    jy1 = min(d, int(y + r) + 1)
    gx = np.arange(jx0, jx1, dtype=float)[:, None]
    gy = np.arange(jy0, jy1, dtype=float)[None, :]
    disk = ((gx - x) ** 2 + (gy - y) ** 2 <= r ** 2)

    sl_x = slice(jx0, jx1)
    sl_y = slice(jy0, jy1)
    rho = heap.bulk_density[sl_x, sl_y]
    h = heap.heights[sl_x, sl_y]
    todo = mass_g
    room = np.where(disk, depth_mm - h, 0.0)
    for _ in range(8):
        open_cells = room > 1e-12
        n_open = int(open_cells.sum())
        if n_open == 0 or todo <= 0:
            break
        dm = todo / n_open
        dh = np.where(open_cells, dm / (rho * CELL_MASS_PER_MM), 0.0)
        over = np.maximum(dh - room, 0.0)
        dh -= over
        h = h + dh
        room -= dh
        todo = float(np.sum(rho * over * CELL_MASS_PER_MM))
        if todo < 1e-12:
            todo = 0.0
            break
    if todo > 0:
        # tray section is full to the brim; pile the remainder on anyway
        inside = disk.sum()
        h = h + np.where(disk, (todo / inside) / (rho * CELL_MASS_PER_MM), 0.0)
    heap.heights[sl_x, sl_y] = h


# ---------------------------------------------------------------------------
# post-grasping
# ---------------------------------------------------------------------------

def make_gripper_load(outcome: GraspOutcome, params: PostgraspParams,
                      spines_enabled: bool = True) -> GripperLoad:
    """Split a grasp into the chunks the gripper holds: the base mass breaks
    into piece_g-sized pieces, entangled clumps stay whole."""
    chunks = []
    if outcome.base_mass > 0:
        n = max(1, math.ceil(outcome.base_mass / params.piece_g))
        piece = outcome.base_mass / n
        chunks = [piece] * (n - 1)
        chunks.append(outcome.base_mass - piece * (n - 1))
    n_base = len(chunks)
    chunks.extend(m for m in outcome.clump_masses if m > 0)
    return GripperLoad(clump_masses=chunks, spines_enabled=spines_enabled,
                       n_base_chunks=n_base)


def _pop_chunk(load: GripperLoad, idx: int) -> float:
    dropped = load.clump_masses.pop(idx)
    if idx < load.n_base_chunks:
        load.n_base_chunks -= 1
    return dropped


def _shave(load: GripperLoad, amount: float) -> float:
    """Take `amount` grams off the front of the chunk list."""
    dropped = 0.0
    while load.clump_masses and dropped < amount - 1e-12:
        head = load.clump_masses[0]
        take = min(head, amount - dropped)
        if take >= head - 1e-12:
            _pop_chunk(load, 0)
            dropped += head
        else:
            load.clump_masses[0] = head - take
            dropped += take
    return dropped


def postgrasp_step(load: GripperLoad, v: float, params: PostgraspParams,
                   rng: np.random.Generator) -> float:
    """One up/down cycle of the movable gripper at cycle speed v.

    Entangled clumps hang outside the gripper area and can let go whole on
    any cycle (probability p_tangle), spines or not. Otherwise, with spines
    the drop is a gamma quantum (shape gamma_shape, scale gamma_scale * v)
    capped at the remaining mass; without spines, with probability p_clump
    an entire chunk lets go (all of it when only one chunk remains), else a
    gamma draw at 3x scale, and a draw reaching the remaining mass drops
    everything. Mutates the load; returns grams dropped.
    """
    if not params.v_min <= v <= params.v_max:
        raise ValueError(f"cycle speed {v} outside [{params.v_min}, {params.v_max}]")
    remaining = load.remaining_mass
    if remaining <= 0:
        return 0.0
    n_tangled = len(load.clump_masses) - load.n_base_chunks
    if n_tangled > 0 and rng.random() < params.p_tangle:
        idx = load.n_base_chunks + int(rng.integers(n_tangled))
        return _pop_chunk(load, idx)
    if load.spines_enabled:
        amount = min(float(rng.gamma(params.gamma_shape, params.gamma_scale * v)), remaining)
        return _shave(load, amount)
    if rng.random() < params.p_clump:
        if len(load.clump_masses) == 1:
            return _pop_chunk(load, 0)
        return _pop_chunk(load, int(rng.integers(len(load.clump_masses))))
    amount = float(rng.gamma(params.gamma_shape, 3.0 * params.gamma_scale * v))
    if amount >= remaining:
        dropped = remaining
        load.clump_masses.clear()
        load.n_base_chunks = 0
        return dropped
    return _shave(load, amount)


def spines_drop_q99(params: PostgraspParams, v: float | None = None) -> float:
    """99th percentile of the spines-mode per-step drop (documented q_max)."""
    from scipy.stats import gamma as gamma_dist
    if v is None:
        v = params.v_max
    return float(gamma_dist.ppf(0.99, params.gamma_shape, scale=params.gamma_scale * v))
