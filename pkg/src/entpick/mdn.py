"""Mixture-density mass regressor.

Maps a median-normalised height patch plus the gripper insertion depth to a
K-component Gaussian mixture over the grasped mass. The patch is adaptively
mean-pooled to a small square, flattened, concatenated with the depth, and
fed through a tanh MLP whose head emits mixture logits, component means
(grams), and pre-softplus spreads. Training minimises the negative log
likelihood of the observed masses with exact reverse-mode gradients and an
adaptive-moment optimizer; flips and random crops exploit the gripper
symmetry on the tiny datasets this is meant for.

Parameters live in one flat vector so checkpoints are a single array and
finite-difference checks stay trivial.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .sim import PATCH_SIDE, PatchObservation

CROP_SIDE = 150
HEIGHT_SCALE = 0.1   # mm -> feature units
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DataRow:
    patch: np.ndarray   # PATCH_SIDE x PATCH_SIDE relative heights, mm
    z_cm: float
    mass_g: float
    split: str          # "train" | "eval"


@dataclass
class Dataset:
    """Collected grasp records with a train/eval split tag per row."""

    rows: list

    def __len__(self):
        return len(self.rows)

    def train_rows(self):
        return [r for r in self.rows if r.split == "train"]

    def eval_rows(self):
        return [r for r in self.rows if r.split == "eval"]

    def masses(self, split=None):
        return [r.mass_g for r in self.rows if split is None or r.split == split]

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self.rows:
                doc = {"patch": np.asarray(r.patch).tolist(), "z_cm": r.z_cm,
                       "mass_g": r.mass_g, "split": r.split}
                f.write(json.dumps(doc, separators=(",", ":")))
                f.write("\n")

    @classmethod
    def from_jsonl(cls, path) -> "Dataset":
        rows = []
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                    patch = np.array(doc["patch"], dtype=float)
                    row = DataRow(patch, float(doc["z_cm"]), float(doc["mass_g"]),
                                  str(doc["split"]))
                    if row.mass_g < 0:
                        raise ValueError("negative mass")
                    if row.split not in ("train", "eval"):
                        raise ValueError(f"unknown split {row.split!r}")
                    if patch.ndim != 2:
                        raise ValueError("patch is not a 2-D array")
                except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                    raise ValueError(f"{path}: corrupt dataset row at line {lineno}: {exc}") from exc
                rows.append(row)
        return cls(rows)


@dataclass
class ModelConfig:
    K: int = 3
    feature_downsample: int = 80   # 160 -> pooled side
    hidden_sizes: tuple = (16,)
    sigma_floor: float = 0.1
    learning_rate: float = 0.05
    epochs: int = 400
    batch_size: int = 16
    seed: int = 0
    reduction: str = "moments"     # or "dominant"
    fixed_sigma: float | None = None
    mu_init_g: tuple = (5.0, 35.0)
    # fixed "capture" unit: a gripper-footprint-shaped kernel at the patch
    # centre, rectified against the insertion plane and summed - the
    # hand-sized stand-in for a learned convolution. None disables it.
    capture_window_mm: tuple | None = (40.0, 24.0)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("need at least one mixture component")
        if self.sigma_floor <= 0:
            raise ValueError("sigma floor must be positive")
        if PATCH_SIDE % self.feature_downsample != 0:
            raise ValueError(f"downsample must divide {PATCH_SIDE}")
        if self.reduction not in ("moments", "dominant"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.capture_window_mm is not None:
            self.capture_window_mm = tuple(self.capture_window_mm)

    @property
    def pooled_side(self) -> int:
        return PATCH_SIDE // self.feature_downsample

    @property
    def n_features(self) -> int:
        extra = 2 if self.capture_window_mm is not None else 1
        return self.pooled_side ** 2 + extra

    def layer_dims(self) -> list:
        return [self.n_features, *self.hidden_sizes, 3 * self.K]

    def n_params(self) -> int:
        dims = self.layer_dims()
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("hidden_sizes", "mu_init_g"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ModelParams:
    theta: np.ndarray
    config: ModelConfig
    training_log: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.config.n_params(),):
            raise ValueError(
                f"theta has {self.theta.size} entries, architecture needs {self.config.n_params()}")


@dataclass
class MixtureParams:
    pi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def validate(self):
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > 1e-6:
            raise ValueError("mixture weights must form a probability simplex")
        if np.any(self.sigma <= 0):
            raise ValueError("component spreads must be positive")


def _unpack(theta: np.ndarray, config: ModelConfig):
    dims = config.layer_dims()
    layers = []
    pos = 0
    for i in range(len(dims) - 1):
        n_in, n_out = dims[i], dims[i + 1]
        w = theta[pos:pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = theta[pos:pos + n_out]
        pos += n_out
        layers.append((w, b))
    return layers


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded initial parameters. Component means start spread over
    mu_init_g so the mixture does not collapse before it can specialise."""
    rng = np.random.default_rng(config.seed)
    dims = config.layer_dims()
    chunks = []
    for i in range(len(dims) - 1):
        n_in, n_out = dims[i], dims[i + 1]
        scale = 1.0 / math.sqrt(n_in)
        if i == len(dims) - 2:
            scale *= 0.1  # keep the head nearly linear at the start
        chunks.append(rng.normal(0.0, scale, size=n_in * n_out))
        b = np.zeros(n_out)
        if i == len(dims) - 2:
            k = config.K
            lo, hi = config.mu_init_g
            b[k:2 * k] = np.linspace(lo, hi, k) if k > 1 else [(lo + hi) / 2.0]
            b[2 * k:] = 2.0  # softplus(2) ~ 2.1 g initial spread
        chunks.append(b)
    return ModelParams(np.concatenate(chunks), config)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def _pool_bounds(side_in: int, side_out: int) -> np.ndarray:
    return (np.arange(side_out) * side_in) // side_out


def pool_patches(patches: np.ndarray, side_out: int) -> np.ndarray:
    """Adaptive mean-pool a (B, S, S) stack to (B, side_out**2)."""
    b, s, s2 = patches.shape
    if s != s2:
        raise ValueError("patches must be square")
    if s < side_out:
        raise ValueError(f"patch side {s} smaller than pooled side {side_out}")
    bounds = _pool_bounds(s, side_out)
    widths = np.diff(np.append(bounds, s)).astype(float)
    pooled = np.add.reduceat(np.add.reduceat(patches, bounds, axis=1), bounds, axis=2)
    pooled /= widths[:, None] * widths[None, :]
    return pooled.reshape(b, side_out * side_out)


CAPTURE_SCALE = 0.1  # cm^3-ish capture volume -> feature units


def capture_volumes(patches: np.ndarray, depths_cm: np.ndarray,
                    window_mm: tuple) -> np.ndarray:
    """Rectified capture volume: sum over a centred window of the relative
    height above the gripper tip plane, max(0, rel + 10 z), in 1e3 mm^3."""
    side = patches.shape[1]
    cw, cl = int(window_mm[0]), int(window_mm[1])
    c = side // 2
    sub = patches[:, c - cw // 2:c + (cw + 1) // 2, c - cl // 2:c + (cl + 1) // 2]
    plane = (np.asarray(depths_cm, dtype=float) * 10.0)[:, None, None]
    return np.maximum(sub + plane, 0.0).sum(axis=(1, 2)) * 1e-3


def features_from_rows(patches: np.ndarray, depths: np.ndarray, config: ModelConfig) -> np.ndarray:
    side = patches.shape[1]
    if side not in (PATCH_SIDE, CROP_SIDE):
        raise ValueError(f"patch side must be {PATCH_SIDE} or {CROP_SIDE}, got {side}")
    depths = np.asarray(depths, dtype=float)
    pooled = pool_patches(patches, config.pooled_side) * HEIGHT_SCALE
    cols = [pooled]
    if config.capture_window_mm is not None:
        cap = capture_volumes(patches, depths, config.capture_window_mm)
        cols.append((cap * CAPTURE_SCALE)[:, None])
    cols.append(depths[:, None])
    return np.hstack(cols)


def _obs_features(obs: PatchObservation, config: ModelConfig) -> np.ndarray:
    if obs.insertion_depth is None:
        raise ValueError("observation has no insertion depth set")
    patch = np.asarray(obs.heights, dtype=float)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ValueError(f"expected a square patch, got shape {patch.shape}")
    return features_from_rows(patch[None], np.array([obs.insertion_depth]), config)


# ---------------------------------------------------------------------------
# forward / density / loss
# ---------------------------------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def _forward_batch(params: ModelParams, feats: np.ndarray, want_cache=False):
    cfg = params.config
    layers = _unpack(params.theta, cfg)
    acts = [feats]
    x = feats
    for w, b in layers[:-1]:
        x = np.tanh(x @ w + b)
        acts.append(x)
    w, b = layers[-1]
    head = x @ w + b
    k = cfg.K
    logits = head[:, :k]
    mu = head[:, k:2 * k]
    sraw = head[:, 2 * k:]
    logits = logits - logits.max(axis=1, keepdims=True)
    log_pi = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    pi = np.exp(log_pi)
    if cfg.fixed_sigma is not None:
        sigma = np.full_like(mu, float(cfg.fixed_sigma))
    else:
        sigma = cfg.sigma_floor + _softplus(sraw)
    if want_cache:
        return pi, mu, sigma, (layers, acts, sraw)
    return pi, mu, sigma


def mdn_forward(params: ModelParams, obs: PatchObservation) -> MixtureParams:
    """Mixture parameters for one observation (deterministic, pure)."""
    pi, mu, sigma = _forward_batch(params, _obs_features(obs, params.config))
    return MixtureParams(pi[0].copy(), mu[0].copy(), sigma[0].copy())


def mdn_pdf(mix: MixtureParams, m) -> float | np.ndarray:
    """Mixture density sum_k pi_k N(m; mu_k, sigma_k); m may be an array."""
    m_arr = np.asarray(m, dtype=float)[..., None]
    comp = np.exp(-0.5 * ((m_arr - mix.mu) / mix.sigma) ** 2) / (mix.sigma * math.sqrt(2 * math.pi))
    out = (mix.pi * comp).sum(axis=-1)
    return float(out) if np.isscalar(m) or np.asarray(m).ndim == 0 else out


def mixture_moments(mix: MixtureParams) -> tuple:
    """Collapse a mixture to (mean, total std): the law-of-total-variance
    reduction used by grasp selection."""
    mu_bar = float(np.dot(mix.pi, mix.mu))
    var = float(np.dot(mix.pi, mix.sigma ** 2 + mix.mu ** 2) - mu_bar ** 2)
    return mu_bar, math.sqrt(max(var, 0.0))


def dominant_component(mix: MixtureParams) -> tuple:
    k = int(np.argmax(mix.pi))
    return float(mix.mu[k]), float(mix.sigma[k])


def _batch_features_masses(params: ModelParams, batch):
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    feats = np.vstack([_obs_features(obs, params.config) for obs, _ in batch])
    masses = np.array([m for _, m in batch], dtype=float)
    return feats, masses


def _log_mix(pi, mu, sigma, masses):
    z = (masses[:, None] - mu) / sigma
    log_comp = -0.5 * z ** 2 - np.log(sigma) - 0.5 * LOG_2PI
    a = np.log(pi + 1e-300) + log_comp
    a_max = a.max(axis=1, keepdims=True)
    return (a_max + np.log(np.exp(a - a_max).sum(axis=1, keepdims=True))).ravel(), a


def nll_loss(params: ModelParams, batch) -> float:
    """Mean negative log likelihood of (observation, mass) pairs, with
    log-sum-exp stabilisation."""
    feats, masses = _batch_features_masses(params, batch)
    return _nll_from_features(params, feats, masses)


def _nll_from_features(params: ModelParams, feats, masses) -> float:
    pi, mu, sigma = _forward_batch(params, feats)
    log_lik, _ = _log_mix(pi, mu, sigma, masses)
    return float(-log_lik.mean())


def nll_grad(params: ModelParams, batch) -> np.ndarray:
    """Exact gradient of nll_loss with respect to the flat parameter vector."""
    feats, masses = _batch_features_masses(params, batch)
    _, grad = _nll_value_grad(params, feats, masses)
    return grad


def _nll_value_grad(params: ModelParams, feats, masses):
    cfg = params.config
    pi, mu, sigma, (layers, acts, sraw) = _forward_batch(params, feats, want_cache=True)
    n = feats.shape[0]
    log_lik, a = _log_mix(pi, mu, sigma, masses)
    loss = float(-log_lik.mean())

    r = np.exp(a - a.max(axis=1, keepdims=True))
    r /= r.sum(axis=1, keepdims=True)          # responsibilities
    diff = masses[:, None] - mu
    d_logits = (pi - r) / n
    d_mu = -r * diff / sigma ** 2 / n
    if cfg.fixed_sigma is not None:
        d_sraw = np.zeros_like(d_mu)
    else:
        d_sigma = -r * (diff ** 2 / sigma ** 3 - 1.0 / sigma) / n
        d_sraw = d_sigma / (1.0 + np.exp(-sraw))  # softplus' = sigmoid
    d_head = np.hstack([d_logits, d_mu, d_sraw])

    grads = [None] * len(layers)
    upstream = d_head
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        x_in = acts[i]
        gw = x_in.T @ upstream
        gb = upstream.sum(axis=0)
        grads[i] = (gw, gb)
        if i > 0:
            upstream = (upstream @ w.T) * (1.0 - acts[i] ** 2)
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return loss, flat


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(obs: PatchObservation, rng: np.random.Generator) -> PatchObservation:
    """Gripper-symmetry augmentation: independent vertical/horizontal flips at
    probability 0.5 each, then a random CROP_SIDE x CROP_SIDE crop."""
    patch = np.asarray(obs.heights)
    if patch.shape != (PATCH_SIDE, PATCH_SIDE):
        raise ValueError(f"augment expects {PATCH_SIDE}x{PATCH_SIDE} patches, got {patch.shape}")
    if rng.random() < 0.5:
        patch = patch[::-1, :]
    if rng.random() < 0.5:
        patch = patch[:, ::-1]
    off = rng.integers(0, PATCH_SIDE - CROP_SIDE + 1, size=2)
    crop = patch[off[0]:off[0] + CROP_SIDE, off[1]:off[1] + CROP_SIDE].copy()
    return PatchObservation(crop, obs.insertion_depth)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _dataset_features(rows, config):
    patches = np.stack([np.asarray(r.patch, dtype=float) for r in rows])
    depths = np.array([r.z_cm for r in rows])
    return features_from_rows(patches, depths, config), np.array([r.mass_g for r in rows])


def _init_head_from_masses(params: ModelParams, masses) -> None:
    """Re-seat the head biases on the training masses: component means at
    evenly spaced mass quantiles, spreads near the mass std. Keeps every
    component inside the data so none starves before specialising."""
    cfg = params.config
    masses = np.asarray(masses, dtype=float)
    k = cfg.K
    qs = (np.arange(k) + 0.5) / k
    mu0 = np.quantile(masses, qs)
    spread = max(float(masses.std()), 2.0 * cfg.sigma_floor)
    sraw0 = math.log(max(math.expm1(spread), 1e-8))  # softplus inverse
    dims = cfg.layer_dims()
    head_b = params.theta[-dims[-1]:]
    head_b[k:2 * k] = mu0
    head_b[2 * k:] = sraw0


def train(dataset: "Dataset", config: ModelConfig) -> ModelParams:
    """Stochastic NLL training on the train split with augmentation.

    Evaluates on the eval split every epoch and returns the parameters from
    the best eval epoch, so the returned eval NLL never exceeds the initial
    one. Fully deterministic for a fixed config seed.
    """
    train_rows = dataset.train_rows()
    eval_rows = dataset.eval_rows()
    if not train_rows or not eval_rows:
        raise ValueError("dataset must contain non-empty train and eval splits")
    rng = np.random.default_rng(config.seed)
    params = init_params(config)
    _init_head_from_masses(params, [r.mass_g for r in train_rows])

    eval_feats, eval_masses = _dataset_features(eval_rows, config)
    patches = [np.asarray(r.patch, dtype=float) for r in train_rows]
    depths = np.array([r.z_cm for r in train_rows])
    masses = np.array([r.mass_g for r in train_rows])

    m = np.zeros_like(params.theta)
    v = np.zeros_like(params.theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0

    best_nll = _nll_from_features(params, eval_feats, eval_masses)
    best_theta = params.theta.copy()
    log = [{"epoch": 0, "train_nll": None, "eval_nll": best_nll}]

    n = len(train_rows)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch_patches = []
            for i in idx:
                obs = augment(PatchObservation(patches[i], depths[i]), rng)
                batch_patches.append(obs.heights)
            feats = features_from_rows(np.stack(batch_patches), depths[idx], config)
            loss, g = _nll_value_grad(params, feats, masses[idx])
            epoch_losses.append(loss)
            t += 1
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            params.theta -= config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        eval_nll = _nll_from_features(params, eval_feats, eval_masses)
        log.append({"epoch": epoch,
                    "train_nll": float(np.mean(epoch_losses)),
                    "eval_nll": eval_nll})
        if eval_nll <= best_nll:
            best_nll = eval_nll
            best_theta = params.theta.copy()

    return ModelParams(best_theta, config, training_log={
        "epochs": log,
        "best_eval_nll": best_nll,
        "train_masses_g": [float(x) for x in masses],
    })


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    doc = {
        "config": params.config.to_dict(),
        "theta": params.theta.tolist(),
        "training_log": params.training_log,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, separators=(",", ":"))
        f.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return ModelParams(np.array(doc["theta"], dtype=float),
                       ModelConfig.from_dict(doc["config"]),
                       doc.get("training_log", {}))
