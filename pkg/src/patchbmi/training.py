"""MSE + Adam training of the per-region models with early stopping."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Sample
from .imaging import AugmentConfig, apply_transform, draw_transform
from .landmarks import (DEFAULT_RULES, REGIONS, DegenerateROIError, LandmarkSet, RoiRule,
                        extract_all_patches, extract_patch, roi_from_rule, validate_rules)
from .model import ModelConfig, PatchModelParams, forward, init_weights
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    augment: bool = True
    flip_prob: float = 0.5
    max_rot_deg: float = 10.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @property
    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.flip_prob, self.max_rot_deg)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Optional[Sequence[Optional[np.ndarray]]],
              state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place. ``grads=None`` reads ``p.grad``."""
    if grads is None:
        grads = [p.grad for p in params]
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch in adam_step: param {p.shape}, grad {g.shape}, "
                             f"moment {state.m[i].shape}")
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        step = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        p.data -= step.astype(p.dtype)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape or pred.size < 1:
        raise ValueError(f"mse_loss needs equal non-empty shapes, got {pred.shape} / {target.shape}")
    return T.mean(T.square(T.sub(pred, target)))


# --------------------------------------------------------------- epochs


@dataclass(frozen=True)
class EpochStats:
    mean_loss: float
    n_samples: int
    n_batches: int


def predict_batched(params: PatchModelParams, X: np.ndarray, batch_size: int = 256,
                    config: ModelConfig = ModelConfig()) -> np.ndarray:
    outs = [forward(params, Tensor(X[i:i + batch_size]), training=False, config=config).data
            for i in range(0, len(X), batch_size)]
    return np.concatenate(outs) if outs else np.zeros(0, dtype=np.float32)


def evaluate_mse(params: PatchModelParams, X: np.ndarray, y: np.ndarray,
                 config: ModelConfig = ModelConfig()) -> float:
    pred = predict_batched(params, X, config=config).astype(np.float64)
    return float(np.mean((pred - np.asarray(y, dtype=np.float64)) ** 2))


def train_epoch(params: PatchModelParams, data: Tuple[np.ndarray, np.ndarray],
                cfg: TrainConfig, rng: np.random.Generator, state: AdamState,
                config: ModelConfig = ModelConfig()) -> EpochStats:
    """Shuffle, then forward/backward/Adam over mini-batches (last partial batch kept)."""
    X, y = data
    n = len(X)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    order = rng.permutation(n)
    params_list = params.parameters()
    total, batches = 0.0, 0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        xb = Tensor(X[idx])
        yb = Tensor(np.asarray(y[idx], dtype=xb.dtype))
        params.zero_grad()
        with T.GradTape() as tape:
            loss = mse_loss(forward(params, xb, training=True, rng=rng, config=config), yb)
        tape.backward(loss)
        adam_step(params_list, None, state, cfg)
        total += loss.item() * len(idx)
        batches += 1
    return EpochStats(total / n, n, batches)


# ------------------------------------------------------- early stopping


@dataclass
class EarlyStopState:
    patience: int
    best_val_loss: float = math.inf
    best_epoch: int = 0
    best_weights: Optional[PatchModelParams] = None
    epochs_since_improvement: int = 0

    def update(self, epoch: int, val_loss: float, params: Optional[PatchModelParams]) -> bool:
        """Record one epoch's validation loss; return True when training should stop."""
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.best_epoch = epoch
            self.best_weights = params.copy() if params is not None else None
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


@dataclass
class FitResult:
    params: PatchModelParams
    history: List[EpochRecord]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool

    def summary(self) -> dict:
        return {"epochs_run": len(self.history), "best_epoch": self.best_epoch,
                "best_val_mse": self.best_val_loss, "stopped_early": self.stopped_early}


def write_history(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for rec in history:
            w.writerow([rec.epoch, repr(rec.train_mse), repr(rec.val_mse)])


class RegionPatches:
    """Patches of a single region for a list of samples.

    ``arrays(rng)`` re-augments the full images with a fresh random transform
    (flip + rotation carried over to the landmarks) before cropping; without
    an rng it returns the plain patches.
    """

    def __init__(self, samples: Sequence[Sample], region: str,
                 rules: Sequence[RoiRule] = DEFAULT_RULES,
                 augment: Optional[AugmentConfig] = None):
        self.samples = list(samples)
        self.rule = validate_rules(rules)[REGIONS.index(region)]
        self.region = region
        self.augment = augment
        self.y = np.array([s.bmi for s in self.samples], dtype=np.float32)
        self._plain = np.stack([self._patch(s.image, s.landmarks) for s in self.samples]) \
            if self.samples else np.zeros((0, 3, 32, 32), np.float32)

    def __len__(self) -> int:
        return len(self.samples)

    def _patch(self, img, lm) -> np.ndarray:
        box = roi_from_rule(self.rule, lm, img.width, img.height)
        return extract_patch(img, box).data

    def arrays(self, rng: Optional[np.random.Generator] = None):
        if rng is None or self.augment is None:
            return self._plain, self.y
        out = np.empty_like(self._plain)
        for i, s in enumerate(self.samples):
            flip, angle = draw_transform(rng, self.augment)
            img, pts = apply_transform(s.image, flip, angle, s.landmarks.points)
            try:
                out[i] = self._patch(img, LandmarkSet(pts))
            except DegenerateROIError:
                out[i] = self._plain[i]
        return out, self.y


def _arrays(ds, rng=None):
    return ds if isinstance(ds, tuple) else ds.arrays(rng)


def fit_with_early_stopping(params: PatchModelParams, train_set, val_set, cfg: TrainConfig,
                            seed: Optional[int] = None,
                            config: ModelConfig = ModelConfig()) -> FitResult:
    """Train until validation MSE stalls for ``patience`` epochs; return the best snapshot.

    ``train_set``/``val_set`` are ``(X, y)`` tuples or :class:`RegionPatches`.
    """
    X_val, y_val = _arrays(val_set)
    if len(X_val) == 0:
        raise ValueError("validation set is empty")
    if len(_arrays(train_set)[0]) == 0:
        raise ValueError("training set is empty")
    seq = np.random.SeedSequence(cfg.seed if seed is None else seed)
    train_rng, aug_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    state = AdamState.for_params(params.parameters())
    stopper = EarlyStopState(cfg.patience)
    history: List[EpochRecord] = []
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        data = _arrays(train_set, aug_rng if cfg.augment else None)
        stats = train_epoch(params, data, cfg, train_rng, state, config)
        val = evaluate_mse(params, X_val, y_val, config)
        history.append(EpochRecord(epoch, stats.mean_loss, val))
        log.debug("epoch %d train %.4f val %.4f", epoch, stats.mean_loss, val)
        if stopper.update(epoch, val, params):
            stopped = epoch < cfg.max_epochs
            break
    best = stopper.best_weights if stopper.best_weights is not None else params.copy()
    return FitResult(best, history, stopper.best_epoch, stopper.best_val_loss, stopped)


def region_seed(cfg: TrainConfig, region_index: int) -> int:
    return cfg.seed + region_index


def train_region(region_index: int, train_samples: Sequence[Sample],
                 val_samples: Sequence[Sample], cfg: TrainConfig,
                 rules: Sequence[RoiRule] = DEFAULT_RULES,
                 config: ModelConfig = ModelConfig()) -> FitResult:
    region = REGIONS[region_index]
    seed = region_seed(cfg, region_index)
    init_seq, fit_seq = np.random.SeedSequence(seed).spawn(2)
    params = init_weights(config, np.random.default_rng(init_seq))
    aug = cfg.augment_config if cfg.augment else None
    train_set = RegionPatches(train_samples, region, rules, aug)
    val_set = RegionPatches(val_samples, region, rules)
    fit_seed = int(fit_seq.generate_state(1)[0])
    return fit_with_early_stopping(params, train_set, val_set, cfg, seed=fit_seed, config=config)


def usable_samples(samples: Sequence[Sample], rules: Sequence[RoiRule] = DEFAULT_RULES):
    """Drop samples with any degenerate ROI; return (kept, [(sample, reason)])."""
    kept, dropped = [], []
    for s in samples:
        try:
            extract_all_patches(s.image, s.landmarks, rules)
        except DegenerateROIError as exc:
            dropped.append((s, str(exc)))
        else:
            kept.append(s)
    return kept, dropped


def train_ensemble(train_samples: Sequence[Sample], val_samples: Sequence[Sample],
                   cfg: TrainConfig, rules: Sequence[RoiRule] = DEFAULT_RULES,
                   config: ModelConfig = ModelConfig(), threads: int = 1,
                   regions: Optional[Sequence[int]] = None) -> List[FitResult]:
    """Train one model per region, independently seeded with ``cfg.seed + region_index``."""
    rules = validate_rules(rules)
    if not train_samples or not val_samples:
        raise ValueError("train_ensemble needs non-empty training and validation samples")
    order = list(range(len(REGIONS))) if regions is None else list(regions)

    def run(i):
        log.info("training region %s", REGIONS[i])
        return train_region(i, train_samples, val_samples, cfg, rules, config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, order))
    else:
        results = [run(i) for i in order]
    return results
