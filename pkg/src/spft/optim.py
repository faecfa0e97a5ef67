"""SGD with momentum, step decay, penalty integration, freezing, early stopping.

Two penalty modes:
  SMOOTHED    v <- mu v - eta (grad J_batch + grad Omega_surrogate); w <- w + v
  PROX_SPLIT  v <- mu v - eta (grad J_batch + grad beta-term); w <- prox(w + v, eta)

Momentum is kept in prox mode (applied to the smooth part only).  Frozen
layers keep parameters and momenta bit-identical to their initial values.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentOptions, Dataset, augment
from .penalties import PROX_KINDS, PenaltyConfig, penalty_grad, penalty_value, prox_step, smooth_fresh_grad

MODES = ("SMOOTHED", "PROX_SPLIT")
CROP_MODES = ("CENTRAL", "TEN_CROP")


@dataclass(frozen=True)
class EarlyStop:
    eval_every: int = 100
    patience: int = 10


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float
    total_iters: int
    decay_at: int
    momentum: float = 0.9
    decay_factor: float = 0.1
    batch_size: int = 64
    mode: str = "SMOOTHED"
    frozen_layers: int = 0
    early_stop: EarlyStop | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.decay_at > self.total_iters:
            raise ValueError("decay_at must not exceed total_iters")
        if self.frozen_layers < 0:
            raise ValueError("frozen_layers must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.batch_size < 1 or self.total_iters < 1:
            raise ValueError("batch_size and total_iters must be positive")


@dataclass
class TrainHistory:
    """Per-iteration objective trace plus periodic validation accuracies."""
    loss: np.ndarray
    penalty: np.ndarray
    objective: np.ndarray
    lr: np.ndarray
    eval_iters: list[int] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    stop_reason: str = "completed"

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "loss", "penalty", "objective", "lr"])
            for t in range(self.loss.size):
                w.writerow([t, repr(self.loss[t]), repr(self.penalty[t]),
                            repr(self.objective[t]), repr(self.lr[t])])

    def write_eval_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "val_accuracy"])
            for t, acc in zip(self.eval_iters, self.val_accuracy):
                w.writerow([t, repr(acc)])


def lr_schedule(cfg: TrainConfig, t: int) -> float:
    """Step schedule: base rate, divided by the decay factor from decay_at on."""
    if not 0 <= t < cfg.total_iters:
        raise ValueError("iteration index out of range")
    return cfg.base_lr if t < cfg.decay_at else cfg.base_lr * cfg.decay_factor


class _BatchSampler:
    """Seeded shuffling each epoch; partial final batches are kept."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next_batch(self) -> np.ndarray:
        if self.pos >= self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        batch = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return batch


def train(model, data: Dataset, penalty: PenaltyConfig | None, cfg: TrainConfig,
          val_data: Dataset | None = None, augment_opts: AugmentOptions | None = None):
    """Train a copy of ``model`` on ``data``; returns (trained model, history).

    ``model`` must expose ``params`` (a ParamVector), ``loss_and_grad``,
    ``trainable_mask`` and ``clone`` (any object with that surface trains,
    not only networks).  With early stopping configured, the parameters of
    the best validation evaluation are returned; ties keep the earlier one.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if cfg.early_stop is not None and val_data is None:
        raise ValueError("early stopping requires validation data")
    if cfg.mode == "PROX_SPLIT":
        if penalty is None or penalty.kind not in PROX_KINDS:
            kind = None if penalty is None else penalty.kind
            raise ValueError(f"PROX_SPLIT needs a penalty with a closed-form prox, got {kind}")

    model = model.clone()
    w = model.params
    # a penalty with both strengths zero contributes exact zeros; skip it so
    # the run is bit-identical to an unpenalized one
    active = penalty is not None and (penalty.alpha != 0.0 or penalty.beta != 0.0)
    mask = model.trainable_mask(cfg.frozen_layers)
    velocity = np.zeros(w.n)
    rng = np.random.default_rng(cfg.seed)
    sampler = _BatchSampler(len(data), cfg.batch_size, rng)

    hist_loss = np.zeros(cfg.total_iters)
    hist_pen = np.zeros(cfg.total_iters)
    hist_obj = np.zeros(cfg.total_iters)
    hist_lr = np.zeros(cfg.total_iters)
    eval_iters: list[int] = []
    val_accs: list[float] = []
    best_acc = -1.0
    best_params = None
    bad_evals = 0
    stop_reason = "completed"
    done = 0

    for t in range(cfg.total_iters):
        idx = sampler.next_batch()
        xb = data.images[idx]
        if augment_opts is not None:
            xb = augment(xb, seed=int(rng.integers(0, 2**31)), opts=augment_opts)
        loss, grad = model.loss_and_grad(xb, data.labels[idx])
        eta = lr_schedule(cfg, t)
        pen_value = penalty_value(penalty, w) if penalty is not None else 0.0
        if active:
            if cfg.mode == "SMOOTHED":
                grad = grad + penalty_grad(penalty, w)
            else:
                grad = grad + smooth_fresh_grad(penalty, w)
        velocity[mask] = cfg.momentum * velocity[mask] - eta * grad[mask]
        w.values[mask] += velocity[mask]
        if active and cfg.mode == "PROX_SPLIT" and penalty.alpha != 0.0:
            proxed = prox_step(penalty, w, eta)
            w.values[mask] = proxed.values[mask]
        hist_loss[t] = loss
        hist_pen[t] = pen_value
        hist_obj[t] = loss + pen_value
        hist_lr[t] = eta
        done = t + 1

        if cfg.early_stop is not None and done % cfg.early_stop.eval_every == 0:
            acc = evaluate(model, val_data)
            eval_iters.append(done)
            val_accs.append(acc)
            if acc > best_acc:
                best_acc = acc
                best_params = w.values.copy()
                bad_evals = 0
            else:
                bad_evals += 1
            if bad_evals >= cfg.early_stop.patience:
                stop_reason = "early_stop"
                break

    if cfg.early_stop is not None:
        if done % cfg.early_stop.eval_every != 0:
            acc = evaluate(model, val_data)
            eval_iters.append(done)
            val_accs.append(acc)
            if acc > best_acc:
                best_acc = acc
                best_params = w.values.copy()
        w.values[:] = best_params

    history = TrainHistory(hist_loss[:done], hist_pen[:done], hist_obj[:done],
                           hist_lr[:done], eval_iters, val_accs, stop_reason)
    return model, history


def _ten_crop_variants(images: np.ndarray, pad: int = 2):
    """Four corner crops and the center crop of the zero-padded image, each
    with its horizontal mirror (crop size equals the original size)."""
    h, w = images.shape[2:]
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = [(0, 0), (0, 2 * pad), (2 * pad, 0), (2 * pad, 2 * pad), (pad, pad)]
    for r, c in offsets:
        crop = padded[:, :, r:r + h, c:c + w]
        yield crop
        yield crop[:, :, :, ::-1]


def evaluate(model, data: Dataset, crop_mode: str = "CENTRAL", batch_size: int = 256) -> float:
    """Fraction of correct argmax predictions; TEN_CROP averages the class
    probabilities of ten translated/mirrored variants of each image."""
    if crop_mode not in CROP_MODES:
        raise ValueError(f"crop_mode must be one of {CROP_MODES}")
    if len(data) == 0:
        raise ValueError("empty dataset")
    correct = 0
    for start in range(0, len(data), batch_size):
        xb = data.images[start:start + batch_size]
        yb = data.labels[start:start + batch_size]
        if crop_mode == "CENTRAL":
            probs = model.predict_probs(xb)
        else:
            variants = list(_ten_crop_variants(xb))
            probs = sum(model.predict_probs(np.ascontiguousarray(v)) for v in variants)
            probs /= len(variants)
        correct += int((probs.argmax(axis=1) == yb).sum())
    return correct / len(data)
