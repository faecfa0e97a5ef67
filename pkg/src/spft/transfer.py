"""End-to-end transfer pipeline: pretraining, fine-tuning under each penalty,
hyperparameter sweeps, freezing ablations, forgetting measurement and
per-unit activation-similarity analysis.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np

from .data import (AugmentOptions, Dataset, TransferTaskPair, channel_means_of,
                   concat, normalize_with, subset)
from .fisher import FisherDiag, fisher_sidecar_path, load_fisher
from .nets import (Conv2D, FullyConnected, GlobalAvgPool, MaxPool, Network, ReLU,
                   SoftmaxHead, load_checkpoint, replace_head)
from .penalties import FISHER_KINDS, GROUP_KINDS, PenaltyConfig, build_channel_groups
from .optim import TrainConfig, TrainHistory, evaluate, train


def desknet(num_classes: int):
    """Reference desk-scale architecture: two conv blocks, global pooling, head."""
    return (Conv2D(16, 3, 3, 1, 1), ReLU(), MaxPool(2, 2),
            Conv2D(32, 3, 3, 1, 1), ReLU(), MaxPool(2, 2),
            GlobalAvgPool(), SoftmaxHead(num_classes))


def _resolve_net(source) -> Network:
    if isinstance(source, Network):
        return source.clone()
    return load_checkpoint(source)


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

@dataclass
class PretrainResult:
    net: Network
    history: TrainHistory
    source_test_accuracy: float
    source_train: Dataset
    source_val: Dataset
    source_test: Dataset
    channel_means: np.ndarray


def split_source(source: Dataset, seed: int, val_fraction: float = 0.1,
                 test_fraction: float = 0.1):
    """Seeded per-class train/val/test split of the source dataset, all three
    normalized with the training split's channel means."""
    if len(source) == 0:
        raise ValueError("empty source dataset")
    rng = np.random.default_rng(seed)
    tr_idx, va_idx, te_idx = [], [], []
    for c in range(source.num_classes):
        idx = rng.permutation(np.flatnonzero(source.labels == c))
        n_va = int(val_fraction * idx.size)
        n_te = int(test_fraction * idx.size)
        va_idx.append(idx[:n_va])
        te_idx.append(idx[n_va:n_va + n_te])
        tr_idx.append(idx[n_va + n_te:])
    s_train = subset(source, rng.permutation(np.concatenate(tr_idx)))
    s_val = subset(source, np.concatenate(va_idx))
    s_test = subset(source, np.concatenate(te_idx))
    means = channel_means_of(s_train)
    return (normalize_with(s_train, means), normalize_with(s_val, means),
            normalize_with(s_test, means), means)


def pretrain(source: Dataset, layers, cfg: TrainConfig, val_fraction: float = 0.1,
             test_fraction: float = 0.1, penalty: PenaltyConfig | None = None,
             augment_opts: AugmentOptions | None = None) -> PretrainResult:
    """Train a source model from scratch and record its held-out accuracy."""
    s_train, s_val, s_test, means = split_source(source, cfg.seed, val_fraction,
                                                 test_fraction)
    net = Network(layers, source.input_shape, seed=cfg.seed)
    val_arg = s_val if cfg.early_stop is not None else None
    trained, history = train(net, s_train, penalty, cfg, val_data=val_arg,
                             augment_opts=augment_opts)
    acc = evaluate(trained, s_test)
    return PretrainResult(trained, history, acc, s_train, s_val, s_test, means)


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    net: Network
    test_accuracy: float
    history: TrainHistory
    penalty: PenaltyConfig | None
    reference: np.ndarray


def build_penalty(net: Network, penalty_kind: str | None, alpha: float, beta: float,
                  fisher: FisherDiag | None = None, epsilon: float = 1e-6) -> PenaltyConfig | None:
    """Penalty for fine-tuning ``net``, whose shared part is the reference."""
    if penalty_kind is None:
        return None
    reference = None if penalty_kind == "L2" else net.params.values[net.params.shared_mask].copy()
    fisher_diag = None
    if penalty_kind in FISHER_KINDS:
        if fisher is None:
            raise ValueError(f"{penalty_kind} requires a Fisher sidecar")
        fisher_diag = fisher.values
    groups = build_channel_groups(net) if penalty_kind in GROUP_KINDS else None
    return PenaltyConfig(penalty_kind, alpha, beta, reference=reference,
                         fisher_diag=fisher_diag, groups=groups, epsilon=epsilon)


def finetune(task: TransferTaskPair, source, penalty_kind: str | None, alpha: float,
             beta: float, cfg: TrainConfig, fisher: FisherDiag | None = None,
             epsilon: float = 1e-6, augment_opts: AugmentOptions | None = None,
             crop_mode: str = "CENTRAL") -> FinetuneResult:
    """Fine-tune from a source model under one penalty; the loaded parameters
    are both the optimization starting point and the penalty reference.

    The target test split is only touched by the final evaluation.
    """
    src_net = _resolve_net(source)
    if penalty_kind in FISHER_KINDS and fisher is None:
        if isinstance(source, (str, Path)):
            sidecar = fisher_sidecar_path(source)
            if not sidecar.exists():
                raise FileNotFoundError(f"missing Fisher sidecar {sidecar}")
            fisher = load_fisher(sidecar)
        else:
            raise ValueError(f"{penalty_kind} requires a Fisher sidecar")
    net = replace_head(src_net, task.target_train.num_classes, seed=cfg.seed)
    penalty = build_penalty(net, penalty_kind, alpha, beta, fisher, epsilon)
    reference = net.params.values[net.params.shared_mask].copy()
    val_arg = task.target_val if cfg.early_stop is not None else None
    trained, history = train(net, task.target_train, penalty, cfg, val_data=val_arg,
                             augment_opts=augment_opts)
    acc = evaluate(trained, task.target_test, crop_mode=crop_mode)
    return FinetuneResult(trained, acc, history, penalty, reference)


# --------------------------------------------------------------------------
# hyperparameter sweep
# --------------------------------------------------------------------------

@dataclass
class SweepCell:
    alpha: float
    beta: float
    fold_accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracies))


@dataclass
class SweepResult:
    grid: list[tuple[float, float]]
    cells: list[SweepCell]
    best: tuple[float, float]
    selection_rule: str = "max mean val accuracy; ties prefer larger alpha, then larger beta"


def _fold_indices(labels: np.ndarray, num_classes: int, folds: int, rng) -> list[np.ndarray]:
    """Stratified folds: per class, seeded shuffle then round-robin deal."""
    assign = [[] for _ in range(folds)]
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if idx.size < folds:
            raise ValueError(f"class {c} has {idx.size} examples, fewer than {folds} folds")
        for i, j in enumerate(idx):
            assign[i % folds].append(j)
    return [np.sort(np.array(a)) for a in assign]


def sweep(task: TransferTaskPair, source, penalty_kind: str, alpha_grid, beta_grid,
          folds: int, cfg: TrainConfig, fisher: FisherDiag | None = None,
          epsilon: float = 1e-6, jobs: int = 1) -> SweepResult:
    """Cross-validate every (alpha, beta) cell on the merged train+val data."""
    alpha_grid = list(alpha_grid)
    beta_grid = list(beta_grid)
    if not alpha_grid or not beta_grid:
        raise ValueError("grids must be nonempty")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    merged = concat(task.target_train, task.target_val)
    rng = np.random.default_rng(cfg.seed)
    fold_idx = _fold_indices(merged.labels, merged.num_classes, folds, rng)
    worker = _SweepJob(merged, fold_idx, _resolve_net(source), penalty_kind,
                       fisher, epsilon, cfg)
    jobs_list = [(a, b, f) for a in alpha_grid for b in beta_grid for f in range(folds)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(worker, jobs_list))  # map preserves job order
    else:
        accs = [worker(j) for j in jobs_list]

    cells = []
    pos = 0
    grid = []
    for alpha in alpha_grid:
        for beta in beta_grid:
            grid.append((alpha, beta))
            cells.append(SweepCell(alpha, beta, accs[pos:pos + folds]))
            pos += folds
    best_cell = max(cells, key=lambda c: (c.mean, c.alpha, c.beta))
    return SweepResult(grid, cells, (best_cell.alpha, best_cell.beta))


class _SweepJob:
    """Picklable per-(cell, fold) worker; one fine-tuning run per call."""

    def __init__(self, merged, fold_idx, src_net, penalty_kind, fisher, epsilon, cfg):
        self.merged = merged
        self.fold_idx = fold_idx
        self.src_net = src_net
        self.penalty_kind = penalty_kind
        self.fisher = fisher
        self.epsilon = epsilon
        self.cfg = cfg

    def __call__(self, args):
        alpha, beta, f = args
        folds = len(self.fold_idx)
        val_ds = subset(self.merged, self.fold_idx[f])
        train_ds = subset(self.merged, np.concatenate(
            [self.fold_idx[g] for g in range(folds) if g != f]))
        fold_cfg = dc_replace(self.cfg, seed=self.cfg.seed * 1000 + f, early_stop=None)
        net = replace_head(self.src_net, self.merged.num_classes, seed=fold_cfg.seed)
        penalty = build_penalty(net, self.penalty_kind, alpha, beta, self.fisher, self.epsilon)
        trained, _ = train(net, train_ds, penalty, fold_cfg)
        return evaluate(trained, val_ds)


def write_sweep_csv(result: SweepResult, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["alpha", "beta", "fold", "val_acc"])
        for cell in result.cells:
            for fold, acc in enumerate(cell.fold_accuracies):
                w.writerow([repr(cell.alpha), repr(cell.beta), fold, repr(acc)])


# --------------------------------------------------------------------------
# freezing ablation
# --------------------------------------------------------------------------

@dataclass
class FreezeCell:
    penalty_kind: str
    k: int
    test_accuracy: float


def freezing_ablation(task: TransferTaskPair, source, penalty_kind: str, k_values,
                      cfg: TrainConfig, alpha: float, beta: float,
                      fisher: FisherDiag | None = None) -> list[FreezeCell]:
    """Fine-tune with the first k parameterized layers frozen, for each k."""
    rows = []
    for k in k_values:
        res = finetune(task, source, penalty_kind, alpha, beta,
                       dc_replace(cfg, frozen_layers=int(k)), fisher=fisher)
        rows.append(FreezeCell(penalty_kind, int(k), res.test_accuracy))
    return rows


def write_ablation_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["penalty", "k", "seed", "test_acc"])
        for kind, k, seed, acc in rows:
            w.writerow([kind, k, seed, repr(acc)])


# --------------------------------------------------------------------------
# forgetting
# --------------------------------------------------------------------------

@dataclass
class ForgettingMeasurement:
    source_acc_pretrained: float
    source_acc_after: float

    @property
    def drop(self) -> float:
        return self.source_acc_pretrained - self.source_acc_after


@dataclass
class ForgettingReport:
    source_acc_pretrained: float
    source_acc_after_finetune: dict[str, float]
    drops: dict[str, float]

    @classmethod
    def from_measurements(cls, measurements: dict[str, ForgettingMeasurement]) -> "ForgettingReport":
        base = {m.source_acc_pretrained for m in measurements.values()}
        if len(base) > 1:
            raise ValueError("measurements disagree on the pretrained source accuracy")
        return cls(base.pop(),
                   {k: m.source_acc_after for k, m in measurements.items()},
                   {k: m.drop for k, m in measurements.items()})


def graft_source_head(finetuned: Network, source_net: Network) -> Network:
    """Source network with its shared parameters replaced by fine-tuned ones,
    keeping the original source classification head."""
    grafted = source_net.clone()
    fine_slices = {sl.layer_index: sl for sl in finetuned.params.layout}
    for sl in grafted.params.layout:
        if isinstance(grafted.layers[sl.layer_index], SoftmaxHead):
            continue
        other = fine_slices.get(sl.layer_index)
        if other is None or other.weight_shape != sl.weight_shape or other.bias_size != sl.bias_size:
            raise ValueError(f"shape mismatch on layer {sl.layer_index}")
        grafted.params.values[sl.offset:sl.offset + sl.size] = \
            finetuned.params.values[other.offset:other.offset + other.size]
    return grafted


def forgetting(finetuned: Network, source, source_test: Dataset) -> ForgettingMeasurement:
    """Source-task accuracy before and after fine-tuning, using the original
    source head on the fine-tuned shared parameters (no retraining)."""
    source_net = _resolve_net(source)
    before = evaluate(source_net, source_test)
    after = evaluate(graft_source_head(finetuned, source_net), source_test)
    return ForgettingMeasurement(before, after)


def write_forgetting_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["penalty", "seed", "source_acc_before", "source_acc_after"])
        for kind, seed, before, after in rows:
            w.writerow([kind, seed, repr(before), repr(after)])


# --------------------------------------------------------------------------
# activation similarity (per-unit R^2)
# --------------------------------------------------------------------------

@dataclass
class R2Report:
    """Per-layer, per-unit squared correlation between the activations of two
    networks over a probe set.  Conv channels pool spatial positions into the
    sample; units with zero variance in either network are flagged undefined.
    """
    layer_ids: list[int]
    unit_counts: list[int]
    r2: list[np.ndarray]
    defined: list[np.ndarray]
    mode: str = "per-channel"

    def layer_medians(self) -> list[float]:
        out = []
        for vals, ok in zip(self.r2, self.defined):
            out.append(float(np.median(vals[ok])) if ok.any() else float("nan"))
        return out


def _compare_layers(net: Network) -> list[tuple[int, int]]:
    """(parameterized layer, activation layer) pairs for the shared part;
    the activation is taken after an immediately following ReLU."""
    pairs = []
    mask = net.params.shared_mask
    for sl in net.params.layout:
        if isinstance(net.layers[sl.layer_index], SoftmaxHead):
            continue
        if not mask[sl.offset]:
            continue
        act = sl.layer_index
        if act + 1 < len(net.layers) and isinstance(net.layers[act + 1], ReLU):
            act += 1
        pairs.append((sl.layer_index, act))
    return pairs


def r2_analysis(pretrained: Network, finetuned: Network, probe: Dataset,
                batch_size: int = 256) -> R2Report:
    """Squared Pearson correlation per unit between the two networks'
    activations on the probe set, grouped by layer."""
    if len(probe) == 0:
        raise ValueError("empty probe set")
    pairs = _compare_layers(pretrained)
    for (li, _), sl_fine in zip(pairs, _compare_layers(finetuned)):
        if li != sl_fine[0]:
            raise ValueError("networks do not share the same parameterized layers")

    sums = {}  # layer -> [n, sx, sy, sxx, syy, sxy]
    for start in range(0, len(probe), batch_size):
        xb = probe.images[start:start + batch_size]
        acts_pre, _ = pretrained.forward(xb)
        acts_fin, _ = finetuned.forward(xb)
        for li, ai in pairs:
            a = acts_pre[ai]
            b = acts_fin[ai]
            if a.ndim == 4:  # (B, C, H, W): pool batch and spatial positions
                x = a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)
                y = b.transpose(1, 0, 2, 3).reshape(b.shape[1], -1)
            else:  # (B, units)
                x = a.T
                y = b.T
            st = sums.setdefault(li, [0, 0.0, 0.0, 0.0, 0.0, 0.0])
            st[0] += x.shape[1]
            st[1] = st[1] + x.sum(axis=1)
            st[2] = st[2] + y.sum(axis=1)
            st[3] = st[3] + (x * x).sum(axis=1)
            st[4] = st[4] + (y * y).sum(axis=1)
            st[5] = st[5] + (x * y).sum(axis=1)

    layer_ids, unit_counts, r2s, defmasks = [], [], [], []
    for li, _ in pairs:
        n, sx, sy, sxx, syy, sxy = sums[li]
        mx, my = sx / n, sy / n
        vx = sxx / n - mx * mx
        vy = syy / n - my * my
        cov = sxy / n - mx * my
        ok = (vx > 0) & (vy > 0)
        r2 = np.zeros_like(vx)
        r2[ok] = (cov[ok] * cov[ok]) / (vx[ok] * vy[ok])
        layer_ids.append(li)
        unit_counts.append(int(vx.size))
        r2s.append(r2)
        defmasks.append(ok)
    return R2Report(layer_ids, unit_counts, r2s, defmasks)


def write_r2_csv(report: R2Report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "unit", "r2", "defined_flag"])
        for li, r2, ok in zip(report.layer_ids, report.r2, report.defined):
            for u in range(r2.size):
                w.writerow([li, u, repr(float(r2[u])), int(ok[u])])
