"""Regularizers that pull fine-tuned parameters toward a starting point.

Six penalty kinds are supported.  With shared part S (parameters inherited
from the source model), fresh part S-bar (e.g. the replaced head), reference
vector w0 on S, per-parameter sensitivities F on S and channel groups G_g:

  L2           (alpha/2) ||w||^2                        (whole vector)
  L2SP         (alpha/2) ||w_S - w0||^2        + (beta/2) ||w_Sbar||^2
  L2SP_FISHER  (alpha/2) sum_S F_j (w_j-w0_j)^2 + (beta/2) ||w_Sbar||^2
  L1SP         alpha ||w_S - w0||_1            + (beta/2) ||w_Sbar||^2
  GLSP         alpha sum_g s_g ||w_g - w0_g||  + (beta/2) ||w_Sbar||^2
  GLSP_FISHER  alpha sum_g s_g (sum_g F_j (w_j-w0_j)^2)^(1/2) + (beta/2) ||w_Sbar||^2

Nonsmooth kinds are optimized either through an epsilon-smoothed surrogate
(|x| -> sqrt(x^2 + eps^2), ||v|| -> sqrt(||v||^2 + eps^2)) or, for L1SP and
GLSP, through closed-form proximal maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import Conv2D, FullyConnected, Network, ParamVector, SoftmaxHead

PENALTY_KINDS = ("L2", "L2SP", "L2SP_FISHER", "L1SP", "GLSP", "GLSP_FISHER")
FISHER_KINDS = ("L2SP_FISHER", "GLSP_FISHER")
GROUP_KINDS = ("GLSP", "GLSP_FISHER")
PROX_KINDS = ("L1SP", "GLSP")


@dataclass(frozen=True)
class GroupStructure:
    """Partition of the shared parameter indices into per-channel groups.

    ``groups[g]`` holds the absolute parameter indices of group g (the fan-in
    weights of one output channel or unit, bias included), ``weights[g]`` its
    balancing constant s_g and ``provenance[g]`` the (layer, channel) it came
    from.
    """
    groups: tuple[np.ndarray, ...]
    weights: np.ndarray
    sizes: np.ndarray
    provenance: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.groups) != len(self.weights) or len(self.groups) != len(self.sizes):
            raise ValueError("groups, weights and sizes must align")
        if np.any(self.weights <= 0):
            raise ValueError("group weights must be positive")
        for g, idx in enumerate(self.groups):
            if idx.size != self.sizes[g] or idx.size < 1:
                raise ValueError(f"group {g} size mismatch")

    def validate_partition(self, shared_mask: np.ndarray):
        """Groups must tile the shared index set exactly."""
        seen = np.zeros(shared_mask.size, dtype=bool)
        for idx in self.groups:
            if seen[idx].any():
                raise ValueError("groups overlap")
            if not shared_mask[idx].all():
                raise ValueError("group contains non-shared parameters")
            seen[idx] = True
        if not np.array_equal(seen, shared_mask):
            raise ValueError("groups do not cover the shared part exactly")


@dataclass(frozen=True)
class PenaltyConfig:
    """One regularizer: kind, strengths, reference point and its metadata.

    ``reference`` is the starting-point vector restricted to the shared part
    (ascending index order); it is absent for plain L2.  ``fisher_diag`` is
    required for Fisher kinds, ``groups`` for group-lasso kinds.
    """
    kind: str
    alpha: float
    beta: float = 0.0
    reference: np.ndarray | None = None
    fisher_diag: np.ndarray | None = None
    groups: GroupStructure | None = None
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}; expected one of {PENALTY_KINDS}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.kind != "L2" and self.reference is None:
            raise ValueError(f"{self.kind} needs a reference vector")
        if self.kind in FISHER_KINDS:
            if self.fisher_diag is None:
                raise ValueError(f"{self.kind} needs a Fisher diagonal")
            fd = np.asarray(self.fisher_diag)
            if not np.isfinite(fd).all() or (fd < 0).any():
                raise ValueError("Fisher diagonal entries must be finite and nonnegative")
        if self.kind in GROUP_KINDS and self.groups is None:
            raise ValueError(f"{self.kind} needs a group structure")


def _split(cfg: PenaltyConfig, w: ParamVector):
    """Returns (delta on S, w restricted to S-bar, shared index array)."""
    shared = w.shared_indices
    if cfg.kind == "L2":
        return w.values[shared], w.values[~w.shared_mask], shared
    ref = np.asarray(cfg.reference, dtype=np.float64)
    if ref.shape != shared.shape:
        raise ValueError(
            f"reference length {ref.size} does not match shared part size {shared.size}")
    if cfg.kind in FISHER_KINDS and np.asarray(cfg.fisher_diag).shape != shared.shape:
        raise ValueError("Fisher diagonal length does not match shared part size")
    return w.values[shared] - ref, w.values[~w.shared_mask], shared


def _group_deltas(cfg: PenaltyConfig, w: ParamVector, delta_s, shared):
    """Per-group delta vectors, mapping absolute group indices into S order."""
    pos = np.full(w.n, -1, dtype=np.int64)
    pos[shared] = np.arange(shared.size)
    out = []
    for idx in cfg.groups.groups:
        p = pos[idx]
        if (p < 0).any():
            raise ValueError("group refers to parameters outside the shared part")
        out.append((p, delta_s[p]))
    return out


def penalty_value(cfg: PenaltyConfig, w: ParamVector, smoothed: bool = False) -> float:
    """Penalty value at ``w``; with ``smoothed`` the epsilon-surrogate value.

    Summation structure is kept identical across kinds so the exact algebraic
    reductions (L2SP[w0=0, beta=alpha] == L2, Fisher with unit sensitivities
    == plain SP, unit-size groups == L1SP) hold bitwise, not just to rounding.
    """
    delta, fresh, shared = _split(cfg, w)
    beta_eff = cfg.alpha if cfg.kind == "L2" else cfg.beta
    eps = cfg.epsilon
    if cfg.kind in ("L2", "L2SP"):
        shared_term = 0.5 * cfg.alpha * float(np.sum(delta * delta))
    elif cfg.kind == "L2SP_FISHER":
        shared_term = 0.5 * cfg.alpha * float(np.sum(np.asarray(cfg.fisher_diag) * delta * delta))
    elif cfg.kind == "L1SP":
        if smoothed:
            shared_term = cfg.alpha * float(np.sum(np.sqrt(delta * delta + eps * eps)))
        else:
            shared_term = cfg.alpha * float(np.sum(np.abs(delta)))
    else:
        fisher = np.asarray(cfg.fisher_diag) if cfg.kind == "GLSP_FISHER" else None
        terms = np.empty(len(cfg.groups.groups))
        for g, (p, dg) in enumerate(_group_deltas(cfg, w, delta, shared)):
            sq = float(np.sum(dg * dg)) if fisher is None else float(np.sum(fisher[p] * dg * dg))
            if smoothed:
                terms[g] = cfg.groups.weights[g] * np.sqrt(sq + eps * eps)
            else:
                terms[g] = cfg.groups.weights[g] * np.sqrt(sq)
        shared_term = cfg.alpha * float(np.sum(terms))
    return 0.5 * beta_eff * float(np.sum(fresh * fresh)) + shared_term


def penalty_grad(cfg: PenaltyConfig, w: ParamVector) -> np.ndarray:
    """Gradient of the penalty (of its smoothed surrogate for nonsmooth kinds)."""
    delta, fresh, shared = _split(cfg, w)
    beta_eff = cfg.alpha if cfg.kind == "L2" else cfg.beta
    grad = np.zeros(w.n)
    grad[~w.shared_mask] = beta_eff * fresh
    eps = cfg.epsilon
    if cfg.kind in ("L2", "L2SP"):
        grad[shared] = cfg.alpha * delta
    elif cfg.kind == "L2SP_FISHER":
        grad[shared] = cfg.alpha * np.asarray(cfg.fisher_diag) * delta
    elif cfg.kind == "L1SP":
        grad[shared] = cfg.alpha * (delta / np.sqrt(delta * delta + eps * eps))
    else:
        fisher = np.asarray(cfg.fisher_diag) if cfg.kind == "GLSP_FISHER" else None
        gs = np.zeros(shared.size)
        for g, (p, dg) in enumerate(_group_deltas(cfg, w, delta, shared)):
            if fisher is None:
                sq = float(dg @ dg)
                gs[p] = cfg.groups.weights[g] * dg / np.sqrt(sq + eps * eps)
            else:
                fg = fisher[p]
                sq = float(fg @ (dg * dg))
                gs[p] = cfg.groups.weights[g] * fg * dg / np.sqrt(sq + eps * eps)
        grad[shared] = cfg.alpha * gs
    return grad


def smooth_fresh_grad(cfg: PenaltyConfig, w: ParamVector) -> np.ndarray:
    """Gradient of the fresh-part term alone (the smooth half in prox mode)."""
    beta_eff = cfg.alpha if cfg.kind == "L2" else cfg.beta
    grad = np.zeros(w.n)
    fresh_mask = ~w.shared_mask
    grad[fresh_mask] = beta_eff * w.values[fresh_mask]
    return grad


def prox_step(cfg: PenaltyConfig, w: ParamVector, eta: float) -> ParamVector:
    """Closed-form proximal map of the nonsmooth shared-part term.

    Solves argmin_u ||u - w||^2 / (2 eta) + Omega_nonsmooth(u): coordinatewise
    soft thresholding toward the reference for L1SP, radial group shrinkage
    for GLSP.  The fresh part is untouched (its smooth term is handled by
    gradient steps).
    """
    if cfg.kind not in PROX_KINDS:
        raise ValueError(f"no closed-form prox for kind {cfg.kind!r}")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    delta, _, shared = _split(cfg, w)
    out = w.values.copy()
    t = eta * cfg.alpha
    if t == 0.0:
        return ParamVector(out, w.layout, w.shared_mask.copy())
    ref = np.asarray(cfg.reference, dtype=np.float64)
    if cfg.kind == "L1SP":
        out[shared] = ref + np.sign(delta) * np.maximum(np.abs(delta) - t, 0.0)
    else:
        new_s = delta.copy()
        for g, (p, dg) in enumerate(_group_deltas(cfg, w, delta, shared)):
            norm = float(np.sqrt(dg @ dg))
            if norm == 0.0:
                new_s[p] = 0.0
            else:
                new_s[p] = max(1.0 - t * cfg.groups.weights[g] / norm, 0.0) * dg
        out[shared] = ref + new_s
    return ParamVector(out, w.layout, w.shared_mask.copy())


def build_channel_groups(net: Network) -> GroupStructure:
    """One group per output channel (conv) or output unit (fully-connected)
    over the shared part; a channel's bias joins its group; s_g = sqrt(p_g).
    """
    mask = net.params.shared_mask
    groups, weights, sizes, provenance = [], [], [], []
    for sl in net.params.layout:
        region = mask[sl.offset:sl.offset + sl.size]
        if region.any() != region.all():
            raise ValueError("parameter slice straddles the shared/fresh split")
        if not region.all():
            continue
        spec = net.layers[sl.layer_index]
        if isinstance(spec, Conv2D):
            n_out = spec.out_channels
        elif isinstance(spec, (FullyConnected, SoftmaxHead)):
            n_out = sl.weight_shape[0]
        else:
            continue
        fan_in = sl.weight_size // n_out
        for c in range(n_out):
            idx = np.concatenate([
                np.arange(sl.offset + c * fan_in, sl.offset + (c + 1) * fan_in),
                [sl.bias_offset + c],
            ])
            groups.append(idx)
            sizes.append(idx.size)
            weights.append(np.sqrt(idx.size))
            provenance.append((sl.layer_index, c))
    if not groups:
        raise ValueError("network has no parameterized layers in the shared part")
    gs = GroupStructure(tuple(groups), np.asarray(weights, dtype=np.float64),
                        np.asarray(sizes, dtype=np.int64), tuple(provenance))
    gs.validate_partition(mask)
    return gs
