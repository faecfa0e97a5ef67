"""Diagonal Fisher information of a trained model over source inputs.

Each diagonal entry is the average over m inputs of the exact conditional
expectation over classes of the squared score:

    F_jj = (1/m) sum_i sum_k p(k | x_i) (d/dw_j log p(k | x_i))^2

The inner sum runs over all classes weighted by the predicted probabilities
(not sampled labels), so only the input sampling is stochastic.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .nets import Network

FISHER_MAGIC = b"SPFI"


@dataclass
class FisherDiag:
    """Per-parameter sensitivities for the shared part, in ascending index order."""
    values: np.ndarray
    sample_count: int
    source_checkpoint_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("Fisher entries must be finite and nonnegative")


def estimate_fisher_diag(net: Network, data: Dataset, m: int, seed: int,
                         source_checkpoint_id: str = "") -> FisherDiag:
    """Estimate the Fisher diagonal on ``m`` inputs drawn without replacement.

    Classes with probability exactly zero contribute nothing (the weighted
    squared score vanishes in that limit) and are skipped.  Examples are
    reduced in draw order, so the result is reproducible from the seed.
    """
    if m <= 0:
        raise ValueError("m must be positive")
    if m > len(data):
        raise ValueError(f"m={m} exceeds dataset size {len(data)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(data), size=m, replace=False)
    shared = net.params.shared_indices
    acc = np.zeros(shared.size)
    k_classes = net.num_classes
    for i in picks:
        x = data.images[i]
        probs = net.predict_probs(x[None])[0]
        if not np.isfinite(probs).all():
            raise FloatingPointError("non-finite class probability in Fisher estimation")
        for k in range(k_classes):
            pk = probs[k]
            if pk == 0.0:
                continue
            score = net.per_class_logprob_grad(x, k)[shared]
            acc += pk * (score * score)
    return FisherDiag(acc / m, m, source_checkpoint_id)


def fisher_sidecar_path(checkpoint_path) -> Path:
    return Path(str(checkpoint_path) + ".fisher")


def save_fisher(fd: FisherDiag, path):
    """Sidecar format: magic "SPFI", m as u32, little-endian float64 entries."""
    with open(path, "wb") as f:
        f.write(FISHER_MAGIC)
        f.write(struct.pack("<I", fd.sample_count))
        f.write(np.ascontiguousarray(fd.values, dtype="<f8").tobytes())


def load_fisher(path, source_checkpoint_id: str = "") -> FisherDiag:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != FISHER_MAGIC:
        raise ValueError(f"not a Fisher sidecar file: {path}")
    (m,) = struct.unpack("<I", raw[4:8])
    values = np.frombuffer(raw, dtype="<f8", offset=8).copy()
    return FisherDiag(values, m, source_checkpoint_id)
