"""Logistic probes, sequence pooling and k-sparse probing."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from ..activations import ActivationDataset

log = logging.getLogger(__name__)


@dataclass
class ProbeTrainConfig:
    batch_size: int = 16
    epochs: int = 20
    lr: float = 1e-3
    l1_penalty: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or not self.lr > 0 or self.l1_penalty < 0:
            raise ValueError(f"invalid probe config {asdict(self)}")


@dataclass
class ProbeParams:
    w: np.ndarray
    b: float

    def logits(self, reps: np.ndarray) -> np.ndarray:
        return np.asarray(reps, np.float64) @ self.w + self.b

    def predict(self, reps: np.ndarray) -> np.ndarray:
        return self.logits(reps) > 0

    def accuracy(self, reps: np.ndarray, targets: np.ndarray) -> float:
        return float(np.mean(self.predict(reps) == np.asarray(targets, bool)))

    @property
    def direction(self) -> np.ndarray:
        return self.w / np.linalg.norm(self.w)


class SingleClass(ValueError):
    pass


def train_probe(reps: np.ndarray, targets: np.ndarray, config: Optional[ProbeTrainConfig] = None) -> ProbeParams:
    """Binary logistic regression by plain minibatch gradient descent.

    The L1 term enters through its subgradient ``sign(w)``; the bias is not
    penalised. Batches are reshuffled every epoch from ``config.seed``.
    Inputs are centred while training and the mean is folded back into the
    bias, so no input direction has to stand in for an unlearned offset.
    """
    config = config or ProbeTrainConfig()
    X = np.asarray(reps, np.float64)
    y = np.asarray(targets, bool).astype(np.float64)
    if y.size == 0 or y.min() == y.max():
        raise SingleClass("probe training needs both classes")
    mu = X.mean(0)
    X = X - mu
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    rng = np.random.default_rng(config.seed)
    bs = config.batch_size
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for i in range(0, n, bs):
            idx = order[i : i + bs]
            err = expit(X[idx] @ w + b) - y[idx]
            gw = X[idx].T @ err / len(idx) + config.l1_penalty * np.sign(w)
            w -= config.lr * gw
            b -= config.lr * float(err.mean())
    return ProbeParams(w, b - float(w @ mu))


def f1_score(pred: np.ndarray, targets: np.ndarray) -> float:
    pred, t = np.asarray(pred, bool), np.asarray(targets, bool)
    tp = np.sum(pred & t)
    denom = 2 * tp + np.sum(pred & ~t) + np.sum(~pred & t)
    return float(2 * tp / denom) if denom else 0.0


def mean_pool(dataset: ActivationDataset, seq: int, values: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
    """Mean of the unmasked rows of sequence ``seq``; None if all are masked.

    ``values`` may replace the raw activations with any per-row array
    (for example encoded latents).
    """
    start, end = dataset.sequence_bounds()[seq]
    vals = dataset.data if values is None else values
    keep = np.arange(start, end)
    if dataset.mask is not None:
        keep = keep[dataset.mask[start:end]]
    if keep.size == 0:
        log.warning("sequence %d is fully masked; skipped", seq)
        return None
    return np.asarray(vals[keep], np.float64).mean(0)


def pool_sequences(dataset: ActivationDataset, values: np.ndarray, labels: Optional[np.ndarray] = None):
    """Pool ``values`` (one per dataset row) by sequence.

    Without sequence structure each row is its own sequence. Returns the
    pooled matrix, the kept sequence ids and, when ``labels`` is given,
    the label of each kept sequence's first usable row.
    """
    values = np.asarray(values, np.float64)
    n = dataset.n_rows
    mask = np.ones(n, bool) if dataset.mask is None else dataset.mask
    lens = np.ones(n, np.int64) if dataset.seq_lens is None else dataset.seq_lens
    seq_of_row = np.repeat(np.arange(len(lens)), lens)
    rows = np.flatnonzero(mask)
    seqs, first, counts = np.unique(seq_of_row[rows], return_index=True, return_counts=True)
    if len(seqs) < len(lens):
        log.warning("%d fully masked sequences skipped", len(lens) - len(seqs))
    sums = np.zeros((len(seqs), values.shape[1]))
    np.add.at(sums, np.searchsorted(seqs, seq_of_row[rows]), values[rows])
    pooled = sums / counts[:, None]
    seq_labels = None if labels is None else np.asarray(labels)[rows[first]]
    return pooled, seqs, seq_labels


def select_topk_mean_diff(h: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k latents with the largest positive-minus-negative mean."""
    labels = np.asarray(labels, bool)
    if labels.all() or not labels.any():
        raise SingleClass("mean difference needs both classes")
    diff = h[labels].mean(0) - h[~labels].mean(0)
    return np.argsort(-diff, kind="stable")[:k]


def balanced_binary(labels: np.ndarray, positive, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Equal numbers of positive and negative indices (one-vs-rest), shuffled."""
    pos = np.flatnonzero(labels == positive)
    neg = np.flatnonzero(labels != positive)
    n = min(len(pos), len(neg))
    idx = np.concatenate([rng.choice(pos, n, replace=False), rng.choice(neg, n, replace=False)])
    idx = idx[rng.permutation(len(idx))]
    return idx, labels[idx] == positive


def split_80_20(n: int) -> tuple[slice, slice]:
    cut = int(round(0.8 * n))
    return slice(0, cut), slice(cut, n)


def sparse_probing_eval(
    params,
    dataset: ActivationDataset,
    column: str,
    ks: Sequence[int] = (1, 2, 5),
    classes: Optional[Sequence[int]] = None,
    config: Optional[ProbeTrainConfig] = None,
    seed: int = 0,
    shuffle_labels: bool = False,
) -> dict:
    """Held-out accuracy of probes on the top-k mean-difference latents,
    one-vs-rest per class on balanced subsets, macro-averaged."""
    from .core import encode_rows

    config = config or ProbeTrainConfig(seed=seed)
    h = encode_rows(params, dataset.data)
    pooled, _, labels = pool_sequences(dataset, h, dataset.labels[column])
    rng = np.random.default_rng(seed)
    if shuffle_labels:
        labels = labels[rng.permutation(len(labels))]
    classes = sorted(set(labels.tolist())) if classes is None else list(classes)
    per_class: dict = {}
    for c in classes:
        idx, y = balanced_binary(labels, c, rng)
        tr, te = split_80_20(len(idx))
        if len(set(y[tr].tolist())) < 2 or len(set(y[te].tolist())) < 2:
            raise SingleClass(f"class {c} absent from a split of column {column!r}")
        H = pooled[idx]
        per_class[c] = {}
        for k in ks:
            sel = select_topk_mean_diff(H[tr], y[tr], min(k, H.shape[1]))
            probe = train_probe(H[tr][:, sel], y[tr], config)
            per_class[c][k] = {"accuracy": probe.accuracy(H[te][:, sel], y[te]), "latents": sel.tolist(),
                               "n_test": int(te.stop - te.start)}
    acc = {k: float(np.mean([per_class[c][k]["accuracy"] for c in classes])) for k in ks}
    return {"accuracy": acc, "per_class": per_class}
