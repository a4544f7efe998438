"""Ablation metrics: spurious correlation removal and targeted probe perturbation."""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

from ..activations import ActivationDataset
from .core import encode_rows
from .probing import ProbeParams, ProbeTrainConfig, split_80_20, train_probe

log = logging.getLogger(__name__)

ABLATION_KS = (5, 10, 20, 50, 100, 500)


class DegenerateTask(ValueError):
    pass


def latent_attribution(probe: ProbeParams, params, x: np.ndarray, h: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean contribution of each latent to the probe logit:
    mean_rows(h_j) * (w . W_D[:, j])."""
    if h is None:
        h = encode_rows(params, np.asarray(x))
    return h.mean(0) * (probe.w @ np.asarray(params.W_D, np.float64))


def ablate_reconstruct(params, x: np.ndarray, latents, h: Optional[np.ndarray] = None) -> np.ndarray:
    """Remove the chosen latents' decoder contributions from x, keeping the
    reconstruction error: x - sum_j h_j W_D[:, j]."""
    x = np.asarray(x, np.float64)
    latents = np.asarray(list(latents), dtype=np.int64)
    if latents.size == 0:
        return x.copy()
    if h is None:
        h = encode_rows(params, x)
    W = np.asarray(params.W_D, np.float64)[:, latents]
    return x - h[:, latents] @ W.T


def _top_abs(scores: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-np.abs(scores), kind="stable")[:k]


def _top_signed(scores: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-scores, kind="stable")[:k]


def shift_score(a_abl: float, a_base: float, a_oracle: float) -> float:
    if a_oracle == a_base:
        raise DegenerateTask("degenerate task: oracle accuracy equals the biased probe's accuracy")
    return (a_abl - a_base) / (a_oracle - a_base)


def _combo_indices(cls, spur, class_pair, spurious_pair, rng):
    """Row indices for each (class value, attribute value) combination,
    trimmed to a common size. Keys are label values visited in sorted order,
    so the draw does not depend on which value is called positive."""
    combos = {}
    for c in sorted(class_pair):
        for s in sorted(spurious_pair):
            combos[(c, s)] = np.flatnonzero((cls == c) & (spur == s))
    n = min(len(v) for v in combos.values())
    if n < 10:
        raise DegenerateTask(f"degenerate task: only {n} rows in the rarest class/attribute combination")
    return {key: rng.permutation(v)[:n] for key, v in combos.items()}, n


def scr_eval(
    params,
    dataset: ActivationDataset,
    class_column: str,
    spurious_column: str,
    class_pair: Sequence[int] = (0, 1),
    spurious_pair: Sequence[int] = (0, 1),
    ks: Sequence[int] = ABLATION_KS,
    config: Optional[ProbeTrainConfig] = None,
    seed: int = 0,
) -> dict:
    """S_SHIFT per ablation size k.

    The class probe is trained on a biased set holding only the aligned
    (class_pair[i], spurious_pair[i]) combinations, half of each. Latents
    are ranked by |attribution| to a spurious-attribute probe and ablated
    from held-out rows of a balanced set with all four combinations.
    """
    config = config or ProbeTrainConfig(seed=seed)
    rng = np.random.default_rng(seed)
    idx = dataset.usable_index()
    x_all = dataset.data[idx].astype(np.float64)
    cls = dataset.labels[class_column][idx]
    spur = dataset.labels[spurious_column][idx]
    combos, n = _combo_indices(cls, spur, class_pair, spurious_pair, rng)

    # half of each combination feeds the biased set, the rest the balanced set
    half = n // 2
    aligned = {(class_pair[0], spurious_pair[0]), (class_pair[1], spurious_pair[1])}
    biased = np.concatenate([v[:half] for key, v in combos.items() if key in aligned])
    balanced = np.concatenate([v[half:] for v in combos.values()])
    balanced = balanced[rng.permutation(len(balanced))]
    tr, te = split_80_20(len(balanced))

    is_cls = lambda rows: cls[rows] == class_pair[1]
    is_spur = lambda rows: spur[rows] == spurious_pair[1]
    biased = biased[rng.permutation(len(biased))]
    c_b = train_probe(x_all[biased], is_cls(biased), config)
    oracle = train_probe(x_all[balanced[tr]], is_cls(balanced[tr]), config)
    spurious = train_probe(x_all[balanced[tr]], is_spur(balanced[tr]), config)

    test = balanced[te]
    x_test, y_test = x_all[test], is_cls(test)
    a_base = c_b.accuracy(x_test, y_test)
    a_oracle = oracle.accuracy(x_test, y_test)
    attr = latent_attribution(spurious, params, x_all[balanced[tr]])
    h_test = encode_rows(params, x_test)
    out = {"a_base": a_base, "a_oracle": a_oracle, "n_biased": len(biased), "n_test": len(test), "per_k": {}}
    for k in ks:
        sel = _top_abs(attr, min(k, len(attr)))
        a_abl = c_b.accuracy(ablate_reconstruct(params, x_test, sel, h_test), y_test)
        out["per_k"][k] = {"a_abl": a_abl, "s_shift": shift_score(a_abl, a_base, a_oracle), "latents": sel.tolist()}
    return out


def tpp_score(base: np.ndarray, ablated: np.ndarray) -> dict:
    """Score from per-class baseline accuracies A_j and the matrix A[i, j]
    (probe j after ablating class i's latents).

    ``score`` is mean_{i=j}(A_j - A_ij) - mean_{i!=j}(A_j - A_ij): positive
    when ablations hit their own class. ``printed_form`` is its negation.
    """
    base = np.asarray(base, np.float64)
    A = np.asarray(ablated, np.float64)
    m = len(base)
    if A.shape != (m, m) or m < 2:
        raise ValueError("need at least two classes and an m x m accuracy matrix")
    drop = base[None, :] - A
    diag = float(np.mean(np.diag(drop)))
    off = float(drop[~np.eye(m, dtype=bool)].mean())
    score = diag - off
    return {"score": score, "printed_form": -score, "diagonal_drop": diag, "off_diagonal_drop": off}


def tpp_eval(
    params,
    dataset: ActivationDataset,
    column: str,
    classes: Optional[Sequence[int]] = None,
    ks: Sequence[int] = ABLATION_KS,
    config: Optional[ProbeTrainConfig] = None,
    seed: int = 0,
    min_rows: int = 20,
) -> dict:
    config = config or ProbeTrainConfig(seed=seed)
    rng = np.random.default_rng(seed)
    idx = dataset.usable_index()
    x_all = dataset.data[idx].astype(np.float64)
    labels = dataset.labels[column][idx]
    classes = sorted(set(labels.tolist())) if classes is None else list(classes)
    kept, probes, tests, attrs = [], [], [], []
    for c in classes:
        pos = np.flatnonzero(labels == c)
        neg = np.flatnonzero(labels != c)
        n = min(len(pos), len(neg))
        if n < min_rows:
            log.warning("class %s of %r has %d rows; skipped", c, column, n)
            continue
        rows = np.concatenate([rng.choice(pos, n, replace=False), rng.choice(neg, n, replace=False)])
        rows = rows[rng.permutation(len(rows))]
        tr, te = split_80_20(len(rows))
        probe = train_probe(x_all[rows[tr]], labels[rows[tr]] == c, config)
        kept.append(c)
        probes.append(probe)
        tests.append((x_all[rows[te]], labels[rows[te]] == c))
        attrs.append(latent_attribution(probe, params, x_all[rows[tr]]))
    if len(kept) < 2:
        raise DegenerateTask("degenerate task: fewer than two classes with enough rows")
    base = np.array([p.accuracy(x, y) for p, (x, y) in zip(probes, tests)])
    h_tests = [encode_rows(params, x) for x, _ in tests]
    out = {"classes": kept, "base_accuracy": base.tolist(), "per_k": {}}
    m = len(kept)
    for k in ks:
        A = np.zeros((m, m))
        sels = [_top_signed(a, min(k, len(a))) for a in attrs]
        for i in range(m):
            for j in range(m):
                x, y = tests[j]
                A[i, j] = probes[j].accuracy(ablate_reconstruct(params, x, sels[i], h_tests[j]), y)
        res = tpp_score(base, A)
        res["accuracy_matrix"] = A.tolist()
        out["per_k"][k] = res
    return out
