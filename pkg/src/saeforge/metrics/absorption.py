"""Feature absorption: how much of a concept's probe projection is carried
by latents other than the ones a sparse probe picks for it."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..activations import ActivationDataset
from .core import encode_rows
from .probing import ProbeTrainConfig, balanced_binary, f1_score, select_topk_mean_diff, split_80_20, train_probe

log = logging.getLogger(__name__)


@dataclass
class AbsorptionConfig:
    tau_fs: float = 0.03  # F1 gain needed to add a latent to the main set
    tau_pa: float = 0.0  # share of the projection absorbers must reach
    tau_ps: float = -1.0  # minimum cosine of an absorber with the probe
    a_max: Optional[int] = None  # absorbers considered per row; None = all latents
    max_k: int = 10
    probe: ProbeTrainConfig = field(default_factory=ProbeTrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.tau_fs < 0 or self.max_k < 1:
            raise ValueError("need tau_fs >= 0 and max_k >= 1")


def main_latents(h_train, y_train, h_test, y_test, config: AbsorptionConfig) -> tuple[list[int], list[float]]:
    """Grow k-sparse probes up to max_k; latent n+1 joins the main set when
    the (n+1)-sparse probe beats the n-sparse one by more than tau_fs in F1."""
    order = select_topk_mean_diff(h_train, y_train, min(config.max_k, h_train.shape[1]))
    f1 = []
    for k in range(1, len(order) + 1):
        sel = order[:k]
        probe = train_probe(h_train[:, sel], y_train, config.probe)
        f1.append(f1_score(probe.predict(h_test[:, sel]), y_test))
    main = [int(order[0])]
    for n in range(1, len(order)):
        if f1[n] - f1[n - 1] > config.tau_fs:
            main.append(int(order[n]))
    return main, f1


def row_absorption(contrib: np.ndarray, total: np.ndarray, main: Sequence[int], cosines: np.ndarray,
                   config: AbsorptionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-row absorption scores and the mask of rows meeting the main-set
    shortfall and absorber conditions.

    ``contrib[r, i]`` is latent i's projection onto the probe direction on
    row r and ``total[r]`` the projection of the input itself.
    """
    n, F = contrib.shape
    main = np.asarray(main, dtype=np.int64)
    main_sum = contrib[:, main].sum(1)
    eligible = np.ones(F, bool)
    eligible[main] = False
    eligible &= cosines >= config.tau_ps
    cand = np.where(eligible[None, :] & (contrib > 0), contrib, 0.0)
    a_max = F if config.a_max is None else config.a_max
    if a_max < F:
        cand = -np.sort(-cand, axis=1)[:, :a_max]
    abs_sum = cand.sum(1)
    has_abs = (cand > 0).any(1)
    ok = (main_sum < total) & has_abs & (abs_sum >= config.tau_pa * total)
    denom = abs_sum + main_sum
    score = np.where(ok & (denom > 0), abs_sum / np.where(denom > 0, denom, 1.0), 0.0)
    return score, ok


def absorption_eval(
    params,
    dataset: ActivationDataset,
    column: str,
    classes: Optional[Sequence[int]] = None,
    config: Optional[AbsorptionConfig] = None,
) -> dict:
    """Mean absorption over probe-correct positive test rows, per class and
    overall; ``score`` is its complement (higher = less absorption)."""
    config = config or AbsorptionConfig()
    rng = np.random.default_rng(config.seed)
    idx = dataset.usable_index()
    x_all = dataset.data[idx].astype(np.float64)
    labels = dataset.labels[column][idx]
    classes = sorted(set(labels.tolist())) if classes is None else list(classes)
    W_D = np.asarray(params.W_D, np.float64)
    b_D = np.asarray(params.b_D, np.float64)
    col_norm = np.linalg.norm(W_D, axis=0)
    per_class = {}
    for c in classes:
        rows, y = balanced_binary(labels, c, rng)
        tr, te = split_80_20(len(rows))
        x_tr, x_te, y_tr, y_te = x_all[rows[tr]], x_all[rows[te]], y[tr], y[te]
        probe = train_probe(x_tr, y_tr, config.probe)
        h_tr, h_te = encode_rows(params, x_tr), encode_rows(params, x_te)
        main, f1 = main_latents(h_tr, y_tr, h_te, y_te, config)

        keep = y_te & probe.predict(x_te)
        if not keep.any():
            log.warning("class %s has no probe-correct positive test rows; excluded", c)
            continue
        p = probe.direction
        proj = W_D.T @ p
        contrib = h_te[keep] * proj
        total = (x_te[keep] - b_D) @ p
        cos = proj / np.where(col_norm == 0, 1.0, col_norm)
        score, ok = row_absorption(contrib, total, main, cos, config)
        per_class[c] = {
            "mean_absorption": float(score.mean()),
            "mean_absorption_flagged": float(score[ok].mean()) if ok.any() else 0.0,
            "fraction_flagged": float(ok.mean()),
            "n_rows": int(keep.sum()),
            "main_latents": main,
            "f1_by_k": f1,
        }
    if not per_class:
        raise ValueError("no class had probe-correct positive test rows")
    mean = float(np.mean([v["mean_absorption"] for v in per_class.values()]))
    return {"mean_absorption": mean, "score": 1.0 - mean, "per_class": per_class}
