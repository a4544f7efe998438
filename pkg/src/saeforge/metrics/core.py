"""Unsupervised sparsity and fidelity metrics."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
from scipy.special import log_softmax

from ..activations import ActivationDataset

Readout = Callable[[np.ndarray], np.ndarray]
HIGH_FREQ = 0.01
CHUNK = 8192


class UninformativeReadout(ValueError):
    pass


def _rows(data) -> np.ndarray:
    if isinstance(data, ActivationDataset):
        rows = data.usable_rows()
    else:
        rows = np.asarray(data)
    if rows.shape[0] == 0:
        raise ValueError("no usable rows")
    return rows


def encode_rows(params, rows: np.ndarray, chunk: int = CHUNK) -> np.ndarray:
    return np.concatenate([params.encode(rows[i : i + chunk]) for i in range(0, rows.shape[0], chunk)])


def reconstruct_rows(params, rows: np.ndarray, chunk: int = CHUNK) -> np.ndarray:
    out = [params.decode(params.encode(rows[i : i + chunk])) for i in range(0, rows.shape[0], chunk)]
    return np.concatenate(out)


def max_latent_cosine(W_D: np.ndarray) -> float:
    """Mean over latents of the largest cosine to any other decoder column."""
    norms = np.linalg.norm(W_D, axis=0)
    U = W_D / np.where(norms == 0, 1.0, norms)
    C = U.T @ U
    np.fill_diagonal(C, -np.inf)
    if C.shape[0] < 2:
        return 0.0
    return float(np.mean(C.max(1)))


def core_stats(params, dataset) -> dict:
    x = _rows(dataset).astype(np.float64)
    h = encode_rows(params, x)
    x_hat = h @ np.asarray(params.W_D, np.float64).T + np.asarray(params.b_D, np.float64)
    err = np.sum((x - x_hat) ** 2, axis=1)
    var = np.sum((x - x.mean(0)) ** 2, axis=1).mean()
    mse = float(err.mean())
    freq = np.mean(h != 0, axis=0)
    return {
        "l0_mean": float(np.mean(np.count_nonzero(h, axis=1))),
        "mse": mse,
        "fvu": mse / var if var > 0 else float("nan"),
        "max_latent_cosine": max_latent_cosine(np.asarray(params.W_D, np.float64)),
        "high_freq_fraction": float(np.mean(freq > HIGH_FREQ)),
        "dead_fraction": float(np.mean(freq == 0)),
    }


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    lp = log_softmax(logits, axis=1)
    return float(-np.mean(lp[np.arange(len(targets)), targets]))


def loss_recovered_from(x: np.ndarray, x_hat: np.ndarray, readout: Readout, targets: np.ndarray) -> dict:
    h_orig = cross_entropy(readout(x), targets)
    h_sae = cross_entropy(readout(x_hat), targets)
    h_zero = cross_entropy(readout(np.zeros_like(x)), targets)
    if h_orig == h_zero:
        raise UninformativeReadout("uninformative readout: zero-ablated loss equals the clean loss")
    return {"score": (h_sae - h_zero) / (h_orig - h_zero), "ce_orig": h_orig, "ce_sae": h_sae, "ce_zero": h_zero}


def _targets(dataset: ActivationDataset, column: str) -> np.ndarray:
    if column not in dataset.labels:
        raise ValueError(f"dataset has no {column!r} target column")
    return dataset.labels[column][dataset.usable_index()]


def loss_recovered(params, dataset: ActivationDataset, readout: Readout, target_column: str = "next_token") -> dict:
    x = _rows(dataset).astype(np.float64)
    return loss_recovered_from(x, reconstruct_rows(params, x), readout, _targets(dataset, target_column))


def mean_kl(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Row-averaged KL(P || Q) for softmax distributions."""
    lp, lq = log_softmax(p_logits, axis=1), log_softmax(q_logits, axis=1)
    return float(np.mean(np.sum(np.exp(lp) * (lp - lq), axis=1)))


def kl_score_from(x: np.ndarray, x_hat: np.ndarray, readout: Readout) -> dict:
    orig = readout(x)
    kl_abl = mean_kl(readout(np.zeros_like(x)), orig)
    kl_sae = mean_kl(readout(x_hat), orig)
    if kl_abl == 0:
        raise UninformativeReadout("uninformative readout: zero ablation leaves the output distribution unchanged")
    return {"score": (kl_abl - kl_sae) / kl_abl, "kl_sae": kl_sae, "kl_zero": kl_abl}


def kl_score(params, dataset, readout: Readout) -> dict:
    x = _rows(dataset).astype(np.float64)
    return kl_score_from(x, reconstruct_rows(params, x), readout)


def recon_bias_gamma_from(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Scale gamma minimising mean ||x_hat / gamma - x||^2; below 1 means shrinkage."""
    num = float(np.mean(np.sum(x_hat * x_hat, axis=1)))
    den = float(np.mean(np.sum(x_hat * x, axis=1)))
    if den == 0:
        raise ZeroDivisionError("reconstructions are orthogonal to the inputs on average")
    return num / den


def recon_bias_gamma(params, dataset) -> float:
    x = _rows(dataset).astype(np.float64)
    return recon_bias_gamma_from(x, reconstruct_rows(params, x))


def core_metrics(params, dataset: ActivationDataset, readout: Optional[Readout] = None,
                 target_column: str = "next_token") -> dict:
    """Full core report; readout-based scores only when a readout is given."""
    out = core_stats(params, dataset)
    x = _rows(dataset).astype(np.float64)
    x_hat = reconstruct_rows(params, x)
    out["recon_bias_gamma"] = recon_bias_gamma_from(x, x_hat)
    if readout is not None:
        out["kl_score"] = kl_score_from(x, x_hat, readout)["score"]
        if target_column in dataset.labels:
            out["loss_recovered"] = loss_recovered_from(x, x_hat, readout, _targets(dataset, target_column))["score"]
    return out


def greedy_match(C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-to-one matching taking the largest remaining entry first.

    Returns (row indices, column indices) of the matched pairs; ties are
    broken by lower flat index.
    """
    order = np.argsort(-C.ravel(), kind="stable")
    used_r = np.zeros(C.shape[0], bool)
    used_c = np.zeros(C.shape[1], bool)
    rows, cols = [], []
    for flat in order:
        r, c = divmod(int(flat), C.shape[1])
        if used_r[r] or used_c[c]:
            continue
        used_r[r] = used_c[c] = True
        rows.append(r)
        cols.append(c)
        if len(rows) == min(C.shape):
            break
    return np.array(rows), np.array(cols)


def dictionary_recovery(W_D: np.ndarray, D_true: np.ndarray) -> dict:
    """Match each true direction (rows of ``D_true``) to a distinct learned
    decoder column and report the mean matched cosine similarity."""
    U = W_D / np.linalg.norm(W_D, axis=0).clip(1e-12)
    T = D_true / np.linalg.norm(D_true, axis=1, keepdims=True)
    C = T @ U
    r, c = greedy_match(C)
    sims = C[r, c]
    return {
        "mean_matched_cosine": float(sims.mean()),
        "mean_max_cosine": float(C.max(1).mean()),
        "fraction_above_0.9": float(np.mean(sims > 0.9)),
        "matched": sims,
    }
