"""Two-phase autointerp: explain each latent, then score detection accuracy."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from ..activations import ActivationDataset
from ..metrics.core import CHUNK
from .examples import SequenceActivations, build_detection_set, collect_examples
from .judges import JudgeError

log = logging.getLogger(__name__)

DEFAULT_SAMPLE = 1000


def latent_activations(params, dataset: ActivationDataset, latents=None, chunk: int = CHUNK) -> np.ndarray:
    """Activations of the chosen latents on every row; masked rows read as 0."""
    cols = []
    for i in range(0, dataset.n_rows, chunk):
        h = params.encode(dataset.data[i : i + chunk])
        cols.append(h if latents is None else h[:, latents])
    H = np.concatenate(cols).astype(np.float64)
    if dataset.mask is not None:
        H[~dataset.mask] = 0.0
    return H


def _token_strings(dataset: ActivationDataset) -> list[str]:
    if dataset.token_ids is None or dataset.vocab is None:
        raise ValueError("autointerp needs token ids and a vocab")
    return [dataset.vocab[t] for t in dataset.token_ids]


def _bounds(dataset: ActivationDataset) -> list[tuple[int, int]]:
    if dataset.seq_lens is None:
        return [(i, i + 1) for i in range(dataset.n_rows)]
    return dataset.sequence_bounds()


def score_latent(judge, sa: SequenceActivations, latent: int, seed: int, n_top: int, n_sampled: int) -> dict:
    examples = collect_examples(sa, latent, n_top, n_sampled, seed)
    test = build_detection_set(sa, latent, exclude=examples.used, seed=seed + 1)
    explanation = judge.propose(examples.formatted())
    if hasattr(judge, "prepare"):
        judge.prepare(test)
    preds = judge.detect(explanation, [e.plain() for e in test.items])
    if len(preds) != len(test.items):
        raise JudgeError(f"judge returned {len(preds)} predictions for {len(test.items)} sequences")
    flags = test.flags
    acc = float(np.mean([bool(p) == f for p, f in zip(preds, flags)]))
    return {"latent": latent, "status": "ok", "explanation": explanation, "accuracy": acc,
            "predictions": [bool(p) for p in preds], "flags": flags, "sources": test.sources,
            "composition": test.composition, "degraded": test.degraded}


def run_autointerp(params, dataset: ActivationDataset, judge, n_latents: Optional[int] = None, seed: int = 0,
                   n_top: int = 10, n_sampled: int = 5, max_concurrency: int = 1) -> dict:
    """Mean detection accuracy over a seeded sample of non-dead latents.

    Latents whose judge calls fail are recorded with status "failed" and
    left out of the mean.
    """
    tokens = _token_strings(dataset)
    bounds = _bounds(dataset)
    H = latent_activations(params, dataset)
    alive = np.flatnonzero((H > 0).any(0))
    if alive.size == 0:
        raise ValueError("no non-dead latents")
    n = min(DEFAULT_SAMPLE if n_latents is None else n_latents, alive.size)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(alive, n, replace=False))

    def one(j: int) -> dict:
        sa = SequenceActivations(tokens, H[:, j], bounds)
        try:
            return score_latent(judge, sa, int(j), seed + int(j), n_top, n_sampled)
        except JudgeError as e:
            log.warning("latent %d failed: %s", j, e)
            return {"latent": int(j), "status": "failed", "error": str(e)}

    if max_concurrency > 1:
        with ThreadPoolExecutor(max_concurrency) as pool:
            records = list(pool.map(one, chosen))
    else:
        records = [one(j) for j in chosen]
    records.sort(key=lambda r: r["latent"])
    ok = [r["accuracy"] for r in records if r["status"] == "ok"]
    return {
        "mean_accuracy": float(np.mean(ok)) if ok else float("nan"),
        "n_scored": len(ok),
        "n_failed": len(records) - len(ok),
        "n_alive": int(alive.size),
        "importance_weighting": "max_activation",
        "prompt_version": getattr(judge, "prompt_version", None),
        "latents": records,
    }
