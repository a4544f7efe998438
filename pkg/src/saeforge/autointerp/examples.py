"""Example selection and detection test sets for automated interpretability."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

N_RANDOM, N_MAX, N_WEIGHTED = 10, 2, 2


class DeadLatent(ValueError):
    """The latent never fires on the dataset; callers skip it."""


def format_highlighted(tokens: Sequence[str], acts: Sequence[float]) -> str:
    if len(tokens) != len(acts):
        raise ValueError(f"{len(tokens)} tokens but {len(acts)} activations")
    return " ".join(f"<<{t}>>" if a > 0 else t for t, a in zip(tokens, acts))


@dataclass
class SequenceExample:
    seq: int
    tokens: list[str]
    acts: np.ndarray

    @property
    def fires(self) -> bool:
        return bool(np.any(self.acts > 0))

    def highlighted(self) -> str:
        return format_highlighted(self.tokens, self.acts)

    def plain(self) -> str:
        return " ".join(self.tokens)


@dataclass
class LatentExampleSet:
    latent: int
    top_sequences: list[SequenceExample]
    sampled_sequences: list[SequenceExample]

    @property
    def used(self) -> set[int]:
        return {e.seq for e in self.top_sequences + self.sampled_sequences}

    def formatted(self) -> list[str]:
        return [e.highlighted() for e in self.top_sequences + self.sampled_sequences]


@dataclass
class DetectionTestSet:
    latent: int
    items: list[SequenceExample]  # shuffled
    sources: list[str]  # "random" | "max" | "weighted" per item
    degraded: bool = False
    composition: dict = field(default_factory=dict)

    @property
    def flags(self) -> list[bool]:
        return [e.fires for e in self.items]


class SequenceActivations:
    """Per-token activations of a single latent, split by sequence."""

    def __init__(self, tokens: list[str], acts: np.ndarray, bounds: list[tuple[int, int]]):
        self.tokens = tokens
        self.acts = np.asarray(acts, np.float64)
        self.bounds = bounds
        self.seq_max = np.array([self.acts[s:e].max() if e > s else 0.0 for s, e in bounds])

    def example(self, seq: int) -> SequenceExample:
        s, e = self.bounds[seq]
        return SequenceExample(seq, self.tokens[s:e], self.acts[s:e])


def _proportional(weights: np.ndarray, pool: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw up to n of ``pool`` without replacement, probability proportional
    to weight; zero-weight entries are never drawn."""
    pool = pool[weights[pool] > 0]
    n = min(n, len(pool))
    if n == 0:
        return pool[:0]
    p = weights[pool] / weights[pool].sum()
    return rng.choice(pool, n, replace=False, p=p)


def collect_examples(sa: SequenceActivations, latent: int, n_top: int = 10, n_sampled: int = 5,
                     seed: int = 0) -> LatentExampleSet:
    """Top sequences by max activation (ties to lower index) plus sequences
    sampled with probability proportional to max activation from the rest."""
    if not np.any(sa.seq_max > 0):
        raise DeadLatent(f"latent {latent} never fires")
    order = np.lexsort((np.arange(len(sa.seq_max)), -sa.seq_max))
    top = order[:n_top]
    top = top[sa.seq_max[top] > 0]
    rest = np.setdiff1d(np.arange(len(sa.seq_max)), top)
    rng = np.random.default_rng(seed)
    sampled = _proportional(sa.seq_max, rest, n_sampled, rng)
    return LatentExampleSet(latent, [sa.example(int(i)) for i in top], [sa.example(int(i)) for i in sampled])


def build_detection_set(sa: SequenceActivations, latent: int, exclude: set[int] = frozenset(),
                        seed: int = 0) -> DetectionTestSet:
    """10 random / 2 max-activating / 2 importance-weighted sequences, drawn
    from sequences not in ``exclude``.

    Random sequences come from those where the latent never fires; if there
    are too few, the shortfall is filled from any unused sequence and the
    set is marked degraded. Importance weights are max activations.
    """
    rng = np.random.default_rng(seed)
    n = len(sa.seq_max)
    avail = np.setdiff1d(np.arange(n), np.fromiter(exclude, np.int64, len(exclude)))
    firing = avail[sa.seq_max[avail] > 0]
    order = firing[np.lexsort((firing, -sa.seq_max[firing]))]
    max_seqs = order[:N_MAX]
    weighted = _proportional(sa.seq_max, np.setdiff1d(firing, max_seqs), N_WEIGHTED, rng)
    silent = avail[sa.seq_max[avail] == 0]
    random = rng.choice(silent, min(N_RANDOM, len(silent)), replace=False)
    degraded = len(max_seqs) < N_MAX or len(weighted) < N_WEIGHTED or len(random) < N_RANDOM
    if len(random) < N_RANDOM:
        spare = np.setdiff1d(avail, np.concatenate([max_seqs, weighted, random]))
        fill = rng.choice(spare, min(N_RANDOM - len(random), len(spare)), replace=False)
        random = np.concatenate([random, fill])
    picks = [(int(i), "random") for i in random] + [(int(i), "max") for i in max_seqs] + \
            [(int(i), "weighted") for i in weighted]
    perm = rng.permutation(len(picks))
    picks = [picks[i] for i in perm]
    return DetectionTestSet(
        latent,
        [sa.example(i) for i, _ in picks],
        [src for _, src in picks],
        degraded=bool(degraded),
        composition={"random": int(len(random)), "max": int(len(max_seqs)), "weighted": int(len(weighted))},
    )
