"""Synthetic sparse generative model used as ground truth.

Each row fires features independently, closes the firing pattern under the
configured hierarchy (child implies parent), draws magnitudes and emits
``x = bias + coeffs @ D_true + noise``. Label columns, token ids and
next-token targets are derived from the same draw so that every supervised
metric has a known right answer.
"""

from __future__ import annotations

import graphlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .activations import ActivationDataset
from .tensorfile import load_tensors, save_tensors

CHUNK_ROWS = 4096


class CyclicHierarchy(ValueError):
    pass


@dataclass
class ConceptSpec:
    features: list[int]
    firing_prob: Optional[float] = None


@dataclass
class SpuriousSpec:
    """Attribute read off like a concept, but its directions are generic
    (not part of the orthogonal concept block)."""

    features: list[int]
    firing_prob: Optional[float] = None


def _default_concepts() -> dict[str, ConceptSpec]:
    return {
        "class": ConceptSpec([0, 1], 0.25),
        "topic": ConceptSpec([2, 3, 4, 5], 0.15),
    }


def _default_spurious() -> dict[str, SpuriousSpec]:
    return {"gender": SpuriousSpec([6, 7], 0.15)}


@dataclass
class GeneratorConfig:
    d_model: int = 64
    n_features: int = 128
    # background features; indicators carry their own probabilities
    firing_prob: float = 4.3 / 120
    firing_probs: Optional[list[float]] = None
    magnitude: tuple[float, float] = (1.0, 2.0)
    noise_sigma: float = 0.01
    bias_scale: float = 0.1
    readout_scale: float = 4.0
    readout_bias_scale: float = 0.5
    label_noise: float = 0.1
    seq_len: int = 1
    concepts: dict[str, ConceptSpec] = field(default_factory=_default_concepts)
    spurious: dict[str, SpuriousSpec] = field(default_factory=_default_spurious)
    hierarchy: list[tuple[int, int]] = field(default_factory=list)
    token_features: Optional[list[int]] = None
    # concept indicators get orthonormal directions, orthogonal to every other feature
    orthogonal_concepts: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "concepts" in d:
            d["concepts"] = {k: ConceptSpec(**v) for k, v in d["concepts"].items()}
        if "spurious" in d:
            d["spurious"] = {k: SpuriousSpec(**v) for k, v in d["spurious"].items()}
        if "hierarchy" in d:
            d["hierarchy"] = [tuple(e) for e in d["hierarchy"]]
        if "magnitude" in d:
            d["magnitude"] = tuple(d["magnitude"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruthModel:
    D_true: np.ndarray  # (F, d), unit rows
    bias: np.ndarray
    firing_probs: np.ndarray
    magnitude: np.ndarray  # (F, 2) uniform [low, high]
    hierarchy: list[tuple[int, int]]
    concept_map: dict[str, list[int]]
    spurious_map: dict[str, list[int]]
    token_features: np.ndarray
    readout: np.ndarray  # (d, V)
    readout_bias: np.ndarray
    noise_sigma: float
    label_noise: float
    seq_len: int
    seed: int

    @property
    def n_features(self) -> int:
        return self.D_true.shape[0]

    @property
    def d_model(self) -> int:
        return self.D_true.shape[1]

    @property
    def vocab(self) -> list[str]:
        return [f"f{j}" for j in range(self.n_features)] + ["<bg>"]

    @property
    def background_token(self) -> int:
        return self.n_features

    def save(self, path) -> None:
        tensors = {
            "D_true": self.D_true,
            "bias": self.bias,
            "firing_probs": self.firing_probs,
            "magnitude": self.magnitude,
            "token_features": self.token_features,
            "readout": self.readout,
            "readout_bias": self.readout_bias,
        }
        meta = {
            "kind": "ground_truth_model",
            "hierarchy": [list(e) for e in self.hierarchy],
            "concept_map": self.concept_map,
            "spurious_map": self.spurious_map,
            "noise_sigma": self.noise_sigma,
            "label_noise": self.label_noise,
            "seq_len": self.seq_len,
            "seed": self.seed,
        }
        save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "GroundTruthModel":
        t, meta = load_tensors(path)
        return cls(
            D_true=t["D_true"],
            bias=t["bias"],
            firing_probs=t["firing_probs"],
            magnitude=t["magnitude"],
            hierarchy=[tuple(e) for e in meta["hierarchy"]],
            concept_map={k: list(v) for k, v in meta["concept_map"].items()},
            spurious_map={k: list(v) for k, v in meta["spurious_map"].items()},
            token_features=t["token_features"],
            readout=t["readout"],
            readout_bias=t["readout_bias"],
            noise_sigma=meta["noise_sigma"],
            label_noise=meta["label_noise"],
            seq_len=meta["seq_len"],
            seed=meta["seed"],
        )


def _closure_order(hierarchy, n_features: int) -> list[int]:
    """Feature order in which children precede their parents."""
    graph: dict[int, set[int]] = {}
    for parent, child in hierarchy:
        if not (0 <= parent < n_features and 0 <= child < n_features):
            raise ValueError(f"hierarchy edge ({parent}, {child}) out of range")
        graph.setdefault(parent, set()).add(child)
        graph.setdefault(child, set())
    try:
        return list(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as e:
        raise CyclicHierarchy(f"cyclic hierarchy: {e.args[1]}") from None


def build_model(config: GeneratorConfig, seed: int) -> GroundTruthModel:
    F, d = config.n_features, config.d_model
    if F < 1 or d < 2:
        raise ValueError("need n_features >= 1 and d_model >= 2")
    _closure_order(config.hierarchy, F)

    probs = np.full(F, config.firing_prob) if config.firing_probs is None else np.asarray(config.firing_probs, float)
    if probs.shape != (F,):
        raise ValueError(f"firing_probs must have {F} entries")
    concept_feats: list[int] = []
    concept_map = {}
    for name, spec in config.concepts.items():
        if len(set(spec.features)) != len(spec.features):
            raise ValueError(f"concept {name!r} reuses an indicator feature")
        concept_map[name] = list(spec.features)
        concept_feats.extend(spec.features)
        if spec.firing_prob is not None:
            probs[spec.features] = spec.firing_prob
    spurious_map = {}
    spurious_feats: list[int] = []
    for name, spec in config.spurious.items():
        if len(set(spec.features)) != len(spec.features):
            raise ValueError(f"attribute {name!r} reuses an indicator feature")
        spurious_map[name] = list(spec.features)
        spurious_feats.extend(spec.features)
        if spec.firing_prob is not None:
            probs[spec.features] = spec.firing_prob
    if any(not 0 <= f < F for f in concept_feats + spurious_feats):
        raise ValueError("indicator feature index out of range")
    if np.any(probs <= 0) or np.any(probs >= 1):
        raise ValueError("firing probabilities must lie in (0, 1)")

    rng = np.random.default_rng(seed)
    D = rng.standard_normal((F, d))
    block = sorted(set(concept_feats))
    if config.orthogonal_concepts and block:
        if len(block) >= d:
            raise ValueError("too many concept indicators to orthogonalise in d_model dims")
        q, _ = np.linalg.qr(rng.standard_normal((d, len(block))))
        rest = np.setdiff1d(np.arange(F), block)
        D[rest] -= (D[rest] @ q) @ q.T
        D[block] = q.T
    D /= np.linalg.norm(D, axis=1, keepdims=True)

    lo, hi = config.magnitude
    if not 0 < lo <= hi:
        raise ValueError("magnitude range must satisfy 0 < low <= high")
    V = F + 1
    token_features = np.arange(F) if config.token_features is None else np.asarray(config.token_features)
    return GroundTruthModel(
        D_true=D,
        bias=rng.normal(0.0, config.bias_scale, d),
        firing_probs=probs,
        magnitude=np.tile([lo, hi], (F, 1)).astype(float),
        hierarchy=[tuple(e) for e in config.hierarchy],
        concept_map=concept_map,
        spurious_map=spurious_map,
        token_features=token_features.astype(np.int64),
        readout=rng.normal(0.0, config.readout_scale / np.sqrt(d), (d, V)),
        readout_bias=rng.normal(0.0, config.readout_bias_scale, V),
        noise_sigma=config.noise_sigma,
        label_noise=config.label_noise,
        seq_len=config.seq_len,
        seed=seed,
    )


def surrogate_logits(model: GroundTruthModel, x: np.ndarray) -> np.ndarray:
    """Affine stand-in for the host model tail: activations -> vocabulary logits."""
    x = np.asarray(x)
    if x.shape[-1] != model.d_model:
        raise ValueError(f"expected activations of width {model.d_model}, got {x.shape[-1]}")
    return x @ model.readout + model.readout_bias


@dataclass
class _Chunk:
    x: np.ndarray
    coeffs: np.ndarray
    labels: dict[str, np.ndarray]
    token_ids: np.ndarray


def _chunk(model: GroundTruthModel, seed: int, index: int) -> _Chunk:
    rng = np.random.default_rng([seed, index])
    F, d, m = model.n_features, model.d_model, CHUNK_ROWS
    fire = rng.random((m, F)) < model.firing_probs
    parents: dict[int, list[int]] = {}
    for p, c in model.hierarchy:
        parents.setdefault(c, []).append(p)
    for f in _closure_order(model.hierarchy, F):
        for p in parents.get(f, ()):
            fire[:, p] |= fire[:, f]
    lo, hi = model.magnitude[:, 0], model.magnitude[:, 1]
    coeffs = np.where(fire, lo + (hi - lo) * rng.random((m, F)), 0.0)
    x = model.bias + coeffs @ model.D_true
    if model.noise_sigma > 0:
        x = x + model.noise_sigma * rng.standard_normal((m, d))
    x = x.astype(np.float32)

    labels = {}
    for name, feats in {**model.concept_map, **model.spurious_map}.items():
        hit = fire[:, feats]
        labels[name] = np.where(hit.sum(1) == 1, hit.argmax(1), len(feats))

    tok = model.token_features
    tc = coeffs[:, tok]
    token_ids = np.where(tc.max(1) > 0, tok[tc.argmax(1)], model.background_token)

    V = model.readout.shape[1]
    target = surrogate_logits(model, x.astype(np.float64)).argmax(1)
    flip = rng.random(m) < model.label_noise
    target = np.where(flip, rng.integers(0, V, m), target)
    labels["next_token"] = target
    return _Chunk(x, coeffs.astype(np.float32), labels, token_ids.astype(np.int64))


def label_classes(model: GroundTruthModel) -> dict[str, int]:
    out = {name: len(feats) + 1 for name, feats in {**model.concept_map, **model.spurious_map}.items()}
    out["next_token"] = model.readout.shape[1]
    return out


def sample_dataset(model: GroundTruthModel, n: int, seed: int = 0,
                   keep_coeffs: bool = True) -> tuple[ActivationDataset, Optional[np.ndarray]]:
    """Draw ``n`` rows. Returns the dataset and the hidden true coefficients
    (None when ``keep_coeffs`` is false, which saves F floats per row).

    Rows are generated in fixed-size chunks seeded by (seed, chunk index), so
    the first ``n`` rows do not depend on how many rows are requested.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    chunks = []
    for i in range(-(-n // CHUNK_ROWS)):
        c = _chunk(model, seed, i)
        if not keep_coeffs:
            c.coeffs = None
        chunks.append(c)
    x = np.concatenate([c.x for c in chunks])[:n]
    coeffs = np.concatenate([c.coeffs for c in chunks])[:n] if keep_coeffs else None
    labels = {k: np.concatenate([c.labels[k] for c in chunks])[:n] for k in chunks[0].labels}
    tokens = np.concatenate([c.token_ids for c in chunks])[:n]
    L = model.seq_len
    seq_lens = np.full(n // L, L)
    if n % L:
        seq_lens = np.append(seq_lens, n % L)
    ds = ActivationDataset(
        x,
        seq_lens=seq_lens,
        token_ids=tokens,
        vocab=model.vocab,
        labels=labels,
        label_classes=label_classes(model),
    )
    ds.validate()
    return ds, coeffs


class SyntheticStream:
    """Row source producing the same rows as ``sample_dataset`` lazily."""

    def __init__(self, model: GroundTruthModel, n_rows: int, seed: int = 0):
        self.model, self.n_rows, self.seed = model, n_rows, seed
        self._chunk = 0
        self._pending = np.empty((0, model.d_model), np.float32)
        self._emitted = 0

    def read(self, n: int) -> np.ndarray:
        n = min(n, self.n_rows - self._emitted)
        while self._pending.shape[0] < n:
            fresh = _chunk(self.model, self.seed, self._chunk).x
            self._chunk += 1
            self._pending = np.concatenate([self._pending, fresh])
        out, self._pending = self._pending[:n], self._pending[n:]
        self._emitted += n
        return out


def save_oracle(path, coeffs: np.ndarray) -> None:
    save_tensors(path, {"coeffs": coeffs.astype(np.float32)}, {"kind": "oracle_coefficients"})


def load_oracle(path) -> np.ndarray:
    return load_tensors(path)[0]["coeffs"]


class OracleSae:
    """SAE whose decoder is the true dictionary and whose encoder returns the
    true coefficients of the generated rows it was built from.

    Encoding is a lookup on the exact float32 row bytes; vectors that were
    not generated raise ``KeyError``.
    """

    arch_kind = "oracle"
    folded = True

    def __init__(self, model: GroundTruthModel, dataset: ActivationDataset, coeffs: np.ndarray):
        self.W_D = model.D_true.T.astype(np.float64)
        self.b_D = model.bias.astype(np.float64)
        self._index = {row.tobytes(): i for i, row in enumerate(dataset.data)}
        self._coeffs = coeffs.astype(np.float64)

    @property
    def n_latents(self) -> int:
        return self.W_D.shape[1]

    @property
    def d_model(self) -> int:
        return self.W_D.shape[0]

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32).reshape(-1, self.d_model)
        idx = [self._index[row.tobytes()] for row in x]
        return self._coeffs[idx]

    def decode(self, h: np.ndarray) -> np.ndarray:
        return np.asarray(h) @ self.W_D.T + self.b_D


def token_trigger_dataset(n_sequences: int = 400, seq_len: int = 16, n_triggers: int = 32, n_filler: int = 32, seed: int = 0):
    """Token stream where trigger token ``j`` fires latent ``j`` and nothing else.

    Filler tokens map to the zero activation. Returns the dataset and an
    identity ReLU SAE that reads the triggers off exactly.
    """
    from .models import identity_sae

    rng = np.random.default_rng(seed)
    V = n_triggers + n_filler
    tokens = rng.integers(0, V, n_sequences * seq_len)
    data = np.zeros((tokens.size, n_triggers), np.float32)
    hit = tokens < n_triggers
    data[np.flatnonzero(hit), tokens[hit]] = rng.uniform(1.0, 2.0, hit.sum())
    vocab = [f"tok{j}" for j in range(n_triggers)] + [f"fill{j}" for j in range(n_filler)]
    ds = ActivationDataset(data, seq_lens=np.full(n_sequences, seq_len), token_ids=tokens, vocab=vocab)
    ds.validate()
    return ds, identity_sae(n_triggers)
