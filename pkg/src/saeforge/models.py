"""SAE architectures: encode, decode, loss with analytic gradients.

Parameters follow the usual SAE convention: ``W_E`` is (F, d), ``W_D`` is
(d, F), so a batch ``x`` of shape (B, d) encodes to ``h`` of shape (B, F)
and decodes as ``h @ W_D.T + b_D``.

Gated SAEs reuse ``b_E`` as the gate bias; their magnitude path is
``(W_E x) * exp(r_mag) + b_mag``.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .tensorfile import load_tensors, save_tensors

ARCH_KINDS = ("relu", "topk", "batchtopk", "jumprelu", "gated", "panneal", "matryoshka", "pca")
# sparsity penalties that decoder rescaling could game
L1_KINDS = ("relu", "panneal", "gated")
SELECTION_KINDS = ("topk", "batchtopk", "matryoshka")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term} loss: {value}")
        self.term = term


class MissingThreshold(ValueError):
    pass


@dataclass
class ArchSpec:
    kind: str
    l1: float = 0.0  # sparsity coefficient
    k: int = 0
    threshold: Optional[float] = None  # BatchTopK inference threshold
    bandwidth: float = 0.001  # JumpReLU rectangle kernel width
    p_start: float = 1.0
    p_end: float = 0.2
    group_boundaries: Optional[list[int]] = None

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.kind == "jumprelu" and not self.bandwidth > 0:
            raise ValueError("JumpReLU bandwidth must be positive")

    def check_width(self, F: int) -> None:
        if self.kind in SELECTION_KINDS and not 1 <= self.k <= F:
            raise ValueError(f"k={self.k} outside [1, {F}]")
        if self.kind == "matryoshka":
            g = self.group_boundaries
            if not g or any(b <= a for a, b in zip(g, g[1:])) or g[0] < 1 or g[-1] != F:
                raise ValueError(f"group boundaries {g} must increase strictly and end at {F}")

    @property
    def normalizes_decoder(self) -> bool:
        return self.kind != "jumprelu" and self.kind != "pca"

    def to_dict(self) -> dict:
        return asdict(self)


def default_group_boundaries(F: int) -> list[int]:
    out = []
    for b in (round(F / 16), round(F / 4), F):
        b = max(1, b)
        if not out or b > out[-1]:
            out.append(b)
    return out


@dataclass
class LossBreakdown:
    recon: float
    sparsity: float
    aux: float
    total: float


@dataclass
class SaeParams:
    W_E: np.ndarray
    b_E: np.ndarray
    W_D: np.ndarray
    b_D: np.ndarray
    arch: ArchSpec
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    folded: bool = False

    @property
    def n_latents(self) -> int:
        return self.W_E.shape[0]

    @property
    def d_model(self) -> int:
        return self.W_E.shape[1]

    @property
    def arch_kind(self) -> str:
        return self.arch.kind

    def copy(self) -> "SaeParams":
        return copy.deepcopy(self)

    def tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors by name (views, not copies)."""
        out = {"W_E": self.W_E, "b_E": self.b_E, "W_D": self.W_D, "b_D": self.b_D}
        out.update(self.extras)
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        if name in ("W_E", "b_E", "W_D", "b_D"):
            setattr(self, name, value)
        else:
            self.extras[name] = value

    def astype(self, dtype) -> "SaeParams":
        p = self.copy()
        for name, t in p.tensors().items():
            p.set_tensor(name, t.astype(dtype))
        return p

    def pre_activations(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.W_E.dtype)
        if x.shape[-1] != self.d_model:
            raise ValueError(f"expected inputs of width {self.d_model}, got {x.shape[-1]}")
        if self.arch.kind == "gated":
            return x @ self.W_E.T
        return x @ self.W_E.T + self.b_E

    def encode(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        return _activate(self, self.pre_activations(x), training)[0]

    def decode(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h)
        if h.shape[-1] != self.n_latents:
            raise ValueError(f"expected {self.n_latents} latents, got {h.shape[-1]}")
        return h @ self.W_D.T + self.b_D

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x))


def topk_mask(z: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k mask; ties go to the lower index."""
    idx = np.argsort(-z, axis=1, kind="stable")[:, :k]
    mask = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=1)
    return mask


def batch_topk_mask(z: np.ndarray, k: int) -> np.ndarray:
    """Keep the B*k largest entries of the whole batch; ties to lower flat index."""
    n = min(z.shape[0] * k, z.size)
    idx = np.argsort(-z.ravel(), kind="stable")[:n]
    mask = np.zeros(z.size, dtype=bool)
    mask[idx] = True
    return mask.reshape(z.shape)


def _activate(params: SaeParams, pre: np.ndarray, training: bool):
    """Return (h, cache) for the given pre-activations."""
    arch, kind = params.arch, params.arch.kind
    if kind == "pca":
        return pre, {}
    if kind in ("relu", "panneal"):
        return np.maximum(pre, 0), {}
    if kind == "topk":
        z = np.maximum(pre, 0)
        mask = topk_mask(z, arch.k)
        return z * mask, {"mask": mask}
    if kind in ("batchtopk", "matryoshka"):
        z = np.maximum(pre, 0)
        if training:
            mask = batch_topk_mask(z, arch.k)
            return z * mask, {"mask": mask}
        if arch.threshold is None:
            raise MissingThreshold(f"{kind} inference needs a calibrated threshold")
        return z * (z > arch.threshold), {}
    if kind == "jumprelu":
        theta = params.extras["threshold"]
        return pre * (pre > theta), {}
    if kind == "gated":
        gate = (pre + params.b_E) > 0
        mag = pre * np.exp(params.extras["r_mag"]) + params.extras["b_mag"]
        return gate * np.maximum(mag, 0), {"gate": gate, "mag": mag}
    raise AssertionError(kind)


def _rect(u: np.ndarray) -> np.ndarray:
    return (np.abs(u) < 0.5).astype(u.dtype)


def _check(term: str, value: float) -> float:
    if not np.isfinite(value):
        raise NonFiniteLoss(term, value)
    return value


def loss_and_grads(params: SaeParams, x: np.ndarray, l1: Optional[float] = None, p: Optional[float] = None):
    """Loss terms and gradients for every trainable tensor.

    ``l1`` and ``p`` are the scheduled sparsity coefficient and P-anneal
    exponent; they default to the architecture's own values. JumpReLU's
    threshold gets the rectangle-kernel straight-through pseudo-gradient.
    """
    arch, kind = params.arch, params.arch.kind
    lam = arch.l1 if l1 is None else l1
    p = arch.p_start if p is None else p
    x = np.asarray(x, dtype=params.W_E.dtype)
    B = x.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    pre = params.pre_activations(x)
    h, cache = _activate(params, pre, training=True)
    W_D = params.W_D
    grads = {name: np.zeros_like(t) for name, t in params.tensors().items()}

    if kind == "matryoshka":
        recon = 0.0
        gh = np.zeros_like(h)
        for g in arch.group_boundaries:
            r = h[:, :g] @ W_D[:, :g].T + params.b_D - x
            recon += float(np.sum(r * r)) / B
            G = (2.0 / B) * r
            grads["W_D"][:, :g] += G.T @ h[:, :g]
            grads["b_D"] += G.sum(0)
            gh[:, :g] += G @ W_D[:, :g]
    else:
        r = h @ W_D.T + params.b_D - x
        recon = float(np.sum(r * r)) / B
        G = (2.0 / B) * r
        grads["W_D"] = G.T @ h
        grads["b_D"] = G.sum(0)
        gh = G @ W_D
    _check("reconstruction", recon)

    sparsity = aux = 0.0
    gpre = np.zeros_like(pre)
    if kind == "pca":
        gpre = gh
    elif kind == "relu":
        sparsity = lam * float(h.sum()) / B
        gpre = (gh + lam / B) * (pre > 0)
    elif kind == "panneal":
        pos = h > 0
        hp = np.where(pos, h, 1.0)
        sparsity = lam * float(np.sum(np.where(pos, hp**p, 0.0))) / B
        gh = gh + np.where(pos, (lam / B) * p * hp ** (p - 1), 0.0)
        gpre = gh * pos
    elif kind in SELECTION_KINDS:
        gpre = gh * (cache["mask"] & (pre > 0))
    elif kind == "jumprelu":
        theta, eps = params.extras["threshold"], arch.bandwidth
        active = pre > theta
        sparsity = lam * float(active.sum()) / B
        kern = _rect((pre - theta) / eps) / eps
        gpre = gh * active
        grads["threshold"] = -(theta * np.sum(gh * kern, axis=0)) - (lam / B) * np.sum(kern, axis=0)
    elif kind == "gated":
        gate, mag = cache["gate"], cache["mag"]
        r_mag = params.extras["r_mag"]
        gmag = gh * gate * (mag > 0)
        grads["b_mag"] = gmag.sum(0)
        grads["r_mag"] = np.sum(gmag * pre, axis=0) * np.exp(r_mag)
        gpre = gmag * np.exp(r_mag)
        pi = pre + params.b_E
        act = pi > 0
        gate_acts = np.maximum(pi, 0)
        sparsity = lam * float(gate_acts.sum()) / B
        ra = gate_acts @ W_D.T + params.b_D - x
        aux = float(np.sum(ra * ra)) / B
        # decoder is frozen inside the auxiliary term
        gpi = (lam / B + ((2.0 / B) * ra) @ W_D) * act
        grads["b_E"] = gpi.sum(0)
        gpre = gpre + gpi
    _check("sparsity", sparsity)
    _check("auxiliary", aux)

    grads["W_E"] = gpre.T @ x
    if kind != "gated":
        grads["b_E"] = gpre.sum(0)
    return LossBreakdown(recon, sparsity, aux, recon + sparsity + aux), grads


def calibrate_batchtopk_threshold(params: SaeParams, batches) -> SaeParams:
    """Set the inference threshold to the mean over batches of the smallest
    activation kept by batch-level top-k selection."""
    if params.arch.kind not in ("batchtopk", "matryoshka"):
        raise ValueError("threshold calibration applies to BatchTopK-style SAEs")
    mins = []
    for xb in batches:
        z = np.maximum(params.pre_activations(xb), 0)
        sel = z[batch_topk_mask(z, params.arch.k)]
        if not np.any(sel > 0):
            raise ValueError("calibration batch selected no active latent")
        mins.append(float(sel.min()))
    if not mins:
        raise ValueError("no calibration batches")
    out = params.copy()
    out.arch.threshold = float(np.mean(mins))
    return out


def fold_norm_scale(params: SaeParams, c: float) -> SaeParams:
    """Absorb the input normalisation constant into the weights.

    For params trained on ``x / c`` the result maps raw ``x`` to ``c`` times
    the normalised reconstruction; latent values are unchanged.
    """
    if not c > 0:
        raise ValueError("scale must be positive")
    out = params.copy()
    out.W_E = params.W_E / c
    out.W_D = params.W_D * c
    out.b_D = params.b_D * c
    out.folded = True
    return out


def renormalize_decoder(params: SaeParams) -> tuple[SaeParams, np.ndarray]:
    """Scale decoder columns to unit norm. Zero columns are left alone and
    returned as dead indices."""
    out = params.copy()
    norms = np.linalg.norm(out.W_D, axis=0)
    dead = np.flatnonzero(norms == 0)
    safe = np.where(norms == 0, 1.0, norms)
    out.W_D = out.W_D / safe
    return out, dead


def normalize_decoder_inplace(params: SaeParams) -> None:
    norms = np.linalg.norm(params.W_D, axis=0)
    params.W_D /= np.where(norms == 0, 1.0, norms).astype(params.W_D.dtype)


def project_decoder_grad(W_D: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Remove from each column's gradient its component along that column."""
    sq = np.sum(W_D * W_D, axis=0)
    coef = np.sum(W_D * grad, axis=0) / np.where(sq == 0, 1.0, sq)
    return grad - W_D * coef


def pca_fit(data, chunk: int = 65536) -> SaeParams:
    """All principal components as linear latents; mean activation as decoder bias.

    First and second moments are accumulated in float64 chunks, so the
    input is never copied whole.
    """
    from .activations import ActivationDataset

    X = data.usable_rows() if isinstance(data, ActivationDataset) else np.asarray(data)
    n, d = X.shape
    if n < d:
        raise ValueError(f"PCA needs at least d_model={d} rows, got {n}")
    total = np.zeros(d)
    for i in range(0, n, chunk):
        total += X[i : i + chunk].astype(np.float64).sum(0)
    mu = total / n
    cov = np.zeros((d, d))
    for i in range(0, n, chunk):
        Xc = X[i : i + chunk].astype(np.float64) - mu
        cov += Xc.T @ Xc
    evals, evecs = np.linalg.eigh(cov / n)
    order = np.argsort(-evals, kind="stable")
    W_E = evecs[:, order].T
    return SaeParams(W_E=W_E, b_E=-W_E @ mu, W_D=W_E.T.copy(), b_D=mu, arch=ArchSpec("pca"), folded=True)


def identity_sae(n: int) -> SaeParams:
    eye = np.eye(n)
    return SaeParams(eye.copy(), np.zeros(n), eye.copy(), np.zeros(n), ArchSpec("relu"), folded=True)


def save_params(path, params: SaeParams, meta: Optional[dict] = None, extra_tensors: Optional[dict] = None) -> None:
    tensors = {f"param.{k}": v for k, v in params.tensors().items()}
    tensors.update(extra_tensors or {})
    m = {"kind": "sae_checkpoint", "arch": params.arch.to_dict(), "folded": params.folded,
         "shape": {"d_model": params.d_model, "n_latents": params.n_latents}}
    m.update(meta or {})
    save_tensors(path, tensors, m)


def load_params(path) -> tuple[SaeParams, dict, dict]:
    """Returns (params, meta, non-parameter tensors)."""
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "sae_checkpoint":
        raise ValueError(f"{path} is not an SAE checkpoint")
    p = {k[6:]: v for k, v in tensors.items() if k.startswith("param.")}
    rest = {k: v for k, v in tensors.items() if not k.startswith("param.")}
    params = SaeParams(
        W_E=p.pop("W_E"), b_E=p.pop("b_E"), W_D=p.pop("W_D"), b_D=p.pop("b_D"),
        arch=ArchSpec(**meta["arch"]), extras=p, folded=meta["folded"],
    )
    return params, meta, rest
