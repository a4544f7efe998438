"""Training loop: init, Adam, schedules, decoder maintenance, checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .activations import ActivationBuffer, ActivationDataset, DatasetCursor, RowSource, estimate_norm_scale
from .models import (
    ArchSpec,
    NonFiniteLoss,
    SaeParams,
    calibrate_batchtopk_threshold,
    default_group_boundaries,
    fold_norm_scale,
    load_params,
    loss_and_grads,
    normalize_decoder_inplace,
    project_decoder_grad,
    save_params,
)

log = logging.getLogger(__name__)

FULL_SCALE_STEPS = 500_000_000 // 2048


@dataclass
class TrainConfig:
    total_tokens: int = 500_000_000
    lr: float = 3e-4
    lr_warmup_steps: int = 1000
    sparsity_warmup_steps: int = 5000
    lr_decay_fraction: float = 0.2
    batch_size: int = 2048
    buffer_capacity: int = 250_000
    seed: int = 0
    target_l0: list[int] = field(default_factory=lambda: [20, 40, 80, 160, 320, 640])
    checkpoint_steps: list[int] = field(default_factory=list)
    log_interval: int = 100
    norm_sample_count: int = 100_000

    @property
    def total_steps(self) -> int:
        return self.total_tokens // self.batch_size

    @property
    def decay_start(self) -> int:
        return self.total_steps - int(round(self.lr_decay_fraction * self.total_steps))

    def validate(self) -> None:
        T = self.total_steps
        if T == 0:
            return
        if self.lr_warmup_steps >= T or self.sparsity_warmup_steps >= T:
            raise ValueError(f"warmup must be shorter than the {T} training steps")
        if self.decay_start < self.lr_warmup_steps:
            raise ValueError("learning-rate decay window overlaps the warmup")

    @classmethod
    def desk(cls, total_steps: int, batch_size: int = 256, **kw) -> "TrainConfig":
        """Shorter run with warmups scaled to the same fraction of training as the full schedule."""
        frac = total_steps / FULL_SCALE_STEPS
        return cls(
            total_tokens=total_steps * batch_size,
            batch_size=batch_size,
            lr_warmup_steps=max(1, int(round(1000 * frac))),
            sparsity_warmup_steps=max(1, int(round(5000 * frac))),
            **kw,
        )


def lr_at(config: TrainConfig, step: int) -> float:
    T, warm, start = config.total_steps, config.lr_warmup_steps, config.decay_start
    if step < warm:
        return config.lr * step / warm
    if step < start:
        return config.lr
    return config.lr * (T - step) / (T - start)


def sparsity_coeff_at(config: TrainConfig, arch: ArchSpec, step: int) -> tuple[float, float]:
    """Scheduled (sparsity coefficient, P-anneal exponent) at ``step``."""
    warm = config.sparsity_warmup_steps
    lam = arch.l1 * min(1.0, step / warm)
    p = arch.p_start
    if arch.kind == "panneal":
        end = max(config.decay_start, warm + 1)
        frac = min(1.0, max(0.0, (step - warm) / (end - warm)))
        p = arch.p_start + frac * (arch.p_end - arch.p_start)
    return lam, p


class Adam:
    def __init__(self, params: SaeParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors().items()}
        self.t = 0

    def step(self, params: SaeParams, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, p in params.tensors().items():
            g = grads[name].astype(p.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam_m.{k}": v for k, v in self.m.items()}
        out.update({f"adam_v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = tensors[f"adam_m.{k}"].copy()
            self.v[k] = tensors[f"adam_v.{k}"].copy()
        self.t = t


def init_params(arch: ArchSpec, d: int, F: int, seed: int, dtype=np.float32) -> SaeParams:
    if d < 1 or F < 1:
        raise ValueError("d and F must be positive")
    arch = ArchSpec(**arch.to_dict())
    if arch.kind == "matryoshka" and arch.group_boundaries is None:
        arch.group_boundaries = default_group_boundaries(F)
    arch.check_width(F)
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    W_E = rng.uniform(-bound, bound, (F, d))
    # C order so a reloaded checkpoint runs the exact same BLAS kernels
    W_D = np.ascontiguousarray(W_E.T / np.linalg.norm(W_E.T, axis=0))
    extras = {}
    if arch.kind == "jumprelu":
        extras["threshold"] = np.full(F, 0.001)
    if arch.kind == "gated":
        extras["r_mag"] = np.zeros(F)
        extras["b_mag"] = np.zeros(F)
    p = SaeParams(W_E=W_E, b_E=np.zeros(F), W_D=W_D, b_D=np.zeros(d), arch=arch, extras=extras)
    return p.astype(dtype)


DataLike = Union[ActivationDataset, Callable[[], RowSource]]


def _source_factory(data: DataLike) -> Callable[[], RowSource]:
    if isinstance(data, ActivationDataset):
        return lambda: DatasetCursor(data)
    return data


def _norm_rows(factory, n: int) -> np.ndarray:
    return factory().read(n)


@dataclass
class TrainResult:
    params: SaeParams  # folded
    norm_scale: float
    losses: np.ndarray
    checkpoints: list[Path]
    log: list[dict]


def _checkpoint(path, params, opt, step, scale, sae_id, norm_rows, batch_size):
    meta = {"step": step, "norm_scale": scale, "adam_t": opt.t, "sae_id": sae_id}
    if params.arch.kind in ("batchtopk", "matryoshka"):
        # stored for evaluating this checkpoint; training itself never uses it
        meta["calibration_threshold"] = finalize(params, norm_rows, scale, batch_size).arch.threshold
    save_params(path, params, meta=meta, extra_tensors=opt.state_tensors())


def load_checkpoint(path) -> tuple[SaeParams, dict]:
    """Load any checkpoint as evaluable (folded) params plus its metadata."""
    params, meta, _ = load_params(path)
    if not params.folded:
        params = fold_norm_scale(params, meta["norm_scale"])
        if "calibration_threshold" in meta:
            params.arch.threshold = meta["calibration_threshold"]
    return params, meta


def train(
    config: TrainConfig,
    arch: ArchSpec,
    data: DataLike,
    width: int,
    checkpoint_dir: Optional[Path] = None,
    log_path: Optional[Path] = None,
    resume_from: Optional[Path] = None,
    sae_id: str = "sae",
) -> TrainResult:
    config.validate()
    factory = _source_factory(data)
    norm_rows = _norm_rows(factory, config.norm_sample_count)
    scale = estimate_norm_scale(norm_rows, config.norm_sample_count, seed=config.seed)
    d = norm_rows.shape[1]

    params = init_params(arch, d, width, config.seed)
    arch = params.arch
    opt = Adam(params)
    buffer = ActivationBuffer(factory(), config.buffer_capacity, seed=config.seed)
    start = 0
    if resume_from is not None:
        params, meta, rest = load_params(resume_from)
        if params.folded:
            raise ValueError("cannot resume from a folded checkpoint")
        opt.load_state(rest, meta["adam_t"])
        start = meta["step"]
        for _ in range(start):
            buffer.sample(config.batch_size)

    ckpt_paths = []
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    log_records = []
    logf = open(log_path, "a") if log_path is not None else None
    losses = np.zeros(config.total_steps - start)
    inv = np.float32(1.0 / scale)
    try:
        for step in range(start, config.total_steps):
            x = buffer.sample(config.batch_size) * inv
            lam, p = sparsity_coeff_at(config, arch, step)
            try:
                loss, grads = loss_and_grads(params, x, lam, p)
            except NonFiniteLoss as e:
                e.step = step
                e.args = (f"step {step}: {e.args[0]}",)
                raise
            losses[step - start] = loss.total
            if arch.normalizes_decoder:
                grads["W_D"] = project_decoder_grad(params.W_D, grads["W_D"])
            lr = lr_at(config, step)
            opt.step(params, grads, lr)
            if arch.normalizes_decoder:
                normalize_decoder_inplace(params)
            if arch.kind == "jumprelu":
                np.maximum(params.extras["threshold"], 0, out=params.extras["threshold"])
            if config.log_interval and step % config.log_interval == 0:
                l0 = float(np.count_nonzero(params.encode(x, training=True))) / x.shape[0]
                rec = {"step": step, "recon": loss.recon, "sparsity": loss.sparsity, "aux": loss.aux,
                       "total": loss.total, "l0": l0, "lr": lr, "l1": lam, "p": p}
                log_records.append(rec)
                if logf:
                    logf.write(json.dumps(rec, sort_keys=True) + "\n")
            done = step + 1
            if checkpoint_dir is not None and done in config.checkpoint_steps:
                path = checkpoint_dir / f"step_{done:08d}.saec"
                _checkpoint(path, params, opt, done, scale, sae_id, norm_rows, config.batch_size)
                ckpt_paths.append(path)
    finally:
        if logf:
            logf.close()

    params = finalize(params, norm_rows, scale, config.batch_size)
    if checkpoint_dir is not None:
        path = checkpoint_dir / "final.saec"
        save_params(path, params, meta={"step": config.total_steps, "norm_scale": scale, "sae_id": sae_id})
        ckpt_paths.append(path)
    return TrainResult(params, scale, losses, ckpt_paths, log_records)


def finalize(params: SaeParams, norm_rows: np.ndarray, scale: float, batch_size: int) -> SaeParams:
    """Calibrate inference thresholds on normalised rows, then fold the scale."""
    if params.arch.kind in ("batchtopk", "matryoshka"):
        x = norm_rows / scale
        n = max(1, x.shape[0] // batch_size)
        batches = [x[i * batch_size : (i + 1) * batch_size] for i in range(n)]
        params = calibrate_batchtopk_threshold(params, batches)
    return fold_norm_scale(params, scale)


def dead_latent_stats(params, dataset: ActivationDataset, window: Optional[int] = None, chunk: int = 8192):
    """Per-latent firing frequency (fraction of rows with h > 0) and the dead fraction."""
    rows = dataset.usable_rows() if isinstance(dataset, ActivationDataset) else np.asarray(dataset)
    if window is not None:
        rows = rows[:window]
    if rows.shape[0] == 0:
        raise ValueError("no rows")
    counts = np.zeros(params.n_latents)
    for i in range(0, rows.shape[0], chunk):
        counts += np.sum(params.encode(rows[i : i + chunk]) > 0, axis=0)
    freq = counts / rows.shape[0]
    return freq, float(np.mean(freq == 0))


def fit_sparsity_coefficient(
    arch: ArchSpec,
    data: DataLike,
    width: int,
    target_l0: float,
    config: TrainConfig,
    eval_rows: np.ndarray,
    lo: float = 1e-3,
    hi: float = 10.0,
    max_iter: int = 12,
    tolerance: float = 0.2,
):
    """Bisect (in log space) the sparsity coefficient until L0 is within
    ``tolerance`` of the target. Returns (coefficient, TrainResult, L0)."""
    best = None
    for _ in range(max_iter):
        mid = float(np.sqrt(lo * hi))
        trial = ArchSpec(**{**arch.to_dict(), "l1": mid})
        res = train(config, trial, data, width)
        l0 = float(np.mean(np.count_nonzero(res.params.encode(eval_rows), axis=1)))
        log.info("sparsity search %s: l1=%.4g -> L0=%.2f (target %g)", arch.kind, mid, l0, target_l0)
        if best is None or abs(l0 - target_l0) < abs(best[2] - target_l0):
            best = (mid, res, l0)
        if abs(l0 - target_l0) <= tolerance * target_l0:
            break
        if l0 > target_l0:
            lo = mid
        else:
            hi = mid
    return best


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
