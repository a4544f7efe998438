"""Run configuration: JSON documents validated against a shipped schema."""

from __future__ import annotations

import copy
import json
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

import jsonschema
import numpy as np

from .metrics.absorption import AbsorptionConfig
from .metrics.probing import ProbeTrainConfig
from .models import SELECTION_KINDS, ArchSpec
from .synth import GeneratorConfig, build_model
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        self.path = path or "<root>"
        super().__init__(f"{self.path}: {message}")


def load_schema() -> dict:
    return json.loads(resources.files("saeforge.schemas").joinpath("run_config.schema.json").read_text())


def fill_defaults(schema: dict, value: Any) -> Any:
    """Insert schema defaults for missing object keys, recursively."""
    if not isinstance(value, dict) or "properties" not in schema:
        return value
    out = dict(value)
    for key, sub in schema["properties"].items():
        if key not in out and "default" in sub:
            out[key] = copy.deepcopy(sub["default"])
        if key in out:
            out[key] = fill_defaults(sub, out[key])
    return out


def _error_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        if extra:
            parts.append(extra[0])
    return ".".join(parts)


def validate_document(doc: Any) -> dict:
    schema = load_schema()
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError(_error_path(errors[0]), errors[0].message)
    return fill_defaults(schema, doc)


def derive_seed(seed: int, tag: str) -> int:
    """Independent 32-bit seed for a named stage."""
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1)[0])


PENALTY_KINDS = ("relu", "gated", "jumprelu", "panneal")


@dataclass
class RunConfig:
    doc: dict  # fully defaulted document
    base_dir: Path

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def out_dir(self) -> Path:
        p = Path(self.doc["output"]["dir"])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def synth(self) -> dict:
        return self.doc["synth"]

    @property
    def train(self) -> dict:
        return self.doc["train"]

    @property
    def eval(self) -> dict:
        return self.doc["eval"]

    @property
    def judge(self) -> dict:
        return self.doc["judge"]

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig.from_dict(self.synth["generator"])

    def train_config(self) -> TrainConfig:
        t = self.train
        cfg = TrainConfig.desk(
            t["total_steps"],
            batch_size=t["batch_size"],
            lr=t["lr"],
            lr_decay_fraction=t["lr_decay_fraction"],
            buffer_capacity=t["buffer_capacity"],
            seed=derive_seed(self.seed, "train"),
            target_l0=list(t["target_l0"]),
            checkpoint_steps=list(t["checkpoint_steps"]),
            log_interval=t["log_interval"],
            norm_sample_count=t["norm_sample_count"],
        )
        if t["lr_warmup_steps"] is not None:
            cfg.lr_warmup_steps = t["lr_warmup_steps"]
        if t["sparsity_warmup_steps"] is not None:
            cfg.sparsity_warmup_steps = t["sparsity_warmup_steps"]
        return cfg

    def arch_spec(self, kind: str, target_l0: int) -> ArchSpec:
        t = self.train
        kw: dict = {"kind": kind, "bandwidth": t["jumprelu_bandwidth"], "p_end": t["panneal_p_end"]}
        if kind in SELECTION_KINDS:
            kw["k"] = target_l0
        return ArchSpec(**kw)

    def fixed_coefficient(self, kind: str, target_l0: int) -> Optional[float]:
        coeffs = self.train["sparsity_coefficients"]
        return coeffs.get(f"{kind}@{target_l0}", coeffs.get(kind))

    def probe_config(self) -> ProbeTrainConfig:
        return ProbeTrainConfig(**self.eval["probe"], seed=derive_seed(self.seed, "probe"))

    def absorption_config(self) -> AbsorptionConfig:
        a = self.eval["absorption"]
        return AbsorptionConfig(tau_fs=a["tau_fs"], tau_pa=a["tau_pa"], tau_ps=a["tau_ps"], a_max=a["a_max"],
                                max_k=a["max_k"], probe=self.probe_config(), seed=derive_seed(self.seed, "absorption"))


def _semantic_checks(cfg: RunConfig) -> None:
    try:
        build_model(cfg.generator(), 0)
    except ValueError as e:
        raise ConfigError("synth.generator", str(e)) from e
    t = cfg.train
    try:
        cfg.train_config().validate()
    except ValueError as e:
        raise ConfigError("train.total_steps", str(e)) from e
    if any(s > t["total_steps"] for s in t["checkpoint_steps"]):
        raise ConfigError("train.checkpoint_steps", "checkpoint step beyond total_steps")
    for kind in t["archs"]:
        for width in t["widths"]:
            for l0 in t["target_l0"]:
                spec = cfg.arch_spec(kind, l0)
                if kind == "matryoshka":
                    from .models import default_group_boundaries

                    spec.group_boundaries = default_group_boundaries(width)
                try:
                    spec.check_width(width)
                except ValueError as e:
                    raise ConfigError("train.target_l0", f"{kind} width {width}: {e}") from e
    for key in cfg.train["sparsity_coefficients"]:
        kind = key.split("@")[0]
        if kind not in PENALTY_KINDS:
            raise ConfigError(f"train.sparsity_coefficients.{key}", f"{kind!r} takes no sparsity coefficient")
    j = cfg.judge
    if j["kind"] == "remote" and "autointerp" in cfg.eval["metrics"] and not j["base_url"]:
        raise ConfigError("judge.base_url", "remote judge needs a base_url")


def load_config(source: Union[str, Path, dict, None] = None) -> RunConfig:
    """Validate and default a run config from a path, a dict, or nothing."""
    base = Path.cwd()
    if source is None:
        doc: Any = {}
    elif isinstance(source, dict):
        doc = source
    else:
        path = Path(source)
        base = path.resolve().parent
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as e:
            raise ConfigError("<file>", f"no such config file {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"invalid JSON at line {e.lineno}: {e.msg}") from e
    cfg = RunConfig(validate_document(doc), base)
    _semantic_checks(cfg)
    return cfg
