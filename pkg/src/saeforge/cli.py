"""saeforge synth|train|eval|report --config <path>."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import multiprocessing
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .activations import ActivationDataset, DatasetError, read_dataset, write_dataset
from .autointerp import KeywordJudge, RemoteJudge, run_autointerp
from .config import PENALTY_KINDS, ConfigError, RunConfig, derive_seed, load_config
from .metrics.ablation import scr_eval, tpp_eval
from .metrics.absorption import absorption_eval
from .metrics.core import core_metrics, dictionary_recovery
from .metrics.probing import sparse_probing_eval
from .models import pca_fit, save_params
from .synth import GroundTruthModel, build_model, sample_dataset, save_oracle, surrogate_logits
from .trainer import fit_sparsity_coefficient, load_checkpoint, train

log = logging.getLogger("saeforge")

REPORT_FORMAT = 1
LOCAL_METRICS = ("core", "probing", "scr", "tpp", "absorption")
METRIC_CHOICES = LOCAL_METRICS + ("autointerp", "all-local")


class Layout:
    def __init__(self, root: Path):
        self.root = root
        self.data = root / "data"
        self.train = self.data / "train.saeb"
        self.eval = self.data / "eval.saeb"
        self.oracle = self.data / "eval_oracle.saec"
        self.ground_truth = self.data / "ground_truth.saec"
        self.checkpoints = root / "checkpoints"
        self.logs = root / "logs"
        self.reports = root / "reports"
        self.summary = root / "summary.csv"
        self.plot_data = root / "plot_data.json"


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2) + "\n"


# synth


def cmd_synth(cfg: RunConfig) -> int:
    lay = Layout(cfg.out_dir)
    lay.data.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.generator(), derive_seed(cfg.seed, "model"))
    model.save(lay.ground_truth)
    train_ds, _ = sample_dataset(model, cfg.synth["n_rows"], seed=derive_seed(cfg.seed, "train-rows"), keep_coeffs=False)
    write_dataset(train_ds, lay.train)
    n_train = train_ds.n_rows
    del train_ds
    eval_ds, coeffs = sample_dataset(model, cfg.synth["eval_rows"], seed=derive_seed(cfg.seed, "eval-rows"))
    write_dataset(eval_ds, lay.eval)
    save_oracle(lay.oracle, coeffs)
    print(f"train rows: {n_train}  eval rows: {eval_ds.n_rows}  d_model: {eval_ds.d_model}  "
          f"true features: {model.n_features}")
    for name, col in sorted(eval_ds.labels.items()):
        if name == "next_token":
            continue
        counts = np.bincount(col, minlength=eval_ds.label_classes[name])
        print(f"  label {name}: {counts.tolist()} (last = background)")
    print(f"wrote {lay.data}")
    return 0


# train


def sae_id_for(kind: str, width: int, l0: int) -> str:
    return f"{kind}_w{width}_l0{l0}"


def _train_one(cfg: RunConfig, data: ActivationDataset, kind: str, width: int, l0: int) -> str:
    lay = Layout(cfg.out_dir)
    tcfg = cfg.train_config()
    t = cfg.train
    sae_id = sae_id_for(kind, width, l0)
    arch = cfg.arch_spec(kind, l0)
    lines = []
    if kind in PENALTY_KINDS:
        coeff = cfg.fixed_coefficient(kind, l0)
        if coeff is None:
            s = t["coefficient_search"]
            rows = data.usable_rows()[: s["eval_rows"]]
            coeff, _, got = fit_sparsity_coefficient(arch, data, width, l0, tcfg, rows, lo=s["lo"], hi=s["hi"],
                                                     max_iter=s["max_iter"], tolerance=s["tolerance"])
            lines.append(f"{sae_id}: sparsity coefficient {coeff:.5g} gives L0 {got:.2f}")
        arch.l1 = coeff
    ckpt_dir = lay.checkpoints / sae_id
    for old in ckpt_dir.glob("*.saec") if ckpt_dir.exists() else []:
        old.unlink()
    log_path = lay.logs / f"{sae_id}.jsonl"
    log_path.unlink(missing_ok=True)
    t0 = time.perf_counter()
    res = train(tcfg, arch, data, width, checkpoint_dir=ckpt_dir, log_path=log_path, sae_id=sae_id)
    lines.append(f"{sae_id}: {tcfg.total_steps} steps, final loss {res.losses[-1]:.5g}, "
                 f"{time.perf_counter() - t0:.1f}s")
    return "\n".join(lines)


def _train_one_in_worker(cfg: RunConfig, kind: str, width: int, l0: int) -> str:
    return _train_one(cfg, read_dataset(Layout(cfg.out_dir).train), kind, width, l0)


def cmd_train(cfg: RunConfig) -> int:
    lay = Layout(cfg.out_dir)
    if not lay.train.exists():
        raise FileNotFoundError(f"training data {lay.train} not found; run synth first")
    data = read_dataset(lay.train)
    lay.logs.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    grid = [(kind, width, l0) for kind in t["archs"] for width in t["widths"] for l0 in t["target_l0"]]
    if t["workers"] > 1 and len(grid) > 1:
        # every grid entry is seeded independently, so results match the sequential run
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(min(t["workers"], len(grid)), mp_context=ctx) as pool:
            futures = [pool.submit(_train_one_in_worker, cfg, *entry) for entry in grid]
            for f in futures:
                print(f.result())
    else:
        for entry in grid:
            print(_train_one(cfg, data, *entry))
    if t["include_pca"]:
        params = pca_fit(data)
        ckpt_dir = lay.checkpoints / "pca"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_params(ckpt_dir / "final.saec", params, meta={"step": 0, "norm_scale": 1.0, "sae_id": "pca"})
        print("pca: fitted")
    return 0


# eval


def selected_metrics(cfg: RunConfig, metric: Optional[str]) -> list[str]:
    if metric is None:
        return list(cfg.eval["metrics"])
    if metric == "all-local":
        j = cfg.judge
        local_judge = j["kind"] == "mock" or bool(j["base_url"])
        return list(LOCAL_METRICS) + (["autointerp"] if local_judge else [])
    return [metric]


def make_judge(cfg: RunConfig):
    j = cfg.judge
    if j["kind"] == "mock":
        return KeywordJudge()
    if not j["base_url"]:
        raise ConfigError("judge.base_url", "remote judge needs a base_url")
    return RemoteJudge(j["base_url"], j["model"], api_key_env=j["api_key_env"], max_retries=j["max_retries"],
                       timeout=j["timeout"])


def _concept_classes(ds: ActivationDataset, column: str) -> list[int]:
    if column not in ds.labels:
        raise ValueError(f"dataset has no label column {column!r}")
    # the last class is the background ("none or several indicators")
    return list(range(ds.label_classes[column] - 1))


class EvalContext:
    def __init__(self, cfg: RunConfig, lay: Layout, judge_kind: str):
        self.cfg = cfg
        self.ds = read_dataset(lay.eval)
        self.model = GroundTruthModel.load(lay.ground_truth) if lay.ground_truth.exists() else None
        self.judge_kind = judge_kind

    def readout(self):
        if self.model is None:
            return None
        return lambda x: surrogate_logits(self.model, x)


def _metric_core(params, ctx: EvalContext) -> dict:
    out = core_metrics(params, ctx.ds, readout=ctx.readout())
    if ctx.model is not None:
        rec = dictionary_recovery(np.asarray(params.W_D, np.float64), ctx.model.D_true)
        rec.pop("matched")
        out["dictionary_recovery"] = rec
    return out


def _metric_probing(params, ctx: EvalContext) -> dict:
    p = ctx.cfg.eval["probing"]
    ds = ctx.ds.head(p["max_rows"])
    out = {}
    for col in p["columns"]:
        res = sparse_probing_eval(params, ds, col, ks=p["ks"], classes=_concept_classes(ds, col),
                                  config=ctx.cfg.probe_config(), seed=derive_seed(ctx.cfg.seed, "probing"))
        out[col] = res
    return out


def _metric_scr(params, ctx: EvalContext) -> dict:
    s = ctx.cfg.eval["scr"]
    return scr_eval(params, ctx.ds, s["class_column"], s["spurious_column"], ks=s["ks"],
                    config=ctx.cfg.probe_config(), seed=derive_seed(ctx.cfg.seed, "scr"))


def _metric_tpp(params, ctx: EvalContext) -> dict:
    s = ctx.cfg.eval["tpp"]
    ds = ctx.ds.head(s["max_rows"])
    return tpp_eval(params, ds, s["column"], classes=_concept_classes(ds, s["column"]), ks=s["ks"],
                    config=ctx.cfg.probe_config(), seed=derive_seed(ctx.cfg.seed, "tpp"))


def _metric_absorption(params, ctx: EvalContext) -> dict:
    s = ctx.cfg.eval["absorption"]
    ds = ctx.ds.head(s["max_rows"])
    return absorption_eval(params, ds, s["column"], classes=_concept_classes(ds, s["column"]),
                           config=ctx.cfg.absorption_config())


def _metric_autointerp(params, ctx: EvalContext) -> dict:
    s = ctx.cfg.eval["autointerp"]
    judge = make_judge(ctx.cfg)
    out = run_autointerp(params, ctx.ds.head(s["max_rows"]), judge, n_latents=s["n_latents"],
                         seed=derive_seed(ctx.cfg.seed, "autointerp"), n_top=s["n_top"], n_sampled=s["n_sampled"],
                         max_concurrency=ctx.cfg.judge["max_concurrency"] if ctx.judge_kind == "remote" else 1)
    out["judge"] = ctx.judge_kind
    return out


METRICS: dict[str, Callable] = {
    "core": _metric_core,
    "probing": _metric_probing,
    "scr": _metric_scr,
    "tpp": _metric_tpp,
    "absorption": _metric_absorption,
    "autointerp": _metric_autointerp,
}


def metric_config_echo(cfg: RunConfig, metric: str) -> dict:
    echo = {"seed": cfg.seed}
    if metric in cfg.eval:
        echo[metric] = cfg.eval[metric]
    if metric in ("probing", "scr", "tpp", "absorption"):
        echo["probe"] = cfg.eval["probe"]
    if metric == "autointerp":
        echo["judge"] = {k: v for k, v in cfg.judge.items() if k != "max_concurrency"}
    return echo


def report_name(sae: dict, metric: str, config: dict) -> str:
    key = json.dumps(to_jsonable({"sae": sae, "metric": metric, "config": config}), sort_keys=True)
    return hashlib.sha256(key.encode()).hexdigest()[:16] + ".json"


def checkpoints_to_eval(lay: Layout, which: str) -> list[Path]:
    if not lay.checkpoints.exists():
        return []
    out = []
    for d in sorted(p for p in lay.checkpoints.iterdir() if p.is_dir()):
        if which == "final":
            out += [d / "final.saec"] if (d / "final.saec").exists() else []
        else:
            out += sorted(d.glob("step_*.saec")) + ([d / "final.saec"] if (d / "final.saec").exists() else [])
    return out


def _sae_identity(path: Path, params, meta: dict) -> dict:
    arch = params.arch
    sae_id = meta.get("sae_id", path.parent.name)
    parts = sae_id.split("_l0")
    target = int(parts[1]) if len(parts) == 2 and parts[1].isdigit() else None
    return {"sae_id": sae_id, "arch": arch.kind, "width": int(params.n_latents), "target_l0": target,
            "step": int(meta.get("step", 0)), "checkpoint": f"{path.parent.name}/{path.name}"}


def cmd_eval(cfg: RunConfig, metric: Optional[str] = None, judge_kind: Optional[str] = None) -> int:
    if judge_kind is not None:
        cfg.doc["judge"]["kind"] = judge_kind
    lay = Layout(cfg.out_dir)
    if not lay.eval.exists():
        raise FileNotFoundError(f"evaluation data {lay.eval} not found; run synth first")
    paths = checkpoints_to_eval(lay, cfg.eval["checkpoints"])
    if not paths:
        raise FileNotFoundError(f"no checkpoints under {lay.checkpoints}; run train first")
    metrics = selected_metrics(cfg, metric)
    if "autointerp" in metrics and cfg.judge["kind"] == "remote" and not cfg.judge["base_url"]:
        raise ConfigError("judge.base_url", "remote judge needs a base_url")
    ctx = EvalContext(cfg, lay, cfg.judge["kind"])
    lay.reports.mkdir(parents=True, exist_ok=True)
    failed = 0
    for path in paths:
        params, meta = load_checkpoint(path)
        sae = _sae_identity(path, params, meta)
        for name in metrics:
            config = metric_config_echo(cfg, name)
            t0 = time.perf_counter()
            try:
                results, error, status = METRICS[name](params, ctx), None, "ok"
            except Exception as e:  # recorded in the report; other metrics continue
                results, error, status = None, f"{type(e).__name__}: {e}", "failed"
                failed += 1
            report = {"format_version": REPORT_FORMAT, "metric": name, "sae": sae, "config": config,
                      "seed": cfg.seed, "status": status, "results": results, "error": error,
                      "wall_clock_s": round(time.perf_counter() - t0, 3)}
            (lay.reports / report_name(sae, name, config)).write_text(dumps(report))
            print(f"{sae['sae_id']} step {sae['step']} {name}: {status}" + (f" ({error})" if error else ""))
    return 1 if failed else 0


# report


def headline_rows(report: dict) -> list[tuple[Optional[int], str, float]]:
    """(k, quantity, value) rows summarising one report."""
    r = report["results"]
    m = report["metric"]
    rows: list = []
    if m == "core":
        for q in ("loss_recovered", "kl_score", "fvu", "mse", "l0_mean", "dead_fraction", "recon_bias_gamma"):
            if q in r:
                rows.append((None, q, r[q]))
        if "dictionary_recovery" in r:
            rows.append((None, "mean_matched_cosine", r["dictionary_recovery"]["mean_matched_cosine"]))
    elif m == "probing":
        for col, res in sorted(r.items()):
            for k, acc in res["accuracy"].items():
                rows.append((int(k), f"accuracy[{col}]", acc))
    elif m == "scr":
        rows += [(int(k), "s_shift", v["s_shift"]) for k, v in r["per_k"].items()]
    elif m == "tpp":
        rows += [(int(k), "s_tpp", v["score"]) for k, v in r["per_k"].items()]
    elif m == "absorption":
        rows += [(None, "score", r["score"]), (None, "mean_absorption", r["mean_absorption"])]
    elif m == "autointerp":
        rows.append((None, "mean_accuracy", r["mean_accuracy"]))
    return rows


def cmd_report(cfg: RunConfig) -> int:
    lay = Layout(cfg.out_dir)
    files = sorted(lay.reports.glob("*.json")) if lay.reports.exists() else []
    reports = []
    for f in files:
        try:
            rep = json.loads(f.read_text())
            rep["sae"]["sae_id"], rep["metric"], rep["status"]
            if rep["status"] == "ok":
                headline_rows(rep)
            reports.append(rep)
        except (ValueError, KeyError, TypeError, AttributeError) as e:
            print(f"warning: skipping malformed report {f.name}: {e}", file=sys.stderr)
    if not reports:
        print(f"error: no reports in {lay.reports}", file=sys.stderr)
        return 1
    l0 = {}
    for rep in reports:
        if rep["metric"] == "core" and rep["status"] == "ok":
            l0[(rep["sae"]["sae_id"], rep["sae"]["step"])] = rep["results"]["l0_mean"]
    rows = []
    for rep in reports:
        if rep["status"] != "ok":
            continue
        sae = rep["sae"]
        sae_l0 = l0.get((sae["sae_id"], sae["step"]), sae.get("target_l0"))
        for k, q, v in headline_rows(rep):
            rows.append({"sae_id": sae["sae_id"], "arch": sae["arch"], "width": sae["width"],
                         "target_l0": sae.get("target_l0"), "step": sae["step"], "l0": sae_l0,
                         "metric": rep["metric"], "k": k, "quantity": q, "value": v})
    key = lambda r: (r["metric"], r["quantity"], -1 if r["k"] is None else r["k"], r["arch"], r["width"],
                     r["sae_id"], r["step"])
    rows.sort(key=key)
    fields = ["sae_id", "arch", "width", "target_l0", "step", "l0", "metric", "k", "quantity", "value"]
    with open(lay.summary, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({f: "" if r[f] is None else r[f] for f in fields})
    series: dict = {}
    for r in rows:
        s = series.setdefault((r["metric"], r["quantity"], r["k"], r["arch"], r["width"]), [])
        s.append({"l0": r["l0"], "score": r["value"], "sae_id": r["sae_id"], "step": r["step"]})
    plot = {"series": [
        {"metric": m, "quantity": q, "k": k, "arch": a, "width": w,
         "points": sorted(pts, key=lambda p: (p["l0"] is None, p["l0"] or 0, p["step"]))}
        for (m, q, k, a, w), pts in series.items()
    ]}
    lay.plot_data.write_text(dumps(plot))
    failed = sum(r["status"] != "ok" for r in reports)
    print(f"{len(reports)} reports ({failed} failed) -> {len(rows)} rows in {lay.summary}, "
          f"{len(plot['series'])} series in {lay.plot_data}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="saeforge", description="Train and evaluate sparse autoencoders on synthetic data.")
    ap.add_argument("command", choices=["synth", "train", "eval", "report"])
    ap.add_argument("--config", help="run config JSON (defaults apply to omitted keys)")
    ap.add_argument("--metric", choices=METRIC_CHOICES, help="eval only: metric to run instead of eval.metrics")
    ap.add_argument("--judge", choices=["mock", "remote"], help="eval only: override judge.kind")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.metric, args.judge)
        return cmd_report(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OSError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
