"""Evaluate TopK and ReLU checkpoints through training.

Checkpoints are placed at the same fractions of training as a full-scale
run's 5M, 15M, 50M, 150M and 500M tokens. Each is scored on core
fidelity, sparse probing and SCR.

    python3 scripts/training_dynamics.py --steps 4000 --out runs/dynamics
"""

import argparse
import json
from pathlib import Path

from saeforge.metrics.ablation import scr_eval
from saeforge.metrics.core import core_stats, loss_recovered
from saeforge.metrics.probing import sparse_probing_eval
from saeforge.models import ArchSpec
from saeforge.synth import GeneratorConfig, SyntheticStream, build_model, sample_dataset, surrogate_logits
from saeforge.trainer import TrainConfig, load_checkpoint, train

FRACTIONS = [0.01, 0.03, 0.1, 0.3]  # of the full run; the final checkpoint is added by train()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--width", type=int, default=256)
    ap.add_argument("--k", type=int, default=20)
    ap.add_argument("--relu-l1", type=float, default=0.2)
    ap.add_argument("--out", type=Path, default=Path("runs/dynamics"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = build_model(GeneratorConfig(), seed=args.seed)
    steps = sorted({max(1, int(f * args.steps)) for f in FRACTIONS})
    cfg = TrainConfig.desk(args.steps, batch_size=256, buffer_capacity=50_000, norm_sample_count=20_000,
                           seed=args.seed, checkpoint_steps=steps, log_interval=0)
    data = lambda: SyntheticStream(model, args.steps * 256 + 50_000, seed=args.seed + 1)
    held_out, _ = sample_dataset(model, 60_000, seed=args.seed + 7, keep_coeffs=False)
    readout = lambda v: surrogate_logits(model, v)

    results = []
    for name, spec in [("topk", ArchSpec("topk", k=args.k)), ("relu", ArchSpec("relu", l1=args.relu_l1))]:
        res = train(cfg, spec, data, args.width, checkpoint_dir=args.out / name, sae_id=name)
        for path in res.checkpoints:
            params, meta = load_checkpoint(path)
            stats = core_stats(params, held_out)
            probe = sparse_probing_eval(params, held_out, "topic", ks=(1,), classes=[0, 1, 2, 3])
            scr = scr_eval(params, held_out, "class", "gender", ks=(20,))
            row = {"arch": name, "step": meta["step"], "l0": stats["l0_mean"], "fvu": stats["fvu"],
                   "loss_recovered": loss_recovered(params, held_out, readout)["score"],
                   "probe_k1": probe["accuracy"][1], "scr_k20": scr["per_k"][20]["s_shift"]}
            results.append(row)
            print("  ".join(f"{k} {v:.4f}" if isinstance(v, float) else f"{k} {v}" for k, v in row.items()))
    (args.out / "dynamics.json").write_text(json.dumps(results, indent=1))


if __name__ == "__main__":
    main()
