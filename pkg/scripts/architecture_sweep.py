"""Train every architecture at a matched L0 and compare fidelity.

Penalty architectures get their coefficient by bisection on L0. Prints
loss recovered, fvu and L0 per architecture, and flags whether ReLU is
the worst on loss recovered.

    python3 scripts/architecture_sweep.py --target-l0 40 --steps 3000
"""

import argparse
import time

from saeforge.config import PENALTY_KINDS
from saeforge.metrics.core import core_stats, loss_recovered
from saeforge.models import ArchSpec, default_group_boundaries
from saeforge.synth import GeneratorConfig, SyntheticStream, build_model, sample_dataset, surrogate_logits
from saeforge.trainer import TrainConfig, fit_sparsity_coefficient, train

ARCHS = ["relu", "topk", "batchtopk", "jumprelu", "gated", "panneal", "matryoshka"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--archs", nargs="+", default=ARCHS, choices=ARCHS)
    ap.add_argument("--target-l0", type=int, default=40)
    ap.add_argument("--width", type=int, default=256)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = build_model(GeneratorConfig(), seed=args.seed)
    cfg = TrainConfig.desk(args.steps, batch_size=256, buffer_capacity=50_000, norm_sample_count=20_000,
                           seed=args.seed, log_interval=0)
    data = lambda: SyntheticStream(model, args.steps * 256 + 50_000, seed=args.seed + 3)
    held_out, _ = sample_dataset(model, 20_000, seed=args.seed + 99, keep_coeffs=False)
    readout = lambda v: surrogate_logits(model, v)

    rows = {}
    for kind in args.archs:
        t = time.perf_counter()
        spec = ArchSpec(kind, k=args.target_l0) if kind in ("topk", "batchtopk", "matryoshka") else ArchSpec(kind)
        if kind == "matryoshka":
            spec.group_boundaries = default_group_boundaries(args.width)
        if kind in PENALTY_KINDS:
            lam, res, _ = fit_sparsity_coefficient(spec, data, args.width, args.target_l0, cfg,
                                                   held_out.data[:5000], lo=1e-3, hi=3.0)
        else:
            lam, res = None, train(cfg, spec, data, args.width)
        stats = core_stats(res.params, held_out)
        rows[kind] = {"lr": loss_recovered(res.params, held_out, readout)["score"], "fvu": stats["fvu"],
                      "l0": stats["l0_mean"], "coef": lam, "time": time.perf_counter() - t}

    print(f"{'arch':<11}{'L0':>8}{'loss rec':>10}{'fvu':>9}{'coef':>10}{'time s':>8}")
    for kind, r in rows.items():
        coef = "-" if r["coef"] is None else f"{r['coef']:.4g}"
        print(f"{kind:<11}{r['l0']:8.1f}{r['lr']:10.4f}{r['fvu']:9.4f}{coef:>10}{r['time']:8.1f}")
    if "relu" in rows:
        worst = min(rows, key=lambda k: rows[k]["lr"])
        print(f"lowest loss recovered: {worst}" + ("" if worst == "relu" else "  (ReLU is not the worst)"))


if __name__ == "__main__":
    main()
