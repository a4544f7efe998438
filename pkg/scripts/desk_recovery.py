"""Train a TopK SAE on default synthetic data and report dictionary recovery.

    python3 scripts/desk_recovery.py --steps 7812 --width 256 --k 6
"""

import argparse
import time

import numpy as np

from saeforge.metrics.core import core_stats, dictionary_recovery
from saeforge.models import ArchSpec
from saeforge.synth import GeneratorConfig, SyntheticStream, build_model, sample_dataset
from saeforge.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=7812)
    ap.add_argument("--batch-size", type=int, default=256)
    ap.add_argument("--width", type=int, default=256)
    ap.add_argument("--k", type=int, default=6)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = build_model(GeneratorConfig(), seed=args.seed)
    cfg = TrainConfig.desk(args.steps, batch_size=args.batch_size, lr=args.lr, buffer_capacity=50_000,
                           seed=args.seed, log_interval=max(1, args.steps // 10))
    n = args.steps * args.batch_size + 200_000
    t = time.perf_counter()
    res = train(cfg, ArchSpec("topk", k=args.k), lambda: SyntheticStream(model, n, seed=args.seed + 1), args.width)
    elapsed = time.perf_counter() - t
    for rec in res.log:
        print(f"step {rec['step']:6d}  recon {rec['recon']:.5f}  l0 {rec['l0']:.2f}  lr {rec['lr']:.2e}")

    held_out, _ = sample_dataset(model, 20_000, seed=args.seed + 99, keep_coeffs=False)
    rec = dictionary_recovery(res.params.W_D, model.D_true)
    stats = core_stats(res.params, held_out)
    print(f"trained {args.steps} steps in {elapsed:.1f}s (norm scale {res.norm_scale:.4f})")
    print(f"mean matched cosine {rec['mean_matched_cosine']:.4f}  mean max cosine {rec['mean_max_cosine']:.4f}  "
          f"matched > 0.9: {rec['fraction_above_0.9']:.3f}")
    print(f"held-out fvu {stats['fvu']:.4f}  l0 {stats['l0_mean']:.2f}  dead {stats['dead_fraction']:.3f}")
    print("worst matched cosines:", np.round(np.sort(rec["matched"])[:5], 3).tolist())


if __name__ == "__main__":
    main()
