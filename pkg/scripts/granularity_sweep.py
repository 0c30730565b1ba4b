#!/usr/bin/env python3
"""Small homogeneous (n, g) sweep on the tiny model, plus CSV export for plotting.

    python scripts/granularity_sweep.py --out runs/homog --steps 300
"""

import argparse
from fractions import Fraction

from moelab.data import SyntheticCorpus
from moelab.harness import TINY_ARCH, plan_grid, run_sweep
from moelab.train import TrainConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description="homogeneous granularity sweep")
    ap.add_argument("--out", default="runs/homogeneous")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--s-max", type=int, default=4)
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args(argv)

    train = TrainConfig.desk(steps=args.steps, batch_size=16, seq_len=64, peak_lr=3e-3, warmup_steps=50)
    corpus = SyntheticCorpus(vocab=TINY_ARCH.vocab, seq_len=TINY_ARCH.max_seq_len + 1)
    manifest = plan_grid(
        "homogeneous", TINY_ARCH, train, corpus, [int(s) for s in args.seeds.split(",")],
        output_dir=args.out, include_dense=True, n_range=(1, 2, 4, 8, 16),
        g_range=(1, Fraction(1, 2), Fraction(1, 4)), s_max=args.s_max,
    )
    summaries = run_sweep(manifest, jobs=args.jobs)
    print(f"{'s':>4} {'n':>4} {'g':>5} {'held-out CE':>12} {'imbalance':>10}")
    for s in summaries:
        ce = "failed" if s.final_ce is None else f"{s.final_ce:.4f}"
        imb = "" if s.final_imbalance is None else f"{s.final_imbalance:.3f}"
        print(f"{s.s:>4} {str(s.n or '-'):>4} {str(s.g or '-'):>5} {ce:>12} {imb:>10}")
    print(f"CSV files written to {args.out}")


if __name__ == "__main__":
    main()
