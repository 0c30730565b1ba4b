#!/usr/bin/env python3
"""Load-balancing ablation on a skewed synthetic corpus.

Trains the tiny model with 8 experts of granularity 1/2 under each
(lb_weight, bias_step) cell for several seeds and reports the median final
max/mean expert-load ratio per cell. Runs are cached under --out, so an
interrupted invocation resumes where it stopped.

    python scripts/lb_ablation.py --out runs/lb --seeds 5 --steps 300
"""

import argparse
import statistics
from fractions import Fraction

from moelab.config import MoELayerSpec
from moelab.data import SyntheticCorpus
from moelab.harness import LB_ABLATION_CELLS, TINY_ARCH, RunSpec, SweepManifest, run_sweep
from moelab.train import TrainConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description="load-balance ablation")
    ap.add_argument("--out", default="runs/lb-ablation")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--g", default="1/2")
    ap.add_argument("--skew", type=float, default=1.0)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args(argv)

    train = TrainConfig.desk(steps=args.steps, batch_size=16, seq_len=64, peak_lr=args.lr, warmup_steps=50)
    corpus = SyntheticCorpus(vocab=TINY_ARCH.vocab, seq_len=TINY_ARCH.max_seq_len + 1, skew=args.skew)
    runs, cell = [], {}
    for lb, gamma in LB_ABLATION_CELLS:
        layer = MoELayerSpec.homogeneous(args.n, Fraction(args.g), lb_weight=lb, bias_step=gamma)
        for seed in range(args.seeds):
            run = RunSpec(TINY_ARCH.with_layer(layer), train, corpus, seed)
            runs.append(run)
            cell[run.run_id] = (lb, gamma)

    summaries = run_sweep(SweepManifest("lb-ablation", "lb-ablation", args.out, runs), jobs=args.jobs)
    print(f"{'lb_weight':>10} {'bias_step':>10} {'median':>8}  per seed")
    for lb, gamma in LB_ABLATION_CELLS:
        vals = [s.final_imbalance for s in summaries if cell[s.run_id] == (lb, gamma) and s.status == "ok"]
        per = " ".join(f"{v:.3f}" for v in vals)
        print(f"{lb:>10g} {gamma:>10g} {statistics.median(vals):>8.3f}  {per}")


if __name__ == "__main__":
    main()
