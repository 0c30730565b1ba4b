#!/usr/bin/env python3
"""Print active/total non-embedding parameter counts for every published architecture row.

    python scripts/param_table.py [--max-s 64] [--csv out.csv]
"""

import argparse
import csv
import sys

from moelab.config import ARCHITECTURES, MoELayerSpec, count_params, named_arch


def human(n: int) -> str:
    for scale, suffix in ((10**9, "B"), (10**6, "M"), (10**3, "K")):
        if n >= scale:
            return f"{n / scale:.1f}{suffix}"
    return str(n)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-s", type=int, default=64)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)

    rows = []
    for name, dims in ARCHITECTURES.items():
        s = 1
        while s <= args.max_s:
            layer = MoELayerSpec.homogeneous(s, 1) if s > 1 else None
            pc = count_params(named_arch(name, layer))
            rows.append(dict(arch=name, layers=dims["layers"], d=dims["model_dim"], s=s,
                             active=pc.active_non_embedding, total=pc.total_non_embedding,
                             router=pc.router_params))
            s *= 2

    print(f"{'arch':>5} {'L':>3} {'d':>4} {'s':>4} {'active':>9} {'total':>9} {'router':>8}")
    for r in rows:
        print(f"{r['arch']:>5} {r['layers']:>3} {r['d']:>4} {r['s']:>4} "
              f"{human(r['active']):>9} {human(r['total']):>9} {r['router']:>8}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    sys.exit(main())
