"""Command line entry point: ``moelab {plan,run,eval,export,count-params,validate}``.

Environment: ``MOELAB_OUTPUT_ROOT`` (default output directory for ``plan``),
``MOELAB_SEED`` (default seed for ``plan``).
"""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from .config import (
    ARCHITECTURES,
    ConfigError,
    MoELayerSpec,
    activation_sparsity,
    count_params,
    dump_arch,
    fmt_fraction,
    load_arch,
    named_arch,
    validate_flop_match,
)
from .data import SyntheticCorpus
from .harness import (
    GRIDS,
    TINY_ARCH,
    SweepManifest,
    collect_summaries,
    default_output_root,
    default_seed,
    emit_plots_data,
    evaluate_checkpoint,
    plan_grid,
    run_sweep,
    write_long_csv,
    write_summary_table,
)
from .train import TrainConfig


def _csv_list(text: str, cast=int):
    return [cast(x) for x in text.split(",") if x.strip()]


def _arch(args):
    if args.spec:
        return load_arch(args.spec)
    if args.arch == "tiny":
        return TINY_ARCH
    return named_arch(args.arch)


def cmd_plan(args) -> int:
    arch = _arch(args)
    train = TrainConfig.desk(
        steps=args.steps, batch_size=args.batch_size, seq_len=min(args.seq_len, arch.max_seq_len),
        peak_lr=args.lr, warmup_steps=args.warmup,
    )
    corpus = SyntheticCorpus(vocab=arch.vocab, seq_len=min(args.seq_len, arch.max_seq_len) + 1,
                             domains=tuple(f"d{i}" for i in range(args.domains)), skew=args.skew)
    seeds = _csv_list(args.seeds) if args.seeds else [default_seed()]
    manifest = plan_grid(
        args.grid, arch, train, corpus, seeds, output_dir=args.output_dir or default_output_root(),
        include_dense=args.include_dense, n_range=_csv_list(args.n), g_range=_csv_list(args.g, Fraction),
        s_max=Fraction(args.s_max), het_max_n=args.het_max_n,
    )
    manifest.jobs = args.jobs
    manifest.dump(args.out)
    print(f"{len(manifest.runs)} runs -> {args.out}")
    return 0


def cmd_run(args) -> int:
    manifest = SweepManifest.load(args.manifest)
    summaries = run_sweep(manifest, jobs=args.jobs, resume=args.resume, force=args.force, limit=args.limit)
    failed = [s for s in summaries if s.status != "ok"]
    print(f"{len(summaries)} completed runs in {manifest.output_dir} ({len(failed)} failed)")
    for s in summaries:
        ce = "nan" if s.final_ce is None else f"{s.final_ce:.4f}"
        print(f"  {s.run_id}  s={s.s:<5} n={s.n_list} g={s.g_list} g_gen={s.g_gen} ce={ce} status={s.status}")
    return 1 if failed else 0


def cmd_eval(args) -> int:
    ce, per = evaluate_checkpoint(args.run_dir)
    print(json.dumps({"macro_ce": ce, "domains": per}, indent=1, sort_keys=True))
    return 0


def cmd_export(args) -> int:
    manifest = SweepManifest.load(args.manifest)
    summaries = collect_summaries(manifest)
    out = Path(args.out or manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_summary_table(summaries, out / "summary.csv")
    write_long_csv(summaries, out / "plot_long.csv")
    for panel, path in emit_plots_data(summaries, out).items():
        print(f"{panel}: {path}")
    return 0


def _layer_from_args(args) -> MoELayerSpec | None:
    if args.n is None:
        return None
    return MoELayerSpec.homogeneous(args.n, Fraction(args.g))


def cmd_count_params(args) -> int:
    arch = load_arch(args.spec) if args.spec else named_arch(args.arch, _layer_from_args(args))
    pc = count_params(arch)
    print(json.dumps({
        "name": arch.name,
        "sparsity": fmt_fraction(activation_sparsity(arch.layer_spec)),
        "active_non_embedding": pc.active_non_embedding,
        "total_non_embedding": pc.total_non_embedding,
        "router_params": pc.router_params,
        "embedding_params": pc.embedding_params,
    }, indent=1))
    return 0


def cmd_validate(args) -> int:
    try:
        arch = load_arch(args.spec)
    except ConfigError as exc:
        print(f"invalid spec: {exc}")
        return 2
    report = validate_flop_match(arch.layer_spec)
    s = fmt_fraction(activation_sparsity(arch.layer_spec))
    if report:
        print(f"ok: g_gen + sum(k*g) = {fmt_fraction(report.active_sum)}, s = {s}")
        return 0
    for p in report.problems:
        print(f"violation: {p}")
    return 1


def cmd_show(args) -> int:
    print(dump_arch(_arch(args)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moelab", description="desk-scale MoE design-space sweeps")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("plan", help="write a sweep manifest for a grid")
    p.add_argument("--grid", choices=GRIDS, default="homogeneous")
    p.add_argument("--arch", default="tiny", choices=["tiny", *ARCHITECTURES])
    p.add_argument("--spec", help="base architecture spec file (overrides --arch)")
    p.add_argument("--n", default="1,2,4,8", help="expert counts, comma separated")
    p.add_argument("--g", default="1,1/2,1/4", help="granularities, comma separated")
    p.add_argument("--s-max", default="4")
    p.add_argument("--het-max-n", type=int, default=16)
    p.add_argument("--include-dense", action="store_true")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--skew", type=float, default=0.0)
    p.add_argument("--seeds", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--out", default="manifest.yaml")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("run", help="execute a manifest")
    p.add_argument("manifest")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--limit", type=int, default=None, help="stop after this many new runs")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="recompute held-out macro CE from a run's checkpoint")
    p.add_argument("run_dir")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export", help="write summary and plot CSVs")
    p.add_argument("manifest")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("count-params", help="print parameter counts")
    p.add_argument("spec", nargs="?")
    p.add_argument("--arch", default="50M", choices=list(ARCHITECTURES))
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--g", default="1")
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("validate", help="check FLOP matching of a spec file")
    p.add_argument("spec")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("show", help="print the canonical spec file for an architecture")
    p.add_argument("--arch", default="tiny", choices=["tiny", *ARCHITECTURES])
    p.add_argument("--spec", default=None)
    p.set_defaults(fn=cmd_show)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
