"""Sweep planning, resumable execution, held-out evaluation and CSV export.

Run layout under ``<output_dir>/runs/<run_id>/``:

    spec.yaml        architecture, train config, corpus and seed of the run
    metrics.jsonl    one MetricsRecord per optimizer step
    checkpoint.bin   final weights (see ``model.save_checkpoint``)
    summary.json     RunSummary; written last, its presence marks completion
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from . import autodiff as ad
from .config import (
    ModelArchSpec,
    MoELayerSpec,
    Routing,
    activation_sparsity,
    arch_from_obj,
    arch_to_obj,
    canonical_json,
    enumerate_heterogeneous_grid,
    enumerate_homogeneous_grid,
    fmt_fraction,
    generalist_grid,
    validate_flop_match,
)
from .data import CorpusSplits, SyntheticCorpus, batches, gen_corpus
from .model import TransformerLM, build, checkpoint_digest, load_checkpoint
from .train import TrainConfig, load_imbalance, read_metrics, train_run

GRIDS = ("homogeneous", "heterogeneous", "generalist-augmented", "lb-ablation", "routing-ablation")
SUMMARY_SCHEMA = 1
LB_ABLATION_CELLS = ((1e-2, 0.0), (1e-2, 1e-3), (1e-4, 0.0), (1e-4, 1e-3))

TINY_ARCH = ModelArchSpec(name="tiny", layers=2, model_dim=32, heads=2, vocab=64, max_seq_len=64)

__all__ = [
    "RunSpec", "RunSummary", "SweepManifest", "TINY_ARCH", "emit_plots_data", "execute_run",
    "load_imbalance", "macro_average", "macro_avg_ce", "plan_grid", "run_sweep", "token_losses",
]


# ----------------------------------------------------------------------------
# evaluation


def token_losses(model: TransformerLM, seqs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Per-token next-token NLL, shape (N, seq_len - 1)."""
    out = []
    with ad.no_grad():
        for i in range(0, len(seqs), batch_size):
            chunk = np.asarray(seqs[i:i + batch_size])
            logits = model.forward(chunk[:, :-1]).logits.data.astype(np.float64)
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            out.append(-np.take_along_axis(logp, chunk[:, 1:, None], axis=-1)[..., 0])
    return np.concatenate(out)


def macro_average(per_domain: dict[str, float]) -> float:
    if not per_domain:
        raise ValueError("macro average needs at least one domain")
    return float(np.mean(list(per_domain.values())))


def macro_avg_ce(model: TransformerLM, heldout: dict[str, np.ndarray]) -> tuple[float, dict[str, float]]:
    """Unweighted mean over domains of each domain's mean token CE."""
    if not heldout:
        raise ValueError("no held-out domains")
    per = {}
    for name, seqs in heldout.items():
        if len(seqs) == 0:
            raise ValueError(f"held-out domain {name!r} is empty")
        per[name] = float(token_losses(model, seqs).mean())
    return macro_average(per), per


# ----------------------------------------------------------------------------
# runs


@dataclass(frozen=True)
class RunSpec:
    arch: ModelArchSpec
    train: TrainConfig
    corpus: SyntheticCorpus
    seed: int = 0
    dense_granular: bool = False  # s = 1 ablation rows are exempt from the FLOP-match check
    eval_every: int = 0

    @property
    def run_id(self) -> str:
        payload = canonical_json(self.to_obj())
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_obj(self) -> dict:
        return {
            "arch": arch_to_obj(self.arch),
            "train": self.train.to_obj(),
            "corpus": self.corpus.to_obj(),
            "seed": self.seed,
            "dense_granular": self.dense_granular,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> RunSpec:
        return cls(
            arch=arch_from_obj(obj["arch"]),
            train=TrainConfig.from_obj(obj["train"]),
            corpus=SyntheticCorpus.from_obj(obj["corpus"]),
            seed=int(obj.get("seed", 0)),
            dense_granular=bool(obj.get("dense_granular", False)),
            eval_every=int(obj.get("eval_every", 0)),
        )


@dataclass
class RunSummary:
    run_id: str
    arch: str
    s: str
    n: int | None
    n_list: list[int]
    g_list: list[str]
    k_list: list[int]
    g_gen: str
    lb_weight: float
    bias_step: float
    routing: str
    dense_granular_mode: str
    seed: int
    steps: int
    final_ce: float | None
    final_train_ce: float | None
    final_imbalance: float | None
    domain_ce: dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0
    status: str = "ok"
    error: str | None = None
    checkpoint_sha256: str | None = None
    schema: int = SUMMARY_SCHEMA

    @property
    def sparsity(self) -> Fraction:
        return Fraction(self.s)

    @property
    def g(self) -> str | None:
        return self.g_list[0] if len(self.g_list) == 1 else None


def _routing_label(r: Routing) -> str:
    return "dropless" if r.mode == "dropless" else f"capacity:{fmt_fraction(r.factor)}"


def describe(run: RunSpec) -> dict:
    spec = run.arch.layer_spec
    cfg = run.train
    pools = spec.pools
    return dict(
        run_id=run.run_id,
        arch=run.arch.name,
        s=fmt_fraction(activation_sparsity(spec)),
        n=pools[0].n if len(pools) == 1 else None,
        n_list=[p.n for p in pools],
        g_list=[fmt_fraction(p.g) for p in pools],
        k_list=[p.k for p in pools],
        g_gen=fmt_fraction(spec.generalist),
        lb_weight=spec.lb_weight if cfg.lb_weight is None else cfg.lb_weight,
        bias_step=spec.bias_step if cfg.bias_step is None else cfg.bias_step,
        routing=_routing_label(spec.routing),
        dense_granular_mode=spec.dense_granular_mode,
        seed=run.seed,
        steps=cfg.total_steps,
    )


FINAL_WINDOW = 50


def final_imbalance(records) -> float:
    """Mean per-step imbalance (averaged over layers) over the last 50 steps."""
    tail = records[-FINAL_WINDOW:]
    return float(np.mean([r.mean_imbalance for r in tail]))


def execute_run(run: RunSpec, root: str | Path) -> RunSummary:
    run_dir = Path(root) / "runs" / run.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "spec.yaml").write_text(yaml.safe_dump(run.to_obj(), sort_keys=True))
    start = time.perf_counter()
    info = describe(run)
    try:
        splits = gen_corpus(run.corpus)
        model = build(run.arch, run.seed)
        data = batches(splits, run.train.batch_size, seed=run.seed)
        result = train_run(
            model, _fit_len(data, run.arch.max_seq_len), run.train,
            metrics_path=run_dir / "metrics.jsonl", checkpoint_path=run_dir / "checkpoint.bin",
            evaluate=lambda m: macro_avg_ce(m, splits.heldout), eval_every=run.eval_every,
        )
        last = result.records[-1]
        summary = RunSummary(
            **info, final_ce=last.heldout_ce, final_train_ce=last.train_ce,
            final_imbalance=final_imbalance(result.records), domain_ce=last.heldout_domains or {},
            checkpoint_sha256=checkpoint_digest(run_dir / "checkpoint.bin"),
        )
    except Exception as exc:  # one bad run must not stop the sweep
        summary = RunSummary(**info, final_ce=None, final_train_ce=None, final_imbalance=None,
                             status="failed", error="".join(traceback.format_exception_only(type(exc), exc)).strip())
    summary.wall_clock = time.perf_counter() - start
    (run_dir / "summary.json").write_text(json.dumps(dataclasses.asdict(summary), sort_keys=True, indent=1))
    return summary


def _fit_len(stream, max_len: int):
    """Trim corpus rows so model inputs never exceed ``max_len``."""
    for b in stream:
        yield b[:, : max_len + 1]


def load_summary(run_dir: Path) -> RunSummary | None:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        return None
    return RunSummary(**json.loads(path.read_text()))


def evaluate_checkpoint(run_dir: str | Path) -> tuple[float, dict[str, float]]:
    run_dir = Path(run_dir)
    run = RunSpec.from_obj(yaml.safe_load((run_dir / "spec.yaml").read_text()))
    model = load_checkpoint(run_dir / "checkpoint.bin")
    splits = gen_corpus(run.corpus)
    return macro_avg_ce(model, splits.heldout)


# ----------------------------------------------------------------------------
# manifests


@dataclass
class SweepManifest:
    name: str
    grid: str
    output_dir: str
    runs: list[RunSpec]
    jobs: int = 1

    def __post_init__(self):
        if self.grid not in GRIDS and self.grid != "custom":
            raise ValueError(f"unknown grid {self.grid!r}")

    def validate(self) -> list[str]:
        problems = []
        for run in self.runs:
            spec = run.arch.layer_spec
            if run.dense_granular or spec.dense_granular_mode != "off":
                continue
            report = validate_flop_match(spec)
            if not report:
                problems.append(f"{run.run_id}: {'; '.join(report.problems)}")
        return problems

    def to_obj(self) -> dict:
        return {"name": self.name, "grid": self.grid, "output_dir": self.output_dir, "jobs": self.jobs,
                "runs": [r.to_obj() for r in self.runs]}

    @classmethod
    def from_obj(cls, obj: dict) -> SweepManifest:
        return cls(name=obj["name"], grid=obj["grid"], output_dir=obj["output_dir"],
                   runs=[RunSpec.from_obj(r) for r in obj["runs"]], jobs=int(obj.get("jobs", 1)))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_obj(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> SweepManifest:
        return cls.from_obj(yaml.safe_load(Path(path).read_text()))


def grid_layers(grid: str, n_range=(1, 2, 4, 8), g_range=(1, Fraction(1, 2), Fraction(1, 4)), s_max=4,
                generalists=(Fraction(1, 2),), het_max_n: int = 16, capacity_factor=2) -> list[MoELayerSpec]:
    if grid == "homogeneous":
        return enumerate_homogeneous_grid(n_range, g_range, s_max)
    if grid == "heterogeneous":
        return [s for s in enumerate_heterogeneous_grid() if s.pools[1].n <= het_max_n]
    if grid == "generalist-augmented":
        return generalist_grid(generalists, n_range, g_range)
    base = enumerate_homogeneous_grid(n_range, g_range, s_max)
    if grid == "lb-ablation":
        return [dataclasses.replace(s, lb_weight=lb, bias_step=gamma) for s in base for lb, gamma in LB_ABLATION_CELLS]
    if grid == "routing-ablation":
        routings = (Routing(), Routing("capacity", Fraction(capacity_factor)))
        return [dataclasses.replace(s, routing=r) for s in base for r in routings]
    raise ValueError(f"unknown grid {grid!r}")


def plan_grid(grid: str, arch: ModelArchSpec = TINY_ARCH, train: TrainConfig | None = None,
              corpus: SyntheticCorpus | None = None, seeds: Sequence[int] = (0,),
              output_dir: str = "sweep", include_dense: bool = False, **grid_kw) -> SweepManifest:
    train = train or TrainConfig.desk(steps=100, batch_size=16, seq_len=64, peak_lr=3e-3, warmup_steps=10)
    corpus = corpus or SyntheticCorpus(vocab=arch.vocab, seq_len=arch.max_seq_len + 1)
    layers = grid_layers(grid, **grid_kw)
    if include_dense:
        layers = [MoELayerSpec.dense()] + layers
    runs = [RunSpec(arch.with_layer(layer), train, corpus, seed) for layer in layers for seed in seeds]
    return SweepManifest(name=f"{arch.name}-{grid}", grid=grid, output_dir=output_dir, runs=runs)


# ----------------------------------------------------------------------------
# execution


def _execute_obj(obj: dict, root: str) -> dict:
    return dataclasses.asdict(execute_run(RunSpec.from_obj(obj), root))


def run_sweep(manifest: SweepManifest, jobs: int | None = None, resume: bool = True, force: bool = False,
              limit: int | None = None) -> list[RunSummary]:
    """Execute every pending run, then write the summary table and plot CSVs.

    Completed run ids are skipped unless ``force``. ``limit`` stops after that
    many new runs (the remaining ones are picked up by a later resumed call).
    """
    problems = manifest.validate()
    if problems:
        raise ValueError("manifest fails FLOP matching:\n" + "\n".join(problems))
    root = Path(manifest.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    pending = []
    for run in manifest.runs:
        done = load_summary(root / "runs" / run.run_id)
        if done is not None and resume and not force:
            continue
        pending.append(run)
    if limit is not None:
        pending = pending[:limit]
    jobs = jobs or manifest.jobs
    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_execute_obj, [r.to_obj() for r in pending], [str(root)] * len(pending)))
    else:
        for run in pending:
            execute_run(run, root)
    summaries = collect_summaries(manifest)
    write_summary_table(summaries, root / "summary.csv")
    write_long_csv(summaries, root / "plot_long.csv")
    emit_plots_data(summaries, root)
    return summaries


def collect_summaries(manifest: SweepManifest) -> list[RunSummary]:
    root = Path(manifest.output_dir)
    seen, out = set(), []
    for run in manifest.runs:
        if run.run_id in seen:
            continue
        seen.add(run.run_id)
        s = load_summary(root / "runs" / run.run_id)
        if s is not None:
            out.append(s)
    return sort_summaries(out)


def sort_summaries(summaries: Iterable[RunSummary]) -> list[RunSummary]:
    return sorted(summaries, key=lambda s: (s.sparsity, s.n or 0, sum(s.n_list), s.run_id))


# ----------------------------------------------------------------------------
# CSV export

SUMMARY_COLUMNS = ("run_id", "arch", "s", "n", "n_list", "g_list", "k_list", "g_gen", "lb_weight", "bias_step",
                   "routing", "dense_granular_mode", "seed", "steps", "final_ce", "final_train_ce",
                   "final_imbalance", "status")
LONG_COLUMNS = ("arch", "s", "n", "g_list", "g_gen", "alpha_lb", "gamma", "routing", "metric", "value")
PIVOT_COLUMNS = ("panel", "key") + SUMMARY_COLUMNS


def _cell(v):
    if isinstance(v, list):
        return ";".join(str(x) for x in v)
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _row(s: RunSummary) -> dict:
    d = dataclasses.asdict(s)
    return {c: _cell(d[c]) for c in SUMMARY_COLUMNS}


def write_summary_table(summaries: Sequence[RunSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for s in sort_summaries(summaries):
            w.writerow(_row(s))


def write_long_csv(summaries: Sequence[RunSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LONG_COLUMNS)
        for s in sort_summaries(summaries):
            base = [s.arch, s.s, _cell(s.n), _cell(s.g_list), s.g_gen, repr(s.lb_weight), repr(s.bias_step), s.routing]
            metrics = [("final_ce", s.final_ce), ("final_train_ce", s.final_train_ce),
                       ("final_imbalance", s.final_imbalance)]
            metrics += [(f"ce:{k}", v) for k, v in sorted(s.domain_ce.items())]
            for name, value in metrics:
                if value is not None:
                    w.writerow(base + [name, repr(value)])


def emit_plots_data(summaries: Sequence[RunSummary], out_dir: str | Path) -> dict[str, Path]:
    """Three pivots, grouped by fixed n, fixed g and fixed s.

    ``n`` and ``g`` are only defined for single-pool layers; every run has an ``s``.
    """
    if not summaries:
        raise ValueError("no summaries to export")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panels = {
        "fixed_n": lambda s: s.n,
        "fixed_g": lambda s: s.g,
        "fixed_s": lambda s: s.s,
    }
    sort_keys = {
        "fixed_n": lambda kv: (kv[0], Fraction(kv[1].g), kv[1].run_id),
        "fixed_g": lambda kv: (Fraction(kv[0]), kv[1].sparsity, kv[1].run_id),
        "fixed_s": lambda kv: (Fraction(kv[0]), kv[1].n or 0, kv[1].run_id),
    }
    paths = {}
    for panel, key_fn in panels.items():
        rows = [(key_fn(s), s) for s in summaries if key_fn(s) is not None]
        rows.sort(key=sort_keys[panel])
        path = out_dir / f"plot_{panel}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=PIVOT_COLUMNS)
            w.writeheader()
            for key, s in rows:
                w.writerow({"panel": panel, "key": key, **_row(s)})
        paths[panel] = path
    return paths


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def default_output_root() -> str:
    return os.environ.get("MOELAB_OUTPUT_ROOT", "moelab-out")


def default_seed() -> int:
    return int(os.environ.get("MOELAB_SEED", "0"))


def metrics_path(root: str | Path, run_id: str) -> Path:
    return Path(root) / "runs" / run_id / "metrics.jsonl"


def last_heldout_ce(root: str | Path, run_id: str) -> float | None:
    records = read_metrics(metrics_path(root, run_id))
    return records[-1].heldout_ce if records else None


def splits_for(run: RunSpec) -> CorpusSplits:
    return gen_corpus(run.corpus)
