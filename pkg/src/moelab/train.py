"""Training loop: CE + weighted aux losses, Adam, warmup + cosine schedule."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ForwardResult, TransformerLM, save_checkpoint
from .moe import update_loss_free_bias

METRICS_SCHEMA = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at step {record['step']}: layer={record['layer']} component={record['component']}")
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    seq_len: int = 2048
    peak_lr: float = 4e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    warmup_steps: int = 50
    end_lr_fraction: float = 0.1
    # None: inherit the value from the model's layer spec
    lb_weight: float | None = None
    z_weight: float | None = None
    bias_step: float | None = None
    total_tokens: int = 512 * 2048 * 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be positive")
        if self.total_steps < self.warmup_steps:
            raise ValueError(f"total_steps {self.total_steps} < warmup_steps {self.warmup_steps}")

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len

    @property
    def total_steps(self) -> int:
        return self.total_tokens // self.tokens_per_step

    @classmethod
    def desk(cls, steps: int, batch_size: int = 32, seq_len: int = 128, **kw) -> TrainConfig:
        """Small-batch config that keeps the schedule shape; ``steps`` fixes the token budget."""
        return cls(batch_size=batch_size, seq_len=seq_len, total_tokens=steps * batch_size * seq_len, **kw)

    def resolved(self, model: TransformerLM) -> TrainConfig:
        spec = model.arch.layer_spec
        return dataclasses.replace(
            self,
            lb_weight=spec.lb_weight if self.lb_weight is None else self.lb_weight,
            z_weight=spec.z_weight if self.z_weight is None else self.z_weight,
            bias_step=spec.bias_step if self.bias_step is None else self.bias_step,
        )

    def to_obj(self) -> dict:
        obj = dataclasses.asdict(self)
        obj["betas"] = list(self.betas)
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> TrainConfig:
        obj = dict(obj)
        if "betas" in obj:
            obj["betas"] = tuple(obj["betas"])
        return cls(**obj)


@dataclass
class MetricsRecord:
    step: int
    lr: float
    train_ce: float
    lb_loss: float
    z_loss: float
    total_loss: float
    imbalance: list[float]  # per layer, worst pool
    dropped_fraction: float
    layer_lb: list[float] = field(default_factory=list)
    layer_z: list[float] = field(default_factory=list)
    routing: list[list[dict]] = field(default_factory=list)  # [layer][pool] load stats
    heldout_ce: float | None = None
    heldout_domains: dict[str, float] | None = None
    schema: int = METRICS_SCHEMA

    @property
    def mean_imbalance(self) -> float:
        return float(np.mean(self.imbalance)) if self.imbalance else 1.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> MetricsRecord:
        return cls(**json.loads(line))


# ----------------------------------------------------------------------------


def total_loss(ce, lb, z, cfg) -> Tensor:
    """``ce + lb_weight * lb + z_weight * z``; works on Tensors or floats."""
    a_lb = cfg.lb_weight or 0.0
    a_z = cfg.z_weight or 0.0
    out = ce
    if a_lb:
        out = out + lb * a_lb
    if a_z:
        out = out + z * a_z
    return out


def lr_at(step: int, cfg: TrainConfig) -> float:
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    peak, warm = cfg.peak_lr, cfg.warmup_steps
    if step < warm:
        return peak * step / warm
    if total == warm:
        return peak * cfg.end_lr_fraction
    progress = (step - warm) / (total - warm)
    end = cfg.end_lr_fraction
    return peak * (end + (1.0 - end) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              betas=(0.9, 0.95), eps: float = 1e-8) -> np.ndarray:
    """Bias-corrected Adam; updates ``param`` and ``state`` in place and returns ``param``."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    b1, b2 = betas
    state.t += 1
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
    return param


class Adam:
    def __init__(self, params: list[Tensor], betas=(0.9, 0.95), eps: float = 1e-8):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.states = [AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params]

    def step(self, lr: float) -> None:
        for p, st in zip(self.params, self.states):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, g, st, lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)


# ----------------------------------------------------------------------------


def load_imbalance(loads) -> float:
    loads = np.asarray(loads, dtype=np.float64)
    if loads.size == 0 or np.any(loads < 0):
        raise ValueError("loads must be a nonempty nonnegative vector")
    mean = loads.mean()
    if mean == 0:
        raise ValueError("all expert loads are zero")
    return float(loads.max() / mean)


def lm_loss(model: TransformerLM, batch: np.ndarray) -> tuple[Tensor, ForwardResult]:
    batch = np.asarray(batch)
    inputs, targets = batch[:, :-1], batch[:, 1:]
    res = model.forward(inputs)
    V = model.arch.vocab
    ce = ad.cross_entropy(ad.reshape(res.logits, (-1, V)), targets.reshape(-1))
    return ce, res


def _diagnose(step: int, ce: float, res: ForwardResult) -> dict | None:
    if not math.isfinite(ce):
        return {"step": step, "layer": None, "component": "ce"}
    for i, (lb, z) in enumerate(zip(res.layer_lb, res.layer_z)):
        if not math.isfinite(lb):
            return {"step": step, "layer": i, "component": "lb_loss"}
        if not math.isfinite(z):
            return {"step": step, "layer": i, "component": "z_loss"}
    return None


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    model: TransformerLM
    checkpoint: Path | None = None


def train_steps(model: TransformerLM, data: Iterable[np.ndarray], cfg: TrainConfig,
                evaluate: Callable[[TransformerLM], tuple[float, dict]] | None = None,
                eval_every: int = 0) -> Iterator[MetricsRecord]:
    """Yield one record per optimizer step.

    Per step: forward, weighted loss, backward, Adam at ``lr_at(step + 1)``,
    then one loss-free bias update per router using that step's raw loads.
    """
    cfg = cfg.resolved(model)
    for rs in model.router_states():
        rs.step_size = cfg.bias_step
    params = model.parameters()
    opt = Adam(params, cfg.betas, cfg.eps)
    it = iter(data)
    total = cfg.total_steps
    for step in range(total):
        batch = next(it)
        opt.zero_grad()
        ce, res = lm_loss(model, batch)
        loss = total_loss(ce, res.lb_loss, res.z_loss, cfg)
        ce_val = float(ce.data)
        bad = _diagnose(step, ce_val, res)
        if bad is None and not math.isfinite(float(loss.data)):
            bad = {"step": step, "layer": None, "component": "total"}
        if bad is not None:
            raise TrainingDiverged(bad)
        ad.backward(loss)
        lr = lr_at(step + 1, cfg)
        opt.step(lr)
        states = iter(model.router_states())
        imbalance, routing = [], []
        dropped = assigned = 0
        for block, layer_stats in zip(model.blocks, res.stats):
            worst = 1.0
            for pool, ps in zip(block.moe.pools, layer_stats):
                update_loss_free_bias(next(states), ps.raw_loads)
                worst = max(worst, load_imbalance(ps.raw_loads))
                dropped += ps.dropped
                assigned += ps.assignments
            imbalance.append(worst)
            routing.append([ps.to_dict() for ps in layer_stats])
        model.step = step + 1
        rec = MetricsRecord(
            step=step + 1, lr=lr, train_ce=ce_val, lb_loss=float(res.lb_loss.data),
            z_loss=float(res.z_loss.data), total_loss=float(loss.data), imbalance=imbalance,
            dropped_fraction=dropped / assigned if assigned else 0.0,
            layer_lb=res.layer_lb, layer_z=res.layer_z, routing=routing,
        )
        if evaluate is not None and (step + 1 == total or (eval_every and (step + 1) % eval_every == 0)):
            rec.heldout_ce, rec.heldout_domains = evaluate(model)
        yield rec


def train_run(model: TransformerLM, data: Iterable[np.ndarray], cfg: TrainConfig,
              metrics_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
              evaluate=None, eval_every: int = 0) -> TrainResult:
    records = []
    fh = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for rec in train_steps(model, data, cfg, evaluate, eval_every):
            records.append(rec)
            if fh is not None:
                fh.write(rec.to_json() + "\n")
    finally:
        if fh is not None:
            fh.close()
    ckpt = None
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
        ckpt = Path(checkpoint_path)
    return TrainResult(records, model, ckpt)


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    with open(path) as fh:
        return [MetricsRecord.from_json(line) for line in fh if line.strip()]
