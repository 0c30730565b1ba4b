"""Token-choice MoE feed-forward layer.

Each expert pool has its own linear router. Tokens pick their top-k experts by
``probs + loss_free_bias``; the bias steers selection only, combine weights come
from the router probabilities of the selected experts renormalised to sum to 1.
Expert evaluation is a gather of the assigned tokens, a dense SwiGLU on that
batch, and a weighted scatter-add back to token positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError, ExpertPoolSpec, ModelArchSpec, MoELayerSpec

INIT_STD = 0.02


@dataclass
class RouterState:
    weight: Tensor  # (d, n)
    bias: np.ndarray  # (n,), selection-only
    step_size: float = 0.0

    @property
    def n_experts(self) -> int:
        return self.weight.shape[1]


@dataclass
class RouterAffinities:
    logits: Tensor  # (T, n)
    probs: Tensor  # (T, n)


@dataclass
class RoutingOutcome:
    experts: np.ndarray  # (T, k) int
    weights: Tensor  # (T, k) combine weights, rows sum to 1 over kept slots
    dropped: np.ndarray  # (T, k) bool
    n_experts: int

    @property
    def n_tokens(self) -> int:
        return self.experts.shape[0]

    @property
    def k(self) -> int:
        return self.experts.shape[1]

    def loads(self) -> np.ndarray:
        """Assignments per expert as chosen by the router (before any dropping)."""
        return np.bincount(self.experts.reshape(-1), minlength=self.n_experts)

    def kept_loads(self) -> np.ndarray:
        return np.bincount(self.experts[~self.dropped], minlength=self.n_experts)


@dataclass
class DispatchPlan:
    """Per-expert (token, slot) lists in ascending token order."""

    tokens: list[np.ndarray]
    slots: list[np.ndarray]
    dropped: np.ndarray  # (T, k) bool
    capacity: int | None = None

    def batch_sizes(self) -> np.ndarray:
        return np.array([len(t) for t in self.tokens], dtype=np.int64)

    @property
    def n_dropped(self) -> int:
        return int(self.dropped.sum())


@dataclass
class RoutingStats:
    f: np.ndarray  # load fraction per expert, sums to 1
    P: Tensor  # mean router probability per expert, differentiable
    raw_loads: np.ndarray
    n_tokens: int
    k: int

    @property
    def n_experts(self) -> int:
        return len(self.raw_loads)


@dataclass
class PoolStats:
    """Plain-number per-pool record exported to the metrics stream."""

    raw_loads: list[int]
    f: list[float]
    P: list[float]
    lb_loss: float
    z_loss: float
    dropped: int
    assignments: int

    def to_dict(self) -> dict:
        return dict(
            raw_loads=self.raw_loads, f=self.f, P=self.P, lb_loss=self.lb_loss,
            z_loss=self.z_loss, dropped=self.dropped, assignments=self.assignments,
        )


# ----------------------------------------------------------------------------
# routing


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores per row; ties go to the lower expert index."""
    n = scores.shape[-1]
    if k > n:
        raise ConfigError(f"k={k} exceeds expert count {n}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def route_probs(probs: Tensor, bias: np.ndarray | None, k: int) -> RoutingOutcome:
    probs = ad.as_tensor(probs)
    n = probs.shape[-1]
    if k > n:
        raise ConfigError(f"k={k} exceeds expert count {n}")
    scores = probs.data if bias is None else probs.data + bias
    experts = select_topk(scores, k)
    chosen = ad.take_along(probs, experts, axis=-1)
    weights = chosen / ad.tsum(chosen, axis=-1, keepdims=True)
    return RoutingOutcome(experts, weights, np.zeros(experts.shape, dtype=bool), n)


def route_topk(h: Tensor, state: RouterState, k: int) -> tuple[RouterAffinities, RoutingOutcome]:
    if k > state.n_experts:
        raise ConfigError(f"k={k} exceeds expert count {state.n_experts}")
    logits = ad.matmul(h, state.weight)
    probs = ad.softmax(logits, axis=-1)
    return RouterAffinities(logits, probs), route_probs(probs, state.bias, k)


def routing_stats(aff: RouterAffinities, outcome: RoutingOutcome) -> RoutingStats:
    loads = outcome.loads()
    T, k = outcome.experts.shape
    f = loads / float(T * k)
    return RoutingStats(f=f, P=ad.mean(aff.probs, axis=0), raw_loads=loads, n_tokens=T, k=k)


# ----------------------------------------------------------------------------
# dispatch


def dispatch_dropless(outcome: RoutingOutcome) -> DispatchPlan:
    flat = outcome.experts.reshape(-1)
    token_of = np.repeat(np.arange(outcome.n_tokens), outcome.k)
    slot_of = np.tile(np.arange(outcome.k), outcome.n_tokens)
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(outcome.n_experts + 1))
    tokens, slots = [], []
    for e in range(outcome.n_experts):
        sel = order[bounds[e]:bounds[e + 1]]
        tokens.append(token_of[sel])
        slots.append(slot_of[sel])
    return DispatchPlan(tokens, slots, np.zeros_like(outcome.dropped), None)


def expert_capacity(factor, n_tokens: int, k: int, n_experts: int) -> int:
    if factor == math.inf:
        return n_tokens * k
    if isinstance(factor, float):
        factor = Fraction(str(factor))
    return math.ceil(Fraction(factor) * n_tokens * k / n_experts)


def dispatch_capacity(outcome: RoutingOutcome, factor, affinity: np.ndarray | None = None) -> DispatchPlan:
    """Keep each expert's highest-affinity assignments up to its capacity.

    ``affinity`` is the (T, n) router probability matrix; ties (and a missing
    affinity) fall back to earlier token position.
    """
    if factor <= 0:
        raise ConfigError(f"capacity factor must be positive, got {factor}")
    cap = expert_capacity(factor, outcome.n_tokens, outcome.k, outcome.n_experts)
    plan = dispatch_dropless(outcome)
    dropped = np.zeros(outcome.experts.shape, dtype=bool)
    tokens, slots = [], []
    for e, (tok, slot) in enumerate(zip(plan.tokens, plan.slots)):
        if len(tok) > cap:
            aff = affinity[tok, e] if affinity is not None else np.zeros(len(tok))
            rank = np.lexsort((tok, -aff))
            keep = np.sort(rank[:cap])
            lost = np.setdiff1d(np.arange(len(tok)), keep)
            dropped[tok[lost], slot[lost]] = True
            tok, slot = tok[keep], slot[keep]
        tokens.append(tok)
        slots.append(slot)
    return DispatchPlan(tokens, slots, dropped, cap)


def apply_drops(outcome: RoutingOutcome, plan: DispatchPlan) -> RoutingOutcome:
    """Zero dropped slots and renormalise the surviving combine weights per token."""
    if not plan.dropped.any():
        return outcome
    keep = (~plan.dropped).astype(outcome.weights.data.dtype)
    kept = outcome.weights * keep
    total = ad.tsum(kept, axis=-1, keepdims=True)
    # tokens that lost every slot get weight 0; guard their denominator
    guard = (keep.sum(axis=-1, keepdims=True) == 0).astype(keep.dtype)
    weights = kept / (total + guard)
    return RoutingOutcome(outcome.experts, weights, plan.dropped.copy(), outcome.n_experts)


# ----------------------------------------------------------------------------
# auxiliary losses and bias


def lb_loss(stats: RoutingStats) -> Tensor:
    """N_E * sum_i f_i * P_i with f held constant."""
    f = ad.Tensor(stats.f.astype(stats.P.data.dtype))
    return ad.tsum(f * stats.P) * float(stats.n_experts)


def z_loss(aff: RouterAffinities) -> Tensor:
    lse = ad.logsumexp(aff.logits, axis=-1)
    return ad.mean(lse * lse)


def update_loss_free_bias(state: RouterState, raw_loads) -> RouterState:
    if state.step_size == 0:
        return state
    loads = np.asarray(raw_loads, dtype=np.float64)
    delta = state.step_size * np.sign(loads.mean() - loads)
    state.bias = (state.bias + delta).astype(state.bias.dtype)
    return state


# ----------------------------------------------------------------------------
# parameters


@dataclass
class FFNWeights:
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ad.swiglu_ffn(x, self.w_gate, self.w_up, self.w_down)

    def params(self) -> list[Tensor]:
        return [self.w_gate, self.w_up, self.w_down]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, m: int, out_std: float, prefix: str) -> FFNWeights:
        return cls(
            ad.parameter(rng.normal(0.0, INIT_STD, (d, m)), f"{prefix}.w_gate"),
            ad.parameter(rng.normal(0.0, INIT_STD, (d, m)), f"{prefix}.w_up"),
            ad.parameter(rng.normal(0.0, out_std, (m, d)), f"{prefix}.w_down"),
        )


@dataclass
class ExpertPool:
    spec: ExpertPoolSpec
    router: RouterState | None
    experts: list[FFNWeights]

    def params(self) -> list[Tensor]:
        out = [] if self.router is None else [self.router.weight]
        for e in self.experts:
            out.extend(e.params())
        return out


@dataclass
class MoEOutput:
    out: Tensor
    lb_loss: Tensor
    z_loss: Tensor
    stats: list[PoolStats] = field(default_factory=list)


class MoELayer:
    """Routed pools plus an optional always-on generalist, per ``MoELayerSpec``."""

    def __init__(self, spec: MoELayerSpec, d: int, generalist: FFNWeights | None, pools: list[ExpertPool]):
        self.spec = spec
        self.d = d
        self.generalist = generalist
        self.pools = pools
        self._check()

    def _check(self):
        if len(self.pools) != len(self.spec.pools):
            raise ConfigError(f"spec has {len(self.spec.pools)} pools, state has {len(self.pools)}")
        for pool, ps in zip(self.pools, self.spec.pools):
            if len(pool.experts) != ps.n:
                raise ConfigError(f"pool expects n={ps.n} experts, state has {len(pool.experts)}")
            if pool.router is not None and pool.router.n_experts != ps.n:
                raise ConfigError(f"router width {pool.router.n_experts} != n={ps.n}")
        if (self.generalist is None) != (self.spec.generalist == 0):
            raise ConfigError("generalist weights do not match spec")

    @classmethod
    def init(cls, spec: MoELayerSpec, arch: ModelArchSpec, rng: np.random.Generator, prefix: str = "moe") -> MoELayer:
        d = arch.model_dim
        out_std = INIT_STD / math.sqrt(2 * arch.layers)
        dtype = ad.default_dtype()
        generalist = None
        if spec.generalist:
            generalist = FFNWeights.init(rng, d, arch.expert_dim(spec.generalist), out_std, f"{prefix}.generalist")
        pools = []
        for i, ps in enumerate(spec.pools):
            router = None
            if spec.dense_granular_mode != "equal_weight":
                router = RouterState(
                    ad.parameter(rng.normal(0.0, INIT_STD, (d, ps.n)), f"{prefix}.pool{i}.router"),
                    np.zeros(ps.n, dtype=dtype),
                    spec.bias_step,
                )
            m = arch.expert_dim(ps.g)
            experts = [FFNWeights.init(rng, d, m, out_std, f"{prefix}.pool{i}.expert{e}") for e in range(ps.n)]
            pools.append(ExpertPool(ps, router, experts))
        return cls(spec, d, generalist, pools)

    def params(self) -> list[Tensor]:
        out = [] if self.generalist is None else self.generalist.params()
        for p in self.pools:
            out.extend(p.params())
        return out

    def router_states(self) -> list[RouterState]:
        return [p.router for p in self.pools if p.router is not None]

    def __call__(self, h: Tensor) -> MoEOutput:
        return moe_forward(h, self)


def _zero(h: Tensor) -> Tensor:
    return ad.Tensor(np.zeros((), dtype=h.data.dtype))


def run_experts(h: Tensor, pool: ExpertPool, outcome: RoutingOutcome, plan: DispatchPlan) -> Tensor:
    """Weighted sum of selected expert outputs, accumulated in expert-index order."""
    T = h.shape[0]
    out = None
    for e, expert in enumerate(pool.experts):
        tok, slot = plan.tokens[e], plan.slots[e]
        if len(tok) == 0:
            continue
        y = expert(ad.gather_rows(h, tok))
        w = ad.reshape(ad.gather_rows(ad.reshape(outcome.weights, (-1,)), tok * outcome.k + slot), (-1, 1))
        contrib = ad.scatter_add_rows(T, tok, y * w)
        out = contrib if out is None else out + contrib
    if out is None:
        out = ad.Tensor(np.zeros(h.shape, dtype=h.data.dtype))
    return out


def moe_forward(h: Tensor, layer: MoELayer) -> MoEOutput:
    """Generalist (weight 1) plus every pool's routed combine, with raw aux losses."""
    spec = layer.spec
    if spec.dense_granular_mode != "off":
        return MoEOutput(dense_granular_forward(h, layer), _zero(h), _zero(h), [])
    out = layer.generalist(h) if layer.generalist is not None else None
    lb_total, z_total = _zero(h), _zero(h)
    stats = []
    for pool in layer.pools:
        aff, outcome = route_topk(h, pool.router, pool.spec.k)
        if spec.routing.mode == "capacity":
            plan = dispatch_capacity(outcome, spec.routing.factor, aff.probs.data)
            outcome = apply_drops(outcome, plan)
        else:
            plan = dispatch_dropless(outcome)
        rs = routing_stats(aff, outcome)
        lb = lb_loss(rs)
        z = z_loss(aff)
        y = run_experts(h, pool, outcome, plan)
        out = y if out is None else out + y
        lb_total = lb_total + lb
        z_total = z_total + z
        stats.append(PoolStats(
            raw_loads=rs.raw_loads.tolist(), f=rs.f.tolist(), P=rs.P.data.astype(float).tolist(),
            lb_loss=float(lb.data), z_loss=float(z.data), dropped=plan.n_dropped,
            assignments=int(outcome.experts.size),
        ))
    return MoEOutput(out, lb_total, z_total, stats)


def dense_granular_forward(h: Tensor, layer: MoELayer) -> Tensor:
    """All n components active; equal 1/n weights or softmax pseudo-router weights."""
    spec = layer.spec
    if spec.dense_granular_mode == "off":
        raise ConfigError("layer is not in a dense-granular mode")
    pool = layer.pools[0]
    if pool.spec.sparsity != 1 or pool.spec.k != pool.spec.n:
        raise ConfigError(f"dense-granular forward needs s = 1 and k = n, got {pool.spec}")
    n = pool.spec.n
    if spec.dense_granular_mode == "equal_weight":
        out = None
        for expert in pool.experts:
            y = expert(h)
            out = y if out is None else out + y
        return out if n == 1 else out * (1.0 / n)
    probs = ad.softmax(ad.matmul(h, pool.router.weight), axis=-1)
    out = None
    for e, expert in enumerate(pool.experts):
        w = ad.take_along(probs, np.full((h.shape[0], 1), e), axis=-1)
        y = expert(h) * w
        out = y if out is None else out + y
    return out
