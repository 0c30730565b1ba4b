"""Architecture configuration algebra.

Granularities are exact ``Fraction`` values with power-of-two denominators, so
FLOP matching and sparsity checks are equalities over rationals, never float
comparisons.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import yaml

MAX_DENOMINATOR = 64
FFN_MULTIPLIER = 4
DENSE_GRANULAR_MODES = ("off", "equal_weight", "pseudo_router")


class ConfigError(ValueError):
    """A spec is malformed or inconsistent."""


class FlopMatchError(ConfigError):
    pass


def granularity(value, max_denominator: int = MAX_DENOMINATOR, allow_zero: bool = False) -> Fraction:
    """Parse ``value`` ("1/8", 0.125, Fraction) into a validated granularity."""
    if isinstance(value, str):
        text = value.strip()
        try:
            g = Fraction(text)
        except ValueError as exc:
            raise ConfigError(f"cannot parse granularity {value!r}") from exc
    elif isinstance(value, float):
        g = Fraction(value)
    else:
        g = Fraction(value)
    if g == 0 and allow_zero:
        return g
    if not 0 < g <= 1:
        raise ConfigError(f"granularity {g} outside (0, 1]")
    den = g.denominator
    if den & (den - 1) or den > max_denominator:
        raise ConfigError(f"granularity {g} needs a power-of-two denominator <= {max_denominator}")
    return g


def fmt_fraction(x: Fraction) -> str:
    x = Fraction(x)
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


@dataclass(frozen=True)
class ExpertPoolSpec:
    n: int
    g: Fraction
    k: int

    def __post_init__(self):
        object.__setattr__(self, "g", granularity(self.g))
        if self.n < 1 or self.k < 1:
            raise ConfigError(f"pool counts must be positive (n={self.n}, k={self.k})")
        if self.k > self.n:
            raise ConfigError(f"active count k={self.k} exceeds total count n={self.n}")

    @property
    def sparsity(self) -> Fraction:
        return self.n * self.g

    @property
    def active_fraction(self) -> Fraction:
        return self.k * self.g


@dataclass(frozen=True)
class Routing:
    """``mode`` is "dropless" or "capacity"; ``factor`` only applies to capacity mode."""

    mode: str = "dropless"
    factor: Fraction | None = None

    def __post_init__(self):
        if self.mode == "dropless":
            object.__setattr__(self, "factor", None)
        elif self.mode == "capacity":
            f = Fraction(2) if self.factor is None else Fraction(self.factor)
            if f <= 0:
                raise ConfigError(f"capacity factor must be positive, got {f}")
            object.__setattr__(self, "factor", f)
        else:
            raise ConfigError(f"unknown routing mode {self.mode!r}")

    def to_obj(self):
        return "dropless" if self.mode == "dropless" else {"capacity": fmt_fraction(self.factor)}

    @classmethod
    def from_obj(cls, obj) -> Routing:
        if obj is None or obj == "dropless":
            return cls()
        if obj == "capacity":
            return cls("capacity")
        if isinstance(obj, dict) and "capacity" in obj:
            return cls("capacity", Fraction(str(obj["capacity"])))
        raise ConfigError(f"cannot parse routing {obj!r}")


@dataclass(frozen=True)
class MoELayerSpec:
    pools: tuple[ExpertPoolSpec, ...] = ()
    generalist: Fraction = Fraction(0)
    routing: Routing = Routing()
    lb_weight: float = 1e-2
    z_weight: float = 1e-3
    bias_step: float = 0.0
    dense_granular_mode: str = "off"

    def __post_init__(self):
        object.__setattr__(self, "pools", tuple(self.pools))
        object.__setattr__(self, "generalist", granularity(self.generalist, allow_zero=True))
        if self.dense_granular_mode not in DENSE_GRANULAR_MODES:
            raise ConfigError(f"unknown dense_granular_mode {self.dense_granular_mode!r}")
        if min(self.lb_weight, self.z_weight, self.bias_step) < 0:
            raise ConfigError("loss weights and bias step must be nonnegative")
        if self.dense_granular_mode != "off":
            if len(self.pools) != 1 or self.pools[0].k != self.pools[0].n or self.generalist != 0:
                raise ConfigError("dense-granular mode needs exactly one pool with k = n and no generalist")
            if self.pools[0].sparsity != 1:
                raise ConfigError(f"dense-granular mode needs s = 1, got s = {self.pools[0].sparsity}")
        if not self.pools and self.generalist == 0:
            raise ConfigError("layer has neither routed pools nor a generalist")

    @property
    def is_dense(self) -> bool:
        return not self.pools

    @classmethod
    def dense(cls) -> MoELayerSpec:
        return cls(pools=(), generalist=Fraction(1), lb_weight=0.0, z_weight=0.0)

    @classmethod
    def homogeneous(cls, n: int, g, k: int | None = None, **kw) -> MoELayerSpec:
        g = granularity(g)
        if k is None:
            k = flop_matched_active_count(g)
        return cls(pools=(ExpertPoolSpec(n, g, k),), **kw)


@dataclass(frozen=True)
class ModelArchSpec:
    name: str
    layers: int
    model_dim: int
    heads: int
    vocab: int = 50_000
    max_seq_len: int = 2048
    layer_spec: MoELayerSpec = field(default_factory=MoELayerSpec.dense)
    ffn_multiplier: int = FFN_MULTIPLIER
    positional: str = "learned"

    def __post_init__(self):
        if self.layers < 1 or self.model_dim < 1 or self.heads < 1 or self.vocab < 1:
            raise ConfigError("layers, model_dim, heads and vocab must be positive")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.ffn_multiplier != FFN_MULTIPLIER:
            raise ConfigError(f"ffn_multiplier is fixed at {FFN_MULTIPLIER}")
        if self.positional not in ("learned", "none"):
            raise ConfigError(f"unknown positional encoding {self.positional!r}")
        for g in self.granularities():
            width = self.dense_ffn_dim * g
            if width.denominator != 1:
                raise ConfigError(f"expert width {self.dense_ffn_dim}*{g} is not an integer")

    @property
    def dense_ffn_dim(self) -> int:
        return self.ffn_multiplier * self.model_dim

    def granularities(self) -> list[Fraction]:
        gs = [p.g for p in self.layer_spec.pools]
        if self.layer_spec.generalist:
            gs.append(self.layer_spec.generalist)
        return gs

    def expert_dim(self, g: Fraction) -> int:
        return int(self.dense_ffn_dim * g)

    def with_layer(self, layer_spec: MoELayerSpec, **kw) -> ModelArchSpec:
        return dataclasses.replace(self, layer_spec=layer_spec, **kw)


@dataclass(frozen=True)
class ParamCount:
    active_non_embedding: int
    total_non_embedding: int
    router_params: int
    embedding_params: int

    @property
    def total(self) -> int:
        return self.total_non_embedding + self.router_params + self.embedding_params

    @property
    def active(self) -> int:
        return self.active_non_embedding + self.router_params + self.embedding_params


@dataclass(frozen=True)
class FlopMatchReport:
    ok: bool
    active_sum: Fraction
    problems: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


# ----------------------------------------------------------------------------
# algebra


def flop_matched_active_count(g) -> int:
    g = Fraction(g)
    inv = 1 / g
    if inv.denominator != 1:
        raise FlopMatchError(f"1/g = {inv} is not an integer for g = {g}")
    return int(inv)


def activation_sparsity(spec: MoELayerSpec) -> Fraction:
    return spec.generalist + sum((p.n * p.g for p in spec.pools), Fraction(0))


def active_fraction(spec: MoELayerSpec) -> Fraction:
    return spec.generalist + sum((p.k * p.g for p in spec.pools), Fraction(0))


def validate_flop_match(spec: MoELayerSpec) -> FlopMatchReport:
    total = active_fraction(spec)
    problems = []
    if total != 1:
        problems.append(f"g_gen + sum(k_i*g_i) = {fmt_fraction(total)}, expected 1")
    for i, p in enumerate(spec.pools):
        if p.k > p.n:
            problems.append(f"pool {i}: k={p.k} > n={p.n}")
    return FlopMatchReport(not problems, total, tuple(problems))


def count_params(arch: ModelArchSpec) -> ParamCount:
    d, L = arch.model_dim, arch.layers
    spec = arch.layer_spec
    dense_ffn = 3 * d * arch.dense_ffn_dim
    attn = 4 * d * d
    norms = 2 * d
    active_ffn = dense_ffn * active_fraction(spec)
    total_ffn = dense_ffn * activation_sparsity(spec)
    assert active_ffn.denominator == 1 and total_ffn.denominator == 1
    active = L * (attn + norms + int(active_ffn)) + d
    total = L * (attn + norms + int(total_ffn)) + d
    router = L * sum(d * p.n for p in spec.pools) if spec.dense_granular_mode != "equal_weight" else 0
    emb = 2 * arch.vocab * d
    if arch.positional == "learned":
        emb += arch.max_seq_len * d
    return ParamCount(active, total, router, emb)


def token_budget(active_params: int, multiplier=20) -> int:
    if active_params <= 0:
        raise ConfigError("active parameter count must be positive")
    m = Fraction(multiplier) if not isinstance(multiplier, float) else Fraction(str(multiplier))
    return round(m * active_params)


# ----------------------------------------------------------------------------
# grids

POW2_EXPERT_COUNTS = tuple(2**i for i in range(11))  # 1 .. 1024
POW2_GRANULARITIES = tuple(Fraction(1, 2**i) for i in range(7))  # 1 .. 1/64

# Shaded (n, g) cells of the published homogeneous configuration grid.
FIGURE_HOMOGENEOUS_CELLS = (
    (1, 1), (2, 2), (4, 4), (8, 8),
    (2, 1), (4, 2), (8, 4), (16, 8), (32, 16), (64, 32), (128, 64),
    (4, 1), (8, 2), (16, 4), (32, 8), (64, 16), (128, 32), (256, 64),
    (8, 1), (16, 2), (32, 4), (64, 8), (128, 16), (256, 32), (512, 64),
    (16, 1), (32, 2), (64, 4), (128, 8), (256, 16), (512, 32),
    (64, 2), (128, 4), (256, 8), (512, 16),
    (128, 2), (256, 4), (512, 8), (1024, 16),
    (256, 2), (512, 4), (1024, 8),
    (512, 2),
)  # (n, 1/g)

# Heterogeneous table: (g1, g2) -> list of (n1, n2); k1*g1 = k2*g2 = 1/2 in every row.
HETEROGENEOUS_TABLE = {
    (Fraction(1, 2), Fraction(1, 4)): [(4, 8), (8, 16), (16, 32), (32, 64)],
    (Fraction(1, 4), Fraction(1, 8)): [(8, 16), (16, 32), (32, 64), (64, 128)],
    (Fraction(1, 8), Fraction(1, 16)): [(16, 32), (32, 64), (64, 128), (128, 256)],
    (Fraction(1, 16), Fraction(1, 32)): [(16, 32), (32, 64), (64, 128), (128, 256)],
}


def enumerate_homogeneous_grid(
    n_range: Iterable[int] = POW2_EXPERT_COUNTS,
    g_range: Iterable = POW2_GRANULARITIES,
    s_max=256,
    **layer_kw,
) -> list[MoELayerSpec]:
    """Every FLOP-matched single-pool layer with k = 1/g <= n and n*g <= s_max."""
    out = []
    s_max = Fraction(s_max)
    for n in sorted(set(n_range)):
        for g in sorted({granularity(g) for g in g_range}, reverse=True):
            k = flop_matched_active_count(g)
            if k <= n and n * g <= s_max:
                out.append(MoELayerSpec.homogeneous(n, g, k, **layer_kw))
    return out


def figure_homogeneous_grid(**layer_kw) -> list[MoELayerSpec]:
    return [MoELayerSpec.homogeneous(n, Fraction(1, inv), inv, **layer_kw) for n, inv in FIGURE_HOMOGENEOUS_CELLS]


def heterogeneous_pair(g1, n1: int, **layer_kw) -> MoELayerSpec:
    """Two pools, the second with half the granularity and twice the experts.

    Active counts split the FLOP budget evenly: k1*g1 = k2*g2 = 1/2.
    """
    g1 = granularity(g1)
    g2 = g1 / 2
    k1 = Fraction(1, 2) / g1
    if k1.denominator != 1:
        raise FlopMatchError(f"granularity {g1} cannot carry half the active budget")
    k1 = int(k1)
    return MoELayerSpec(
        pools=(ExpertPoolSpec(n1, g1, k1), ExpertPoolSpec(2 * n1, g2, 2 * k1)),
        **layer_kw,
    )


def enumerate_heterogeneous_grid(table=None, **layer_kw) -> list[MoELayerSpec]:
    table = HETEROGENEOUS_TABLE if table is None else table
    out = []
    for (g1, g2), rows in table.items():
        for n1, n2 in rows:
            spec = heterogeneous_pair(g1, n1, **layer_kw)
            if spec.pools[1].g != g2 or spec.pools[1].n != n2:
                raise ConfigError(f"table row ({g1},{g2}),({n1},{n2}) violates the pairing rule")
            out.append(spec)
    return out


def generalist_grid(
    generalists: Sequence = (Fraction(1, 2), Fraction(1, 4)),
    n_range: Iterable[int] = (4, 8, 16),
    g_range: Iterable = (Fraction(1, 4), Fraction(1, 8)),
    **layer_kw,
) -> list[MoELayerSpec]:
    """Homogeneous pools that share the FLOP budget with an always-on generalist."""
    out = []
    for g_gen in generalists:
        g_gen = granularity(g_gen)
        for n in n_range:
            for g in g_range:
                g = granularity(g)
                k = (1 - g_gen) / g
                if k.denominator != 1 or k < 1 or k > n:
                    continue
                out.append(MoELayerSpec(pools=(ExpertPoolSpec(n, g, int(k)),), generalist=g_gen, **layer_kw))
    return out


# ----------------------------------------------------------------------------
# published architecture rows

ARCHITECTURES = {
    "10M": dict(layers=3, model_dim=48, heads=3),
    "20M": dict(layers=4, model_dim=96, heads=4),
    "50M": dict(layers=5, model_dim=240, heads=6),
    "80M": dict(layers=8, model_dim=336, heads=7),
    "110M": dict(layers=9, model_dim=432, heads=9),
    "200M": dict(layers=10, model_dim=640, heads=10),
    "300M": dict(layers=12, model_dim=832, heads=13),
}


def named_arch(name: str, layer_spec: MoELayerSpec | None = None, **kw) -> ModelArchSpec:
    try:
        dims = ARCHITECTURES[name]
    except KeyError:
        raise ConfigError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}") from None
    return ModelArchSpec(name=name, layer_spec=layer_spec or MoELayerSpec.dense(), **dims, **kw)


# ----------------------------------------------------------------------------
# spec files


def layer_to_obj(spec: MoELayerSpec) -> dict:
    return {
        "pools": [{"n": p.n, "g": fmt_fraction(p.g), "k": p.k} for p in spec.pools],
        "generalist": fmt_fraction(spec.generalist),
        "routing": spec.routing.to_obj(),
        "lb_weight": spec.lb_weight,
        "z_weight": spec.z_weight,
        "bias_step": spec.bias_step,
        "dense_granular_mode": spec.dense_granular_mode,
    }


def layer_from_obj(obj: dict) -> MoELayerSpec:
    obj = dict(obj or {})
    mode = obj.get("dense_granular_mode", "off")
    if mode is False:  # bare YAML `off`
        mode = "off"
    pools = []
    for p in obj.get("pools", []):
        g = granularity(str(p["g"]))
        k = p.get("k")
        pools.append(ExpertPoolSpec(int(p["n"]), g, int(k) if k is not None else flop_matched_active_count(g)))
    return MoELayerSpec(
        pools=tuple(pools),
        generalist=granularity(str(obj.get("generalist", 0)), allow_zero=True),
        routing=Routing.from_obj(obj.get("routing", "dropless")),
        lb_weight=float(obj.get("lb_weight", 1e-2)),
        z_weight=float(obj.get("z_weight", 1e-3)),
        bias_step=float(obj.get("bias_step", 0.0)),
        dense_granular_mode=mode,
    )


def arch_to_obj(arch: ModelArchSpec) -> dict:
    return {
        "name": arch.name,
        "layers": arch.layers,
        "model_dim": arch.model_dim,
        "heads": arch.heads,
        "vocab": arch.vocab,
        "max_seq_len": arch.max_seq_len,
        "ffn_multiplier": arch.ffn_multiplier,
        "positional": arch.positional,
        "moe": layer_to_obj(arch.layer_spec),
    }


def arch_from_obj(obj: dict) -> ModelArchSpec:
    obj = dict(obj)
    base = {}
    if "arch" in obj:  # shorthand: start from a published row
        base = dict(ARCHITECTURES[obj["arch"]], name=obj["arch"])
    fields = {k: obj[k] for k in ("name", "layers", "model_dim", "heads", "vocab", "max_seq_len", "ffn_multiplier", "positional") if k in obj}
    base.update(fields)
    return ModelArchSpec(layer_spec=layer_from_obj(obj.get("moe", {})), **base)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def spec_hash(arch: ModelArchSpec, *extra) -> str:
    payload = [arch_to_obj(arch), *extra]
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]


def load_arch(path: str | Path) -> ModelArchSpec:
    with open(path) as fh:
        return arch_from_obj(yaml.safe_load(fh))


def dump_arch(arch: ModelArchSpec, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(arch_to_obj(arch), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text
