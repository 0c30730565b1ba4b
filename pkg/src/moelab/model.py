"""Pre-norm causal decoder LM whose every FFN is an ``MoELayer``."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError, ModelArchSpec, ParamCount, arch_from_obj, arch_to_obj, spec_hash
from .moe import INIT_STD, MoELayer, PoolStats

NEG_INF = -1e9


@dataclass
class Block:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor
    moe: MoELayer

    def attention_params(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]


@dataclass
class ForwardResult:
    logits: Tensor  # (B, S, V)
    lb_loss: Tensor  # summed over layers and pools
    z_loss: Tensor
    layer_lb: list[float] = field(default_factory=list)
    layer_z: list[float] = field(default_factory=list)
    stats: list[list[PoolStats]] = field(default_factory=list)  # [layer][pool]


class TransformerLM:
    def __init__(self, arch: ModelArchSpec, seed: int, tok_emb: Tensor, pos_emb: Tensor | None,
                 blocks: list[Block], final_norm: Tensor, head: Tensor):
        self.arch = arch
        self.seed = seed
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.blocks = blocks
        self.final_norm = final_norm
        self.head = head
        self.step = 0

    # ------------------------------------------------------------------
    # parameter views

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Declaration order; the checkpoint layout follows it."""
        out = [("tok_emb", self.tok_emb)]
        if self.pos_emb is not None:
            out.append(("pos_emb", self.pos_emb))
        for i, b in enumerate(self.blocks):
            out += [(f"layers.{i}.attn_norm", b.attn_norm), (f"layers.{i}.wq", b.wq), (f"layers.{i}.wk", b.wk),
                    (f"layers.{i}.wv", b.wv), (f"layers.{i}.wo", b.wo), (f"layers.{i}.ffn_norm", b.ffn_norm)]
            out += [(p.name, p) for p in b.moe.params()]
        out += [("final_norm", self.final_norm), ("head", self.head)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def router_states(self):
        return [rs for b in self.blocks for rs in b.moe.router_states()]

    def param_tally(self) -> ParamCount:
        """Count instantiated weights into the same buckets as ``count_params``."""
        emb = self.tok_emb.size + self.head.size + (self.pos_emb.size if self.pos_emb is not None else 0)
        router = 0
        active = total = self.final_norm.size
        for b in self.blocks:
            base = sum(t.size for t in b.attention_params()) + b.attn_norm.size + b.ffn_norm.size
            ffn_total = ffn_active = 0
            if b.moe.generalist is not None:
                size = sum(t.size for t in b.moe.generalist.params())
                ffn_total += size
                ffn_active += size
            for pool in b.moe.pools:
                if pool.router is not None:
                    router += pool.router.weight.size
                sizes = [sum(t.size for t in e.params()) for e in pool.experts]
                ffn_total += sum(sizes)
                ffn_active += sizes[0] * pool.spec.k
            active += base + ffn_active
            total += base + ffn_total
        return ParamCount(active, total, router, emb)

    # ------------------------------------------------------------------

    def forward(self, ids: np.ndarray) -> ForwardResult:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, S = ids.shape
        V, d, H = self.arch.vocab, self.arch.model_dim, self.arch.heads
        if ids.size and (ids.min() < 0 or ids.max() >= V):
            raise IndexError(f"token id out of range [0, {V})")
        if S > self.arch.max_seq_len:
            raise ValueError(f"sequence length {S} exceeds max_seq_len {self.arch.max_seq_len}")
        x = ad.reshape(ad.gather_rows(self.tok_emb, ids.reshape(-1)), (B, S, d))
        if self.pos_emb is not None:
            x = x + ad.slice_rows(self.pos_emb, S)
        causal = np.triu(np.ones((S, S), dtype=bool), k=1)
        dh = d // H
        scale = 1.0 / math.sqrt(dh)
        lb_total = z_total = ad.Tensor(np.zeros((), dtype=x.data.dtype))
        layer_lb, layer_z, stats = [], [], []
        for b in self.blocks:
            a = ad.rms_norm(x, b.attn_norm)

            def heads(w):
                return ad.transpose(ad.reshape(ad.matmul(a, w), (B, S, H, dh)), (0, 2, 1, 3))

            q, k, v = heads(b.wq), heads(b.wk), heads(b.wv)
            att = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * scale
            att = ad.softmax(ad.masked_fill(att, causal, NEG_INF), axis=-1)
            ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, S, d))
            x = x + ad.matmul(ctx, b.wo)

            f_in = ad.reshape(ad.rms_norm(x, b.ffn_norm), (B * S, d))
            res = b.moe(f_in)
            x = x + ad.reshape(res.out, (B, S, d))
            lb_total = lb_total + res.lb_loss
            z_total = z_total + res.z_loss
            layer_lb.append(float(res.lb_loss.data))
            layer_z.append(float(res.z_loss.data))
            stats.append(res.stats)
        x = ad.rms_norm(x, self.final_norm)
        logits = ad.matmul(x, self.head)
        return ForwardResult(logits, lb_total, z_total, layer_lb, layer_z, stats)

    __call__ = forward

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then loss-free router biases, in declaration order."""
        out = [(name, t.data) for name, t in self.named_parameters()]
        for b_idx, b in enumerate(self.blocks):
            for p_idx, pool in enumerate(b.moe.pools):
                if pool.router is not None:
                    out.append((f"layers.{b_idx}.moe.pool{p_idx}.router_bias", pool.router.bias))
        return out


def build(arch: ModelArchSpec, seed: int = 0) -> TransformerLM:
    """Seeded init: N(0, 0.02), output projections scaled by 1/sqrt(2L), unit norm gains."""
    if not isinstance(arch, ModelArchSpec):
        raise ConfigError(f"expected ModelArchSpec, got {type(arch).__name__}")
    rng = np.random.default_rng(seed)
    d, L, V = arch.model_dim, arch.layers, arch.vocab
    out_std = INIT_STD / math.sqrt(2 * L)
    tok_emb = ad.parameter(rng.normal(0.0, INIT_STD, (V, d)), "tok_emb")
    pos_emb = ad.parameter(rng.normal(0.0, INIT_STD, (arch.max_seq_len, d)), "pos_emb") if arch.positional == "learned" else None
    blocks = []
    for i in range(L):
        blocks.append(Block(
            attn_norm=ad.parameter(np.ones(d), f"layers.{i}.attn_norm"),
            wq=ad.parameter(rng.normal(0.0, INIT_STD, (d, d)), f"layers.{i}.wq"),
            wk=ad.parameter(rng.normal(0.0, INIT_STD, (d, d)), f"layers.{i}.wk"),
            wv=ad.parameter(rng.normal(0.0, INIT_STD, (d, d)), f"layers.{i}.wv"),
            wo=ad.parameter(rng.normal(0.0, out_std, (d, d)), f"layers.{i}.wo"),
            ffn_norm=ad.parameter(np.ones(d), f"layers.{i}.ffn_norm"),
            moe=MoELayer.init(arch.layer_spec, arch, rng, prefix=f"layers.{i}.moe"),
        ))
    final_norm = ad.parameter(np.ones(d), "final_norm")
    head = ad.parameter(rng.normal(0.0, INIT_STD, (d, V)), "head")
    return TransformerLM(arch, seed, tok_emb, pos_emb, blocks, final_norm, head)


# ----------------------------------------------------------------------------
# checkpoints
#
# Layout (all integers little-endian):
#   magic      8 bytes  b"MOELABCK"
#   version    uint32   CHECKPOINT_VERSION
#   hlen       uint32   length of the JSON header in bytes
#   header     hlen bytes of UTF-8 JSON:
#                {"spec_hash", "seed", "step", "arch", "dtype",
#                 "buffers": [{"name", "shape"}, ...]}
#   payload    each buffer's raw little-endian values, in header order,
#              no padding; element width given by "dtype" ("<f4" or "<f8")

CHECKPOINT_MAGIC = b"MOELABCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: TransformerLM, path: str | Path, step: int | None = None) -> None:
    arrays = model.state_arrays()
    dtype = np.dtype(model.tok_emb.data.dtype).newbyteorder("<")
    header = {
        "spec_hash": spec_hash(model.arch),
        "seed": model.seed,
        "step": model.step if step is None else step,
        "arch": arch_to_obj(model.arch),
        "dtype": dtype.str,
        "buffers": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def load_checkpoint(path: str | Path) -> TransformerLM:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    arch = arch_from_obj(header["arch"])
    if spec_hash(arch) != header["spec_hash"]:
        raise ValueError("checkpoint spec hash does not match its embedded spec")
    dtype = np.dtype(header["dtype"])
    with ad.precision(dtype.newbyteorder("=")):
        model = build(arch, header["seed"])
    model.step = header["step"]
    targets = dict(model.state_arrays())
    offset = 16 + hlen
    for entry in header["buffers"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
        target = targets[entry["name"]]
        if target.shape != shape:
            raise ValueError(f"buffer {entry['name']} has shape {shape}, model expects {target.shape}")
        target[...] = values
        offset += nbytes
    if offset != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return model


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
