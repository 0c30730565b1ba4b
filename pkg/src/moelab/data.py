"""Seeded synthetic corpora with several distinguishable domains.

Every domain is a small generative process over a shared vocabulary. Sequences
are assigned to train or held-out by a hash of their content, so the two
splits can never share a sequence.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

KINDS = ("markov-chain", "template-grammar", "mixture-of-domains")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticCorpus:
    kind: str = "mixture-of-domains"
    vocab: int = 64
    domains: tuple[str, ...] = ("d0", "d1", "d2", "d3")
    seed: int = 0
    seq_len: int = 65
    sequences_per_domain: int = 512
    heldout_mod: int = 10  # a sequence is held out when hash % heldout_mod == 0
    concentration: float = 0.05  # Dirichlet alpha of Markov transition rows
    skew: float = 0.0  # Zipf exponent biasing every domain toward low token ids

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        if self.kind not in KINDS:
            raise CorpusError(f"unknown corpus kind {self.kind!r}")
        if self.vocab < 16:
            raise CorpusError(f"vocab must be >= 16, got {self.vocab}")
        if not self.domains:
            raise CorpusError("corpus needs at least one domain")
        if len(set(self.domains)) != len(self.domains):
            raise CorpusError("domain names must be unique")
        if self.seq_len < 2 or self.sequences_per_domain < 1 or self.heldout_mod < 2:
            raise CorpusError("seq_len >= 2, sequences_per_domain >= 1, heldout_mod >= 2 required")

    def to_obj(self) -> dict:
        obj = dataclasses.asdict(self)
        obj["domains"] = list(self.domains)
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> SyntheticCorpus:
        obj = dict(obj)
        if "domains" in obj:
            obj["domains"] = tuple(obj["domains"])
        return cls(**obj)


@dataclass
class CorpusSplits:
    train: np.ndarray  # (N, seq_len) int64
    train_domain: np.ndarray  # (N,) domain index of each train row
    heldout: dict[str, np.ndarray]
    domains: tuple[str, ...]


# ----------------------------------------------------------------------------
# generators


def _zipf_weights(vocab: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, vocab + 1) ** skew
    return w / w.sum()


def markov_chain(rng: np.random.Generator, vocab: int, concentration: float, skew: float):
    """Random sparse transition matrix, start distribution and a sampler."""
    perm = rng.permutation(vocab)
    prior = _zipf_weights(vocab, skew)[np.argsort(perm)] if skew else np.full(vocab, 1.0 / vocab)
    trans = rng.dirichlet(np.full(vocab, concentration), size=vocab)
    if skew:
        trans = trans * prior
        trans /= trans.sum(axis=1, keepdims=True)
    start = rng.dirichlet(np.full(vocab, 1.0)) * prior
    start /= start.sum()
    return start, trans


def _sample_markov(rng, start, trans, n: int, length: int) -> np.ndarray:
    vocab = len(start)
    cdf = np.cumsum(trans, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty((n, length), dtype=np.int64)
    out[:, 0] = rng.choice(vocab, size=n, p=start)
    u = rng.random((n, length))
    for t in range(1, length):
        rows = cdf[out[:, t - 1]]
        out[:, t] = (u[:, t][:, None] > rows).sum(axis=1)
    return np.minimum(out, vocab - 1)


def _sample_template(rng, vocab: int, n: int, length: int, skew: float) -> np.ndarray:
    """Sentences of word classes: each template is a fixed class sequence, words drawn per class."""
    n_classes = 4
    classes = np.array_split(rng.permutation(vocab), n_classes)
    word_p = [_zipf_weights(len(c), max(skew, 2.0)) for c in classes]
    templates = [rng.integers(0, n_classes, size=rng.integers(3, 7)) for _ in range(3)]
    out = np.empty((n, length), dtype=np.int64)
    for i in range(n):
        seq: list[int] = []
        while len(seq) < length:
            tpl = templates[rng.integers(len(templates))]
            for c in tpl:
                seq.append(int(classes[c][rng.choice(len(classes[c]), p=word_p[c])]))
        out[i] = seq[:length]
    return out


def _domain_kind(spec: SyntheticCorpus, index: int) -> str:
    if spec.kind != "mixture-of-domains":
        return spec.kind
    # mostly Markov chains, every third domain a template grammar
    return "template-grammar" if index % 3 == 2 else "markov-chain"


def sample_domain(spec: SyntheticCorpus, index: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, index])
    kind = _domain_kind(spec, index)
    if kind == "markov-chain":
        start, trans = markov_chain(rng, spec.vocab, spec.concentration, spec.skew)
        return _sample_markov(rng, start, trans, n, spec.seq_len)
    return _sample_template(rng, spec.vocab, n, spec.seq_len, spec.skew)


def sequence_hash(seq: np.ndarray) -> int:
    digest = hashlib.blake2b(np.ascontiguousarray(seq, dtype="<i8").tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def is_heldout(seq: np.ndarray, mod: int) -> bool:
    return sequence_hash(seq) % mod == 0


def gen_corpus(spec: SyntheticCorpus) -> CorpusSplits:
    train, train_dom, heldout = [], [], {}
    for i, name in enumerate(spec.domains):
        seqs = sample_domain(spec, i, spec.sequences_per_domain)
        mask = np.array([is_heldout(s, spec.heldout_mod) for s in seqs], dtype=bool)
        if mask.all() or not mask.any():
            raise CorpusError(f"domain {name!r} produced a degenerate split; raise sequences_per_domain")
        heldout[name] = seqs[mask]
        train.append(seqs[~mask])
        train_dom.append(np.full((~mask).sum(), i))
    return CorpusSplits(np.concatenate(train), np.concatenate(train_dom), heldout, spec.domains)


def batches(splits: CorpusSplits, batch_size: int, seed: int = 0) -> Iterator[np.ndarray]:
    """Endless stream of (batch_size, seq_len) train rows, sampled with a seeded RNG."""
    rng = np.random.default_rng(seed)
    n = len(splits.train)
    while True:
        yield splits.train[rng.integers(0, n, size=batch_size)]


def token_distribution(seqs: np.ndarray, vocab: int, smoothing: float = 1e-3) -> np.ndarray:
    counts = np.bincount(seqs.reshape(-1), minlength=vocab).astype(np.float64) + smoothing
    return counts / counts.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))
