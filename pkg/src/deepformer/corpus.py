"""Synthetic parallel corpora, vocabularies and token-budget batching."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .architecture import BOS, EOS, PAD, UNK

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
TASK_KINDS = ("copy", "reverse_substitute")


class SpecError(ValueError):
    pass


class DataError(ValueError):
    pass


class Vocab:
    """Token <-> id bijection with pad=0, bos=1, eos=2, unk=3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise SpecError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise SpecError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, sentence: str | Sequence[str]) -> list[int]:
        toks = sentence.split() if isinstance(sentence, str) else sentence
        return [self.stoi.get(t, UNK) for t in toks]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    @property
    def content_ids(self) -> range:
        return range(len(RESERVED), len(self.itos))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass
class TaskSpec:
    kind: str = "reverse_substitute"
    vocab_size: int = 64
    min_len: int = 5
    max_len: int = 24
    perm_seed: int = 0
    n_train: int = 20000
    n_dev: int = 1000
    n_test: int = 1000

    def validate(self) -> "TaskSpec":
        if self.kind not in TASK_KINDS:
            raise SpecError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.vocab_size < 8:
            raise SpecError(f"vocab_size={self.vocab_size} leaves too few content tokens (need >= 8)")
        if not 1 <= self.min_len <= self.max_len:
            raise SpecError(f"bad length range [{self.min_len}, {self.max_len}]")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise SpecError("split sizes must be non-negative")
        return self


@dataclass
class ParallelCorpus:
    """Sentence pairs as id lists, split into train/dev/test."""
    vocab: Vocab
    train: list[tuple[list[int], list[int]]]
    dev: list[tuple[list[int], list[int]]]
    test: list[tuple[list[int], list[int]]]
    permutation: np.ndarray

    def split(self, name: str):
        return getattr(self, name)


def build_vocab(spec: TaskSpec) -> Vocab:
    if spec.vocab_size < 8:
        raise SpecError(f"vocab_size={spec.vocab_size} leaves too few content tokens (need >= 8)")
    return Vocab(list(RESERVED) + [f"t{i}" for i in range(len(RESERVED), spec.vocab_size)])


def substitution(spec: TaskSpec) -> np.ndarray:
    """Permutation over ids that fixes the reserved ids."""
    rng = np.random.default_rng([spec.perm_seed, 7919])
    content = np.arange(len(RESERVED), spec.vocab_size)
    perm = np.arange(spec.vocab_size)
    perm[len(RESERVED):] = rng.permutation(content)
    return perm


def transform(src: Sequence[int], kind: str, perm: np.ndarray) -> list[int]:
    if kind == "copy":
        return list(src)
    return [int(perm[t]) for t in reversed(src)]


def invert(tgt: Sequence[int], perm: np.ndarray) -> list[int]:
    """Undo reverse_substitute."""
    inv = np.argsort(perm)
    return [int(inv[t]) for t in reversed(tgt)]


def _split_of(src: Sequence[int], spec: TaskSpec) -> str:
    total = spec.n_train + spec.n_dev + spec.n_test
    digest = hashlib.sha256(",".join(map(str, src)).encode()).digest()
    bucket = int.from_bytes(digest[:8], "little") % max(total, 1)
    if bucket < spec.n_dev:
        return "dev"
    if bucket < spec.n_dev + spec.n_test:
        return "test"
    return "train"


def gen_task(spec: TaskSpec, seed: int) -> ParallelCorpus:
    """Deterministic synthetic corpus.

    A sentence's split is a hash of its source tokens, so the same source can
    never land in two splits; duplicates inside a split are dropped.
    """
    spec.validate()
    vocab = build_vocab(spec)
    perm = substitution(spec)
    rng = np.random.default_rng([seed, 104729])
    quota = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
    out = {k: [] for k in quota}
    seen = set()
    n_content = spec.vocab_size - len(RESERVED)
    budget = 50 * (spec.n_train + spec.n_dev + spec.n_test) + 1000
    attempts = 0
    while any(len(out[k]) < quota[k] for k in quota):
        attempts += 1
        if attempts > budget:
            raise SpecError("could not fill the requested splits; sentence space too small")
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = tuple(int(t) for t in rng.integers(0, n_content, size=n) + len(RESERVED))
        if src in seen:
            continue
        name = _split_of(src, spec)
        if len(out[name]) >= quota[name]:
            continue
        seen.add(src)
        out[name].append((list(src), transform(src, spec.kind, perm)))
    return ParallelCorpus(vocab, out["train"], out["dev"], out["test"], perm)


# -- batching ---------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray      # [B, Ls], source ids + eos, pad-filled
    tgt_in: np.ndarray   # [B, Lt], bos + target ids
    labels: np.ndarray   # [B, Lt], target ids + eos
    indices: np.ndarray  # corpus positions of the rows

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.labels != PAD

    @property
    def n_tokens(self) -> int:
        return int(self.tgt_mask.sum())

    def __len__(self):
        return len(self.indices)


def sentence_cost(src: Sequence[int], tgt: Sequence[int]) -> int:
    """Budget units of one pair: the longer side plus bos and eos."""
    return max(len(src), len(tgt)) + 2


def collate(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], indices=None) -> Batch:
    B = len(pairs)
    Ls = max(len(s) for s, _ in pairs) + 1
    Lt = max(len(t) for _, t in pairs) + 1
    src = np.full((B, Ls), PAD, dtype=np.int64)
    tgt_in = np.full((B, Lt), PAD, dtype=np.int64)
    labels = np.full((B, Lt), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s) + 1] = list(s) + [EOS]
        tgt_in[i, : len(t) + 1] = [BOS] + list(t)
        labels[i, : len(t) + 1] = list(t) + [EOS]
    idx = np.arange(B) if indices is None else np.asarray(indices)
    return Batch(src, tgt_in, labels, idx)


def make_batches(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], budget: float,
                 seed: int) -> list[Batch]:
    """Length-bucketed batches whose summed costs stay within ``budget``.

    Sentences are ordered by cost with a seeded tie-break, packed greedily,
    and the batch order is shuffled with the same seed.
    """
    if not pairs:
        return []
    costs = np.array([sentence_cost(s, t) for s, t in pairs])
    too_long = np.flatnonzero(costs > budget)
    if too_long.size:
        i = int(too_long[0])
        raise DataError(f"sentence {i} needs {costs[i]} tokens but the batch budget is {budget}")
    rng = np.random.default_rng([seed, 31337])
    order = np.lexsort((rng.random(len(pairs)), costs))
    groups, cur, used = [], [], 0
    for i in order:
        c = int(costs[i])
        if cur and used + c > budget:
            groups.append(cur)
            cur, used = [], 0
        cur.append(int(i))
        used += c
    if cur:
        groups.append(cur)
    perm = rng.permutation(len(groups))
    return [collate([pairs[i] for i in groups[g]], groups[g]) for g in perm]


# -- plain-text files -------------------------------------------------------

def write_split(prefix, pairs, vocab: Vocab) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.src").write_text("".join(vocab.decode(s) + "\n" for s, _ in pairs), encoding="utf-8")
    Path(f"{prefix}.tgt").write_text("".join(vocab.decode(t) + "\n" for _, t in pairs), encoding="utf-8")


def read_lines(path) -> list[list[str]]:
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]


def read_split(prefix, vocab: Vocab):
    src = read_lines(f"{prefix}.src")
    tgt = read_lines(f"{prefix}.tgt")
    if len(src) != len(tgt):
        raise DataError(f"{prefix}: {len(src)} source lines vs {len(tgt)} target lines")
    return [(vocab.encode(s), vocab.encode(t)) for s, t in zip(src, tgt)]


def write_corpus(directory, corpus: ParallelCorpus) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(d / "vocab.txt")
    for name in ("train", "dev", "test"):
        write_split(d / name, corpus.split(name), corpus.vocab)
