"""Synthetic translation tasks, vocabulary and token-bucketed batching."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .model import BOS, EOS, PAD, UNK

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
TASKS = ("copy", "reverse", "sort", "substitution_translation")

Pair = Tuple[List[int], List[int]]

BATCH_STREAM = 2
DATA_STREAM = 3


class Vocab:
    """Bijection between token strings and ids; ids 0-3 are pad/bos/eos/unk."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = list(RESERVED)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def encode(self, text: str | Sequence[str], strict: bool = False) -> List[int]:
        toks = text.split() if isinstance(text, str) else list(text)
        if strict:
            for tok in toks:
                if tok not in self.stoi:
                    raise KeyError(f"token {tok!r} is not in the vocabulary")
        return [self.stoi.get(t, UNK) for t in toks]

    def decode(self, ids: Sequence[int], strip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return " ".join(out)


def build_vocab(tokens: Iterable[str] | None = None, size: Optional[int] = None) -> Vocab:
    """Vocabulary from explicit extra ``tokens``, or numeric tokens up to ``size``.

    With ``size`` the content tokens are the strings ``"4" .. str(size - 1)``
    so a token's id equals its integer value (the toy-task convention).
    """
    if size is not None:
        if size < len(RESERVED):
            raise ValueError(f"vocab size {size} smaller than the {len(RESERVED)} reserved ids")
        return Vocab(str(i) for i in range(len(RESERVED), size))
    return Vocab(tokens or ())


@dataclass
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 32
    min_len: int = 3
    max_len: int = 8
    n_train: int = 1000
    n_valid: int = 100
    n_test: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in TASKS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASKS}")
        if self.vocab_size < len(RESERVED) + 2:
            raise ValueError(f"vocab_size must be >= {len(RESERVED) + 2}")
        if self.kind == "substitution_translation" and self.vocab_size < len(RESERVED) + 4:
            raise ValueError("substitution_translation needs at least two symbols per alphabet")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")


def substitution_alphabets(vocab_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Disjoint source (lower half) and target (upper half) symbol ids."""
    symbols = np.arange(len(RESERVED), vocab_size)
    half = len(symbols) // 2
    return symbols[:half], symbols[half : 2 * half]


def substitution_mapping(vocab_size: int, seed: int) -> Dict[int, int]:
    src, tgt = substitution_alphabets(vocab_size)
    perm = np.random.default_rng([seed, DATA_STREAM, 1]).permutation(tgt)
    return {int(s): int(t) for s, t in zip(src, perm)}


def swap_adjacent(seq: Sequence[int]) -> List[int]:
    """Swap the pairs starting at even indices: (0,1), (2,3), ..."""
    out = list(seq)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def apply_task(kind: str, src: Sequence[int], mapping: Optional[Dict[int, int]] = None) -> List[int]:
    if kind == "copy":
        return list(src)
    if kind == "reverse":
        return list(reversed(src))
    if kind == "sort":
        return sorted(src)
    if kind == "substitution_translation":
        return swap_adjacent([mapping[t] for t in src])
    raise ValueError(f"unknown task kind {kind!r}")


def _seq_key(seq: Sequence[int]) -> bytes:
    return hashlib.sha1(np.asarray(seq, dtype=np.int64).tobytes()).digest()


def generate_task(spec: TaskSpec) -> Dict[str, List[Pair]]:
    """Deterministic train/valid/test corpora; held-out sources never occur in train."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, DATA_STREAM, 0])
    mapping = None
    if spec.kind == "substitution_translation":
        alphabet, _ = substitution_alphabets(spec.vocab_size)
        mapping = substitution_mapping(spec.vocab_size, spec.seed)
    else:
        alphabet = np.arange(len(RESERVED), spec.vocab_size)

    seen: set = set()
    splits: Dict[str, List[Pair]] = {}
    for name, count in (("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test)):
        pairs: List[Pair] = []
        attempts = 0
        while len(pairs) < count:
            attempts += 1
            if attempts > 100 * count + 1000:
                raise ValueError(f"cannot draw {count} distinct {name} sequences from this task space")
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            src = [int(t) for t in rng.choice(alphabet, size=length)]
            key = _seq_key(src)
            if name != "train" and key in seen:
                continue
            seen.add(key)
            pairs.append((src, apply_task(spec.kind, src, mapping)))
        splits[name] = pairs
    return splits


# -- files ------------------------------------------------------------------

def write_pairs(path: str | Path, pairs: Sequence[Pair], vocab: Vocab) -> None:
    lines = [f"{vocab.decode(s)}\t{vocab.decode(t)}\n" for s, t in pairs]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_pairs(path: str | Path, vocab: Vocab) -> List[Pair]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'src<TAB>tgt'")
        src, tgt = line.split("\t", 1)
        pairs.append((vocab.encode(src), vocab.encode(tgt)))
    return pairs


# -- batching ---------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray  # (b, t_s), pad-filled
    tgt_in: np.ndarray  # (b, t_t), BOS-prefixed
    tgt_out: np.ndarray  # (b, t_t), EOS-suffixed
    ids: List[int]  # indices of the pairs in the source dataset

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt_out != PAD

    @property
    def n_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def pad_batch(pairs: Sequence[Pair], ids: Optional[List[int]] = None) -> Batch:
    if not pairs:
        raise ValueError("empty batch")
    ts = max(len(s) for s, _ in pairs)
    tt = max(len(t) for _, t in pairs) + 1
    b = len(pairs)
    src = np.full((b, ts), PAD, dtype=np.int64)
    tin = np.full((b, tt), PAD, dtype=np.int64)
    tout = np.full((b, tt), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        tin[i, : len(t) + 1] = [BOS] + list(t)
        tout[i, : len(t) + 1] = list(t) + [EOS]
    return Batch(src, tin, tout, list(ids) if ids is not None else list(range(b)))


def _pair_len(pair: Pair) -> int:
    return max(len(pair[0]), len(pair[1]) + 1)


def batch_by_tokens(pairs: Sequence[Pair], tokens_per_batch: int, seed: Optional[int] = 0,
                    epoch: int = 0) -> List[Batch]:
    """Length-sorted bucketing with ``rows * max_len <= tokens_per_batch``.

    A pair's length is ``max(len(src), len(tgt) + 1)``, the padded width it
    needs on either side.  Batch order is shuffled by ``(seed, epoch)``; None
    keeps the sorted order.
    """
    if not pairs:
        raise ValueError("empty dataset")
    order = sorted(range(len(pairs)), key=lambda i: (_pair_len(pairs[i]), i))
    longest = _pair_len(pairs[order[-1]])
    if longest > tokens_per_batch:
        raise ValueError(f"a sequence of length {longest} exceeds tokens_per_batch={tokens_per_batch}")
    groups: List[List[int]] = []
    current: List[int] = []
    width = 0
    for i in order:
        w = max(width, _pair_len(pairs[i]))
        if current and w * (len(current) + 1) > tokens_per_batch:
            groups.append(current)
            current, w = [], _pair_len(pairs[i])
        current.append(i)
        width = w
    groups.append(current)
    if seed is not None:
        perm = np.random.default_rng([seed, BATCH_STREAM, epoch]).permutation(len(groups))
        groups = [groups[k] for k in perm]
    return [pad_batch([pairs[i] for i in g], g) for g in groups]
