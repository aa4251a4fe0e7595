"""Gradient-flow instrumentation, difficulty scoring, attention export and BLEU."""

from __future__ import annotations

import csv
import json
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Switch
from .data import Batch, Pair, Vocab, batch_by_tokens, pad_batch
from .model import MscModel
from .training import label_smoothed_cross_entropy, sequence_nll

DIFFICULTY_LABELS = ("Simple", "Ordinary", "Difficult", "Challenging")


# -- gradient norms ---------------------------------------------------------

@dataclass
class GradNormRow:
    step: int
    block: int
    layer: int
    act_grad_norm: float
    param_grad_norm: float


@dataclass
class GradNormTrace:
    rows: List[GradNormRow] = field(default_factory=list)

    def record(self, model: MscModel, probe: dict, step: int) -> List[GradNormRow]:
        """Append one row per encoder layer from a probed, back-propagated forward pass."""
        new = []
        for n, m in enumerate(model.cfg.layers_per_block, 1):
            for layer in range(1, m + 1):
                H = probe.get(("H", n, layer))
                if H is None or H.grad is None:
                    raise RuntimeError("record_grad_norms needs a probed forward pass followed by backward()")
                prefix = f"enc.b{n}.l{layer}."
                sq = sum(float(np.sum(p.grad ** 2)) for k, p in model.params.items()
                         if k.startswith(prefix) and p.grad is not None)
                new.append(GradNormRow(step, n, layer, float(np.linalg.norm(H.grad)), math.sqrt(sq)))
        self.rows.extend(new)
        return new

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "block", "layer", "act_grad_norm", "param_grad_norm"])
            for r in self.rows:
                w.writerow([r.step, r.block, r.layer, repr(r.act_grad_norm), repr(r.param_grad_norm)])


def record_grad_norms(model: MscModel, probe: dict, step: int,
                      trace: Optional[GradNormTrace] = None) -> List[GradNormRow]:
    trace = trace if trace is not None else GradNormTrace()
    return trace.record(model, probe, step)


def batch_grad_norms(model: MscModel, batch: Batch, label_smoothing: float = 0.1) -> List[GradNormRow]:
    """Forward + backward on ``batch`` (no update) and the per-layer norms."""
    model.zero_grad()
    probe: dict = {}
    logits = model(batch.src, batch.tgt_in, probe=probe)
    label_smoothed_cross_entropy(logits, batch.tgt_out, label_smoothing).backward()
    return record_grad_norms(model, probe, 0)


def balance_ratio(rows: Sequence[GradNormRow]) -> float:
    """min / max of the per-layer activation-gradient norms."""
    norms = np.array([r.act_grad_norm for r in rows])
    return float(norms.min() / norms.max()) if norms.max() > 0 else 1.0


# -- gradient path decomposition ---------------------------------------------

def consumers_of_block(model: MscModel, n: int) -> List[str]:
    cfg = model.cfg
    out = []
    if n < cfg.n_blocks:
        out.append("encoder")
    out.append("decoder")
    if cfg.contextual:
        out.append("context")
    return out


@dataclass
class Decomposition:
    block: int
    full: np.ndarray
    contributions: Dict[str, np.ndarray]
    all_stopped: np.ndarray

    @property
    def residual(self) -> float:
        total = sum(self.contributions.values())
        denom = np.linalg.norm(self.full)
        return float(np.linalg.norm(self.full - total) / denom) if denom > 0 else float(np.linalg.norm(total))

    def norms(self) -> Dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.contributions.items()}


def grad_path_decompose(model: MscModel, batch: Batch, n: int, label_smoothing: float = 0.1) -> Decomposition:
    """Split dL/dB_e^n into the share arriving through each consumer of B_e^n.

    Consumers are the next encoder block, the decoder block attending block n
    and (msc) the context-cell update.  Each contribution is a backward pass
    with every other consumer's edge switched off; by linearity of the
    backward map the contributions add up to the full gradient.
    """
    cfg = model.cfg
    if not cfg.collaborative:
        raise ValueError("gradient path decomposition is defined for bsc and msc modes")
    if not 1 <= n <= cfg.n_blocks:
        raise ValueError(f"block {n} out of range [1, {cfg.n_blocks}]")
    names = consumers_of_block(model, n)
    switches = {(n, c): Switch(True) for c in names}
    probe: dict = {}
    logits = model(batch.src, batch.tgt_in, probe=probe, switches=switches)
    loss = label_smoothed_cross_entropy(logits, batch.tgt_out, label_smoothing)
    B = probe[("B", n)]

    def run(open_set) -> np.ndarray:
        for (_, c), sw in switches.items():
            sw.open = c in open_set
        B.grad = None
        loss.backward()
        model.zero_grad()
        return np.zeros(B.shape) if B.grad is None else B.grad.copy()

    full = run(set(names))
    contributions = {c: run({c}) for c in names}
    stopped = run(set())
    for sw in switches.values():
        sw.open = True
    return Decomposition(n, full, contributions, stopped)


# -- difficulty ---------------------------------------------------------------

@dataclass
class DifficultyRecord:
    id: int
    mean_nll: float
    std_nll: float
    score: float
    label: str = ""


def summarize_nll(values: Sequence[float]) -> Tuple[float, float, float]:
    """(mean, population std, mean + std) of per-checkpoint NLLs."""
    if len(values) == 0:
        raise ValueError("need at least one checkpoint")
    values = [float(v) for v in values]
    # exact-rational statistics: identical values give a std of exactly 0
    mean = statistics.fmean(values)
    std = statistics.pstdev(values)
    return mean, std, mean + std


def corpus_nll(model: MscModel, pairs: Sequence[Pair], tokens_per_batch: int = 2048) -> np.ndarray:
    """Per-pair summed NLL of the reference (no smoothing), in input order."""
    out = np.zeros(len(pairs))
    with ag.no_grad():
        for b in batch_by_tokens(pairs, tokens_per_batch, seed=None):
            out[b.ids] = sequence_nll(model(b.src, b.tgt_in).data, b.tgt_out)
    return out


def difficulty_score(models: Sequence[MscModel], pair: Pair) -> float:
    if not models:
        raise ValueError("need at least one checkpoint")
    return summarize_nll([corpus_nll(m, [pair])[0] for m in models])[2]


def score_corpus(models: Sequence[MscModel], pairs: Sequence[Pair]) -> List[DifficultyRecord]:
    if not models:
        raise ValueError("need at least one checkpoint")
    table = np.stack([corpus_nll(m, pairs) for m in models])  # (K, n)
    records = []
    for i in range(len(pairs)):
        mean, std, s = summarize_nll(table[:, i])
        records.append(DifficultyRecord(i, mean, std, s))
    return records


def split_by_difficulty(records: Sequence[DifficultyRecord], parts: int = 4) -> Dict[str, List[DifficultyRecord]]:
    """Sort by score (ties by id) and cut into ``parts`` contiguous groups.

    Group sizes differ by at most one, larger groups first; with four parts
    the labels run Simple, Ordinary, Difficult, Challenging.
    """
    if len(records) < parts:
        raise ValueError(f"{len(records)} records cannot be split into {parts} parts")
    labels = DIFFICULTY_LABELS if parts == 4 else tuple(f"part{i + 1}" for i in range(parts))
    ordered = sorted(records, key=lambda r: (r.score, r.id))
    base, extra = divmod(len(ordered), parts)
    groups: Dict[str, List[DifficultyRecord]] = {}
    start = 0
    for k, label in enumerate(labels):
        size = base + (1 if k < extra else 0)
        group = ordered[start : start + size]
        for r in group:
            r.label = label
        groups[label] = group
        start += size
    return groups


def write_difficulty_tsv(path: str | Path, records: Iterable[DifficultyRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "mean_nll", "std_nll", "score", "label"])
        for r in sorted(records, key=lambda r: r.id):
            w.writerow([r.id, repr(r.mean_nll), repr(r.std_nll), repr(r.score), r.label])


# -- attention export ---------------------------------------------------------

def export_attention(model: MscModel, vocab: Vocab, src_tokens: Sequence[str], tgt_tokens: Sequence[str],
                     which: str = "top") -> dict:
    """Teacher-forced decoder cross-attention onto the encoder, per block.

    Rows are target positions (the reference tokens followed by ``</s>``),
    columns source positions.  ``which`` is ``"top"`` (top decoder block) or
    ``"all"``.
    """
    if which not in ("top", "all"):
        raise ValueError(f"which must be 'top' or 'all', got {which!r}")
    src = vocab.encode(src_tokens, strict=True)
    tgt = vocab.encode(tgt_tokens, strict=True)
    batch = pad_batch([(src, tgt)])
    captured: list = []
    with ag.no_grad():
        model(batch.src, batch.tgt_in, attn=captured)
    if which == "top":
        captured = captured[-1:]
    layers = []
    for n, w in captured:
        heads = w.data[0].astype(np.float32)
        layers.append({
            "block": n,
            "heads": heads.astype(float).tolist(),
            "head_avg": heads.mean(axis=0).astype(float).tolist(),
        })
    return {
        "src_tokens": list(src_tokens),
        "tgt_tokens": list(tgt_tokens) + ["</s>"],
        "layers": layers,
    }


def attention_json(dump: dict) -> str:
    return json.dumps(dump, indent=1)


# -- BLEU -------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence, references: Sequence, max_n: int = 4) -> float:
    """Case-insensitive corpus BLEU in [0, 100] with one reference per segment."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")

    def toks(x):
        x = x.split() if isinstance(x, str) else [str(t) for t in x]
        return [t.lower() for t in x]

    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = toks(hyp), toks(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_p)
