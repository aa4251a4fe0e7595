"""Greedy and beam-search decoding with the GNMT length penalty."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from . import autograd as ag
from .model import BOS, EOS, PAD, MscModel


@dataclass
class Hypothesis:
    tokens: List[int] = field(default_factory=list)  # generated ids, EOS included when finished by it
    logprob: float = 0.0
    finished: bool = False

    @property
    def translation(self) -> List[int]:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else list(self.tokens)

    def score(self, alpha: float) -> float:
        return self.logprob / length_penalty(len(self.tokens), alpha)


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _next_logprobs(model: MscModel, enc, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    """Log-probabilities of the next token for each prefix, (n, vocab)."""
    rows = np.zeros(len(prefixes), dtype=np.int64)
    tin = np.array([[BOS] + list(p) for p in prefixes], dtype=np.int64)
    logits = model.decode(model.expand_encoder_output(enc, rows), tin).data[:, -1, :]
    # never generate padding or a second BOS
    logits = logits.copy()
    logits[:, [PAD, BOS]] = -np.inf
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _encode_source(model: MscModel, src: Sequence[int]):
    src = np.asarray(src, dtype=np.int64)
    if src.ndim != 1 or src.size == 0:
        raise ValueError("source sentence must be a non-empty 1-D id sequence")
    return model.encode(src[None, :])


def greedy_decode(model: MscModel, src: Sequence[int], max_len: int) -> Hypothesis:
    """Arg-max decoding; ties go to the lowest token id."""
    with ag.no_grad():
        enc = _encode_source(model, src)
        hyp = Hypothesis()
        for _ in range(max_len):
            scores = hyp.logprob + _next_logprobs(model, enc, [hyp.tokens])[0]
            tok = int(np.argmax(scores))
            hyp = Hypothesis(hyp.tokens + [tok], float(scores[tok]))
            if tok == EOS:
                break
        hyp.finished = True
        return hyp


def beam_search(model: MscModel, src: Sequence[int], beam: int = 5, alpha: float = 1.0,
                max_len: int = 64, n_best: int = 1) -> List[Hypothesis]:
    """Beam search ranked by ``logprob / ((5 + len) / 6) ** alpha``.

    At every step the ``beam`` best expansions (by cumulative log-probability,
    ties to the lexicographically smaller token sequence) are kept; those
    ending in EOS move to the completed pool, the rest stay active.  The
    search stops once no active hypothesis can still beat the best completed
    score, or at ``max_len``.

    Returns up to ``n_best`` completed hypotheses, best first.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with ag.no_grad():
        enc = _encode_source(model, src)
        active = [Hypothesis()]
        done: List[Hypothesis] = []
        for step in range(1, max_len + 1):
            logp = _next_logprobs(model, enc, [h.tokens for h in active])
            cands = []
            for i, h in enumerate(active):
                row = h.logprob + logp[i]
                for tok in np.flatnonzero(np.isfinite(row)):
                    cands.append((-float(row[tok]), tuple(h.tokens) + (int(tok),)))
            cands.sort()
            active = []
            for neg_lp, toks in cands[:beam]:
                hyp = Hypothesis(list(toks), -neg_lp)
                if toks[-1] == EOS or step == max_len:
                    hyp.finished = True
                    done.append(hyp)
                else:
                    active.append(hyp)
            if not active:
                break
            if len(done) >= n_best:
                # the n_best-th completed score is the bar an active hypothesis must clear
                bar = sorted((h.score(alpha) for h in done), reverse=True)[n_best - 1]
                if all(_upper_bound(h, alpha, max_len) <= bar for h in active):
                    break
        done.sort(key=lambda h: (-h.score(alpha), h.tokens))
        return done[:n_best]


def _upper_bound(h: Hypothesis, alpha: float, max_len: int) -> float:
    # log-probability can only fall; the divisor is monotone in length
    return max(h.logprob / length_penalty(len(h.tokens), alpha),
               h.logprob / length_penalty(max_len, alpha))


def decode_corpus(model: MscModel, sources: Sequence[Sequence[int]], beam: int = 1,
                  alpha: float = 1.0, max_len: int = 64, greedy: bool = False) -> List[List[int]]:
    out = []
    for src in sources:
        if greedy:
            out.append(greedy_decode(model, src, max_len).translation)
        else:
            out.append(beam_search(model, src, beam, alpha, max_len)[0].translation)
    return out
