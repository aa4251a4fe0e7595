"""Loss, learning-rate schedule, Adam, L2 penalty and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt_io
from .autograd import Tensor
from .config import ConfigError, MscConfig, TrainConfig
from .data import Batch, Pair, batch_by_tokens
from .model import PAD, MscModel, is_encoder_weight

log = logging.getLogger(__name__)

DROPOUT_STREAM = 1


class TrainingDiverged(FloatingPointError):
    """Raised when the loss turns non-finite; ``last_checkpoint`` survives."""

    def __init__(self, message: str, last_checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def smoothed_targets(targets: np.ndarray, vocab: int, eps: float, pad_id: int = PAD) -> np.ndarray:
    """Target distribution: 1-eps on gold, eps/(V-1) elsewhere, zero rows at pads."""
    q = np.full(targets.shape + (vocab,), eps / (vocab - 1))
    np.put_along_axis(q, targets[..., None], 1.0 - eps, axis=-1)
    q[targets == pad_id] = 0.0
    return q


def label_smoothed_cross_entropy(logits: Tensor, targets: np.ndarray, eps: float = 0.1,
                                 pad_id: int = PAD) -> Tensor:
    """Mean over non-pad tokens of -sum_i q_i log softmax(logits)_i."""
    if not 0.0 <= eps < 1.0:
        raise ConfigError("label_smoothing", f"must lie in [0, 1), got {eps}")
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if vocab < 2:
        raise ValueError("label smoothing needs a vocabulary of at least 2")
    n = int((targets != pad_id).sum())
    if n == 0:
        raise ValueError("no non-pad target tokens")
    q = smoothed_targets(targets, vocab, eps, pad_id)
    return ag.scale(ag.tsum(ag.log_softmax(logits) * q), -1.0 / n)


def sequence_nll(logits: np.ndarray, targets: np.ndarray, pad_id: int = PAD) -> np.ndarray:
    """Summed token NLL per sequence (no smoothing), shape (b,)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    gold = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return -(gold * (targets != pad_id)).sum(axis=-1)


def token_accuracy(logits: np.ndarray, targets: np.ndarray, pad_id: int = PAD) -> tuple:
    """(correct, total) teacher-forced argmax predictions over non-pad tokens."""
    mask = targets != pad_id
    pred = logits.argmax(axis=-1)
    return int(((pred == targets) & mask).sum()), int(mask.sum())


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def l2_penalty(params: Dict[str, Tensor], lam: float) -> Optional[Tensor]:
    """lam * sum ||W||^2 over encoder weight matrices; None when lam == 0."""
    if lam < 0:
        raise ConfigError("l2_lambda", "must be >= 0")
    if lam == 0:
        return None
    terms = [ag.tsum(p * p) for name, p in params.items() if is_encoder_weight(name, p.shape)]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ag.scale(total, lam)


class Adam:
    """Bias-corrected Adam over a name -> Tensor mapping."""

    def __init__(self, params: Dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def load_state(self, m: Dict[str, np.ndarray], v: Dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            if k in m:
                self.m[k] = np.array(m[k], dtype=np.float64)
                self.v[k] = np.array(v[k], dtype=np.float64)
        self.t = t


def dropout_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, DROPOUT_STREAM, step])


def batch_stream(pairs: Sequence[Pair], tokens_per_batch: int, seed: int):
    """Endless iterator over batches, reshuffled every epoch."""
    epoch = 0
    while True:
        for b in batch_by_tokens(pairs, tokens_per_batch, seed, epoch):
            yield b
        epoch += 1


@dataclass
class TrainResult:
    model: MscModel
    metrics: List[dict] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def make_checkpoint(model: MscModel, tcfg: TrainConfig, opt: Optional[Adam], step: int) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        cfg=model.cfg,
        train_cfg=tcfg,
        params={k: p.data for k, p in model.params.items()},
        step=step,
        seed=tcfg.seed,
        adam_m=dict(opt.m) if opt else {},
        adam_v=dict(opt.v) if opt else {},
    )


def train_step(model: MscModel, opt: Adam, batch: Batch, tcfg: TrainConfig, step: int,
               probe: Optional[dict] = None) -> float:
    """Forward, backward and the gradient computation for one batch (no update)."""
    model.zero_grad()
    logits = model(batch.src, batch.tgt_in, rng=dropout_rng(tcfg.seed, step), probe=probe)
    loss = label_smoothed_cross_entropy(logits, batch.tgt_out, tcfg.label_smoothing)
    total = loss
    penalty = l2_penalty(model.params, tcfg.l2_lambda)
    if penalty is not None:
        total = loss + penalty
    value = loss.item()
    if not math.isfinite(total.item()):
        return float("nan")
    total.backward()
    return value


def train_loop(
    cfg: MscConfig,
    tcfg: TrainConfig,
    pairs: Sequence[Pair],
    out_dir: Optional[str | Path] = None,
    model: Optional[MscModel] = None,
    on_step: Optional[Callable[[int, MscModel, Optional[dict], float], None]] = None,
    probe: bool = False,
    batches: Optional[Sequence[Batch]] = None,
) -> TrainResult:
    """Train for ``tcfg.max_steps`` updates.

    ``on_step(step, model, probe, loss)`` runs after backward and before the
    parameter update, so gradients are still populated.  With ``batches``
    the given batches are cycled in order instead of token-bucketing
    ``pairs``.  Checkpoints go to ``out_dir/ckpt_<step>.msck`` (step 0, every
    ``checkpoint_every`` steps, and the final step) together with
    ``metrics.csv``.
    """
    if not pairs and batches is None:
        raise ValueError("empty training set")
    model = model or MscModel(cfg, seed=tcfg.seed)
    opt = Adam(model.params, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def save(step):
        if out is None:
            return
        path = ckpt_io.save(make_checkpoint(model, tcfg, opt, step), out / f"ckpt_{step:07d}.msck")
        result.checkpoints.append(path)
        while len(result.checkpoints) > tcfg.keep_last:
            result.checkpoints.pop(0).unlink(missing_ok=True)

    save(0)
    if batches is not None:
        stream = (batches[i % len(batches)] for i in range(tcfg.max_steps))
    else:
        stream = batch_stream(pairs, tcfg.tokens_per_batch, tcfg.seed)
    for step in range(1, tcfg.max_steps + 1):
        batch = next(stream)
        probe_dict = {} if probe else None
        loss = train_step(model, opt, batch, tcfg, step, probe_dict)
        if not math.isfinite(loss):
            last = result.checkpoints[-1] if result.checkpoints else None
            raise TrainingDiverged(f"loss became non-finite at step {step}", last)
        if on_step is not None:
            on_step(step, model, probe_dict, loss)
        lr = tcfg.lr_scale * lr_schedule(step, cfg.d_model, tcfg.warmup_steps)
        opt.step(lr)
        result.metrics.append({"step": step, "loss": loss, "lr": lr, "tokens": batch.n_tokens})
        if step % 100 == 0:
            log.info("step %d loss %.4f lr %.2e", step, loss, lr)
        if step % tcfg.checkpoint_every == 0 or step == tcfg.max_steps:
            save(step)
    if out is not None:
        write_metrics(out / "metrics.csv", result.metrics)
    return result


def write_metrics(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "tokens"])
        for r in rows:
            w.writerow([r["step"], repr(float(r["loss"])), repr(float(r["lr"])), r["tokens"]])


def evaluate_accuracy(model: MscModel, pairs: Sequence[Pair], tokens_per_batch: int = 2048) -> float:
    """Teacher-forced token accuracy (EOS included) over ``pairs``."""
    correct = total = 0
    with ag.no_grad():
        for b in batch_by_tokens(pairs, tokens_per_batch, seed=None):
            c, t = token_accuracy(model(b.src, b.tgt_in).data, b.tgt_out)
            correct += c
            total += t
    return correct / max(total, 1)
