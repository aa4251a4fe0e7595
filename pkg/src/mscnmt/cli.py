"""Command-line entry point: ``mscnmt <verb> ...``.

Exit codes: 0 success, 1 a check failed, 2 missing file (or usage error),
3 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import analysis, checkpoint, gradcheck
from .config import ABLATIONS, ConfigError, MscConfig, TrainConfig, load_config
from .data import TaskSpec, Vocab, build_vocab, generate_task, pad_batch, read_pairs, write_pairs
from .decoding import decode_corpus
from .model import MscModel
from .training import evaluate_accuracy, train_loop

log = logging.getLogger("mscnmt")

TINY_CONFIG = "tiny.cfg"


class MissingFile(Exception):
    def __init__(self, path):
        super().__init__(str(path))
        self.path = str(path)


def _existing(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingFile(p)
    return p


def shipped_config(name: str = TINY_CONFIG) -> Path:
    return Path(str(resources.files("mscnmt") / "configs" / name))


def _vocab(cfg: MscConfig) -> Vocab:
    return build_vocab(size=cfg.vocab_size)


def _load_model(path) -> tuple:
    ck = checkpoint.load(_existing(path))
    model = MscModel(ck.cfg, seed=ck.seed)
    model.load_values(ck.params)
    return model, ck


def _read_sources(path: Path, vocab: Vocab) -> List[List[int]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    # accept either bare source lines or src<TAB>tgt pairs
    return [vocab.encode(line.split("\t", 1)[0]) for line in lines if line.strip()]


def _with_overrides(tcfg: TrainConfig, args) -> TrainConfig:
    changes = {}
    if getattr(args, "steps", None) is not None:
        changes["max_steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return tcfg.replace(**changes) if changes else tcfg


# -- verbs ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg, tcfg, _ = load_config(_existing(args.config))
    tcfg = _with_overrides(tcfg, args)
    pairs = read_pairs(_existing(args.data), _vocab(cfg))
    result = train_loop(cfg, tcfg, pairs, args.out)
    final = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"steps={tcfg.max_steps} final_loss={final:.6f} checkpoint={result.checkpoints[-1]}")
    return 0


def cmd_decode(args) -> int:
    model, ck = _load_model(args.ckpt)
    vocab = _vocab(ck.cfg)
    sources = _read_sources(_existing(args.input), vocab)
    max_len = args.max_len if args.max_len is not None else ck.cfg.max_len
    hyps = decode_corpus(model, sources, beam=args.beam, alpha=args.lenpen, max_len=max_len, greedy=args.greedy)
    text = "".join(vocab.decode(h) + "\n" for h in hyps)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    model, ck = _load_model(args.ckpt)
    vocab = _vocab(ck.cfg)
    pairs = read_pairs(_existing(args.data), vocab)
    acc = evaluate_accuracy(model, pairs)
    max_len = args.max_len if args.max_len is not None else ck.cfg.max_len
    hyps = decode_corpus(model, [s for s, _ in pairs], beam=args.beam, alpha=args.lenpen, max_len=max_len)
    bleu = analysis.corpus_bleu([vocab.decode(h) for h in hyps], [vocab.decode(t) for _, t in pairs])
    print(f"token_accuracy={acc:.6f}")
    print(f"bleu={bleu:.2f}")
    return 0


def _last_checkpoints(directory: Path, k: int) -> List[Path]:
    found = sorted(directory.glob("*.msck"))
    if not found:
        raise MissingFile(directory / "*.msck")
    return found[-k:]


def cmd_difficulty(args) -> int:
    if args.k < 1:
        raise ConfigError("k", "must be >= 1")
    paths = _last_checkpoints(_existing(args.ckpt_dir), args.k)
    models = [_load_model(p)[0] for p in paths]
    vocab = _vocab(models[0].cfg)
    for p, m in zip(paths, models):
        if m.cfg != models[0].cfg:
            raise ConfigError("checkpoints", f"{p} has a different model config")
    pairs = read_pairs(_existing(args.data), vocab)
    records = analysis.score_corpus(models, pairs)
    groups = analysis.split_by_difficulty(records)
    out = Path(args.out)
    analysis.write_difficulty_tsv(out, records)
    for label, group in groups.items():
        ids = sorted(r.id for r in group)
        write_pairs(out.with_name(f"{out.name}.{label.lower()}"), [pairs[i] for i in ids], vocab)
    print(f"scored {len(records)} pairs with {len(paths)} checkpoints -> {out}")
    return 0


def cmd_gradnorms(args) -> int:
    cfg, tcfg, _ = load_config(_existing(args.config))
    tcfg = _with_overrides(tcfg, args)
    pairs = read_pairs(_existing(args.data), _vocab(cfg))
    trace = analysis.GradNormTrace()

    def hook(step, model, probe, loss):
        trace.record(model, probe, step)

    train_loop(cfg, tcfg, pairs, out_dir=None, on_step=hook, probe=True)
    trace.write_csv(args.out)
    print(f"{len(trace.rows)} rows -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    path = _existing(args.config) if args.config else shipped_config()
    cfg, _, _ = load_config(path)
    ok, results = gradcheck.run_suite(cfg, seed=args.seed, tol=args.tol)
    for r in results:
        if args.verbose or not r.passed(args.tol):
            print(f"{'ok  ' if r.passed(args.tol) else 'FAIL'} {r.name} rel_err={r.rel_error:.3e}")
    worst = max(results, key=lambda r: r.rel_error)
    print(f"{len(results)} tensors checked, worst {worst.name} rel_err={worst.rel_error:.3e}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_decompose(args) -> int:
    model, ck = _load_model(args.ckpt)
    pairs = read_pairs(_existing(args.data), _vocab(ck.cfg))[: args.rows]
    if not model.cfg.collaborative:
        raise ConfigError("mode", "decompose needs a bsc or msc checkpoint")
    if not 1 <= args.block <= model.cfg.n_blocks:
        raise ConfigError("block", f"must lie in [1, {model.cfg.n_blocks}]")
    dec = analysis.grad_path_decompose(model, pad_batch(pairs), args.block, ck.train_cfg.label_smoothing)
    print(f"block={args.block} full_norm={np.linalg.norm(dec.full):.6e}")
    for name, value in dec.norms().items():
        print(f"  {name:<8} {value:.6e}")
    print(f"relative_residual={dec.residual:.3e}")
    return 0


def cmd_average(args) -> int:
    avg = checkpoint.average_checkpoints([_existing(p) for p in args.ckpts])
    checkpoint.save(avg, args.out)
    print(f"averaged {len(args.ckpts)} checkpoints -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg, tcfg, _ = load_config(_existing(args.config))
    tcfg = _with_overrides(tcfg, args)
    vocab = _vocab(cfg)
    pairs = read_pairs(_existing(args.data), vocab)
    held = read_pairs(_existing(args.valid), vocab) if args.valid else pairs
    rows = []
    for value in (False, True):
        variant = cfg.replace(**{args.flag: value})
        result = train_loop(variant, tcfg, pairs, out_dir=None)
        final = result.metrics[-1]["loss"] if result.metrics else float("nan")
        rows.append((f"{args.flag}={str(value).lower()}", final, evaluate_accuracy(result.model, held)))
    print(f"{'variant':<34} {'final_loss':>10} {'token_acc':>9}")
    for name, loss, acc in rows:
        print(f"{name:<34} {loss:>10.4f} {acc:>9.4f}")
    return 0


def cmd_generate(args) -> int:
    spec = TaskSpec(kind=args.task, vocab_size=args.vocab_size, min_len=args.min_len, max_len=args.max_len,
                    n_train=args.n_train, n_valid=args.n_valid, n_test=args.n_test, seed=args.seed)
    splits = generate_task(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = build_vocab(size=args.vocab_size)
    for name, pairs in splits.items():
        write_pairs(out / f"{name}.tsv", pairs, vocab)
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()) + f" -> {out}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mscnmt", description="Deep multiscale collaborative Transformer toolkit")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="verb", required=True, metavar="verb")

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="training pairs (src<TAB>tgt)")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_train)

    def add_search(s):
        s.add_argument("--beam", type=int, default=5)
        s.add_argument("--lenpen", type=float, default=1.0)
        s.add_argument("--max-len", type=int)

    s = sub.add_parser("decode", help="translate source lines")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output")
    s.add_argument("--greedy", action="store_true", help="argmax decoding instead of beam search")
    add_search(s)
    s.set_defaults(fn=cmd_decode)

    s = sub.add_parser("eval", help="token accuracy and corpus BLEU")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    add_search(s)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("difficulty", help="score and split a corpus by difficulty")
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_difficulty)

    s = sub.add_parser("gradnorms", help="per-layer gradient norms during training")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gradnorms)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--config", help="model config (default: the shipped tiny config)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("decompose", help="per-consumer gradient contributions to one encoder block")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--block", type=int, required=True)
    s.add_argument("--rows", type=int, default=16, help="pairs taken from the top of --data")
    s.set_defaults(fn=cmd_decompose)

    s = sub.add_parser("average", help="average checkpoints")
    s.add_argument("--ckpts", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_average)

    s = sub.add_parser("ablate", help="train twin runs with one ablation flag off and on")
    s.add_argument("--config", required=True)
    s.add_argument("--flag", required=True, choices=ABLATIONS)
    s.add_argument("--data", required=True)
    s.add_argument("--valid")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("generate", help="write a synthetic toy corpus")
    s.add_argument("--task", default="substitution_translation",
                   choices=("copy", "reverse", "sort", "substitution_translation"))
    s.add_argument("--vocab-size", type=int, default=64)
    s.add_argument("--min-len", type=int, default=4)
    s.add_argument("--max-len", type=int, default=16)
    s.add_argument("--n-train", type=int, default=20000)
    s.add_argument("--n-valid", type=int, default=500)
    s.add_argument("--n-test", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except MissingFile as e:
        print(f"error: no such file: {e.path}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: no such file: {e.filename}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"error: invalid config field {e.field}: {e}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
