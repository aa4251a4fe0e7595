"""Central finite-difference checks of the analytic gradients.

The error metric is per tensor: ``max|analytic - numeric| / max(max|analytic|,
max|numeric|)``.  Large tensors are checked on a seeded random subset of
coordinates; the denominator still uses the whole analytic gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autograd as ag
from . import layers
from .autograd import Tensor
from .config import MscConfig
from .model import MscModel
from .training import label_smoothed_cross_entropy

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-6


@dataclass
class GradResult:
    name: str
    rel_error: float
    n_coords: int

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    """``scale`` floors the denominator, e.g. with the full tensor's max when only a sample was checked."""
    scale = max(scale, np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(f: Callable[[], Tensor], tensors: Dict[str, Tensor], h: float = DEFAULT_STEP,
                    max_coords: Optional[int] = None, seed: int = 0) -> List[GradResult]:
    """Compare backward() of the scalar ``f()`` against central differences.

    ``f`` must rebuild its graph from the current ``tensors`` on every call.
    """
    for t in tensors.values():
        t.grad = None
    f().backward()
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in tensors.items()}
    rng = np.random.default_rng(seed)
    results = []
    with ag.no_grad():
        for name, t in tensors.items():
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * h)
            a = analytic[name].reshape(-1)
            results.append(GradResult(name, relative_error(a[idx], numeric, float(np.max(np.abs(a)))), idx.size))
    return results


def _leaf(rng, *shape, low=-1.0, high=1.0, name=None) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, name=name)


def _away_from_zero(rng, *shape) -> Tensor:
    # keeps relu inputs clear of the kink by more than the FD step
    x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ag.tsum(out * Tensor(w))


def primitive_cases(seed: int = 0) -> Dict[str, tuple]:
    """name -> (scalar closure, tensors) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    cases: Dict[str, tuple] = {}

    def case(name, fn, **tensors):
        out_shape = fn(**tensors).shape
        w = rng.normal(size=out_shape)
        cases[name] = (lambda: _weighted(fn(**tensors), w), tensors)

    case("add_broadcast", lambda a, b: a + b, a=_leaf(rng, 3, 4), b=_leaf(rng, 4))
    case("sub_broadcast", lambda a, b: a - b, a=_leaf(rng, 2, 3, 4), b=_leaf(rng, 3, 1))
    case("mul_broadcast", lambda a, b: a * b, a=_leaf(rng, 3, 4), b=_leaf(rng, 1, 4))
    case("scale", lambda a: ag.scale(a, -2.5), a=_leaf(rng, 5))
    case("relu", lambda a: ag.relu(a), a=_away_from_zero(rng, 4, 5))
    case("sigmoid", lambda a: ag.sigmoid(a), a=_leaf(rng, 4, 5, low=-3, high=3))
    case("tanh", lambda a: ag.tanh(a), a=_leaf(rng, 4, 5, low=-2, high=2))
    case("exp", lambda a: ag.exp(a), a=_leaf(rng, 6))
    case("log", lambda a: ag.log(a), a=_leaf(rng, 6, low=0.5, high=2.0))
    case("sum_axis", lambda a: ag.tsum(a, axis=1, keepdims=True), a=_leaf(rng, 3, 4, 2))
    case("mean", lambda a: ag.mean(a, axis=0), a=_leaf(rng, 3, 4))
    case("reshape", lambda a: ag.reshape(a, (6, 2)), a=_leaf(rng, 3, 4))
    case("transpose", lambda a: ag.transpose(a, (2, 0, 1)), a=_leaf(rng, 2, 3, 4))
    case("concat", lambda a, b: ag.concat([a, b], axis=1), a=_leaf(rng, 2, 3), b=_leaf(rng, 2, 2))
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    case("take_rows", lambda t: ag.take_rows(t, ids), t=_leaf(rng, 5, 3))
    case("matmul_batched", lambda a, b: ag.matmul(a, b), a=_leaf(rng, 2, 3, 4), b=_leaf(rng, 4, 5))
    case("linear", lambda x, w, b: ag.linear(x, w, b), x=_leaf(rng, 2, 3, 4), w=_leaf(rng, 4, 5), b=_leaf(rng, 5))
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    case("softmax_masked", lambda a: ag.softmax(a, axis=-1, mask=mask), a=_leaf(rng, 2, 4, low=-2, high=2))
    case("log_softmax", lambda a: ag.log_softmax(a), a=_leaf(rng, 3, 5, low=-2, high=2))
    case("layer_norm", lambda x, g, b: ag.layer_norm(x, g, b), x=_leaf(rng, 2, 3, 6), g=_leaf(rng, 6), b=_leaf(rng, 6))
    case("dropout", lambda a: ag.dropout(a, 0.3, np.random.default_rng(7)), a=_leaf(rng, 4, 6))

    d, heads = 8, 2
    attn = {f"a.{w}": _leaf(rng, d, d, low=-0.5, high=0.5) for w in ("wq", "wk", "wv", "wo")}
    kmask = np.array([True, True, True, False])[None, None, None, :]
    case("attention", lambda q, kv, **p: layers.multi_head_attention(q, kv, kv, kmask, p, "a", heads)[0],
         q=_leaf(rng, 2, 3, d), kv=_leaf(rng, 2, 4, d), **attn)
    while True:
        # redraw until no hidden pre-activation sits on the relu kink
        ffn = {"f.w1": _leaf(rng, d, 12, low=-0.5, high=0.5), "f.b1": _leaf(rng, 12, low=-0.1, high=0.1),
               "f.w2": _leaf(rng, 12, d, low=-0.5, high=0.5), "f.b2": _leaf(rng, d)}
        x = _leaf(rng, 2, 3, d)
        if np.min(np.abs(x.data @ ffn["f.w1"].data + ffn["f.b1"].data)) > 1e-3:
            break
    case("ffn", lambda x, **p: layers.ffn(x, p, "f"), x=x, **ffn)
    gru = {f"g.{n}": _leaf(rng, d, d, low=-0.5, high=0.5) for n in ("wz", "uz", "wr", "ur", "wh", "uh")}
    gru.update({f"g.{n}": _leaf(rng, d, low=-0.1, high=0.1) for n in ("bz", "br", "bh")})
    case("gru_cell", lambda c, x, **p: layers.gru_cell(c, x, p, "g"), c=_leaf(rng, 2, 3, d), x=_leaf(rng, 2, 3, d), **gru)
    gate = {"q.w1": _leaf(rng, d, d, low=-0.5, high=0.5), "q.w2": _leaf(rng, d, d, low=-0.5, high=0.5),
            "q.b": _leaf(rng, d)}
    case("gate", lambda ah, ac, **p: layers.gate(ah, ac, p, "q"), ah=_leaf(rng, 2, 3, d), ac=_leaf(rng, 2, 3, d), **gate)

    targets = np.array([[1, 3, 0], [2, 0, 0]])
    logits = _leaf(rng, 2, 3, 5, low=-2, high=2)
    cases["label_smoothed_ce"] = (lambda: label_smoothed_cross_entropy(logits, targets, 0.1), {"logits": logits})
    return cases


def check_primitives(seed: int = 0, h: float = DEFAULT_STEP) -> List[GradResult]:
    out = []
    for case_name, (fn, tensors) in primitive_cases(seed).items():
        for r in check_gradients(fn, tensors, h=h):
            out.append(GradResult(f"{case_name}:{r.name}", r.rel_error, r.n_coords))
    return out


def model_batch(cfg: MscConfig, seed: int = 0, batch: int = 2, src_len: int = 5, tgt_len: int = 4):
    """Random padded batch for gradient checks: (src, tgt_in, tgt_out)."""
    rng = np.random.default_rng(seed)
    src = rng.integers(4, cfg.vocab_size, size=(batch, src_len))
    tgt = rng.integers(4, cfg.vocab_size, size=(batch, tgt_len))
    src[-1, -2:] = 0
    tgt[-1, -1:] = 0
    tgt_in = np.concatenate([np.ones((batch, 1), dtype=tgt.dtype), tgt[:, :-1]], axis=1)
    return src, tgt_in, tgt


def check_model(cfg: MscConfig, seed: int = 0, h: float = DEFAULT_STEP, max_coords: Optional[int] = 8,
                label_smoothing: float = 0.1) -> List[GradResult]:
    """FD-check every parameter tensor of the full model loss (dropout off)."""
    model = MscModel(cfg, seed=seed)
    src, tgt_in, tgt_out = model_batch(cfg, seed)

    def loss():
        return label_smoothed_cross_entropy(model(src, tgt_in), tgt_out, label_smoothing)

    return check_gradients(loss, model.params, h=h, max_coords=max_coords, seed=seed)


def run_suite(cfg: MscConfig, seed: int = 0, tol: float = DEFAULT_TOL,
              max_coords: Optional[int] = 8) -> tuple:
    """(all passed, results) over the primitives and the model loss of ``cfg``."""
    results = check_primitives(seed) + [
        GradResult(f"model:{r.name}", r.rel_error, r.n_coords) for r in check_model(cfg, seed, max_coords=max_coords)
    ]
    return all(r.passed(tol) for r in results), results
