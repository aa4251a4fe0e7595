"""Parameterised building blocks: attention, FFN, GRU cell, embeddings.

Parameters live in a flat ``dict[str, Tensor]`` owned by the model; each
function here takes the sub-dict (or a name prefix) it needs.  Initialisation
draws every tensor from its own generator seeded by ``(seed, crc32(name))``
so that adding or removing a parameter never changes the others.
"""

from __future__ import annotations

import math
import zlib
from typing import Dict, Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor

Params = Dict[str, Tensor]

INIT_STREAM = 0


def param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, INIT_STREAM, zlib.crc32(name.encode("utf-8"))])


def xavier(seed: int, name: str, shape: Tuple[int, int]) -> Tensor:
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    data = param_rng(seed, name).uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True, name=name)


def zeros(name: str, shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(name: str, shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


# -- forward functions ------------------------------------------------------

def norm(x: Tensor, params: Params, prefix: str, eps: float = 1e-6) -> Tensor:
    return ag.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], eps)


def multi_head_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    mask: Optional[np.ndarray],
    params: Params,
    prefix: str,
    heads: int,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention split over ``heads``.

    Args:
        q_in: queries, (b, t_q, d).
        k_in, v_in: keys and values, (b, t_k, d).
        mask: boolean array broadcastable to (b, heads, t_q, t_k); True marks
            positions that may be attended.
        params: parameter dict holding ``{prefix}.wq/wk/wv/wo``.
        heads: number of heads; must divide d.
        dropout: rate applied to the attention weights.

    Returns:
        (output (b, t_q, d), weights (b, heads, t_q, t_k)).
    """
    b, tq, d = q_in.shape
    tk = k_in.shape[1]
    if tk == 0:
        raise ValueError("attention over zero keys")
    if d % heads:
        raise ValueError(f"d_model={d} is not divisible by heads={heads}")
    dh = d // heads

    def split(x, w, t):
        return ag.linear(x, params[f"{prefix}.{w}"]).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

    q = split(q_in, "wq", tq)
    k = split(k_in, "wk", tk)
    v = split(v_in, "wv", tk)
    scores = ag.scale(ag.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    weights = ag.softmax(scores, axis=-1, mask=mask)
    ctx = ag.matmul(ag.dropout(weights, dropout, rng), v)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, tq, d)
    return ag.linear(ctx, params[f"{prefix}.wo"]), weights


def ffn(x: Tensor, params: Params, prefix: str) -> Tensor:
    h = ag.relu(ag.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ag.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def gru_cell(c: Tensor, x: Tensor, params: Params, prefix: str) -> Tensor:
    """One GRU update of state ``c`` with input ``x``, applied position-wise."""
    if c.shape != x.shape:
        raise ValueError(f"gru_cell: state {c.shape} and input {x.shape} differ")
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    z = ag.sigmoid(ag.linear(x, p("wz"), p("bz")) + ag.linear(c, p("uz")))
    r = ag.sigmoid(ag.linear(x, p("wr"), p("br")) + ag.linear(c, p("ur")))
    h = ag.tanh(ag.linear(x, p("wh"), p("bh")) + ag.linear(r * c, p("uh")))
    return (1.0 - z) * c + z * h


def gate(a_h: Tensor, a_c: Tensor, params: Params, prefix: str) -> Tensor:
    return ag.sigmoid(ag.linear(a_h, params[f"{prefix}.w1"]) + ag.linear(a_c, params[f"{prefix}.w2"], params[f"{prefix}.b"]))


_PE_CACHE: Dict[Tuple[int, int], np.ndarray] = {}


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal table: sin on even dims, cos on odd dims, (length, d)."""
    key = (length, d)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        i = np.arange(0, d, 2)[None, :]
        angle = pos / np.power(10000.0, i / d)
        pe = np.zeros((length, d))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle[:, : d // 2])
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def embed(tokens: np.ndarray, table: Tensor) -> Tensor:
    """Look up ``tokens`` (b, t), scale by sqrt(d), add positional encoding."""
    tokens = np.asarray(tokens)
    d = table.shape[1]
    rows = ag.take_rows(table, tokens)
    return ag.scale(rows, math.sqrt(d)) + positional_encoding(tokens.shape[-1], d)
