"""Encoder-decoder stacks: flat pre-norm baseline, block-scale and multiscale.

Modes
-----
``baseline`` / ``plain_deep``
    Flat pre-norm stack of ``sum(layers_per_block)`` encoder layers; every
    one of the ``n_blocks`` decoder layers attends the encoder top.
``bsc``
    Decoder block n attends (the normalised) output of encoder block n.
``msc``
    ``bsc`` plus a per-position context state threaded through the blocks by
    a GRU cell and fused into every encoder layer and decoder block by a gate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from . import layers as L
from .autograd import Tensor
from .config import MscConfig

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass
class BlockState:
    B_e: Tensor
    C: Optional[Tensor]
    n: int


@dataclass
class EncoderOutput:
    states: List[BlockState]
    memories: List[Tensor]  # cross-attention keys/values for decoder block n (index n-1)
    src_key_mask: np.ndarray  # (b, 1, 1, t_src)


# -- parameter layout -------------------------------------------------------

def _attn(spec, prefix, d):
    for w in ("wq", "wk", "wv", "wo"):
        spec[f"{prefix}.{w}"] = ((d, d), "xavier")


def _ffn(spec, prefix, d, f):
    spec[f"{prefix}.w1"] = ((d, f), "xavier")
    spec[f"{prefix}.b1"] = ((f,), "zeros")
    spec[f"{prefix}.w2"] = ((f, d), "xavier")
    spec[f"{prefix}.b2"] = ((d,), "zeros")


def _norm(spec, prefix, d):
    spec[f"{prefix}.g"] = ((d,), "ones")
    spec[f"{prefix}.b"] = ((d,), "zeros")


def _gate(spec, prefix, d):
    spec[f"{prefix}.w1"] = ((d, d), "xavier")
    spec[f"{prefix}.w2"] = ((d, d), "xavier")
    spec[f"{prefix}.b"] = ((d,), "zeros")


def context_prefix(cfg: MscConfig, n: int) -> str:
    kind = "ffn" if cfg.context_cell_as_ffn else "gru"
    return f"ctx.{kind}{n}" if cfg.per_block_gru else f"ctx.{kind}"


def param_spec(cfg: MscConfig) -> Dict[str, Tuple[tuple, str]]:
    """Ordered mapping ``name -> (shape, initialiser)`` for ``cfg``."""
    d, f = cfg.d_model, cfg.d_ffn
    spec: Dict[str, Tuple[tuple, str]] = {"embed.table": ((cfg.vocab_size, d), "xavier")}
    for n, m in enumerate(cfg.layers_per_block, 1):
        for layer in range(1, m + 1):
            p = f"enc.b{n}.l{layer}"
            _norm(spec, f"{p}.ln1", d)
            _attn(spec, f"{p}.self", d)
            if cfg.contextual:
                _attn(spec, f"{p}.ctx", d)
                if not cfg.fusion_additive:
                    _gate(spec, f"{p}.gate", d)
            _norm(spec, f"{p}.ln2", d)
            _ffn(spec, f"{p}.ffn", d, f)
        if cfg.collaborative or n == cfg.n_blocks:
            _norm(spec, f"enc.norm{n}", d)
    if cfg.contextual:
        blocks = range(1, cfg.n_blocks + 1) if cfg.per_block_gru else [1]
        for n in blocks:
            p = context_prefix(cfg, n)
            if cfg.context_cell_as_ffn:
                _norm(spec, f"{p}.ln", d)
                _ffn(spec, p, d, f)
            else:
                for w in ("wz", "wr", "wh", "uz", "ur", "uh"):
                    spec[f"{p}.{w}"] = ((d, d), "xavier")
                for b in ("bz", "br", "bh"):
                    spec[f"{p}.{b}"] = ((d,), "zeros")
    dec_ctx = cfg.contextual and not cfg.remove_cxt_enc_attention
    for n in range(1, cfg.n_blocks + 1):
        p = f"dec.b{n}"
        _norm(spec, f"{p}.ln1", d)
        _attn(spec, f"{p}.self", d)
        _norm(spec, f"{p}.ln2", d)
        _attn(spec, f"{p}.cross", d)
        if dec_ctx:
            _attn(spec, f"{p}.ctx", d)
            if not cfg.fusion_additive:
                _gate(spec, f"{p}.gate", d)
        _norm(spec, f"{p}.ln3", d)
        _ffn(spec, f"{p}.ffn", d, f)
    _norm(spec, "dec.norm", d)
    spec["out.bias"] = ((cfg.vocab_size,), "zeros")
    return spec


def init_params(cfg: MscConfig, seed: int) -> Dict[str, Tensor]:
    params = {}
    for name, (shape, kind) in param_spec(cfg).items():
        if kind == "xavier":
            params[name] = L.xavier(seed, name, shape)
        elif kind == "ones":
            params[name] = L.ones(name, shape)
        else:
            params[name] = L.zeros(name, shape)
    return params


def count_params(cfg: MscConfig) -> int:
    return int(sum(np.prod(shape) for shape, _ in param_spec(cfg).values()))


def is_encoder_weight(name: str, shape: tuple) -> bool:
    """Encoder weight matrices (attention, FFN, gate, context cell); no biases or norms."""
    return name.startswith(("enc.", "ctx.")) and len(shape) == 2


# -- masks ------------------------------------------------------------------

def key_padding_mask(tokens: np.ndarray) -> np.ndarray:
    return (np.asarray(tokens) != PAD)[:, None, None, :]


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))[None, None]


# -- the model --------------------------------------------------------------

class MscModel:
    """Parameters plus the forward computation for one :class:`MscConfig`.

    Optional hooks used by the analysis tooling:

    * ``probe`` (dict): receives intermediate tensors keyed by tuples such as
      ``("H", n, l)``, ``("B", n)``, ``("C", n)``, ``("gate_e", n, l)``; the
      ``H``/``B`` tensors retain their gradient.
    * ``switches`` (dict): maps ``(n, consumer)`` to an
      :class:`~mscnmt.autograd.Switch`; consumer is ``"encoder"``,
      ``"decoder"`` or ``"context"``.  The corresponding use of block output
      ``B_e^n`` is routed through a gradient switch.
    * ``attn`` (list): receives ``(n, weights)`` of every decoder
      cross-attention onto the encoder.
    """

    def __init__(self, cfg: MscConfig, seed: int = 0, params: Optional[Dict[str, Tensor]] = None):
        self.cfg = cfg
        self.seed = seed
        self.params = params if params is not None else init_params(cfg, seed)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        ag.zero_grad(self.params.values())

    def load_values(self, values: Dict[str, np.ndarray]) -> None:
        expected = set(self.params)
        if set(values) != expected:
            missing = sorted(expected - set(values))
            extra = sorted(set(values) - expected)
            raise ValueError(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in values.items():
            if tuple(arr.shape) != self.params[name].shape:
                raise ValueError(f"{name}: shape {tuple(arr.shape)} != {self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=np.float64)

    def state_values(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    # -- pieces ---------------------------------------------------------------
    def _route(self, x: Tensor, n: int, consumer: str, switches) -> Tensor:
        if switches is not None and (n, consumer) in switches:
            return ag.path_switch(x, switches[(n, consumer)])
        return x

    def fused_encoder_layer(self, H: Tensor, C: Optional[Tensor], n: int, layer: int,
                            mask, rng=None, probe=None) -> Tensor:
        cfg, P = self.cfg, self.params
        p = f"enc.b{n}.l{layer}"
        x = L.norm(H, P, f"{p}.ln1")
        a_h, _ = L.multi_head_attention(x, x, x, mask, P, f"{p}.self", cfg.heads, cfg.dp_a, rng)
        if cfg.contextual:
            if C is None:
                raise ValueError(f"encoder block {n}: msc mode needs the context state")
            a_c, _ = L.multi_head_attention(x, C, C, mask, P, f"{p}.ctx", cfg.heads, cfg.dp_a, rng)
            if cfg.fusion_additive:
                fused = a_h + a_c
            else:
                g = L.gate(a_h, a_c, P, f"{p}.gate")
                if probe is not None:
                    probe[("gate_e", n, layer)] = g
                fused = g * a_h + (1.0 - g) * a_c
        else:
            fused = a_h
        O = ag.dropout(fused, cfg.dp_r, rng) + H
        out = ag.dropout(L.ffn(L.norm(O, P, f"{p}.ln2"), P, f"{p}.ffn"), cfg.dp_r, rng) + O
        return out

    def encoder_block_forward(self, B_prev: Tensor, C_prev: Optional[Tensor], n: int,
                              mask, rng=None, probe=None) -> Tensor:
        H = B_prev
        for layer in range(1, self.cfg.layers_per_block[n - 1] + 1):
            H = self.fused_encoder_layer(H, C_prev, n, layer, mask, rng, probe)
            if probe is not None:
                probe[("H", n, layer)] = H.retain_grad()
        return H

    def context_update(self, C_prev: Tensor, B_n: Tensor, n: int) -> Tensor:
        cfg, P = self.cfg, self.params
        if not cfg.contextual:
            raise ValueError("context_update is only defined for msc mode with contextual collaboration")
        prefix = context_prefix(cfg, n)
        if cfg.context_cell_as_ffn:
            return L.ffn(L.norm(C_prev + B_n, P, f"{prefix}.ln"), P, prefix) + C_prev
        return L.gru_cell(C_prev, B_n, P, prefix)

    def decoder_block_forward(self, B_d: Tensor, memory: Tensor, C_n: Optional[Tensor], n: int,
                              self_mask, src_mask, rng=None, probe=None, attn=None) -> Tensor:
        cfg, P = self.cfg, self.params
        p = f"dec.b{n}"
        x = L.norm(B_d, P, f"{p}.ln1")
        a, _ = L.multi_head_attention(x, x, x, self_mask, P, f"{p}.self", cfg.heads, cfg.dp_a, rng)
        O = ag.dropout(a, cfg.dp_r, rng) + B_d
        x = L.norm(O, P, f"{p}.ln2")
        a_h, w = L.multi_head_attention(x, memory, memory, src_mask, P, f"{p}.cross", cfg.heads, cfg.dp_a, rng)
        if attn is not None:
            attn.append((n, w))
        if cfg.contextual and not cfg.remove_cxt_enc_attention:
            if C_n is None:
                raise ValueError(f"decoder block {n}: msc mode needs the context state")
            a_c, _ = L.multi_head_attention(x, C_n, C_n, src_mask, P, f"{p}.ctx", cfg.heads, cfg.dp_a, rng)
            if cfg.fusion_additive:
                fused = a_h + a_c
            else:
                g = L.gate(a_h, a_c, P, f"{p}.gate")
                if probe is not None:
                    probe[("gate_d", n)] = g
                fused = g * a_h + (1.0 - g) * a_c
        else:
            fused = a_h
        S = ag.dropout(fused, cfg.dp_r, rng) + O
        return ag.dropout(L.ffn(L.norm(S, P, f"{p}.ln3"), P, f"{p}.ffn"), cfg.dp_r, rng) + S

    # -- whole model ----------------------------------------------------------
    def encode(self, src, rng=None, probe=None, switches=None) -> EncoderOutput:
        cfg, P = self.cfg, self.params
        src = np.asarray(src)
        if src.ndim != 2 or src.shape[1] == 0:
            raise ValueError(f"source must be a non-empty (batch, time) array, got shape {src.shape}")
        mask = key_padding_mask(src)
        x = ag.dropout(L.embed(src, P["embed.table"]), cfg.dp_r, rng)
        C = x if cfg.contextual else None
        B = x
        states: List[BlockState] = []
        for n in range(1, cfg.n_blocks + 1):
            B = self.encoder_block_forward(B, C, n, mask, rng, probe)
            if probe is not None:
                probe[("B", n)] = B.retain_grad()
            state_B = B
            if cfg.contextual:
                C = self.context_update(C, self._route(B, n, "context", switches), n)
                if probe is not None:
                    probe[("C", n)] = C
            states.append(BlockState(state_B, C, n))
            if n < cfg.n_blocks:
                B = self._route(B, n, "encoder", switches)
        if cfg.collaborative:
            memories = [
                L.norm(self._route(s.B_e, s.n, "decoder", switches), P, f"enc.norm{s.n}")
                for s in states
            ]
        else:
            top = states[-1]
            mem = L.norm(self._route(top.B_e, top.n, "decoder", switches), P, f"enc.norm{top.n}")
            memories = [mem] * cfg.n_blocks
        return EncoderOutput(states, memories, mask)

    def decode(self, enc: EncoderOutput, tgt_in, rng=None, probe=None, attn=None) -> Tensor:
        cfg, P = self.cfg, self.params
        tgt_in = np.asarray(tgt_in)
        if tgt_in.ndim != 2 or tgt_in.shape[1] == 0:
            raise ValueError(f"target must be a non-empty (batch, time) array, got shape {tgt_in.shape}")
        t = tgt_in.shape[1]
        self_mask = causal_mask(t) & key_padding_mask(tgt_in)
        h = ag.dropout(L.embed(tgt_in, P["embed.table"]), cfg.dp_r, rng)
        for n in range(1, cfg.n_blocks + 1):
            C_n = enc.states[n - 1].C if cfg.contextual else None
            h = self.decoder_block_forward(h, enc.memories[n - 1], C_n, n, self_mask,
                                           enc.src_key_mask, rng, probe, attn)
        h = L.norm(h, P, "dec.norm")
        return ag.linear(h, P["embed.table"].T, P["out.bias"])

    def forward(self, src, tgt_in, rng=None, probe=None, switches=None, attn=None) -> Tensor:
        """Next-token logits (b, t_tgt, vocab) for teacher-forced ``tgt_in``."""
        enc = self.encode(src, rng, probe, switches)
        return self.decode(enc, tgt_in, rng, probe, attn)

    __call__ = forward

    def expand_encoder_output(self, enc: EncoderOutput, index: np.ndarray) -> EncoderOutput:
        """Select/repeat batch rows of an encoder output (used by beam search)."""
        def pick(t):
            return None if t is None else Tensor(t.data[index])

        states = [BlockState(pick(s.B_e), pick(s.C), s.n) for s in enc.states]
        cache = {}
        memories = []
        for m in enc.memories:
            if id(m) not in cache:
                cache[id(m)] = pick(m)
            memories.append(cache[id(m)])
        return EncoderOutput(states, memories, enc.src_key_mask[index])
