"""Soft attentive decoder, output perceptron and the training loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .vocab import PAD

GATES = ("forget", "out", "in", "cell")


def param_shapes(F: int, H: int, E: int, V: int, P: int) -> dict[str, tuple[int, ...]]:
    shapes = {"dec.att_w": (F,), "dec.att_proj": (F, H + F)}
    for g in GATES:
        # [h; x; f'] is H + E + F wide
        shapes[f"dec.W_{g}"] = (H, H + E + F)
        shapes[f"dec.b_{g}"] = (H,)
    shapes.update(
        {
            "dec.init_h": (H, P),
            "dec.init_c": (H, P),
            "dec.embed": (V, E),
            "dec.out_hidden": (E, H),
            "dec.out_hidden_b": (E,),
            "dec.out_vocab": (V, E),
            "dec.out_vocab_b": (V,),
        }
    )
    return shapes


@dataclass
class DecoderState:
    h: T.Tensor  # (H,)
    c: T.Tensor  # (H,)
    context: T.Tensor  # f'_{i-1}, (F,)


def init_state(p: Mapping[str, T.Tensor], psi, pretrain: bool = False) -> DecoderState:
    """h_0 = W_h psi, c_0 = W_m psi; all zeros when pretraining on text."""
    H, P = p["dec.init_h"].shape
    F = p["dec.att_w"].shape[0]
    dtype = p["dec.init_h"].data.dtype
    if pretrain:
        return DecoderState(T.zeros(H, dtype), T.zeros(H, dtype), T.zeros(F, dtype))
    psi = T.constant(psi)
    if psi.shape != (P,):
        raise ShapeError(f"whole-image feature has shape {psi.shape}, expected ({P},)")
    return DecoderState(T.matmul(p["dec.init_h"], psi), T.matmul(p["dec.init_c"], psi), T.zeros(F, dtype))


def attend_thoughts(p: Mapping[str, T.Tensor], state: DecoderState, thoughts: T.Tensor) -> T.Tensor:
    query = T.matmul(p["dec.att_proj"], T.concat([state.h, state.context]))
    scores = T.matmul(T.tanh(T.add(thoughts, query)), p["dec.att_w"])
    return T.softmax_rows(scores)


def soft_sum(alpha: T.Tensor, thoughts: T.Tensor) -> T.Tensor:
    return T.matmul(alpha, thoughts)


def decoder_step(p: Mapping[str, T.Tensor], state: DecoderState, x_prev: int, context: T.Tensor):
    """Advance the LSTM by one word; returns (h_i, new state)."""
    V = p["dec.embed"].shape[0]
    if not 0 <= x_prev < V:
        raise IndexError(f"previous word id {x_prev} out of range for vocabulary of {V}")
    x = T.embedding_lookup(p["dec.embed"], x_prev)
    z = T.concat([state.h, x, context])
    forget = T.sigmoid(T.add(T.matmul(p["dec.W_forget"], z), p["dec.b_forget"]))
    out = T.sigmoid(T.add(T.matmul(p["dec.W_out"], z), p["dec.b_out"]))
    inp = T.sigmoid(T.add(T.matmul(p["dec.W_in"], z), p["dec.b_in"]))
    cand = T.tanh(T.add(T.matmul(p["dec.W_cell"], z), p["dec.b_cell"]))
    c = T.add(T.mul(forget, state.c), T.mul(inp, cand))
    h = T.mul(out, T.tanh(c))
    return h, DecoderState(h, c, context)


def word_logits(p, h, train: bool = False, keep_prob: float = 1.0, rng=None) -> T.Tensor:
    hidden = T.tanh(T.add(T.matmul(p["dec.out_hidden"], h), p["dec.out_hidden_b"]))
    hidden = T.dropout(hidden, keep_prob, rng, train)
    return T.add(T.matmul(p["dec.out_vocab"], hidden), p["dec.out_vocab_b"])


def word_distribution(p, h, train: bool = False, keep_prob: float = 1.0, rng=None) -> T.Tensor:
    return T.softmax_rows(word_logits(p, h, train, keep_prob, rng))


@dataclass
class CaptionLoss:
    nll: T.Tensor  # summed over predicted tokens
    alpha: T.Tensor  # (L, T_r)
    tokens: int


def caption_nll(
    p: Mapping[str, T.Tensor],
    thoughts: T.Tensor,
    psi,
    caption: Sequence[int],
    pretrain: bool = False,
    train: bool = False,
    keep_prob: float = 1.0,
    rng: np.random.Generator | None = None,
) -> CaptionLoss:
    """Teacher-forced negative log-likelihood of a BOS ... EOS caption."""
    if len(caption) < 2:
        raise ContractError("caption must hold BOS and at least one target token")
    state = init_state(p, psi, pretrain)
    terms, alphas = [], []
    for prev, target in zip(caption[:-1], caption[1:]):
        if target == PAD:
            break
        alpha = attend_thoughts(p, state, thoughts)
        context = soft_sum(alpha, thoughts)
        h, state = decoder_step(p, state, prev, context)
        logp = T.log_softmax_rows(word_logits(p, h, train, keep_prob, rng))
        terms.append(T.index(logp, target))
        alphas.append(alpha)
    if not terms:
        raise ContractError("caption has no target tokens")
    nll = T.neg(T.sum_(T.stack(terms)))
    return CaptionLoss(nll, T.stack(alphas), len(terms))


def attention_penalty(att: T.Tensor) -> T.Tensor:
    """sum over attended slots of (1 - total attention received)^2."""
    received = T.sum_(att, axis=0)
    return T.sum_(T.square(T.sub(1.0, received)))


def total_loss(nll, g_alpha, g_beta, lam: float) -> T.Tensor:
    if lam < 0:
        raise ValueError(f"penalty weight must be non-negative, got {lam}")
    if lam == 0:
        return T.constant(nll)
    return T.add(nll, T.mul(T.add(g_alpha, g_beta), lam))
