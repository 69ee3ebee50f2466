"""Greedy, beam-search and ensemble decoding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import decoder
from . import tensor as T
from .errors import ConfigError
from .model import ModelConfig, ModelInputs, leaves, think
from .vocab import BOS, EOS, PAD, UNK

MASKED = (PAD, BOS, UNK)


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool

    @property
    def words(self) -> list[int]:
        return [t for t in self.tokens if t != EOS]


def masked_log_probs(logits: np.ndarray) -> np.ndarray:
    """Log-softmax with PAD/BOS/UNK forced to probability zero."""
    z = np.array(logits, dtype=np.float64)
    z[[i for i in MASKED if i < len(z)]] = -np.inf
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


class _Member:
    """One model prepared for step-wise decoding of one image."""

    def __init__(self, params: Mapping[str, np.ndarray], cfg: ModelConfig, inputs: ModelInputs):
        self.p = leaves(params, trainable=False)
        self.cfg = cfg
        with T.no_grad():
            self.thoughts = think(self.p, cfg, inputs).f
            self.start = decoder.init_state(self.p, inputs.psi, pretrain=inputs.psi is None)

    def step(self, state, prev: int):
        with T.no_grad():
            alpha = decoder.attend_thoughts(self.p, state, self.thoughts)
            context = decoder.soft_sum(alpha, self.thoughts)
            h, new_state = decoder.decoder_step(self.p, state, prev, context)
            logits = decoder.word_logits(self.p, h)
        return masked_log_probs(logits.data), new_state


def _combined_step(members: Sequence[_Member], states, prev: int):
    if len(members) == 1:
        logp, s = members[0].step(states[0], prev)
        return logp, [s]
    outs = [m.step(s, prev) for m, s in zip(members, states)]
    with np.errstate(divide="ignore"):
        mean_p = np.mean([np.exp(lp) for lp, _ in outs], axis=0)
        logp = np.log(mean_p)
    return logp, [s for _, s in outs]


def _search(members: Sequence[_Member], width: int, max_len: int, length_norm: bool) -> list[Hypothesis]:
    if width < 1:
        raise ConfigError(f"beam width must be at least 1, got {width}")
    live = [([], 0.0, [m.start for m in members])]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        candidates = []
        for tokens, score, states in live:
            logp, new_states = _combined_step(members, states, tokens[-1] if tokens else BOS)
            for w in np.flatnonzero(np.isfinite(logp)):
                candidates.append((score + float(logp[w]), tokens + [int(w)], new_states))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, tokens, states in candidates[: width - len(finished)]:
            if tokens[-1] == EOS:
                finished.append(Hypothesis(tokens, score, True))
            else:
                live.append((tokens, score, states))
        if len(finished) >= width or not live:
            break
    ranked = finished + [Hypothesis(t, s, False) for t, s, _ in live]

    def key(h: Hypothesis):
        s = h.score / max(len(h.tokens), 1) if length_norm else h.score
        return (-s, h.tokens)

    ranked.sort(key=key)
    return ranked


def beam_search(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    inputs: ModelInputs,
    width: int = 4,
    max_len: int = 20,
    length_norm: bool = False,
) -> list[Hypothesis]:
    """Ranked hypotheses; scores are summed log-probabilities."""
    return _search([_Member(params, cfg, inputs)], width, max_len, length_norm)


def ensemble_decode(
    models: Sequence[tuple[Mapping[str, np.ndarray], ModelConfig]],
    inputs: ModelInputs | Sequence[ModelInputs],
    width: int = 4,
    max_len: int = 20,
    length_norm: bool = False,
) -> list[Hypothesis]:
    """Beam search over the arithmetic mean of the members' word distributions."""
    if not models:
        raise ConfigError("ensemble needs at least one model")
    per_model = [inputs] * len(models) if isinstance(inputs, ModelInputs) else list(inputs)
    V = models[0][1].vocab_size
    for _, c in models:
        if c.vocab_size != V:
            raise ConfigError(f"ensemble members disagree on vocabulary size ({c.vocab_size} vs {V})")
    members = [_Member(p, c, x) for (p, c), x in zip(models, per_model)]
    return _search(members, width, max_len, length_norm)


def greedy_decode(params, cfg: ModelConfig, inputs: ModelInputs, max_len: int = 20) -> list[int]:
    """Most probable word at every step until EOS or `max_len` words."""
    m = _Member(params, cfg, inputs)
    state, prev, out = m.start, BOS, []
    for _ in range(max_len):
        logp, state = m.step(state, prev)
        prev = int(np.argmax(logp))
        out.append(prev)
        if prev == EOS:
            break
    return out


def sequence_log_prob(params, cfg: ModelConfig, inputs: ModelInputs, tokens: Sequence[int]) -> float:
    """Masked log-probability of generating `tokens` (no BOS) from scratch.

    Scores a whole sequence by teacher forcing, independently of the search.
    """
    p = leaves(params, trainable=False)
    with T.no_grad():
        thoughts = think(p, cfg, inputs).f
        state = decoder.init_state(p, inputs.psi, pretrain=inputs.psi is None)
        total, prev = 0.0, BOS
        for w in tokens:
            alpha = decoder.attend_thoughts(p, state, thoughts)
            h, state = decoder.decoder_step(p, state, prev, decoder.soft_sum(alpha, thoughts))
            total += float(masked_log_probs(decoder.word_logits(p, h).data)[w])
            prev = w
    return total
