"""Attentive input reviewer.

An LSTM that, for a fixed number of steps, attends over the encoded concept
vectors and emits one thought vector per step. It never sees whole-image
features, which is what lets it be trained on text alone.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from . import tensor as T
from .errors import ShapeError

GATES = ("forget", "out", "in", "cell")


def param_shapes(d: int, F: int) -> dict[str, tuple[int, ...]]:
    shapes = {"rev.att_w": (d,), "rev.att_proj": (d, F + d)}
    for g in GATES:
        shapes[f"rev.W_{g}"] = (F, F + d)
        shapes[f"rev.b_{g}"] = (F,)
    return shapes


@dataclass
class ReviewerState:
    thought: T.Tensor  # f_{t-1}, (F,)
    cell: T.Tensor  # (F,)
    overview: T.Tensor  # v'_{t-1}, (d,)

    @classmethod
    def zeros(cls, d: int, F: int, dtype=None) -> "ReviewerState":
        return cls(T.zeros(F, dtype), T.zeros(F, dtype), T.zeros(d, dtype))


@dataclass
class ThoughtVectors:
    f: T.Tensor  # (T_r, F)
    beta: T.Tensor  # (T_r, T)


def attend_input(p: Mapping[str, T.Tensor], state: ReviewerState, inputs: T.Tensor) -> T.Tensor:
    """Attention weights over the T input vectors for the next review step."""
    proj_w = p["rev.att_proj"]
    if inputs.ndim != 2 or inputs.shape[1] != proj_w.shape[0]:
        raise ShapeError(f"reviewer inputs {inputs.shape} do not match attention width {proj_w.shape[0]}")
    query = T.matmul(proj_w, T.concat([state.thought, state.overview]))
    scores = T.matmul(T.tanh(T.add(inputs, query)), p["rev.att_w"])
    return T.softmax_rows(scores)


def overview(beta: T.Tensor, inputs: T.Tensor) -> T.Tensor:
    return T.matmul(beta, inputs)


def reviewer_step(p: Mapping[str, T.Tensor], state: ReviewerState, summary: T.Tensor):
    x = T.concat([state.thought, summary])
    forget = T.sigmoid(T.add(T.matmul(p["rev.W_forget"], x), p["rev.b_forget"]))
    out = T.sigmoid(T.add(T.matmul(p["rev.W_out"], x), p["rev.b_out"]))
    inp = T.sigmoid(T.add(T.matmul(p["rev.W_in"], x), p["rev.b_in"]))
    cand = T.tanh(T.add(T.matmul(p["rev.W_cell"], x), p["rev.b_cell"]))
    cell = T.add(T.mul(forget, state.cell), T.mul(inp, cand))
    thought = T.mul(out, T.tanh(cell))
    return thought, ReviewerState(thought, cell, summary)


def review(p: Mapping[str, T.Tensor], inputs: T.Tensor, steps: int) -> ThoughtVectors:
    if steps < 1:
        raise ValueError(f"review needs at least one step, got {steps}")
    d = p["rev.att_proj"].shape[0]
    F = p["rev.W_forget"].shape[0]
    state = ReviewerState.zeros(d, F, inputs.data.dtype)
    thoughts, betas = [], []
    for _ in range(steps):
        beta = attend_input(p, state, inputs)
        summary = overview(beta, inputs)
        f, state = reviewer_step(p, state, summary)
        thoughts.append(f)
        betas.append(beta)
    return ThoughtVectors(T.stack(thoughts), T.stack(betas))
