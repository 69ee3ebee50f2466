"""Model configuration, parameter initialization and the end-to-end loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import decoder, reviewer
from . import tensor as T
from .errors import ConfigError, ShapeError
from .vocab import PAD_CONCEPT

MODES = ("semantic", "visual")


@dataclass
class ModelConfig:
    mode: str = "semantic"
    vocab_size: int = 20  # V
    concept_count: int = 10  # |V_c|
    concept_dim: int = 16  # d in semantic mode
    feature_width: int = 7  # A, d in visual mode
    psi_width: int = 7  # P
    thought_dim: int = 16  # F
    hidden_dim: int = 32  # H
    embed_dim: int = 16  # E_w
    review_steps: int = 8  # T_r
    num_concepts: int = 10  # T
    keep_prob: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in (
            "vocab_size",
            "concept_count",
            "concept_dim",
            "feature_width",
            "psi_width",
            "thought_dim",
            "hidden_dim",
            "embed_dim",
            "review_steps",
            "num_concepts",
        ):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError("keep_prob must lie in (0, 1]")

    @property
    def input_dim(self) -> int:
        return self.concept_dim if self.mode == "semantic" else self.feature_width

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = reviewer.param_shapes(cfg.input_dim, cfg.thought_dim)
    shapes.update(decoder.param_shapes(cfg.thought_dim, cfg.hidden_dim, cfg.embed_dim, cfg.vocab_size, cfg.psi_width))
    if cfg.mode == "semantic":
        shapes["concept_embed"] = (cfg.concept_count, cfg.concept_dim)
    return shapes


# not reachable from text-only pretraining
IMAGE_ONLY = ("dec.init_h", "dec.init_c")


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices and vectors of attention weights, zero biases.

    Parameters are drawn in sorted-name order so the result depends only on
    the seed and shapes.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        is_bias = len(shape) == 1 and (".b_" in name or name.endswith("_b"))
        if is_bias:
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
        r = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-r, r, size=shape).astype(dtype)
    return params


@dataclass
class ModelInputs:
    """What the reviewer reads for one caption.

    `concepts` are concept indices (PAD_CONCEPT for padding); visual mode
    additionally carries the (T, A) region vectors. `psi` is None for
    text-only examples.
    """

    concepts: Sequence[int]
    region_inputs: np.ndarray | None = None
    psi: np.ndarray | None = None


@dataclass
class Example:
    id: str
    inputs: ModelInputs
    tokens: Sequence[int]


def encode_inputs(p: Mapping[str, T.Tensor], cfg: ModelConfig, inputs: ModelInputs) -> T.Tensor:
    if cfg.mode == "semantic":
        table = p["concept_embed"]
        zero = T.zeros(cfg.concept_dim, table.data.dtype)
        rows = [zero if c == PAD_CONCEPT else T.embedding_lookup(table, c) for c in inputs.concepts]
        return T.stack(rows)
    if inputs.region_inputs is None:
        raise ConfigError("visual mode needs region inputs")
    x = np.asarray(inputs.region_inputs)
    if x.ndim != 2 or x.shape[1] != cfg.feature_width:
        raise ShapeError(f"region inputs have shape {x.shape}, expected (T, {cfg.feature_width})")
    dtype = p["rev.att_w"].data.dtype
    return T.Tensor(x.astype(dtype, copy=False))


def leaves(params: Mapping[str, np.ndarray], trainable: bool = True) -> dict[str, T.Tensor]:
    make = T.param if trainable else T.Tensor
    return {k: make(v) for k, v in params.items()}


def think(p, cfg: ModelConfig, inputs: ModelInputs) -> reviewer.ThoughtVectors:
    return reviewer.review(p, encode_inputs(p, cfg, inputs), cfg.review_steps)


@dataclass
class LossTerms:
    total: T.Tensor
    nll: T.Tensor
    g_alpha: T.Tensor
    g_beta: T.Tensor
    tokens: int
    alpha: T.Tensor = field(repr=False)
    beta: T.Tensor = field(repr=False)


def loss_terms(
    p: Mapping[str, T.Tensor],
    cfg: ModelConfig,
    example: Example,
    pretrain: bool,
    lam: float = 1.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> LossTerms:
    """Caption NLL plus the doubly-stochastic penalties on alpha and beta."""
    thoughts = think(p, cfg, example.inputs)
    psi = None if pretrain else example.inputs.psi
    if not pretrain and psi is None:
        raise ConfigError(f"example {example.id!r} has no whole-image feature for supervised training")
    cap = decoder.caption_nll(p, thoughts.f, psi, example.tokens, pretrain, train, cfg.keep_prob, rng)
    g_alpha = decoder.attention_penalty(cap.alpha)
    g_beta = decoder.attention_penalty(thoughts.beta)
    total = decoder.total_loss(cap.nll, g_alpha, g_beta, lam)
    return LossTerms(total, cap.nll, g_alpha, g_beta, cap.tokens, cap.alpha, thoughts.beta)


def example_grads(params, cfg, example, pretrain, lam, train, rng):
    """(gradient map, summed nll, token count) for one example."""
    p = leaves(params)
    terms = loss_terms(p, cfg, example, pretrain, lam, train, rng)
    return T.backward(terms.total, p), float(terms.nll.data), terms.tokens
