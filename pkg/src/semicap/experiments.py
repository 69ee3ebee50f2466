"""Scaled micro-world experiments shared by the scripts, the CLI and tests."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorConfig, MilHead, locate_region, train_mil
from .faker import build_centroids
from .inference import beam_search
from .microworld import COLORS, RELATIONS, SHAPES, MicroWorld, generate_dataset
from . import tensor as T
from .model import Example, ModelConfig, ModelInputs, init_params, loss_terms
from .pipeline import EvalImage, image_inputs, text_examples
from .trainer import TrainConfig, Trainer, finetune_phase, pretrain_phase
from .vocab import PAD_CONCEPT, CaptionRecord, Vocabulary, build_vocab

log = logging.getLogger(__name__)

CONCEPT_WORDS = SHAPES + COLORS + RELATIONS


def microworld_vocab(world: MicroWorld) -> Vocabulary:
    """All caption words; the concept sub-vocabulary is shapes, colours, relations."""
    caps = [c for ps in world.paired for c in ps.captions] + list(world.unpaired)
    base = build_vocab(caps, concept_count=len(CONCEPT_WORDS), stop_count=0)
    tokens = list(base.tokens)
    for w in CONCEPT_WORDS:
        if w not in tokens:
            tokens.append(w)
    ids = {t: i for i, t in enumerate(tokens)}
    return Vocabulary(tokens, [ids[w] for w in CONCEPT_WORDS])


def detector_dataset(world: MicroWorld, vocab: Vocabulary, split: str = "train"):
    out = []
    for ps in world.split(split):
        labels = [vocab.concept_index(vocab.id_of(w)) for w in world.labels[ps.id]]
        out.append((ps.features, labels))
    return out


@dataclass
class Bundle:
    """A micro-world with its vocabulary, trained detector and examples."""

    world: MicroWorld
    vocab: Vocabulary
    head: MilHead
    cfg: ModelConfig
    train: list[Example]
    val: list[EvalImage]
    unpaired: list[CaptionRecord] = field(default_factory=list)


def model_config(vocab: Vocabulary, world: MicroWorld, mode: str = "semantic", **overrides) -> ModelConfig:
    width = world.paired[0].features.width
    base = dict(
        mode=mode,
        vocab_size=len(vocab),
        concept_count=vocab.concept_count,
        concept_dim=16,
        feature_width=width,
        psi_width=width,
        thought_dim=16,
        hidden_dim=32,
        embed_dim=16,
        review_steps=4,
        num_concepts=6,
        keep_prob=1.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def build_bundle(
    seed: int,
    n_paired: int,
    n_unpaired: int,
    sigma: float = 0.1,
    detector: DetectorConfig | None = None,
    **cfg_overrides,
) -> Bundle:
    world = generate_dataset(seed, n_paired, n_unpaired, sigma=sigma)
    vocab = microworld_vocab(world)
    data = detector_dataset(world, vocab)
    head = MilHead.init(vocab.concept_count, world.paired[0].features.width, seed=seed)
    head = train_mil(head, data, detector or DetectorConfig(seed=seed))
    cfg = model_config(vocab, world, **cfg_overrides)
    train, val = [], []
    for ps in world.paired:
        inputs = image_inputs(ps.features, head, cfg)
        if ps.split == "train":
            train.extend(Example(f"{ps.id}#{k}", inputs, tuple(vocab.encode(c))) for k, c in enumerate(ps.captions))
        elif ps.split == "val":
            val.append(EvalImage(ps.id, inputs, list(ps.captions)))
    unpaired = [CaptionRecord(f"u{i}", tuple(vocab.encode(c))) for i, c in enumerate(world.unpaired)]
    return Bundle(world, vocab, head, cfg, train, val, unpaired)


# overfit


@dataclass
class OverfitResult:
    epochs: int
    loss: float
    exact: int
    total: int
    seconds: float


# wide enough that 300 epochs of lr-bounded rmsprop steps can memorize
OVERFIT_DIMS = dict(concept_dim=64, thought_dim=128, hidden_dim=256, embed_dim=256)


def overfit(seed: int = 0, n_examples: int = 16, epochs: int = 300, lr: float = 1e-4, **cfg_overrides) -> OverfitResult:
    """Memorize `n_examples` paired captions (one per image) with batch size 1.

    Returns the final evaluation-mode NLL per token and how many training
    captions beam-4 decoding reproduces exactly.
    """
    t0 = time.perf_counter()
    bundle = build_bundle(seed, n_paired=4 * n_examples, n_unpaired=0, **{**OVERFIT_DIMS, **cfg_overrides})
    seen, examples = set(), []
    for ex in bundle.train:
        img = ex.id.split("#")[0]
        if img not in seen:
            seen.add(img)
            examples.append(ex)
    examples = examples[:n_examples]
    tr = Trainer(bundle.cfg, TrainConfig(batch_size=1, max_epochs=epochs, lr=lr, seed=seed))
    while tr.epoch < epochs:
        loss = tr.run_epoch(examples)
        log.info("overfit epoch %d: train %.4f nats/token", tr.epoch, loss)
    loss = tr.mean_nll(examples)
    exact = 0
    for ex in examples:
        best = beam_search(tr.params, bundle.cfg, ex.inputs, width=4, max_len=20)[0]
        exact += tuple(best.tokens) == tuple(ex.tokens[1:])
    return OverfitResult(tr.epoch, loss, exact, len(examples), time.perf_counter() - t0)


# semi-supervised trend


@dataclass
class TrendRun:
    seed: int
    cold: list[float]
    pretrained: list[float]
    pretrain_epochs: int


def trend_run(
    seed: int,
    n_paired: int = 200,
    n_unpaired: int = 2000,
    finetune_epochs: int = 10,
    pretrain_epochs: int = 5,
    batch_size: int = 1,
    lr: float = 1e-4,
    threads: int = 1,
) -> TrendRun:
    """Validation BLEU-4 per finetune epoch, cold start versus text-pretrained."""
    b = build_bundle(seed, n_paired, n_unpaired)
    pre_cfg = TrainConfig(
        batch_size=batch_size, max_epochs=pretrain_epochs, lr=lr, seed=seed, phase="pretrain", threads=threads
    )
    texts = text_examples(b.unpaired, b.vocab, b.cfg, generator="noisy", noise_count=2, seed=seed)
    pre = pretrain_phase(b.cfg, texts, pre_cfg)
    ft_cfg = TrainConfig(batch_size=batch_size, max_epochs=finetune_epochs, lr=lr, seed=seed, threads=threads)
    _, cold = finetune_phase(b.cfg, b.train, b.val, b.vocab, ft_cfg)
    _, warm = finetune_phase(b.cfg, b.train, b.val, b.vocab, ft_cfg, init=pre)
    return TrendRun(
        seed,
        [r.val_bleu4 for r in cold.rows],
        [r.val_bleu4 for r in warm.rows],
        int(pre.metadata["epoch"]),
    )


# centroid faking


def centroid_nearest_fraction(seed: int = 0, n_paired: int = 1000, sigma: float = 0.1) -> tuple[float, int]:
    """Share of concepts whose centroid is L2-nearest to its held-out features.

    Centroids come from the train split. The held-out features of a concept
    are the validation and test regions the detector assigns to it, summarized
    by their mean; a concept passes when its own train centroid is the nearest
    one to that mean. (A single region showing a red circle is an instance of
    both "red" and "circle", so per-region nearest-centroid votes are
    ambiguous by construction.)
    """
    b = build_bundle(seed, n_paired, 0, sigma=sigma)
    cents = build_centroids(detector_dataset(b.world, b.vocab, "train"), b.head)
    held = build_centroids(
        detector_dataset(b.world, b.vocab, "val") + detector_dataset(b.world, b.vocab, "test"), b.head
    )
    keys = sorted(cents.means)
    M = np.stack([cents.means[k] for k in keys])
    hits = [keys[int(np.argmin(((M - held.means[c]) ** 2).sum(axis=1)))] == c for c in sorted(held.means)]
    return sum(hits) / len(hits), len(hits)


# gradient check on the toy configuration

TOY_CAPTION = (1, 5, 6, 7, 8, 2)


def toy_config(mode: str) -> ModelConfig:
    return ModelConfig(
        mode=mode,
        vocab_size=20,
        concept_count=6,
        concept_dim=8,
        feature_width=8,
        psi_width=5,
        thought_dim=8,
        hidden_dim=12,
        embed_dim=6,
        review_steps=3,
        num_concepts=4,
    )


def toy_grad_check(mode: str, pretrain: bool, tolerance: float = 1e-4, lam: float = 1.0, seed: int = 1):
    """Finite-difference check of the full loss for every parameter."""
    cfg = toy_config(mode)
    rng = np.random.default_rng(seed + 1)
    inputs = ModelInputs(
        [0, 3, 5, PAD_CONCEPT],
        rng.normal(size=(cfg.num_concepts, cfg.feature_width)) if mode == "visual" else None,
        rng.normal(size=cfg.psi_width),
    )
    example = Example("toy", inputs, TOY_CAPTION)
    params = init_params(cfg, seed, dtype=np.float64)

    def f(p):
        return loss_terms(p, cfg, example, pretrain, lam).total

    return T.grad_check(f, params, tolerance=tolerance)
