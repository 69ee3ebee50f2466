"""Turning caption records and feature maps into model examples."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .detector import MilHead, RegionFeatureMap, encode_features, read_rfmp, top_concepts
from .errors import DataError, UnseenConceptError
from .faker import ConceptCentroids, caption_rng, fake_regional_encode, noisy_generate, truth_generate
from .model import Example, ModelConfig, ModelInputs
from .vocab import CaptionRecord, Vocabulary

log = logging.getLogger(__name__)


def image_inputs(fmap: RegionFeatureMap, head: MilHead, cfg: ModelConfig) -> ModelInputs:
    """Detect the top-T concepts and encode them for the reviewer."""
    concepts = top_concepts(fmap, head, cfg.num_concepts)
    regions = encode_features(concepts, fmap, "visual") if cfg.mode == "visual" else None
    return ModelInputs(concepts.concepts, regions, fmap.whole_image)


def load_feature_maps(records: Sequence[CaptionRecord], base_dir: str | Path) -> dict[str, RegionFeatureMap]:
    maps = {}
    for r in records:
        if r.feature_ref is None:
            raise DataError(f"caption {r.id!r} has no feature map")
        if r.feature_ref not in maps:
            path = Path(base_dir) / r.feature_ref
            if not path.exists():
                raise DataError(f"feature map {str(path)!r} for caption {r.id!r} not found")
            maps[r.feature_ref] = read_rfmp(path)
    return maps


def paired_examples(
    records: Sequence[CaptionRecord],
    maps: Mapping[str, RegionFeatureMap],
    head: MilHead,
    cfg: ModelConfig,
) -> list[Example]:
    cache: dict[str, ModelInputs] = {}
    out = []
    for r in records:
        if r.feature_ref is None or r.feature_ref not in maps:
            raise DataError(f"caption {r.id!r} is missing its feature map")
        if r.feature_ref not in cache:
            cache[r.feature_ref] = image_inputs(maps[r.feature_ref], head, cfg)
        out.append(Example(r.id, cache[r.feature_ref], r.tokens))
    return out


@dataclass
class EvalImage:
    id: str
    inputs: ModelInputs
    references: list[str]


def eval_images(
    records: Sequence[CaptionRecord],
    maps: Mapping[str, RegionFeatureMap],
    head: MilHead,
    cfg: ModelConfig,
    vocab: Vocabulary,
) -> list[EvalImage]:
    """One entry per distinct feature map, with all its captions as references."""
    refs: dict[str, list[str]] = {}
    for r in records:
        refs.setdefault(r.feature_ref, []).append(vocab.decode(r.tokens))
    return [EvalImage(key, image_inputs(maps[key], head, cfg), refs[key]) for key in sorted(refs)]


def fake_concepts(record: CaptionRecord, vocab: Vocabulary, cfg: ModelConfig, generator: str, noise_count: int, seed: int):
    rng = caption_rng(seed, record.id)
    if generator == "truth":
        return truth_generate(record.tokens, vocab, cfg.num_concepts, rng)
    if generator == "noisy":
        return noisy_generate(record.tokens, vocab, cfg.num_concepts, noise_count, rng)
    raise ValueError(f"unknown concept generator {generator!r}")


def text_examples(
    records: Sequence[CaptionRecord],
    vocab: Vocabulary,
    cfg: ModelConfig,
    generator: str = "noisy",
    noise_count: int = 2,
    seed: int = 0,
    centroids: ConceptCentroids | None = None,
    on_unseen: str = "skip",
    warn: Callable[[str], None] | None = None,
) -> list[Example]:
    """Image-less examples with faked concepts (and faked regional features)."""
    if cfg.mode == "visual" and centroids is None:
        raise DataError("visual-mode pretraining needs concept centroids")
    out = []
    for r in records:
        fake = fake_concepts(r, vocab, cfg, generator, noise_count, seed)
        regions = None
        if cfg.mode == "visual":
            try:
                regions = fake_regional_encode(fake, centroids, vocab)
            except UnseenConceptError as exc:
                if on_unseen == "abort":
                    raise
                (warn or log.warning)(f"skipping caption {r.id!r}: {exc}")
                continue
        out.append(Example(r.id, ModelInputs(fake.concepts, regions, None), r.tokens))
    return out
