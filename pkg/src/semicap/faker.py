"""Surrogate visual inputs for captions that have no image.

Two kinds of fakes: concept sets sampled from the caption's own words
(optionally mixed with random "noise" concepts), and regional features
obtained by replacing each concept with the mean region feature the
detector localized for that concept on paired data.
"""
from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import MilHead, RegionFeatureMap, locate_region
from .errors import DataError, UnseenConceptError
from .vocab import PAD_CONCEPT, Vocabulary

CNTR_MAGIC = b"CNTR"


@dataclass
class FakeConceptExample:
    concepts: list[int]
    caption: list[int]


def caption_rng(seed: int, caption_id: str) -> np.random.Generator:
    """Per-caption generator derived from (global seed, caption id)."""
    digest = hashlib.blake2b(f"{seed}:{caption_id}".encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _caption_concepts(caption: Sequence[int], vocab: Vocabulary) -> list[int]:
    found = vocab.concepts_in(caption)
    if not found:
        raise DataError("caption contains no concept words")
    return found


def _truth_slots(found: list[int], slots: int, rng: np.random.Generator) -> list[int]:
    if len(found) > slots:
        pick = np.sort(rng.choice(len(found), size=slots, replace=False))
        return [found[i] for i in pick]
    return found + [PAD_CONCEPT] * (slots - len(found))


def truth_generate(caption: Sequence[int], vocab: Vocabulary, T: int, rng: np.random.Generator) -> FakeConceptExample:
    """Concept words of the caption, sampled down to T or padded up to T."""
    found = _caption_concepts(caption, vocab)
    return FakeConceptExample(_truth_slots(found, T, rng), list(caption))


def noisy_generate(
    caption: Sequence[int],
    vocab: Vocabulary,
    T: int,
    noise_count: int,
    rng: np.random.Generator,
) -> FakeConceptExample:
    """Mix `noise_count` random absent concepts with T - noise_count caption concepts."""
    if noise_count == 0:
        return truth_generate(caption, vocab, T, rng)
    if not 0 < noise_count <= T:
        raise ValueError(f"noise_count must lie in [0, {T}], got {noise_count}")
    found = _caption_concepts(caption, vocab)
    absent = [c for c in range(vocab.concept_count) if c not in found]
    k = min(noise_count, len(absent))
    noise = [absent[i] for i in rng.choice(len(absent), size=k, replace=False)] if k else []
    slots = _truth_slots(found, T - k, rng) + noise
    order = rng.permutation(len(slots))
    return FakeConceptExample([slots[i] for i in order], list(caption))


@dataclass
class ConceptCentroids:
    means: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def width(self) -> int:
        return next(iter(self.means.values())).shape[0]

    def __contains__(self, concept: int) -> bool:
        return concept in self.means


def build_centroids(
    dataset: Sequence[tuple[RegionFeatureMap, Sequence[int]]],
    head: MilHead,
) -> ConceptCentroids:
    """Mean winning-region feature per groundtruth concept.

    Sums are exactly rounded (math.fsum), so the result does not depend on
    the order of the dataset.
    """
    if not dataset:
        raise DataError("cannot build centroids from an empty dataset")
    collected: dict[int, list[np.ndarray]] = {}
    for fmap, labels in dataset:
        for c in labels:
            r = locate_region(fmap, head, c)
            collected.setdefault(int(c), []).append(fmap.regions[r].astype(np.float64))
    means, counts = {}, {}
    for c in sorted(collected):
        rows = np.stack(collected[c])
        means[c] = np.array([math.fsum(col) for col in rows.T]) / len(rows)
        counts[c] = len(rows)
    return ConceptCentroids(means, counts)


def fake_regional_encode(
    example: FakeConceptExample,
    centroids: ConceptCentroids,
    vocab: Vocabulary | None = None,
) -> np.ndarray:
    width = centroids.width
    rows = []
    for c in example.concepts:
        if c == PAD_CONCEPT:
            rows.append(np.zeros(width))
        elif c in centroids:
            rows.append(centroids.means[c])
        else:
            raise UnseenConceptError(c, vocab.concept_word(c) if vocab else None)
    return np.asarray(rows).reshape(len(rows), width)


def write_centroids(path: str | Path, centroids: ConceptCentroids) -> None:
    with open(path, "wb") as fh:
        fh.write(CNTR_MAGIC)
        fh.write(struct.pack("<I", len(centroids.means)))
        for c in sorted(centroids.means):
            vec = centroids.means[c]
            fh.write(struct.pack("<II", c, vec.shape[0]))
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())
            fh.write(struct.pack("<I", centroids.counts[c]))


def read_centroids(path: str | Path) -> ConceptCentroids:
    raw = Path(path).read_bytes()
    if raw[:4] != CNTR_MAGIC:
        raise DataError(f"{path}: not a CNTR centroid file")
    try:
        (n,) = struct.unpack_from("<I", raw, 4)
        off = 8
        means, counts = {}, {}
        for _ in range(n):
            c, a = struct.unpack_from("<II", raw, off)
            off += 8
            vec = np.frombuffer(raw, dtype="<f4", count=a, offset=off).astype(np.float64)
            off += 4 * a
            (cnt,) = struct.unpack_from("<I", raw, off)
            off += 4
            means[c] = vec
            counts[c] = cnt
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated centroid file ({exc})") from None
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    return ConceptCentroids(means, counts)


def dump_centroids_csv(path: str | Path, centroids: ConceptCentroids, vocab: Vocabulary | None = None) -> None:
    """Plain CSV of the centroid vectors for external plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["concept", "word", "count"] + [f"f{i}" for i in range(centroids.width)])
        for c in sorted(centroids.means):
            word = vocab.concept_word(c) if vocab else ""
            w.writerow([c, word, centroids.counts[c]] + [repr(float(x)) for x in centroids.means[c]])
