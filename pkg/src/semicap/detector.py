"""Noisy-OR multiple-instance concept detector over region feature maps.

The detector head scores each region with a per-concept logistic unit and
combines the regions with a noisy-OR: a concept is present unless every
region misses it. Besides the probabilities, the head localizes the region
that responds most strongly to a concept, which gives the "visual" encoding
of detected concepts.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .optim import RmspropState, rmsprop_update
from .vocab import PAD_CONCEPT

RFMP_MAGIC = b"RFMP"


@dataclass
class RegionFeatureMap:
    regions: np.ndarray  # (R, A)
    whole_image: np.ndarray  # (P,)
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        self.regions = np.asarray(self.regions)
        self.whole_image = np.asarray(self.whole_image)
        if self.regions.ndim != 2 or self.regions.shape[0] < 1 or self.regions.shape[1] < 1:
            raise ShapeError(f"regions must be a non-empty (R, A) array, got shape {self.regions.shape}")
        if self.grid is None:
            self.grid = (self.regions.shape[0], 1)
        if self.grid[0] * self.grid[1] != self.regions.shape[0]:
            raise ShapeError(f"grid {self.grid} does not hold {self.regions.shape[0]} regions")
        if not (np.all(np.isfinite(self.regions)) and np.all(np.isfinite(self.whole_image))):
            raise DataError("feature map contains non-finite values")

    @property
    def num_regions(self) -> int:
        return self.regions.shape[0]

    @property
    def width(self) -> int:
        return self.regions.shape[1]


def write_rfmp(path: str | Path, fmap: RegionFeatureMap) -> None:
    rh, rw = fmap.grid
    a = fmap.width
    p = fmap.whole_image.shape[0]
    with open(path, "wb") as fh:
        fh.write(RFMP_MAGIC)
        fh.write(struct.pack("<4I", rh, rw, a, p))
        fh.write(np.ascontiguousarray(fmap.regions, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(fmap.whole_image, dtype="<f4").tobytes())


def read_rfmp(path: str | Path) -> RegionFeatureMap:
    raw = Path(path).read_bytes()
    if raw[:4] != RFMP_MAGIC:
        raise DataError(f"{path}: not an RFMP feature file")
    if len(raw) < 20:
        raise DataError(f"{path}: truncated header")
    rh, rw, a, p = struct.unpack_from("<4I", raw, 4)
    n = rh * rw * a
    expected = 20 + 4 * (n + p)
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f4", offset=20)
    regions = body[:n].reshape(rh * rw, a).astype(np.float32)
    psi = body[n:].astype(np.float32)
    return RegionFeatureMap(regions, psi, (rh, rw))


@dataclass
class MilHead:
    W: np.ndarray  # (C, A)
    u: np.ndarray  # (C,)
    normalize: bool = False

    def __post_init__(self):
        if self.W.ndim != 2 or self.u.shape != (self.W.shape[0],):
            raise ShapeError(f"head shapes disagree: W {self.W.shape}, u {self.u.shape}")

    @property
    def concept_count(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, concept_count: int, width: int, seed: int = 0, normalize: bool = False) -> "MilHead":
        rng = np.random.default_rng(seed)
        r = np.sqrt(6.0 / (concept_count + width))
        W = rng.uniform(-r, r, size=(concept_count, width))
        return cls(W, np.zeros(concept_count), normalize)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"detector.W": self.W, "detector.u": self.u}

    @classmethod
    def from_tensors(cls, tensors, normalize: bool = False) -> "MilHead":
        return cls(np.asarray(tensors["detector.W"]), np.asarray(tensors["detector.u"]), normalize)


def _region_inputs(fmap: RegionFeatureMap, head: MilHead) -> np.ndarray:
    if fmap.width != head.W.shape[1]:
        raise ShapeError(f"feature width {fmap.width} does not match head width {head.W.shape[1]}")
    x = fmap.regions.astype(np.float64)
    if head.normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.maximum(norms, 1e-12)
    return x


def _softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def mil_probs(fmap: RegionFeatureMap, head: MilHead) -> np.ndarray:
    """Noisy-OR probability of every concept, shape (C,)."""
    z = _region_inputs(fmap, head) @ head.W.T + head.u  # (R, C)
    # log(1 - sigmoid(z)) == -softplus(z); sum over regions in log space
    log_miss = -_softplus(z).sum(axis=0)
    return -np.expm1(log_miss)


def mil_prob(fmap: RegionFeatureMap, head: MilHead, c: int) -> float:
    return float(mil_probs(fmap, head)[c])


def locate_region(fmap: RegionFeatureMap, head: MilHead, c: int) -> int:
    """Region with the largest pre-sigmoid activation for concept `c`."""
    act = _region_inputs(fmap, head) @ head.W[c]
    return int(np.argmax(act))


@dataclass(frozen=True)
class DetectedConcept:
    concept: int
    prob: float
    region: int


@dataclass
class ConceptSet:
    entries: list[DetectedConcept] = field(default_factory=list)

    @property
    def concepts(self) -> list[int]:
        return [e.concept for e in self.entries]

    def __len__(self):
        return len(self.entries)


def top_concepts(fmap: RegionFeatureMap, head: MilHead, T_: int) -> ConceptSet:
    if T_ > head.concept_count:
        raise ConfigError(f"asked for {T_} concepts but the detector knows only {head.concept_count}")
    probs = mil_probs(fmap, head)
    order = sorted(range(head.concept_count), key=lambda c: (-probs[c], c))[:T_]
    return ConceptSet([DetectedConcept(c, float(probs[c]), locate_region(fmap, head, c)) for c in order])


def encode_features(
    concepts: ConceptSet,
    fmap: RegionFeatureMap | None,
    mode: str,
    E: np.ndarray | None = None,
) -> np.ndarray:
    """Stack the per-concept input vectors, shape (T, width).

    semantic: row of the concept embedding matrix; visual: the winning
    region's feature vector. Padding concepts encode to zeros.
    """
    if mode == "semantic":
        if E is None:
            raise ConfigError("semantic encoding needs an embedding matrix")
        rows = [np.zeros(E.shape[1]) if e.concept == PAD_CONCEPT else E[e.concept] for e in concepts.entries]
        return np.asarray(rows, dtype=E.dtype).reshape(len(rows), E.shape[1])
    if mode == "visual":
        if fmap is None:
            raise ConfigError("visual encoding needs a feature map")
        rows = [
            np.zeros(fmap.width) if e.concept == PAD_CONCEPT else fmap.regions[e.region] for e in concepts.entries
        ]
        return np.asarray(rows, dtype=fmap.regions.dtype).reshape(len(rows), fmap.width)
    raise ConfigError(f"unknown encoding mode {mode!r}")


@dataclass
class DetectorConfig:
    lr: float = 1e-2
    epochs: int = 200
    batch_size: int = 64
    rho: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    normalize: bool = False


def label_matrix(labels: Sequence[Sequence[int]], concept_count: int) -> np.ndarray:
    y = np.zeros((len(labels), concept_count))
    for i, lab in enumerate(labels):
        for c in lab:
            if not 0 <= c < concept_count:
                raise DataError(f"label {c} is outside the concept vocabulary of size {concept_count}")
            y[i, c] = 1.0
    return y


def mil_loss(W: T.Tensor, u: T.Tensor, regions: np.ndarray, y: np.ndarray) -> T.Tensor:
    """Mean binary cross-entropy of noisy-OR probabilities, regions (B, R, A)."""
    b, r, a = regions.shape
    z = T.matmul(T.Tensor(regions.reshape(b * r, a)), T.transpose(W))
    z = T.add(T.reshape(z, (b, r, -1)), u)
    log_miss = T.neg(T.sum_(T.softplus(z), axis=1))  # log(1 - p)
    log_hit = T.log1mexp(log_miss)  # log p
    ll = T.add(T.mul(y, log_hit), T.mul(1.0 - y, log_miss))
    return T.neg(T.mean(ll))


def train_mil(
    head: MilHead,
    dataset: Sequence[tuple[RegionFeatureMap, Sequence[int]]],
    config: DetectorConfig | None = None,
) -> MilHead:
    """Fit the head by maximum likelihood on (feature map, concept labels) pairs."""
    config = config or DetectorConfig()
    if not dataset:
        raise DataError("detector training needs at least one labelled feature map")
    shapes = {fmap.regions.shape for fmap, _ in dataset}
    if len(shapes) != 1:
        raise ShapeError(f"all feature maps must share one shape, found {sorted(shapes)}")
    regions = np.stack([_region_inputs(fmap, head) for fmap, _ in dataset])
    y = label_matrix([lab for _, lab in dataset], head.concept_count)
    params = {"W": head.W.astype(np.float64), "u": head.u.astype(np.float64)}
    opt = RmspropState(lr=config.lr, rho=config.rho, eps=config.eps)
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    with T.precision(64):
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                leaves = {k: T.param(v) for k, v in params.items()}
                loss = mil_loss(leaves["W"], leaves["u"], regions[idx], y[idx])
                grads = T.backward(loss, leaves)
                params = rmsprop_update(params, grads, opt)
    return MilHead(params["W"], params["u"], head.normalize)


def label_recall(head: MilHead, dataset, threshold: float = 0.5) -> float:
    hit = total = 0
    for fmap, labels in dataset:
        probs = mil_probs(fmap, head)
        for c in set(labels):
            total += 1
            hit += probs[c] >= threshold
    return hit / total if total else 1.0
