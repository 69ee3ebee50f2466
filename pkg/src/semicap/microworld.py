"""A deterministic synthetic world of coloured shapes on a grid.

Each scene places 1-3 objects in distinct cells. A cell's feature vector is
the one-hot shape concatenated with the one-hot colour, plus Gaussian
noise; empty cells carry noise only. Captions come from a handful of
compositional templates, so every concept word in a caption names
something that is actually in the scene.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import RegionFeatureMap, write_rfmp
from .vocab import write_captions

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "green", "yellow")
RELATIONS = ("above", "below", "left", "right")
OBJECT_COUNT_PROBS = (0.2, 0.4, 0.4)


@dataclass(frozen=True)
class Obj:
    shape: str
    color: str
    cell: tuple[int, int]

    @property
    def phrase(self) -> str:
        return f"a {self.color} {self.shape}"


@dataclass
class Scene:
    id: str
    grid: tuple[int, int]
    objects: list[Obj]

    def relation(self, a: Obj, b: Obj) -> str:
        """Where `a` sits relative to `b`."""
        if a.cell[0] < b.cell[0]:
            return "above"
        if a.cell[0] > b.cell[0]:
            return "below"
        return "to the left of" if a.cell[1] < b.cell[1] else "to the right of"

    def relations(self) -> list[tuple[int, int, str]]:
        return [(i, j, self.relation(self.objects[i], self.objects[j])) for i in range(len(self.objects)) for j in range(i + 1, len(self.objects))]

    def captions(self) -> list[str]:
        """The primary template first, then the alternate."""
        objs = self.objects
        if len(objs) == 1:
            return [objs[0].phrase, f"there is {objs[0].phrase}"]
        rel = self.relation(objs[0], objs[1])
        if len(objs) == 2:
            return [f"{objs[0].phrase} {rel} {objs[1].phrase}", f"{objs[0].phrase} and {objs[1].phrase}"]
        return [
            f"{objs[0].phrase} {rel} {objs[1].phrase} and {objs[2].phrase}",
            f"{objs[0].phrase} {objs[1].phrase} and {objs[2].phrase}",
        ]


def sample_scene(rng: np.random.Generator, scene_id: str, grid=(4, 4)) -> Scene:
    n = int(rng.choice(3, p=OBJECT_COUNT_PROBS)) + 1
    cells = rng.choice(grid[0] * grid[1], size=n, replace=False)
    objs = [
        Obj(SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))], (int(c) // grid[1], int(c) % grid[1]))
        for c in cells
    ]
    objs.sort(key=lambda o: (SHAPES.index(o.shape), COLORS.index(o.color), o.cell))
    return Scene(scene_id, tuple(grid), objs)


def attribute_vector(shape: str, color: str, distractor_dims: int = 0) -> np.ndarray:
    v = np.zeros(len(SHAPES) + len(COLORS) + distractor_dims)
    v[SHAPES.index(shape)] = 1.0
    v[len(SHAPES) + COLORS.index(color)] = 1.0
    return v


def scene_features(scene: Scene, rng: np.random.Generator, sigma: float, distractor_dims: int = 0) -> RegionFeatureMap:
    rh, rw = scene.grid
    width = len(SHAPES) + len(COLORS) + distractor_dims
    regions = np.zeros((rh * rw, width))
    for o in scene.objects:
        regions[o.cell[0] * rw + o.cell[1]] = attribute_vector(o.shape, o.color, distractor_dims)
    if sigma > 0:
        regions = regions + rng.normal(0.0, sigma, size=regions.shape)
    regions = regions.astype(np.float32)
    return RegionFeatureMap(regions, regions.mean(axis=0), (rh, rw))


def scene_labels(scene: Scene) -> list[str]:
    """Shape, colour and relation words present in the scene's captions."""
    words = []
    for o in scene.objects:
        for w in (o.color, o.shape):
            if w not in words:
                words.append(w)
    if len(scene.objects) > 1:
        rel = scene.relation(scene.objects[0], scene.objects[1]).split()
        words.extend(w for w in rel if w in RELATIONS and w not in words)
    return words


def split_of(seed: int, scene_id: str) -> str:
    h = int.from_bytes(hashlib.blake2b(f"{seed}/{scene_id}".encode(), digest_size=4).digest(), "little") % 10
    return "train" if h < 8 else ("val" if h == 8 else "test")


@dataclass
class PairedScene:
    scene: Scene
    features: RegionFeatureMap
    captions: list[str]
    split: str

    @property
    def id(self) -> str:
        return self.scene.id


@dataclass
class MicroWorld:
    seed: int
    paired: list[PairedScene] = field(default_factory=list)
    unpaired: list[str] = field(default_factory=list)
    labels: dict[str, list[str]] = field(default_factory=dict)

    def split(self, name: str) -> list[PairedScene]:
        return [p for p in self.paired if p.split == name]


def generate_dataset(
    seed: int,
    n_paired: int,
    n_unpaired: int,
    sigma: float = 0.1,
    grid=(4, 4),
    distractor_dims: int = 0,
) -> MicroWorld:
    """Paired scenes with 1-2 captions each, plus `n_unpaired` image-less captions.

    Unpaired captions come from their own scenes whose features are
    discarded. Every scene draws from a generator seeded by (seed, kind,
    index), so the output is a pure function of the arguments.
    """
    if n_paired < 1 and n_unpaired < 1:
        raise ValueError("need at least one scene")
    world = MicroWorld(seed)
    for i in range(n_paired):
        rng = np.random.default_rng([seed, 0, i])
        scene = sample_scene(rng, f"s{i:05d}", grid)
        feats = scene_features(scene, rng, sigma, distractor_dims)
        caps = scene.captions()[: int(rng.integers(1, 3))]
        world.paired.append(PairedScene(scene, feats, caps, split_of(seed, scene.id)))
        world.labels[scene.id] = scene_labels(scene)
    i = 0
    while len(world.unpaired) < n_unpaired:
        # n_unpaired counts captions; the last scene may contribute only one
        rng = np.random.default_rng([seed, 1, i])
        scene = sample_scene(rng, f"u{i:05d}", grid)
        caps = scene.captions()[: int(rng.integers(1, 3))]
        world.unpaired.extend(caps[: n_unpaired - len(world.unpaired)])
        i += 1
    return world


def write_microworld(world: MicroWorld, out_dir: str | Path) -> dict[str, Path]:
    """Write RFMP feature files and caption JSON Lines; returns the paths."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in ("train", "val", "test"):
        rows = []
        for ps in world.split(split):
            rel = os.path.join("features", f"{ps.id}.rfmp")
            write_rfmp(out / rel, ps.features)
            rows.extend({"id": f"{ps.id}#{k}", "caption": c, "features": rel} for k, c in enumerate(ps.captions))
        paths[split] = out / f"paired_{split}.jsonl"
        write_captions(paths[split], rows)
    paths["unpaired"] = out / "unpaired.jsonl"
    write_captions(paths["unpaired"], ({"id": f"u{i}", "caption": c} for i, c in enumerate(world.unpaired)))
    return paths
