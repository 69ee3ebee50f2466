"""Training: the text-only pretraining phase, supervised finetuning with
BLEU-4 model selection, checkpoints, and parameter accounting."""
from __future__ import annotations

import csv
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, DivergenceError
from .inference import beam_search
from .metrics import bleu
from .model import IMAGE_ONLY, Example, ModelConfig, example_grads, init_params, leaves, loss_terms, param_shapes
from .optim import RmspropState, clip_by_global_norm, rmsprop_update, tree_sum
from .pipeline import EvalImage
from . import tensor as T

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 20
    lr: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    clip_norm: float = 5.0
    lam: float = 1.0
    seed: int = 0
    phase: str = "finetune"
    val_every: int = 1
    beam_width: int = 4
    max_len: int = 20
    generator: str = "noisy"
    noise_count: int = 2
    converge_tol: float = 1e-3
    converge_patience: int = 2
    heldout_fraction: float = 0.05
    on_unseen: str = "skip"
    threads: int = 1

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be 'pretrain' or 'finetune', got {self.phase!r}")
        if self.generator not in ("truth", "noisy"):
            raise ConfigError(f"generator must be 'truth' or 'noisy', got {self.generator!r}")
        if self.on_unseen not in ("skip", "abort"):
            raise ConfigError(f"on_unseen must be 'skip' or 'abort', got {self.on_unseen!r}")
        for name in ("batch_size", "max_epochs", "val_every", "beam_width", "max_len", "threads", "converge_patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.lam < 0 or not 0 <= self.rho < 1:
            raise ConfigError("need lr > 0, lam >= 0 and 0 <= rho < 1")

    def to_dict(self) -> dict:
        return asdict(self)


def dataclass_from_dict(cls, data: Mapping):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


# checkpoints


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def params(self, prefix_filter: Callable[[str], bool] | None = None) -> dict[str, np.ndarray]:
        keep = prefix_filter or (lambda n: not n.startswith(("opt.", "detector.")))
        return {k: v for k, v in self.tensors.items() if keep(k)}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a CKPT checkpoint")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
        (mlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        metadata = json.loads(raw[off : off + mlen].decode("utf-8"))
        off += mlen
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(tensors, metadata)


# reports


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_bleu4: float | None
    wall_time: float
    heldout_loss: float | None = None


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    best_epoch: int | None = None
    best_bleu4: float | None = None
    initial_heldout: float | None = None

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_bleu4", "wall_time", "heldout_loss"])
            for r in self.rows:
                w.writerow([r.epoch, f"{r.train_loss:.6f}", "" if r.val_bleu4 is None else f"{r.val_bleu4:.6f}", f"{r.wall_time:.3f}", "" if r.heldout_loss is None else f"{r.heldout_loss:.6f}"])

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "best_epoch": self.best_epoch, "best_bleu4": self.best_bleu4, "initial_heldout": self.initial_heldout}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainReport":
        return cls([EpochRow(**r) for r in d.get("rows", [])], d.get("best_epoch"), d.get("best_bleu4"), d.get("initial_heldout"))


# the training loop


class Trainer:
    """Parameters, optimizer state and RNG for one training run.

    Per-example gradients are computed against read-only parameters (in a
    thread pool when `threads > 1`) and reduced in a fixed order, so results
    do not depend on the thread count.
    """

    def __init__(self, cfg: ModelConfig, train_cfg: TrainConfig, params: Mapping[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.train_cfg = train_cfg
        self.pretrain = train_cfg.phase == "pretrain"
        self.params = dict(params) if params is not None else init_params(cfg, train_cfg.seed)
        expected = param_shapes(cfg)
        for name, shape in expected.items():
            if name not in self.params:
                raise ConfigError(f"parameter {name!r} missing")
            if tuple(self.params[name].shape) != tuple(shape):
                raise ConfigError(f"parameter {name!r} has shape {self.params[name].shape}, config expects {shape}")
        self.params = {k: np.asarray(v, dtype=np.float32) for k, v in self.params.items() if k in expected}
        self.opt = RmspropState(lr=train_cfg.lr, rho=train_cfg.rho, eps=train_cfg.eps)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.epoch = 0
        self.report = TrainReport()
        self.best_params: dict[str, np.ndarray] | None = None

    def _grads(self, examples: Sequence[Example]):
        seeds = self.rng.integers(0, 2**63, size=len(examples))
        tc = self.train_cfg

        def one(args):
            ex, s = args
            return example_grads(self.params, self.cfg, ex, self.pretrain, tc.lam, True, np.random.default_rng(s))

        jobs = list(zip(examples, seeds))
        if tc.threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(tc.threads) as pool:
                results = list(pool.map(one, jobs))
        else:
            results = [one(j) for j in jobs]
        grads = tree_sum([g for g, _, _ in results])
        nll = sum(n for _, n, _ in results)
        tokens = sum(k for _, _, k in results)
        return grads, nll, tokens

    def step(self, batch: Sequence[Example]) -> tuple[float, int]:
        grads, nll, tokens = self._grads(batch)
        if not np.isfinite(nll):
            raise DivergenceError(f"non-finite training loss at epoch {self.epoch + 1}")
        scale = np.float32(1.0 / len(batch))
        grads = clip_by_global_norm({k: g * scale for k, g in grads.items()}, self.train_cfg.clip_norm)
        self.params = rmsprop_update(self.params, grads, self.opt)
        return nll, tokens

    def run_epoch(self, examples: Sequence[Example]) -> float:
        """One pass in shuffled order; returns the mean NLL per token."""
        if not examples:
            raise DataError("no training examples")
        order = self.rng.permutation(len(examples))
        bs = self.train_cfg.batch_size
        nll = tokens = 0
        for start in range(0, len(order), bs):
            n, k = self.step([examples[i] for i in order[start : start + bs]])
            nll += n
            tokens += k
        self.epoch += 1
        return nll / tokens

    def mean_nll(self, examples: Sequence[Example], params: Mapping[str, np.ndarray] | None = None) -> float:
        """Evaluation-mode NLL per token (no dropout, no gradients)."""
        p = leaves(params or self.params, trainable=False)
        nll = tokens = 0
        with T.no_grad():
            for ex in examples:
                terms = loss_terms(p, self.cfg, ex, self.pretrain, self.train_cfg.lam, False)
                nll += float(terms.nll.data)
                tokens += terms.tokens
        return nll / tokens

    def val_bleu4(self, images: Sequence[EvalImage], vocab) -> float:
        tc = self.train_cfg
        evalset = {}
        for img in images:
            best = beam_search(self.params, self.cfg, img.inputs, tc.beam_width, tc.max_len)[0]
            evalset[img.id] = (vocab.decode(best.tokens), img.references)
        return bleu(evalset, 4)

    def checkpoint(self, extra: Mapping | None = None, params: Mapping[str, np.ndarray] | None = None) -> Checkpoint:
        tensors = dict(params or self.params)
        tensors.update({f"opt.{k}": v for k, v in self.opt.acc.items()})
        meta = {
            "model": self.cfg.to_dict(),
            "train": self.train_cfg.to_dict(),
            "epoch": self.epoch,
            "rng": self.rng.bit_generator.state,
            "report": self.report.to_dict(),
        }
        meta.update(extra or {})
        return Checkpoint(tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, train_cfg: TrainConfig | None = None) -> "Trainer":
        cfg = dataclass_from_dict(ModelConfig, ckpt.metadata["model"])
        tc = train_cfg or dataclass_from_dict(TrainConfig, ckpt.metadata["train"])
        tr = cls(cfg, tc, ckpt.params())
        tr.opt.acc = {k[4:]: v.copy() for k, v in ckpt.tensors.items() if k.startswith("opt.")}
        if "rng" in ckpt.metadata:
            tr.rng.bit_generator.state = ckpt.metadata["rng"]
        tr.epoch = int(ckpt.metadata.get("epoch", 0))
        tr.report = TrainReport.from_dict(ckpt.metadata.get("report", {}))
        return tr


def _heldout_split(examples: Sequence[Example], fraction: float, seed: int):
    if fraction <= 0 or len(examples) < 2:
        return list(examples), []
    rng = np.random.default_rng([seed, 7])
    n_held = max(1, int(round(fraction * len(examples))))
    held = set(rng.choice(len(examples), size=n_held, replace=False).tolist())
    return [e for i, e in enumerate(examples) if i not in held], [e for i, e in enumerate(examples) if i in held]


def pretrain_phase(
    cfg: ModelConfig,
    examples: Sequence[Example],
    train_cfg: TrainConfig,
    params: Mapping[str, np.ndarray] | None = None,
    on_epoch_end: Callable[[Trainer], None] | None = None,
) -> Checkpoint:
    """Train on image-less examples with zero decoder initial state.

    A held-out slice of the corpus is scored after every epoch; training
    stops once its relative improvement stays below `converge_tol` for
    `converge_patience` consecutive epochs, or at `max_epochs`.
    """
    if train_cfg.phase != "pretrain":
        train_cfg = dataclass_from_dict(TrainConfig, {**train_cfg.to_dict(), "phase": "pretrain"})
    tr = Trainer(cfg, train_cfg, params)
    train, held = _heldout_split(examples, train_cfg.heldout_fraction, train_cfg.seed)
    monitor = held or train
    prev = tr.mean_nll(monitor)
    tr.report.initial_heldout = prev
    stale = 0
    while tr.epoch < train_cfg.max_epochs:
        t0 = time.perf_counter()
        loss = tr.run_epoch(train)
        cur = tr.mean_nll(monitor)
        tr.report.rows.append(EpochRow(tr.epoch, loss, None, time.perf_counter() - t0, cur))
        log.info("pretrain epoch %d: train %.4f heldout %.4f nats/token", tr.epoch, loss, cur)
        if on_epoch_end:
            on_epoch_end(tr)
        rel = (prev - cur) / abs(prev) if prev else 0.0
        stale = stale + 1 if rel < train_cfg.converge_tol else 0
        prev = cur
        if stale >= train_cfg.converge_patience:
            break
    return tr.checkpoint({"phase": "pretrain"})


def finetune_phase(
    cfg: ModelConfig,
    train_examples: Sequence[Example],
    val_images: Sequence[EvalImage],
    vocab,
    train_cfg: TrainConfig,
    init: Mapping[str, np.ndarray] | Checkpoint | None = None,
    resume: Checkpoint | None = None,
    on_epoch_end: Callable[[Trainer], None] | None = None,
) -> tuple[Checkpoint, TrainReport]:
    """Supervised training with validation BLEU-4 after each epoch.

    Returns the checkpoint of the best-BLEU-4 epoch and the per-epoch report.
    `init` seeds the parameters (e.g. from pretraining); `resume` continues
    an interrupted run with its optimizer and RNG state.
    """
    if train_cfg.phase != "finetune":
        train_cfg = dataclass_from_dict(TrainConfig, {**train_cfg.to_dict(), "phase": "finetune"})
    if resume is not None:
        tr = Trainer.from_checkpoint(resume, train_cfg)
        best = {k[5:]: v.copy() for k, v in resume.tensors.items() if k.startswith("best.")}
        tr.best_params = best or None
    else:
        params = init.params() if isinstance(init, Checkpoint) else init
        if params is not None:
            fresh = init_params(cfg, train_cfg.seed)
            # image-only weights are absent from text-only checkpoints
            params = {**fresh, **{k: v for k, v in params.items() if k in fresh}}
        tr = Trainer(cfg, train_cfg, params)
    while tr.epoch < train_cfg.max_epochs:
        t0 = time.perf_counter()
        loss = tr.run_epoch(train_examples)
        score = None
        if val_images and tr.epoch % train_cfg.val_every == 0:
            score = tr.val_bleu4(val_images, vocab)
            if tr.report.best_bleu4 is None or score > tr.report.best_bleu4:
                tr.report.best_bleu4 = score
                tr.report.best_epoch = tr.epoch
                tr.best_params = {k: v.copy() for k, v in tr.params.items()}
        tr.report.rows.append(EpochRow(tr.epoch, loss, score, time.perf_counter() - t0))
        log.info("finetune epoch %d: train %.4f nats/token, val BLEU-4 %s", tr.epoch, loss, score)
        if on_epoch_end:
            on_epoch_end(tr)
    best = tr.best_params or tr.params
    ckpt = tr.checkpoint({"phase": "finetune", "best_metric": {"bleu4": tr.report.best_bleu4, "epoch": tr.report.best_epoch}}, params=best)
    return ckpt, tr.report


def resumable_checkpoint(tr: Trainer) -> Checkpoint:
    """Last-epoch state plus the best parameters seen so far."""
    ck = tr.checkpoint({"phase": tr.train_cfg.phase})
    if tr.best_params is not None:
        ck.tensors.update({f"best.{k}": v for k, v in tr.best_params.items()})
    return ck


# parameter accounting


def param_count(F: int, d: int, H: int, E: int, V: int, P: int) -> dict:
    """Gate-matrix accounting of reviewer, decoder and image-init blocks."""
    for name, v in dict(F=F, d=d, H=H, E=E, V=V, P=P).items():
        if v < 1:
            raise ConfigError(f"{name} must be positive")
    reviewer = F * (F + d) * 4
    decoder = H * (H + F + E) * 4 + E * V + H * E
    init = P * H * 2
    total = reviewer + decoder + init
    return {
        "reviewer": reviewer,
        "decoder": decoder,
        "init": init,
        "total": total,
        "pretrainable_fraction": 1.0 - init / total,
    }


REFERENCE_DIMS = {"F": 300, "d": 2048, "H": 1000, "E": 300, "V": 9600, "P": 4096}


def exact_param_count(cfg: ModelConfig) -> dict:
    """Every scalar the implementation actually trains, split by block."""
    shapes = param_shapes(cfg)
    sizes = {k: int(np.prod(s)) for k, s in shapes.items()}
    init = sum(sizes[k] for k in IMAGE_ONLY)
    total = sum(sizes.values())
    return {"total": total, "image_only": init, "pretrainable_fraction": 1.0 - init / total}
