"""Command-line entry point: `semicap <subcommand> ...`.

Every run resolves a RunConfig (defaults, then `--config FILE`, then
`--set section.key=value`, then explicit flags) and writes it, seed
included, to `<out>/effective_config.json`. Errors print one JSON line to
stderr and exit with 2 (config), 3 (data) or 4 (numeric divergence).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from . import __version__
from .detector import DetectorConfig, MilHead, label_recall, locate_region, train_mil
from .errors import ConfigError, DataError, DivergenceError
from .experiments import toy_grad_check
from .faker import build_centroids, dump_centroids_csv, read_centroids, write_centroids
from .inference import beam_search, ensemble_decode
from .metrics import evaluate, format_report
from .microworld import generate_dataset, write_microworld
from .model import ModelConfig
from .pipeline import eval_images, image_inputs, load_feature_maps, paired_examples, text_examples
from .trainer import (
    REFERENCE_DIMS,
    Checkpoint,
    TrainConfig,
    TrainReport,
    dataclass_from_dict,
    exact_param_count,
    finetune_phase,
    load_checkpoint,
    param_count,
    pretrain_phase,
    resumable_checkpoint,
    save_checkpoint,
)
from .vocab import Vocabulary, build_vocab, encode_records, filter_pretrain_corpus, read_captions, tokenize

log = logging.getLogger("semicap")


@dataclass
class CorpusConfig:
    """Text-only corpus filter applied before pretraining."""

    filter: bool = True
    min_len: int = 7
    max_len: int = 30
    min_concepts: int = 4


@dataclass
class DecodeConfig:
    beam_width: int = 4
    max_len: int = 20
    length_norm: bool = False
    n_best: int = 1

    def __post_init__(self):
        if self.beam_width < 1 or self.max_len < 1 or self.n_best < 1:
            raise ConfigError("decode beam_width, max_len and n_best must be positive")


@dataclass
class VocabConfig:
    concept_count: int = 1000
    stop_count: int = 20
    min_freq: int = 1
    concept_words: list[str] | None = None


@dataclass
class MicroworldConfig:
    n_paired: int = 200
    n_unpaired: int = 2000
    sigma: float = 0.1
    grid: list[int] = field(default_factory=lambda: [4, 4])
    distractor_dims: int = 0


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "detector": DetectorConfig,
    "corpus": CorpusConfig,
    "decode": DecodeConfig,
    "vocab": VocabConfig,
    "microworld": MicroworldConfig,
}
PATH_KEYS = (
    "vocab",
    "captions",
    "val_captions",
    "features_dir",
    "detector",
    "centroids",
    "init",
    "resume",
    "checkpoints",
    "candidates",
    "references",
    "evalset",
    "out",
)


@dataclass
class RunConfig:
    seed: int = 0
    paths: dict = field(default_factory=dict)
    sections: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(SECTIONS) - {"seed", "paths"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        paths = dict(doc.get("paths", {}))
        bad = set(paths) - set(PATH_KEYS)
        if bad:
            raise ConfigError(f"unknown path keys: {sorted(bad)}")
        sections = {}
        for name, cls_ in SECTIONS.items():
            given = doc.get(name, {})
            if not isinstance(given, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            known = {f.name for f in fields(cls_)}
            extra = set(given) - known
            if extra:
                raise ConfigError(f"unknown {name} keys: {sorted(extra)}")
            sections[name] = dict(given)
        return cls(int(doc.get("seed", 0)), paths, sections)

    def build(self, name: str, **forced):
        raw = {**self.sections.get(name, {}), **forced}
        try:
            return dataclass_from_dict(SECTIONS[name], raw)
        except TypeError as exc:
            raise ConfigError(f"bad {name} config: {exc}") from None

    def effective(self, **forced_sections) -> dict:
        """All defaults materialized, as written next to every run's outputs."""
        doc = {"seed": self.seed, "paths": dict(sorted(self.paths.items()))}
        for name in SECTIONS:
            obj = forced_sections.get(name) or self.build(name)
            doc[name] = asdict(obj)
        return doc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> RunConfig:
    doc: dict = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config!r} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config!r} is not valid JSON ({exc.msg})") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        parts = key.split(".")
        if len(parts) == 1:
            doc[parts[0]] = _parse_value(value)
        elif len(parts) == 2:
            doc.setdefault(parts[0], {})
            if not isinstance(doc[parts[0]], dict):
                raise ConfigError(f"config key {parts[0]!r} is not a section")
            doc[parts[0]][parts[1]] = _parse_value(value)
        else:
            raise ConfigError(f"--set key {key!r} nests too deeply")
    cfg = RunConfig.from_dict(doc)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for key in PATH_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg.paths[key] = [str(v) for v in value] if isinstance(value, list) else str(value)
    return cfg


def _path(cfg: RunConfig, key: str, required: bool = True):
    value = cfg.paths.get(key)
    if value is None and required:
        raise ConfigError(f"missing required path {key!r} (flag --{key.replace('_', '-')})")
    return value


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(_path(cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_effective(cfg: RunConfig, out: Path, **sections) -> None:
    doc = cfg.effective(**sections)
    (out / "effective_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _features_dir(cfg: RunConfig, captions_path: str) -> Path:
    return Path(cfg.paths.get("features_dir") or Path(captions_path).parent)


def _load_vocab(cfg: RunConfig) -> Vocabulary:
    path = _path(cfg, "vocab")
    if not Path(path).exists():
        raise DataError(f"vocabulary {path!r} not found")
    return Vocabulary.load(path)


def _load_records(path: str, vocab: Vocabulary):
    if not Path(path).exists():
        raise DataError(f"caption file {path!r} not found")
    return encode_records(read_captions(path), vocab)


def _load_ckpt(path: str) -> Checkpoint:
    if not Path(path).exists():
        raise DataError(f"checkpoint {path!r} not found")
    return load_checkpoint(path)


def _load_detector(cfg: RunConfig) -> MilHead:
    ck = _load_ckpt(_path(cfg, "detector"))
    return MilHead.from_tensors(ck.tensors, normalize=bool(ck.metadata.get("normalize", False)))


def _model_config(cfg: RunConfig, vocab: Vocabulary, width: int | None = None) -> ModelConfig:
    forced = {"vocab_size": len(vocab), "concept_count": vocab.concept_count}
    if width is not None:
        forced.update(feature_width=width, psi_width=width)
    return cfg.build("model", **forced)


def _train_config(cfg: RunConfig, args, phase: str) -> TrainConfig:
    forced = {"seed": cfg.seed, "phase": phase}
    if getattr(args, "threads", None) is not None:
        forced["threads"] = args.threads
    return cfg.build("train", **forced)


def _labels_from_captions(records, vocab: Vocabulary) -> dict[str, list[int]]:
    labels: dict[str, list[int]] = {}
    for r in records:
        lab = labels.setdefault(r.feature_ref, [])
        for c in vocab.concepts_in(r.tokens):
            if c not in lab:
                lab.append(c)
    return labels


def _detector_dataset(cfg: RunConfig, vocab: Vocabulary):
    captions = _path(cfg, "captions")
    records = _load_records(captions, vocab)
    maps = load_feature_maps(records, _features_dir(cfg, captions))
    labels = _labels_from_captions(records, vocab)
    return [(maps[k], labels[k]) for k in sorted(labels)]


# subcommands


def cmd_gen_microworld(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    mw = cfg.build("microworld")
    world = generate_dataset(cfg.seed, mw.n_paired, mw.n_unpaired, mw.sigma, tuple(mw.grid), mw.distractor_dims)
    paths = write_microworld(world, out)
    _write_effective(cfg, out, microworld=mw)
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))
    return 0


def cmd_build_vocab(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    vc = cfg.build("vocab")
    files = cfg.paths.get("captions")
    if not files:
        raise ConfigError("build-vocab needs --captions")
    files = files if isinstance(files, list) else [files]
    captions = []
    for f in files:
        if not Path(f).exists():
            raise DataError(f"caption file {f!r} not found")
        captions.extend(r["caption"] for r in read_captions(f))
    vocab = build_vocab(captions, vc.concept_count, vc.stop_count, vc.min_freq)
    if vc.concept_words:
        tokens = list(vocab.tokens)
        missing = [w for w in vc.concept_words if w not in tokens]
        if missing:
            raise DataError(f"concept words not in the corpus: {missing}")
        counts = Counter(t for c in captions for t in tokenize(c))
        coverage = sum(counts[w] for w in vc.concept_words) / sum(counts.values())
        vocab = Vocabulary(tokens, [tokens.index(w) for w in vc.concept_words], vocab.stop_words, coverage)
    vocab.save(out / "vocab.txt")
    _write_effective(cfg, out, vocab=vc)
    print(json.dumps({"vocab_size": len(vocab), "concepts": vocab.concept_count, "coverage": vocab.coverage}))
    return 0


def cmd_train_detector(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    vocab = _load_vocab(cfg)
    dc = cfg.build("detector", seed=cfg.seed)
    data = _detector_dataset(cfg, vocab)
    head = MilHead.init(vocab.concept_count, data[0][0].width, seed=dc.seed, normalize=dc.normalize)
    head = train_mil(head, data, dc)
    recall = label_recall(head, data)
    save_checkpoint(out / "detector.ckpt", Checkpoint(head.tensors(), {"detector": asdict(dc), "normalize": dc.normalize, "train_recall": recall}))
    _write_effective(cfg, out, detector=dc)
    print(json.dumps({"train_label_recall": recall}))
    return 0


def cmd_build_centroids(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    vocab = _load_vocab(cfg)
    cents = build_centroids(_detector_dataset(cfg, vocab), _load_detector(cfg))
    write_centroids(out / "centroids.cntr", cents)
    dump_centroids_csv(out / "centroids.csv", cents, vocab)
    _write_effective(cfg, out)
    print(json.dumps({"concepts": len(cents.means), "width": cents.width}))
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    vocab = _load_vocab(cfg)
    cc = cfg.build("corpus")
    tc = _train_config(cfg, args, "pretrain")
    captions = _path(cfg, "captions")
    rows = read_captions(captions) if Path(captions).exists() else None
    if rows is None:
        raise DataError(f"caption file {captions!r} not found")
    if cc.filter:
        keep = set(filter_pretrain_corpus([r["caption"] for r in rows], vocab, cc.min_len, cc.max_len, cc.min_concepts))
        rows = [r for r in rows if r["caption"] in keep]
    records = encode_records(rows, vocab)
    centroids = None
    width = None
    if cfg.paths.get("centroids"):
        centroids = read_centroids(cfg.paths["centroids"])
        width = centroids.width
    mc = _model_config(cfg, vocab, width)
    examples = text_examples(records, vocab, mc, tc.generator, tc.noise_count, cfg.seed, centroids, tc.on_unseen)
    if not examples:
        raise DataError("no pretraining captions left after filtering")

    def checkpoint_epoch(tr):
        save_checkpoint(out / "last.ckpt", resumable_checkpoint(tr))

    ckpt = pretrain_phase(mc, examples, tc, on_epoch_end=checkpoint_epoch)
    save_checkpoint(out / "pretrain.ckpt", ckpt)
    report = TrainReport.from_dict(ckpt.metadata["report"])
    report.write_csv(out / "report.csv")
    _write_effective(cfg, out, model=mc, train=tc, corpus=cc)
    print(json.dumps({"captions": len(examples), "epochs": ckpt.metadata["epoch"]}))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    vocab = _load_vocab(cfg)
    tc = _train_config(cfg, args, "finetune")
    train_path, val_path = _path(cfg, "captions"), _path(cfg, "val_captions")
    train_recs, val_recs = _load_records(train_path, vocab), _load_records(val_path, vocab)
    train_maps = load_feature_maps(train_recs, _features_dir(cfg, train_path))
    val_maps = load_feature_maps(val_recs, _features_dir(cfg, val_path))
    width = next(iter(train_maps.values())).width
    init = _load_ckpt(cfg.paths["init"]) if cfg.paths.get("init") else None
    resume = _load_ckpt(cfg.paths["resume"]) if cfg.paths.get("resume") else None
    source = resume or init
    if source is not None:
        mc = dataclass_from_dict(ModelConfig, source.metadata["model"])
        if (mc.vocab_size, mc.concept_count) != (len(vocab), vocab.concept_count):
            raise ConfigError("checkpoint vocabulary sizes do not match --vocab")
        if mc.psi_width != width or (mc.mode == "visual" and mc.feature_width != width):
            raise ConfigError(f"checkpoint expects feature width {mc.psi_width}, data has {width}")
    else:
        mc = _model_config(cfg, vocab, width)
    head = _load_detector(cfg)
    train = paired_examples(train_recs, train_maps, head, mc)
    val = eval_images(val_recs, val_maps, head, mc, vocab)
    def checkpoint_epoch(tr):
        save_checkpoint(out / "last.ckpt", resumable_checkpoint(tr))

    best, report = finetune_phase(mc, train, val, vocab, tc, init=init, resume=resume, on_epoch_end=checkpoint_epoch)
    save_checkpoint(out / "best.ckpt", best)
    report.write_csv(out / "report.csv")
    _write_effective(cfg, out, model=mc, train=tc)
    print(json.dumps({"best_epoch": report.best_epoch, "best_bleu4": report.best_bleu4}))
    return 0


def cmd_caption(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    vocab = _load_vocab(cfg)
    dec = cfg.build("decode")
    ckpts = cfg.paths.get("checkpoints") or []
    if not ckpts:
        raise ConfigError("caption needs at least one --checkpoints file")
    models = []
    for path in ckpts:
        ck = _load_ckpt(path)
        models.append((ck.params(), dataclass_from_dict(ModelConfig, ck.metadata["model"])))
    captions = _path(cfg, "captions")
    records = _load_records(captions, vocab)
    maps = load_feature_maps(records, _features_dir(cfg, captions))
    head = _load_detector(cfg)
    rows = []
    for img in sorted(maps):
        inputs = [image_inputs(maps[img], head, c) for _, c in models]
        if len(models) == 1:
            hyps = beam_search(models[0][0], models[0][1], inputs[0], dec.beam_width, dec.max_len, dec.length_norm)
        else:
            hyps = ensemble_decode(models, inputs, dec.beam_width, dec.max_len, dec.length_norm)
        for rank, h in enumerate(hyps[: dec.n_best], start=1):
            rows.append({"id": img, "caption": vocab.decode(h.tokens), "logprob": h.score, "rank": rank})
    with open(out / "captions.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    _write_effective(cfg, out, decode=dec)
    print(json.dumps({"images": len(rows)}))
    return 0


def _evalset(cfg: RunConfig) -> dict:
    if cfg.paths.get("evalset"):
        path = cfg.paths["evalset"]
        if not Path(path).exists():
            raise DataError(f"evalset {path!r} not found")
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        try:
            return {k: (v["candidate"], list(v["references"])) for k, v in doc.items()}
        except (KeyError, TypeError, AttributeError):
            raise DataError("evalset entries need 'candidate' and 'references'") from None
    cand_path, ref_path = _path(cfg, "candidates"), _path(cfg, "references")
    for p in (cand_path, ref_path):
        if not Path(p).exists():
            raise DataError(f"file {p!r} not found")
    cands: dict[str, str] = {}
    for r in read_captions(cand_path):
        cands.setdefault(r["id"], r["caption"])  # rank 1 comes first in n-best output
    refs: dict[str, list[str]] = {}
    for r in read_captions(ref_path):
        refs.setdefault(r["features"] or r["id"], []).append(r["caption"])
    missing = sorted(set(cands) - set(refs))
    if missing:
        raise DataError(f"no references for candidate {missing[0]!r}")
    return {k: (cands[k], refs[k]) for k in cands}


def cmd_evaluate(args, cfg: RunConfig) -> int:
    report = evaluate(_evalset(cfg))
    if cfg.paths.get("out"):
        out = _out_dir(cfg)
        (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _write_effective(cfg, out)
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        print(format_report(report))
    return 0


def _millions(n: int) -> str:
    return f"{n / 1e6:.2f}M"


def cmd_param_count(args, cfg: RunConfig) -> int:
    if args.paper_dims:
        dims = dict(REFERENCE_DIMS)
        semantic = param_count(**{**dims, "d": dims["F"]})
        visual = param_count(**dims)
        lines = {
            "reviewer_semantic": semantic["reviewer"],
            "reviewer_visual": visual["reviewer"],
            "decoder": visual["decoder"],
            "init_maps": visual["init"],
            "total_visual": visual["total"],
            "pretrainable_fraction": visual["pretrainable_fraction"],
        }
    else:
        dims = {k: getattr(args, k) for k in ("F", "d", "H", "E", "V", "P")}
        if any(v is None for v in dims.values()):
            mc = cfg.build("model")
            counts = exact_param_count(mc)
            print(json.dumps(counts, sort_keys=True))
            return 0
        c = param_count(**dims)
        lines = {"reviewer": c["reviewer"], "decoder": c["decoder"], "init_maps": c["init"], "total": c["total"], "pretrainable_fraction": c["pretrainable_fraction"]}
    if args.json:
        print(json.dumps(lines, sort_keys=True))
        return 0
    for k, v in lines.items():
        if k == "pretrainable_fraction":
            print(f"{k:<22} {v:.4f} ({'>' if v > 0.6 else '<='} 60%)")
        else:
            print(f"{k:<22} {v:>12,d}  {_millions(v)}")
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    modes = [args.mode] if args.mode else ["semantic", "visual"]
    phases = [args.phase] if args.phase else ["pretrain", "finetune"]
    ok = True
    for m in modes:
        for ph in phases:
            report = toy_grad_check(m, ph == "pretrain", tolerance=args.tolerance, seed=cfg.seed + 1)
            print(f"== {m} / {ph}")
            print(report.format())
            ok &= report.passed
    return 0 if ok else 1


def cmd_dump_features(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    vocab = _load_vocab(cfg)
    if cfg.paths.get("centroids"):
        dump_centroids_csv(out / "centroids.csv", read_centroids(cfg.paths["centroids"]), vocab)
    if cfg.paths.get("captions"):
        data = _detector_dataset(cfg, vocab)
        head = _load_detector(cfg)
        with open(out / "regions.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "concept", "word", "region"] + [f"f{i}" for i in range(data[0][0].width)])
            captions = _load_records(cfg.paths["captions"], vocab)
            keys = sorted({r.feature_ref for r in captions})
            for key, (fmap, labels) in zip(keys, data):
                for c in labels:
                    r = locate_region(fmap, head, c)
                    w.writerow([key, c, vocab.concept_word(c), r] + [repr(float(x)) for x in fmap.regions[r]])
    if not cfg.paths.get("centroids") and not cfg.paths.get("captions"):
        raise ConfigError("dump-features needs --centroids and/or --captions")
    _write_effective(cfg, out)
    return 0


# argument parsing


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="JSON run config (sections: seed, paths, " + ", ".join(SECTIONS) + ")")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key (value parsed as JSON)")
    p.add_argument("--seed", type=int, help="global seed (default 0)")
    if out:
        p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semicap", description="Semi-supervised review-net captioning toolkit.")
    parser.add_argument("--version", action="version", version=f"semicap {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-microworld", help="generate the synthetic shapes world")
    _common(p)
    p.set_defaults(func=cmd_gen_microworld)

    p = sub.add_parser("build-vocab", help="build vocabulary and concept sub-vocabulary")
    _common(p)
    p.add_argument("--captions", nargs="+", help="caption JSON Lines files")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train-detector", help="fit the noisy-OR concept detector")
    _common(p)
    p.add_argument("--vocab", help="vocabulary file")
    p.add_argument("--captions", help="paired caption JSON Lines (labels come from concept words)")
    p.add_argument("--features-dir", dest="features_dir", help="base directory of feature references")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("build-centroids", help="mean winning-region feature per concept")
    _common(p)
    p.add_argument("--vocab")
    p.add_argument("--captions")
    p.add_argument("--features-dir", dest="features_dir")
    p.add_argument("--detector", help="detector checkpoint")
    p.set_defaults(func=cmd_build_centroids)

    p = sub.add_parser("pretrain", help="text-only pretraining on unpaired captions")
    _common(p)
    p.add_argument("--vocab")
    p.add_argument("--captions", help="unpaired caption JSON Lines")
    p.add_argument("--centroids", help="concept centroids (visual mode)")
    p.add_argument("--threads", type=int, help="intra-batch worker threads (1 = bit-reproducible)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="supervised training with validation BLEU-4 model selection")
    _common(p)
    p.add_argument("--vocab")
    p.add_argument("--captions", help="paired training captions")
    p.add_argument("--val-captions", dest="val_captions", help="paired validation captions")
    p.add_argument("--features-dir", dest="features_dir")
    p.add_argument("--detector")
    p.add_argument("--init", help="initialize from a (pretraining) checkpoint")
    p.add_argument("--resume", help="resume from a last.ckpt")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="beam-search captions (several checkpoints form an ensemble)")
    _common(p)
    p.add_argument("--vocab")
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--captions", help="caption JSON Lines naming the feature maps to caption")
    p.add_argument("--features-dir", dest="features_dir")
    p.add_argument("--detector")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("evaluate", help="corpus BLEU-1..4 and CIDEr")
    _common(p)
    p.add_argument("--evalset", help="JSON {id: {candidate, references}}")
    p.add_argument("--candidates", help="JSON Lines {id, caption}")
    p.add_argument("--references", help="caption JSON Lines, grouped by feature reference")
    p.add_argument("--json", action="store_true", help="print metrics as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("param-count", help="parameter accounting per block")
    _common(p, out=False)
    p.add_argument("--paper-dims", action="store_true", help="F=300, d=2048, H=1000, E=300, V=9600, P=4096")
    for k in ("F", "d", "H", "E", "V", "P"):
        p.add_argument(f"--{k}", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("grad-check", help="finite-difference check of every gradient on a toy model")
    _common(p, out=False)
    p.add_argument("--mode", choices=["semantic", "visual"])
    p.add_argument("--phase", choices=["pretrain", "finetune"])
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-features", help="centroid and winning-region features as CSV")
    _common(p)
    p.add_argument("--vocab")
    p.add_argument("--centroids")
    p.add_argument("--captions")
    p.add_argument("--features-dir", dest="features_dir")
    p.add_argument("--detector")
    p.set_defaults(func=cmd_dump_features)
    return parser


EXIT_CODES = ((ConfigError, 2), (DivergenceError, 4), (DataError, 3))


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except Exception as exc:
        for kind, code in EXIT_CODES:
            if isinstance(exc, kind):
                return _fail(exc, code)
        if isinstance(exc, (OSError, ValueError)):
            return _fail(exc, 3)
        raise


if __name__ == "__main__":
    sys.exit(main())
