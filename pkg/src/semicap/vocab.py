"""Vocabulary, tokenization and the pretraining-corpus filter."""
from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD_CONCEPT = -1


def tokenize(sentence: str) -> list[str]:
    """Lowercase, split on whitespace, strip surrounding ASCII punctuation."""
    out = []
    for raw in sentence.lower().split():
        tok = raw.strip(string.punctuation)
        if tok:
            out.append(tok)
    return out


@dataclass
class Vocabulary:
    tokens: list[str]
    concept_ids: list[int]
    stop_words: list[str] = field(default_factory=list)
    coverage: float | None = None

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise DataError(f"vocabulary must start with {RESERVED}, got {self.tokens[:4]}")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")
        self._concept_index = {wid: ci for ci, wid in enumerate(self.concept_ids)}
        for wid in self.concept_ids:
            if wid < len(RESERVED) or wid >= len(self.tokens):
                raise DataError(f"concept id {wid} is reserved or out of range")

    def __len__(self):
        return len(self.tokens)

    @property
    def concept_count(self) -> int:
        return len(self.concept_ids)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, wid: int) -> str:
        return self.tokens[wid]

    def concept_index(self, wid: int) -> int | None:
        return self._concept_index.get(wid)

    def concept_word(self, ci: int) -> str:
        return self.tokens[self.concept_ids[ci]]

    def encode(self, sentence: str | Sequence[str]) -> list[int]:
        toks = tokenize(sentence) if isinstance(sentence, str) else list(sentence)
        return [BOS] + [self.id_of(t) for t in toks] + [EOS]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i not in (PAD, BOS, EOS))

    def concepts_in(self, ids: Iterable[int]) -> list[int]:
        """Concept indices present in a word-id sequence, first occurrence order."""
        seen = []
        for wid in ids:
            ci = self._concept_index.get(wid)
            if ci is not None and ci not in seen:
                seen.append(ci)
        return seen

    def save(self, path: str | Path, concepts_path: str | Path | None = None) -> None:
        path = Path(path)
        path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        concepts_path = Path(concepts_path) if concepts_path else concept_file_for(path)
        concepts_path.write_text("".join(f"{i}\n" for i in self.concept_ids), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, concepts_path: str | Path | None = None) -> "Vocabulary":
        path = Path(path)
        tokens = path.read_text(encoding="utf-8").splitlines()
        concepts_path = Path(concepts_path) if concepts_path else concept_file_for(path)
        concept_ids = [int(line) for line in concepts_path.read_text(encoding="utf-8").split()]
        return cls(tokens=tokens, concept_ids=concept_ids)


def concept_file_for(vocab_path: Path) -> Path:
    return vocab_path.with_name(vocab_path.stem + ".concepts")


def _ranked(counts: Counter) -> list[str]:
    # most frequent first, ties broken lexicographically
    return sorted(counts, key=lambda t: (-counts[t], t))


def build_vocab(
    captions: Iterable[str],
    concept_count: int,
    stop_count: int,
    min_freq: int = 1,
) -> Vocabulary:
    """Build the word vocabulary and its concept sub-vocabulary.

    The concept sub-vocabulary holds the `concept_count` most frequent words
    once the `stop_count` most frequent words are discarded.
    """
    counts: Counter = Counter()
    for cap in captions:
        counts.update(tokenize(cap))
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = _ranked(counts)
    words = [t for t in ranked if counts[t] >= min_freq]
    tokens = list(RESERVED) + words
    stop = ranked[:stop_count]
    ids = {t: i for i, t in enumerate(tokens)}
    concepts = [t for t in words if t not in stop][:concept_count]
    total = sum(counts.values())
    coverage = sum(counts[t] for t in concepts) / total
    return Vocabulary(tokens, [ids[t] for t in concepts], stop_words=stop, coverage=coverage)


def filter_pretrain_corpus(
    sentences: Iterable[str],
    vocab: Vocabulary,
    min_len: int = 7,
    max_len: int = 30,
    min_concepts: int = 4,
) -> list[str]:
    """Keep sentences fit for text-only pretraining.

    A sentence survives if it has between `min_len` and `max_len` words, no
    out-of-vocabulary word, and at least `min_concepts` concept-word tokens.
    """
    kept = []
    for s in sentences:
        toks = tokenize(s)
        if not min_len <= len(toks) <= max_len:
            continue
        ids = [vocab.id_of(t) for t in toks]
        if UNK in ids:
            continue
        if sum(vocab.concept_index(i) is not None for i in ids) < min_concepts:
            continue
        kept.append(s)
    return kept


@dataclass(frozen=True)
class CaptionRecord:
    id: str
    tokens: tuple[int, ...]
    feature_ref: str | None = None

    def __post_init__(self):
        t = self.tokens
        if len(t) < 3 or t[0] != BOS or t[-1] != EOS:
            raise DataError(f"caption {self.id!r} must be BOS + at least one word + EOS")

    @property
    def paired(self) -> bool:
        return self.feature_ref is not None


def read_captions(path: str | Path) -> list[dict]:
    """Read a caption JSON Lines file into raw dicts (id, caption, features)."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if "id" not in obj or "caption" not in obj:
                raise DataError(f"{path}:{lineno}: caption rows need 'id' and 'caption'")
            rows.append({"id": str(obj["id"]), "caption": obj["caption"], "features": obj.get("features")})
    return rows


def write_captions(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            obj = {"id": r["id"], "caption": r["caption"]}
            if r.get("features") is not None:
                obj["features"] = r["features"]
            fh.write(json.dumps(obj) + "\n")


def encode_records(rows: Iterable[dict], vocab: Vocabulary) -> list[CaptionRecord]:
    return [CaptionRecord(r["id"], tuple(vocab.encode(r["caption"])), r.get("features")) for r in rows]
