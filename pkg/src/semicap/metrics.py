"""Corpus BLEU-1..4 and CIDEr over multi-reference caption sets."""
from __future__ import annotations

import math
from collections import Counter
from typing import Mapping, Sequence

from .errors import DataError
from .vocab import tokenize

# image id -> (candidate caption, reference captions)
EvalSet = Mapping[str, tuple[str, Sequence[str]]]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _tokenized(evalset: EvalSet):
    if not evalset:
        raise DataError("evaluation set is empty")
    out = []
    for key in sorted(evalset):
        cand, refs = evalset[key]
        if not refs:
            raise DataError(f"image {key!r} has no reference captions")
        out.append((tokenize(cand), [tokenize(r) for r in refs]))
    return out


def _closest_ref_len(c: int, ref_lens: Sequence[int]) -> int:
    # ties go to the shorter reference
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def bleu(evalset: EvalSet, n: int = 4) -> float:
    """Corpus-level BLEU-n with clipped precisions and brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    data = _tokenized(evalset)
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for cand, refs in data:
        cand_len += len(cand)
        ref_len += _closest_ref_len(len(cand), [len(r) for r in refs])
        for k in range(1, n + 1):
            counts = ngrams(cand, k)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, k)
            matched[k - 1] += sum(min(cnt, max_ref[g]) for g, cnt in counts.items())
            total[k - 1] += sum(counts.values())
    if cand_len == 0 or min(matched) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = min(1.0, math.exp(1.0 - ref_len / cand_len))
    return bp * math.exp(log_prec)


def _tfidf(counts: Counter, idf: Mapping[tuple, float], default_idf: float) -> dict:
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (c / total) * idf.get(g, default_idf) for g, c in counts.items()}


def _cosine(a: Mapping, b: Mapping) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_per_image(evalset: EvalSet, max_n: int = 4) -> dict[str, float]:
    """Unscaled per-image CIDEr (plain variant, no length penalty or clipping)."""
    if len(evalset) < 2:
        raise DataError("CIDEr needs at least two images: idf is log(1) = 0 for a single image")
    keys = sorted(evalset)
    data = _tokenized(evalset)
    N = len(data)
    scores = {key: 0.0 for key in keys}
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for _, refs in data:
            seen = set()
            for r in refs:
                seen.update(ngrams(r, n))
            df.update(seen)
        # n-grams absent from every reference count as df = 1
        idf = {g: math.log(N / d) for g, d in df.items()}
        default_idf = math.log(N)
        for key, (cand, refs) in zip(keys, data):
            cv = _tfidf(ngrams(cand, n), idf, default_idf)
            sims = [_cosine(cv, _tfidf(ngrams(r, n), idf, default_idf)) for r in refs]
            scores[key] += (sum(sims) / len(sims)) / max_n
    return scores


def cider(evalset: EvalSet) -> float:
    """Corpus CIDEr scaled by 100."""
    per = cider_per_image(evalset)
    return 100.0 * sum(per.values()) / len(per)


def evaluate(evalset: EvalSet) -> dict:
    report = {f"bleu{k}": bleu(evalset, k) for k in range(1, 5)}
    report["cider"] = cider(evalset)
    report["n_images"] = len(evalset)
    return report


def format_report(report: Mapping) -> str:
    lines = [f"{'metric':<8} {'score':>12}"]
    for k in ("bleu1", "bleu2", "bleu3", "bleu4"):
        lines.append(f"{k:<8} {100 * report[k]:>12.4f}")
    lines.append(f"{'cider':<8} {report['cider']:>12.4f}")
    lines.append(f"{'images':<8} {report['n_images']:>12d}")
    return "\n".join(lines)
