import json
import math
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from semicap.errors import DataError
from semicap.metrics import bleu, cider, cider_per_image, evaluate, format_report, ngrams

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "metric_fixtures.json").read_text())


def as_evalset(raw):
    return {k: (cand, refs) for k, (cand, refs) in raw.items()}


@pytest.mark.parametrize("case", FIXTURES, ids=[c["name"] for c in FIXTURES])
def test_hand_computed_fixtures(case):
    es = as_evalset(case["evalset"])
    for metric, want in case["expected"].items():
        got = cider(es) if metric == "cider" else bleu(es, int(metric[-1]))
        assert got == pytest.approx(want, abs=5e-9), metric


def test_fixture_count():
    assert len(FIXTURES) >= 10


def test_ngrams():
    assert ngrams(["a", "b", "a", "b"], 2) == {("a", "b"): 2, ("b", "a"): 1}
    assert ngrams(["a"], 2) == {}


def test_empty_candidate_scores_zero():
    assert bleu({"i": ("", ["a b"])}, 1) == 0.0


def test_cider_needs_two_images():
    with pytest.raises(DataError):
        cider({"i": ("a b", ["a b"])})


def test_missing_references_rejected():
    with pytest.raises(DataError):
        bleu({"i": ("a b", [])})
    with pytest.raises(DataError):
        bleu({})


def test_evaluate_and_report():
    es = as_evalset(FIXTURES[0]["evalset"])
    rep = evaluate(es)
    assert rep["n_images"] == 2 and rep["bleu4"] == 1.0 and rep["cider"] == pytest.approx(100.0)
    text = format_report(rep)
    assert "bleu4" in text and "100.0000" in text


def test_bleu_matches_nltk_corpus_bleu():
    nltk_bleu = pytest.importorskip("nltk.translate.bleu_score")
    es = {
        "a": ("a red circle above a blue square", ["a red circle above a green square", "a red circle and a blue square"]),
        "b": ("there is a yellow triangle", ["there is a yellow triangle", "a yellow triangle"]),
        "c": ("a green square below a red circle", ["a green square below a red triangle"]),
    }
    keys = sorted(es)
    refs = [[r.split() for r in es[k][1]] for k in keys]
    hyps = [es[k][0].split() for k in keys]
    for n in (1, 2, 3, 4):
        w = tuple([1.0 / n] * n)
        assert bleu(es, n) == pytest.approx(nltk_bleu.corpus_bleu(refs, hyps, weights=w), abs=1e-12)


words = st.sampled_from(["a", "b", "c", "d", "e"])
sentence = st.lists(words, min_size=1, max_size=8).map(" ".join)


@given(st.dictionaries(st.text("xyz", min_size=1, max_size=3), st.tuples(sentence, st.lists(sentence, min_size=1, max_size=3)), min_size=1, max_size=4))
def test_bleu_in_unit_interval(es):
    for n in (1, 2, 3, 4):
        assert 0.0 <= bleu(es, n) <= 1.0 + 1e-12


@given(st.lists(sentence, min_size=2, max_size=5, unique=True))
def test_self_reference_is_perfect(sents):
    es = {f"i{i}": (s, [s]) for i, s in enumerate(sents)}
    assert bleu(es, 1) == pytest.approx(1.0)
    for key, score in cider_per_image(es).items():
        assert 0.0 <= score <= 1.0 + 1e-12


@given(st.dictionaries(st.text("xy", min_size=1, max_size=2), st.tuples(sentence, st.lists(sentence, min_size=1, max_size=3)), min_size=2, max_size=4))
def test_cider_order_invariant(es):
    reordered = dict(reversed(list(es.items())))
    assert cider(es) == pytest.approx(cider(reordered), abs=1e-12)
    assert cider(es) >= 0.0


def test_bleu_order_validated():
    with pytest.raises(ValueError):
        bleu({"i": ("a", ["a"])}, 5)


def test_brevity_penalty_closed_form():
    # c = 3, r = 4: BP = exp(1 - 4/3), all unigrams match
    assert bleu({"i": ("a b c", ["a b c d"])}, 1) == pytest.approx(math.exp(1 - 4 / 3))
