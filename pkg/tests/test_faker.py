import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semicap.detector import MilHead, RegionFeatureMap
from semicap.errors import DataError, UnseenConceptError
from semicap.faker import (
    ConceptCentroids,
    FakeConceptExample,
    build_centroids,
    caption_rng,
    dump_centroids_csv,
    fake_regional_encode,
    noisy_generate,
    read_centroids,
    truth_generate,
    write_centroids,
)
from semicap.vocab import PAD_CONCEPT, Vocabulary

WORDS = ["a", "b", "c", "d", "e", "f", "g", "h", "x", "y"]
VOCAB = Vocabulary(["<pad>", "<bos>", "<eos>", "<unk>"] + WORDS, list(range(4, 12)))  # a..h are concepts


def cap(s):
    return VOCAB.encode(s)


def test_zero_pad_rule():
    # concepts {a, b, c}; caption "a b" with T = 4
    out = truth_generate(cap("a b"), VOCAB, 4, np.random.default_rng(0))
    assert out.concepts == [0, 1, PAD_CONCEPT, PAD_CONCEPT]


def test_exactly_t_keeps_order():
    out = truth_generate(cap("c a b"), VOCAB, 3, np.random.default_rng(0))
    assert out.concepts == [2, 0, 1]


def test_no_concepts_is_an_error():
    with pytest.raises(DataError):
        truth_generate(cap("x y"), VOCAB, 3, np.random.default_rng(0))


@given(st.lists(st.sampled_from(WORDS[:8]), min_size=1, max_size=16), st.integers(1, 8), st.integers(0, 1 << 30))
def test_truth_is_ordered_subset(words, T, seed):
    found = VOCAB.concepts_in(cap(" ".join(words)))
    out = truth_generate(cap(" ".join(words)), VOCAB, T, np.random.default_rng(seed)).concepts
    real = [c for c in out if c != PAD_CONCEPT]
    assert len(out) == T and len(real) == min(T, len(found))
    assert real == [c for c in found if c in real]  # caption order kept
    assert all(c == PAD_CONCEPT for c in out[len(real):])


@given(st.lists(st.sampled_from(WORDS[:8]), min_size=1, max_size=10), st.integers(0, 1 << 30))
def test_noise_words_never_caption_words(words, seed):
    c = cap(" ".join(words))
    found = set(VOCAB.concepts_in(c))
    T, k = 6, 2
    out = noisy_generate(c, VOCAB, T, k, np.random.default_rng(seed)).concepts
    assert len(out) == T
    noise = [x for x in out if x != PAD_CONCEPT and x not in found]
    assert len(noise) == min(k, 8 - len(found))
    assert len(set(noise)) == len(noise)
    assert all(0 <= x < VOCAB.concept_count for x in out if x != PAD_CONCEPT)


def test_ten_slots_two_noise_leaves_eight_from_caption():
    words = ["a", "b", "c", "d", "e", "f", "g", "h"]
    vocab = Vocabulary(["<pad>", "<bos>", "<eos>", "<unk>"] + words + ["i", "j", "k"], list(range(4, 15)))
    out = noisy_generate(vocab.encode(" ".join(words)), vocab, 10, 2, np.random.default_rng(0)).concepts
    assert sum(c < 8 for c in out) == 8 and sum(c >= 8 for c in out) == 2


def test_zero_noise_equals_truth():
    c = cap("a b c d e")
    a = noisy_generate(c, VOCAB, 3, 0, np.random.default_rng(7)).concepts
    b = truth_generate(c, VOCAB, 3, np.random.default_rng(7)).concepts
    assert a == b
    with pytest.raises(ValueError):
        noisy_generate(c, VOCAB, 3, 4, np.random.default_rng(0))


def test_caption_rng_deterministic():
    assert caption_rng(1, "x").integers(1 << 30) == caption_rng(1, "x").integers(1 << 30)
    assert caption_rng(1, "x").integers(1 << 30) != caption_rng(2, "x").integers(1 << 30)


def _head_picking(region_for_concept, width):
    W = np.zeros((len(region_for_concept), width))
    for c, r in enumerate(region_for_concept):
        W[c, r] = 1.0
    return MilHead(W, np.zeros(len(region_for_concept)))


def test_centroid_of_two_features():
    # the head scores regions by their first coordinate
    head = _head_picking([0], 2)
    data = [
        (RegionFeatureMap(np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros(1)), [0]),
        (RegionFeatureMap(np.array([[0.0, 1.0], [-1.0, 0.0]]), np.zeros(1)), [0]),
    ]
    cents = build_centroids(data, head)
    assert np.allclose(cents.means[0], [0.5, 0.5]) and cents.counts[0] == 2


def test_single_occurrence_and_unseen():
    head = _head_picking([0, 1], 2)
    fmap = RegionFeatureMap(np.array([[3.0, 0.0], [0.0, 2.0]]), np.zeros(1))
    cents = build_centroids([(fmap, [1])], head)
    assert np.array_equal(cents.means[1], [0.0, 2.0])
    assert 0 not in cents
    with pytest.raises(DataError):
        build_centroids([], head)


@given(st.permutations(list(range(6))))
def test_centroids_order_invariant(perm):
    rng = np.random.default_rng(0)
    head = MilHead(rng.normal(size=(3, 4)), np.zeros(3))
    data = [(RegionFeatureMap(rng.normal(size=(5, 4)), np.zeros(1)), [i % 3, (i + 1) % 3]) for i in range(6)]
    a = build_centroids(data, head)
    b = build_centroids([data[i] for i in perm], head)
    assert all(np.array_equal(a.means[c], b.means[c]) for c in a.means)


def test_fake_regional_encode():
    cents = ConceptCentroids({0: np.array([0.5, 0.5])}, {0: 2})
    out = fake_regional_encode(FakeConceptExample([0, PAD_CONCEPT], []), cents)
    assert np.array_equal(out, [[0.5, 0.5], [0.0, 0.0]])
    assert not np.any(fake_regional_encode(FakeConceptExample([PAD_CONCEPT] * 3, []), cents))
    with pytest.raises(UnseenConceptError, match="'b'"):
        fake_regional_encode(FakeConceptExample([1], []), cents, VOCAB)


def test_cntr_roundtrip(tmp_path):
    cents = ConceptCentroids({3: np.array([0.25, -1.0]), 1: np.array([2.0, 0.5])}, {3: 4, 1: 1})
    write_centroids(tmp_path / "c.cntr", cents)
    back = read_centroids(tmp_path / "c.cntr")
    assert back.counts == cents.counts
    assert all(np.array_equal(back.means[c], cents.means[c]) for c in cents.means)
    raw = (tmp_path / "c.cntr").read_bytes()
    assert raw[:4] == b"CNTR" and len(raw) == 8 + 2 * (8 + 8 + 4)
    (tmp_path / "t.cntr").write_bytes(raw[:-2])
    with pytest.raises(DataError):
        read_centroids(tmp_path / "t.cntr")
    dump_centroids_csv(tmp_path / "c.csv", back)
    assert (tmp_path / "c.csv").read_text().splitlines()[0].startswith("concept,word,count")
