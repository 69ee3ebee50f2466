import pytest
from hypothesis import given
from hypothesis import strategies as st

from semicap.errors import DataError
from semicap.vocab import (
    BOS,
    EOS,
    PAD,
    UNK,
    CaptionRecord,
    Vocabulary,
    build_vocab,
    encode_records,
    filter_pretrain_corpus,
    read_captions,
    tokenize,
    write_captions,
)


def test_tokenize():
    assert tokenize("A Red,  circle. (above)") == ["a", "red", "circle", "above"]
    assert tokenize(" ... ") == []


def test_reserved_ids_and_roundtrip(toy_vocab):
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    ids = toy_vocab.encode("A red ball on the cat")
    assert ids[0] == BOS and ids[-1] == EOS
    assert toy_vocab.decode(ids) == "a red ball on the cat"
    assert toy_vocab.encode("zebra")[1] == UNK


def test_concepts_in_first_occurrence(toy_vocab):
    ids = toy_vocab.encode("the dog and the cat and the dog")
    assert toy_vocab.concepts_in(ids) == [1, 0]
    assert toy_vocab.concept_word(1) == "dog"


def test_vocab_validation():
    with pytest.raises(DataError):
        Vocabulary(["a", "b"], [])
    with pytest.raises(DataError):
        Vocabulary(["<pad>", "<bos>", "<eos>", "<unk>", "x"], [2])
    with pytest.raises(DataError):
        Vocabulary(["<pad>", "<bos>", "<eos>", "<unk>", "x", "x"], [])


def test_build_vocab_ranks_and_stops():
    caps = ["a cat on a mat", "a dog on a mat", "a cat"]
    v = build_vocab(caps, concept_count=2, stop_count=2)
    # a:5, cat:2, mat:2, on:2, dog:1 -> ties broken lexicographically
    assert v.tokens[4:] == ["a", "cat", "mat", "on", "dog"]
    assert v.stop_words == ["a", "cat"]
    assert [v.token_of(i) for i in v.concept_ids] == ["mat", "on"]
    assert v.coverage == pytest.approx(4 / 12)


def test_build_vocab_min_freq():
    v = build_vocab(["a a b"], concept_count=5, stop_count=0, min_freq=2)
    assert v.tokens[4:] == ["a"]
    with pytest.raises(DataError):
        build_vocab([], 1, 0)


def test_save_load(tmp_path, toy_vocab):
    toy_vocab.save(tmp_path / "v.txt")
    assert (tmp_path / "v.concepts").exists()
    back = Vocabulary.load(tmp_path / "v.txt")
    assert back.tokens == toy_vocab.tokens and back.concept_ids == toy_vocab.concept_ids


def test_filter_pretrain_corpus(toy_vocab):
    good = "the cat a dog a red ball"  # 7 words, 4 concept tokens
    short = "the cat a dog"
    oov = "the cat a dog a red zebra"
    few = "the cat on the a the a"
    assert filter_pretrain_corpus([good, short, oov, few], toy_vocab) == [good]
    assert filter_pretrain_corpus([short], toy_vocab, min_len=2, min_concepts=2) == [short]


@given(st.lists(st.sampled_from(["a", "cat", "dog", "the", "on", "zebra"]), min_size=1, max_size=35))
def test_filter_postconditions(words):
    tokens = ["<pad>", "<bos>", "<eos>", "<unk>", "a", "cat", "dog", "the", "on"]
    v = Vocabulary(tokens, [5, 6])
    s = " ".join(words)
    kept = filter_pretrain_corpus([s], v, min_len=3, max_len=20, min_concepts=2)
    if kept:
        assert 3 <= len(words) <= 20 and "zebra" not in words
        assert sum(w in ("cat", "dog") for w in words) >= 2


def test_caption_record_contract():
    CaptionRecord("ok", (BOS, 5, EOS))
    with pytest.raises(DataError):
        CaptionRecord("bad", (BOS, EOS))
    with pytest.raises(DataError):
        CaptionRecord("bad", (5, 6, EOS))


def test_caption_jsonl_roundtrip(tmp_path, toy_vocab):
    rows = [{"id": "1", "caption": "a cat", "features": "f/1.rfmp"}, {"id": "2", "caption": "a dog"}]
    write_captions(tmp_path / "c.jsonl", rows)
    back = read_captions(tmp_path / "c.jsonl")
    assert back[0]["features"] == "f/1.rfmp" and back[1]["features"] is None
    recs = encode_records(back, toy_vocab)
    assert recs[0].paired and not recs[1].paired


def test_bad_jsonl(tmp_path):
    (tmp_path / "c.jsonl").write_text('{"id": 1}\n')
    with pytest.raises(DataError, match=":1:"):
        read_captions(tmp_path / "c.jsonl")
    (tmp_path / "d.jsonl").write_text("not json\n")
    with pytest.raises(DataError):
        read_captions(tmp_path / "d.jsonl")
