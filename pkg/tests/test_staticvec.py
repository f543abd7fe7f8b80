import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npnprobe.corpus import ConstructionInstance
from npnprobe.staticvec import (
    OutOfVocabulary, StaticVectorTable, char_ngrams, fasttext_hash, feature_matrix, form_features,
    lemma_features, save_fasttext_bin,
)


def fnv_oracle(s):
    """FNV-1a written against int8-cast bytes, the way the C++ reference iterates a std::string."""
    h = np.uint32(2166136261)
    with np.errstate(over="ignore"):
        for b in np.frombuffer(s.encode("utf-8"), dtype=np.int8):
            h = np.uint32(h ^ np.uint32(np.int64(b) & 0xFFFFFFFF))
            h = np.uint32(h * np.uint32(16777619))
    return int(h)


def test_fnv_reference_values():
    assert fasttext_hash("") == 2166136261
    assert fasttext_hash("a") == 0xE40C292C
    assert fasttext_hash("foobar") == 0xBF9CF968


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=12))
def test_fnv_matches_oracle(s):
    assert fasttext_hash(s) == fnv_oracle(s)


def test_char_ngrams_examples():
    assert char_ngrams("ab", 3, 3) == ["<ab", "ab>"]
    assert char_ngrams("ab", 1, 2) == ["<a", "a", "ab", "b", "b>"]
    assert char_ngrams("città", 5, 5) == ["<citt", "città", "ittà>"]
    assert char_ngrams("x", 3, 6) == ["<x>"]


@settings(max_examples=100, deadline=None)
@given(st.text(st.characters(blacklist_characters="<>"), min_size=1, max_size=8), st.integers(1, 4),
       st.integers(0, 3))
def test_char_ngrams_are_bracketed_substrings(word, minn, extra):
    maxn = minn + extra
    grams = char_ngrams(word, minn, maxn)
    w = f"<{word}>"
    expect = sorted(w[i:i + n] for i in range(len(w)) for n in range(max(minn, 1), maxn + 1)
                    if i + n <= len(w) and w[i:i + n] not in ("<", ">"))
    assert sorted(grams) == expect


# ---------------------------------------------------------------- binary model

@pytest.fixture
def model(tmp_path):
    rng = np.random.default_rng(0)
    words = ["porta", "strato", "giorno"]
    wr, nr = rng.normal(size=(3, 5)), rng.normal(size=(97, 5))
    path = tmp_path / "m.bin"
    save_fasttext_bin(path, words, wr, nr, minn=3, maxn=4)
    return path, words, wr.astype(np.float32), nr.astype(np.float32)


def expected_vector(word, words, wr, nr, minn=3, maxn=4):
    w = f"<{word}>"
    rows = [nr[fnv_oracle(w[i:i + n]) % len(nr)] for i in range(len(w)) for n in range(minn, maxn + 1)
            if i + n <= len(w)]
    if word in words:
        rows = [wr[words.index(word)]] + rows
    return np.mean(np.asarray(rows, dtype=np.float64), axis=0)


def test_bin_round_trip(model):
    path, words, wr, nr = model
    t = StaticVectorTable.load(path)
    assert t.dim == 5 and t.words == {w: k for k, w in enumerate(words)} and (t.minn, t.maxn) == (3, 4)
    assert np.array_equal(np.asarray(t.vectors), wr) and np.array_equal(np.asarray(t.ngrams), nr)


@pytest.mark.parametrize("word", ["porta", "giorno", "portone", "città", "qa"])
def test_composed_vectors_match_reference(model, word):
    path, words, wr, nr = model
    t = StaticVectorTable.load(path)
    assert np.allclose(t.vector(word), expected_vector(word, words, wr, nr), atol=1e-6)


def test_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"\x00" * 64)
    with pytest.raises(ValueError):
        StaticVectorTable.load(tmp_path / "x.bin")


# ---------------------------------------------------------------- text tables

def test_text_with_and_without_header(tmp_path):
    body = "porta 1 2 3\nstrato 4 5 6\n"
    (tmp_path / "a.vec").write_text("2 3\n" + body)
    (tmp_path / "b.txt").write_text(body)
    a, b = StaticVectorTable.load(tmp_path / "a.vec"), StaticVectorTable.load(tmp_path / "b.txt")
    for t in (a, b):
        assert t.dim == 3 and np.array_equal(t.vector("strato"), [4, 5, 6])
    (tmp_path / "c.txt").write_text(body + "giorno 1 2\n")
    with pytest.raises(ValueError):
        StaticVectorTable.load(tmp_path / "c.txt")


def test_oov_policies(tmp_path, caplog):
    (tmp_path / "v.txt").write_text("porta 1 2\n")
    zero = StaticVectorTable.load(tmp_path / "v.txt", oov_policy="zero-vector")
    assert np.array_equal(zero.vector("casa"), [0, 0])
    strict = StaticVectorTable.load(tmp_path / "v.txt", oov_policy="error")
    with pytest.raises(OutOfVocabulary):
        strict.vector("casa")
    with caplog.at_level(logging.WARNING):
        fallback = StaticVectorTable.load(tmp_path / "v.txt", oov_policy="subword-compose")
    assert "no subword table" in caplog.text and fallback.oov_policy == "zero-vector"
    with pytest.raises(ValueError):
        StaticVectorTable.load(tmp_path / "v.txt", oov_policy="guess")


def test_bin_oov_error_policy(model):
    t = StaticVectorTable.load(model[0], oov_policy="error")
    with pytest.raises(OutOfVocabulary):
        t.vector("casa")
    assert t.vector("porta").shape == (5,)


# ---------------------------------------------------------------- features

def npn(noun, form, number):
    s = f"c'era {form} su {form} dappertutto"
    return ConstructionInstance("x", s, (6, 6 + 2 * len(form) + 4), "su", noun, form, number, "CXN",
                                "greater_plurality_accumulation")


def test_lemma_and_form_features(model):
    t = StaticVectorTable.load(model[0])
    sing, plur = npn("strato", "strato", "singular"), npn("strato", "strati", "plural")
    assert np.array_equal(lemma_features(sing, t), form_features(sing, t))
    assert np.array_equal(lemma_features(plur, t), lemma_features(sing, t))
    assert not np.array_equal(form_features(plur, t), form_features(sing, t))
    m = feature_matrix([sing, plur], t, "form")
    assert m.shape == (2, 5) and m.dtype == np.float32
    assert feature_matrix([], t).shape == (0, 5)
