"""BPE tokenizer: merge order, roundtrips, determinism, persistence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdlm.errors import ParameterError, ValidationError
from tdlm.tokenizer import (
    NUM_SPECIALS,
    SPECIAL_TOKENS,
    UNK,
    Vocabulary,
    bpe_train,
    decode,
    encode,
    load_tokenizer,
    save_tokenizer,
    vocab_hash,
)


def budget(corpus_lines, merges):
    base = {c for line in corpus_lines for w in line.split() for c in w}
    return len(base) + 1 + NUM_SPECIALS + merges  # +1 for the end-of-word sentinel


class TestTraining:
    def test_most_frequent_pair_merges_first(self):
        lines = ["ab ab ab"]
        _, rules = bpe_train(lines, budget(lines, 1))
        assert rules.pairs[0] == ("a", "b")

    def test_overlapping_pairs_counted_left_to_right(self):
        """In 'aaab' the pair (a,a) occurs twice versus (a,b) once."""
        lines = ["aaab"]
        _, rules = bpe_train(lines, budget(lines, 1))
        assert rules.pairs[0] == ("a", "a")

    def test_single_word_reaches_fixed_point(self):
        lines = ["hello hello hello"]
        vocab, rules = bpe_train(lines, budget(lines, 5))
        ids = encode("hello", vocab, rules)
        assert len(ids) == 1

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValidationError):
            bpe_train([], 100)

    def test_budget_must_exceed_floor(self):
        lines = ["ab"]
        with pytest.raises(ParameterError):
            bpe_train(lines, budget(lines, 0))

    def test_rule_count_matches_vocab_size(self):
        lines = ["the cat sat on the mat", "a cat and a rat"]
        size = budget(lines, 9)
        vocab, rules = bpe_train(lines, size)
        base = len(vocab) - NUM_SPECIALS - len(rules)
        assert len(vocab) == NUM_SPECIALS + base + len(rules) == size

    def test_training_is_deterministic(self):
        lines = ["she sells sea shells on the sea shore"] * 3
        a = bpe_train(lines, budget(lines, 12))
        b = bpe_train(lines, budget(lines, 12))
        assert a[1].pairs == b[1].pairs
        assert a[0].id_to_token == b[0].id_to_token


@pytest.fixture(scope="module")
def trained():
    lines = [
        "the quick brown fox jumps over the lazy dog",
        "pack my box with five dozen liquor jugs",
        "how vexingly quick daft zebras jump",
    ]
    vocab, rules = bpe_train(lines, budget(lines, 40))
    return lines, vocab, rules


class TestEncodeDecode:
    def test_roundtrip_on_corpus_lines(self, trained):
        lines, vocab, rules = trained
        for line in lines:
            assert decode(encode(line, vocab, rules), vocab) == line

    def test_empty_string(self, trained):
        _, vocab, rules = trained
        assert encode("", vocab, rules) == []
        assert decode([], vocab) == ""

    def test_unseen_symbol_maps_to_unk(self, trained):
        _, vocab, rules = trained
        assert UNK in encode("fox@dog", vocab, rules)

    def test_specials_never_emitted(self, trained):
        lines, vocab, rules = trained
        for line in lines + ["[PAD] [CLS] masked"]:
            ids = encode(line, vocab, rules)
            assert all(i >= NUM_SPECIALS or i == UNK for i in ids)

    def test_specials_dropped_on_decode(self, trained):
        _, vocab, _ = trained
        assert decode([0, 2, 3], vocab) == ""

    def test_token_count_bounded_by_symbols(self, trained):
        _, vocab, rules = trained
        text = "jumps over lazy dogs"
        n_base = sum(len(w) + 1 for w in text.split())
        assert len(encode(text, vocab, rules)) <= n_base

    def test_id_out_of_range(self, trained):
        _, vocab, _ = trained
        with pytest.raises(IndexError):
            decode([len(vocab)], vocab)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.text(alphabet="abcdefg", min_size=1, max_size=6), min_size=1, max_size=8))
    def test_roundtrip_property(self, words):
        line = " ".join(words)
        corpus = [line, "abc defg ga"]
        vocab, rules = bpe_train(corpus, budget(corpus, 10))
        assert decode(encode(line, vocab, rules), vocab) == " ".join(line.split())

    def test_lowercasing_default(self):
        lines = ["The Cat"]
        vocab, rules = bpe_train(lines, budget([line.lower() for line in lines], 3))
        assert decode(encode("THE CAT", vocab, rules), vocab) == "the cat"


class TestPersistence:
    def test_save_load_roundtrip(self, trained, tmp_path):
        lines, vocab, rules = trained
        save_tokenizer(vocab, rules, tmp_path / "vocab.txt", tmp_path / "merges.txt")
        vocab2, rules2 = load_tokenizer(tmp_path / "vocab.txt", tmp_path / "merges.txt")
        assert vocab2.id_to_token == vocab.id_to_token
        assert rules2.pairs == rules.pairs
        assert vocab_hash(vocab2) == vocab_hash(vocab)
        for line in lines:
            assert encode(line, vocab2, rules2) == encode(line, vocab, rules)

    def test_vocab_file_layout(self, trained, tmp_path):
        _, vocab, rules = trained
        save_tokenizer(vocab, rules, tmp_path / "v.txt", tmp_path / "m.txt")
        lines = (tmp_path / "v.txt").read_text(encoding="utf-8").splitlines()
        assert lines[:NUM_SPECIALS] == list(SPECIAL_TOKENS)
        assert len(lines) == len(vocab)


class TestVocabulary:
    def test_duplicate_surface_forms_rejected(self):
        with pytest.raises(ValidationError):
            Vocabulary(id_to_token=list(SPECIAL_TOKENS) + ["x", "x"])
