"""N-gram counts, smoothing, and the perplexity identities."""

import math
from fractions import Fraction

import numpy as np
import pytest

from tdlm.errors import ParameterError
from tdlm.ngram import (
    BOS,
    EOS,
    NgramCounts,
    conditional_prob,
    conditional_prob_exact,
    corpus_perplexity,
    count_ngrams,
    perplexity,
    sequence_log_prob,
    token_log_probs,
)


def brute_force_prob(sentences, n, context, word):
    """Independent oracle: rescan the padded corpus for every query."""
    hits = total = 0
    for s in sentences:
        padded = [BOS] * (n - 1) + list(s) + [EOS]
        for i in range(n - 1, len(padded)):
            if tuple(padded[i - n + 1 : i]) == tuple(context):
                total += 1
                if padded[i] == word:
                    hits += 1
    return Fraction(hits, total) if total else Fraction(0)


class TestCounting:
    def test_bigram_padding(self):
        counts = count_ngrams([["a", "b"]], 2)
        assert counts.successors[(BOS,)]["a"] == 1
        assert counts.successors[("a",)]["b"] == 1
        assert counts.successors[("b",)][EOS] == 1

    def test_empty_corpus(self):
        counts = count_ngrams([], 2)
        assert not counts.successors

    def test_unigram_counts(self):
        counts = count_ngrams([["a", "a", "a"]], 1)
        assert counts.successors[()]["a"] == 3

    def test_invalid_order(self):
        with pytest.raises(ParameterError):
            count_ngrams([["a"]], 0)


class TestConditionalProb:
    def test_hand_counted_bigram(self):
        """In 'a b a b a c': C(a,b)=2 of C(a,.)=3."""
        counts = count_ngrams([["a", "b", "a", "b", "a", "c"]], 2)
        np.testing.assert_allclose(conditional_prob(counts, ["a"], "b"), 2 / 3, atol=1e-15)
        assert conditional_prob_exact(counts, ["a"], "b") == Fraction(2, 3)

    def test_unseen_pair_is_zero(self):
        counts = count_ngrams([["a", "b"]], 2)
        assert conditional_prob(counts, ["b"], "a") == 0.0

    def test_large_k_limit_is_uniform(self):
        counts = count_ngrams([["a", "b", "c"]], 2)
        v = counts.vocab_size
        p = conditional_prob(counts, ["a"], "c", add_k=1e9)
        np.testing.assert_allclose(p, 1 / v, rtol=1e-6)

    def test_wrong_context_length(self):
        counts = count_ngrams([["a", "b"]], 2)
        with pytest.raises(ParameterError):
            conditional_prob(counts, ["a", "b"], "c")

    def test_distribution_sums_to_one(self):
        """For every seen context at k=0 the successor probabilities sum to 1."""
        rng = np.random.default_rng(11)
        for _ in range(25):
            corpus = [
                [str(t) for t in rng.integers(0, 5, size=rng.integers(1, 10))]
                for _ in range(rng.integers(1, 5))
            ]
            counts = count_ngrams(corpus, 2)
            for ctx in counts.successors:
                words = set(counts.successors[ctx]) | counts.vocab
                total_f = sum(conditional_prob(counts, ctx, w) for w in words)
                total_q = sum((conditional_prob_exact(counts, ctx, w) for w in words), Fraction(0))
                assert total_q == 1
                np.testing.assert_allclose(total_f, 1.0, atol=1e-12)


class TestOracleEquivalence:
    def test_against_brute_force_on_random_corpora(self):
        """conditional_prob and sequence_log_prob match a raw corpus rescan."""
        rng = np.random.default_rng(101)
        for trial in range(100):
            vocab = [str(i) for i in range(rng.integers(2, 9))]
            corpus = []
            remaining = 50
            while remaining > 0:
                length = int(rng.integers(1, min(8, remaining) + 1))
                corpus.append([vocab[i] for i in rng.integers(0, len(vocab), size=length)])
                remaining -= length
            n = int(rng.integers(1, 4))
            counts = count_ngrams(corpus, n)
            for ctx in list(counts.successors)[:5]:
                for w in list(counts.successors[ctx])[:3] + [vocab[0]]:
                    expected = brute_force_prob(corpus, n, ctx, w)
                    got = conditional_prob(counts, ctx, w)
                    np.testing.assert_allclose(got, float(expected), atol=1e-12)
                    assert conditional_prob_exact(counts, ctx, w) == expected
            sent = corpus[0]
            lp = sequence_log_prob(counts, sent)
            oracle = Fraction(1)
            padded = [BOS] * (n - 1) + sent + [EOS]
            for i in range(n - 1, len(padded)):
                oracle *= brute_force_prob(corpus, n, padded[i - n + 1 : i], padded[i])
            if oracle == 0:
                assert lp == -math.inf
            else:
                np.testing.assert_allclose(lp, math.log(float(oracle)), atol=1e-12)


class TestSequenceLogProb:
    def test_self_scoring_matches_product(self):
        corpus = [["x", "y", "x", "z"]]
        counts = count_ngrams(corpus, 2)
        lp = sequence_log_prob(counts, corpus[0])
        manual = sum(
            math.log(conditional_prob(counts, ctx, w))
            for ctx, w in [((BOS,), "x"), (("x",), "y"), (("y",), "x"), (("x",), "z"), (("z",), EOS)]
        )
        np.testing.assert_allclose(lp, manual, atol=1e-12)

    def test_unseen_bigram_flags_zero_probability(self):
        counts = count_ngrams([["a", "b"]], 2)
        assert sequence_log_prob(counts, ["b", "a"]) == -math.inf

    def test_deterministic_corpus_scores_zero(self):
        """Every context has one successor, so all factors are exactly 1."""
        counts = count_ngrams([["p", "q", "r"]], 2)
        assert sequence_log_prob(counts, ["p", "q", "r"]) == 0.0


class TestPerplexity:
    def test_uniform_model(self):
        """Empty counts with any k > 0 assign 1/|V| everywhere, so PPL = |V|."""
        counts = NgramCounts(order=2, vocab={str(i) for i in range(16)})
        ppl = perplexity(counts, ["1", "2", "3"], add_k=0.5)
        np.testing.assert_allclose(ppl, 16.0, atol=1e-9)

    def test_deterministic_model(self):
        counts = count_ngrams([["p", "q", "r"]], 2)
        np.testing.assert_allclose(perplexity(counts, ["p", "q", "r"]), 1.0, atol=1e-12)

    def test_zero_probability_flags_infinity(self):
        counts = count_ngrams([["a", "b"]], 2)
        assert perplexity(counts, ["b", "a"]) == math.inf

    def test_ppl_equals_exp_mean_ce(self):
        """PPL and exp(mean token CE) agree within 1e-9 on 100 random pairs."""
        rng = np.random.default_rng(77)
        for _ in range(100):
            vocab = [str(i) for i in range(rng.integers(3, 8))]
            corpus = [
                [vocab[i] for i in rng.integers(0, len(vocab), size=rng.integers(2, 12))]
                for _ in range(rng.integers(1, 6))
            ]
            counts = count_ngrams(corpus, 2)
            tokens = corpus[int(rng.integers(0, len(corpus)))]
            k = float(rng.uniform(0.1, 2.0))
            ppl = perplexity(counts, tokens, add_k=k)
            ces = [-lp for lp in token_log_probs(counts, tokens, add_k=k)]
            np.testing.assert_allclose(ppl, math.exp(np.mean(ces)), rtol=1e-9)

    def test_segmentation_invariance(self):
        """Pooled perplexity only depends on the padded token stream."""
        corpus = [["a", "b", "c", "a"], ["b", "c"]]
        counts = count_ngrams(corpus, 2)
        joint = corpus_perplexity(counts, corpus, add_k=0.3)
        lp = sum(sequence_log_prob(counts, s, add_k=0.3) for s in corpus)
        n = sum(len(s) + 1 for s in corpus)
        np.testing.assert_allclose(joint, math.exp(-lp / n), rtol=1e-12)

    def test_needs_tokens(self):
        counts = count_ngrams([["a"]], 1)
        with pytest.raises(ParameterError):
            perplexity(counts, [])
