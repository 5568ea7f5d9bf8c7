"""Count-based n-gram language model with add-k smoothing and perplexity.

Sentences are padded with n-1 begin markers and one end marker. The begin
markers only ever appear as context, so the perplexity denominator counts the
sentence tokens plus the predicted end marker.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ParameterError, ValidationError

BOS = "<s>"
EOS = "</s>"


@dataclass
class NgramCounts:
    """Observed n-gram statistics: context tuple -> successor counter."""

    order: int
    successors: dict[tuple, Counter] = field(default_factory=dict)
    context_totals: dict[tuple, int] = field(default_factory=dict)
    vocab: set = field(default_factory=set)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)


def count_ngrams(corpus, n: int) -> NgramCounts:
    """Count every n-gram over an iterable of token sequences."""
    if n < 1:
        raise ParameterError(f"n-gram order must be >= 1, got {n}")
    counts = NgramCounts(order=n)
    for tokens in corpus:
        padded = [BOS] * (n - 1) + list(tokens) + [EOS]
        counts.vocab.update(tokens)
        counts.vocab.add(EOS)
        for i in range(n - 1, len(padded)):
            ctx = tuple(padded[i - n + 1 : i])
            word = padded[i]
            succ = counts.successors.get(ctx)
            if succ is None:
                succ = Counter()
                counts.successors[ctx] = succ
            succ[word] += 1
            counts.context_totals[ctx] = counts.context_totals.get(ctx, 0) + 1
    return counts


def conditional_prob(counts: NgramCounts, context, word, add_k: float = 0.0) -> float:
    """(C(context, word) + k) / (C(context) + k * |V|); zero when unseen and k == 0."""
    ctx = tuple(context)
    if len(ctx) != counts.order - 1:
        raise ParameterError(
            f"context length {len(ctx)} does not match order-{counts.order} model"
        )
    if add_k < 0:
        raise ParameterError(f"add_k must be nonnegative, got {add_k}")
    pair = counts.successors.get(ctx, {}).get(word, 0)
    total = counts.context_totals.get(ctx, 0)
    denom = total + add_k * counts.vocab_size
    if denom == 0:
        return 0.0
    return (pair + add_k) / denom


def conditional_prob_exact(counts: NgramCounts, context, word, add_k=0) -> Fraction:
    """Rational twin of conditional_prob for integer/Fraction smoothing values."""
    ctx = tuple(context)
    if len(ctx) != counts.order - 1:
        raise ParameterError(
            f"context length {len(ctx)} does not match order-{counts.order} model"
        )
    k = Fraction(add_k)
    pair = counts.successors.get(ctx, {}).get(word, 0)
    total = counts.context_totals.get(ctx, 0)
    denom = Fraction(total) + k * counts.vocab_size
    if denom == 0:
        return Fraction(0)
    return (Fraction(pair) + k) / denom


def token_log_probs(counts: NgramCounts, tokens, add_k: float = 0.0) -> list[float]:
    """Per-position log P(w_i | context), end marker included; -inf marks zero probability."""
    n = counts.order
    padded = [BOS] * (n - 1) + list(tokens) + [EOS]
    out = []
    for i in range(n - 1, len(padded)):
        p = conditional_prob(counts, padded[i - n + 1 : i], padded[i], add_k)
        out.append(math.log(p) if p > 0.0 else -math.inf)
    return out


def sequence_log_prob(counts: NgramCounts, tokens, add_k: float = 0.0) -> float:
    """Chain-rule log probability of one sentence; -inf flags a zero-probability sequence."""
    return sum(token_log_probs(counts, tokens, add_k))


def perplexity(counts: NgramCounts, tokens, add_k: float = 0.0) -> float:
    """exp(-(1/N) log P) with N = len(tokens) + 1; inf flags zero probability."""
    tokens = list(tokens)
    n_predicted = len(tokens) + 1
    if n_predicted < 1 or not tokens:
        raise ParameterError("perplexity needs at least one token")
    lp = sequence_log_prob(counts, tokens, add_k)
    if lp == -math.inf:
        return math.inf
    return math.exp(-lp / n_predicted)


def corpus_perplexity(counts: NgramCounts, sentences, add_k: float = 0.0) -> float:
    """Pooled perplexity over many sentences (log probs and token counts summed)."""
    total_lp = 0.0
    total_n = 0
    for tokens in sentences:
        tokens = list(tokens)
        total_lp += sequence_log_prob(counts, tokens, add_k)
        total_n += len(tokens) + 1
    if total_n == 0:
        raise ValidationError("corpus_perplexity needs at least one sentence")
    if total_lp == -math.inf:
        return math.inf
    return math.exp(-total_lp / total_n)
