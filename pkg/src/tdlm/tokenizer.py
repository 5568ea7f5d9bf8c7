"""Trainable byte-pair-encoding tokenizer with reserved special tokens.

Words are pre-split on Unicode whitespace and carry an end-of-word sentinel
symbol. Training repeatedly merges the most frequent adjacent symbol pair;
equal counts are broken by the lexicographically smallest pair so identical
corpora always yield identical merge tables.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .errors import ParameterError, ValidationError

PAD, UNK, CLS, SEP, MASK, TGT_OPEN, TGT_CLOSE = range(7)
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[TGT]", "[/TGT]")
NUM_SPECIALS = len(SPECIAL_TOKENS)
EOW = "</w>"  # end-of-word sentinel, counts as a base symbol


@dataclass
class Vocabulary:
    """Dense token<->id map; ids 0..6 are the reserved specials."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(default_factory=dict)
    lowercase: bool = True

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValidationError("duplicate surface forms in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token: str):
        return token in self.token_to_id


@dataclass
class MergeRules:
    """Ordered list of learned symbol pairs; application order is the training order."""

    pairs: list[tuple[str, str]]

    def __len__(self):
        return len(self.pairs)


def _words_of(text: str, lowercase: bool) -> list[str]:
    if lowercase:
        text = text.lower()
    return text.split()


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word) + (EOW,)


def bpe_train(corpus, target_vocab_size: int, lowercase: bool = True):
    """Learn merge rules from an iterable of text lines.

    Returns (Vocabulary, MergeRules). The vocabulary holds, in order: the 7
    specials, the base symbols (sorted), then one merged symbol per rule.
    """
    word_freq: Counter[str] = Counter()
    for line in corpus:
        word_freq.update(_words_of(line, lowercase))
    if not word_freq:
        raise ValidationError("cannot train a tokenizer on an empty corpus")

    base_symbols = sorted({ch for w in word_freq for ch in w} | {EOW})
    floor = len(base_symbols) + NUM_SPECIALS
    if target_vocab_size <= floor:
        raise ParameterError(
            f"target_vocab_size must exceed base symbols + specials ({floor}), "
            f"got {target_vocab_size}"
        )

    sequences = {w: list(_word_symbols(w)) for w in word_freq}
    taken = set(SPECIAL_TOKENS) | set(base_symbols)
    merges: list[tuple[str, str]] = []
    merged_tokens: list[str] = []

    while len(merges) < target_vocab_size - floor:
        pair_counts: Counter[tuple[str, str]] = Counter()
        for w, seq in sequences.items():
            f = word_freq[w]
            for a, b in zip(seq, seq[1:]):
                pair_counts[(a, b)] += f
        best = None
        best_count = 0
        for pair, c in pair_counts.items():
            if pair[0] + pair[1] in taken:
                continue  # would collide with an existing surface form
            if c > best_count or (c == best_count and (best is None or pair < best)):
                best, best_count = pair, c
        if best is None:
            break  # nothing left to merge
        merges.append(best)
        merged = best[0] + best[1]
        merged_tokens.append(merged)
        taken.add(merged)
        for w, seq in sequences.items():
            sequences[w] = _apply_merge(seq, best, merged)

    vocab = Vocabulary(
        id_to_token=list(SPECIAL_TOKENS) + base_symbols + merged_tokens,
        lowercase=lowercase,
    )
    return vocab, MergeRules(merges)


def _apply_merge(seq: list[str], pair: tuple[str, str], merged: str) -> list[str]:
    out = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def encode(text: str, vocab: Vocabulary, rules: MergeRules) -> list[int]:
    """Tokenize ``text`` to ids; unseen base symbols map to UNK."""
    ids: list[int] = []
    for word in _words_of(text, vocab.lowercase):
        seq = list(_word_symbols(word))
        for pair in rules.pairs:
            if len(seq) < 2:
                break
            seq = _apply_merge(seq, pair, pair[0] + pair[1])
        for sym in seq:
            ids.append(vocab.token_to_id.get(sym, UNK))
    return ids


def decode(ids, vocab: Vocabulary) -> str:
    """Inverse of encode up to whitespace normalization; specials are dropped."""
    pieces = []
    for i in ids:
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} out of range for vocabulary of {len(vocab)}")
        if i < NUM_SPECIALS:
            continue
        pieces.append(vocab.id_to_token[i])
    return "".join(pieces).replace(EOW, " ").strip()


def save_tokenizer(vocab: Vocabulary, rules: MergeRules, vocab_path, merges_path):
    with open(vocab_path, "w", encoding="utf-8") as fh:
        for token in vocab.id_to_token:
            fh.write(token + "\n")
    with open(merges_path, "w", encoding="utf-8") as fh:
        for a, b in rules.pairs:
            fh.write(f"{a} {b}\n")


def load_tokenizer(vocab_path, merges_path, lowercase: bool = True):
    with open(vocab_path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    if tokens[:NUM_SPECIALS] != list(SPECIAL_TOKENS):
        raise ValidationError("vocab file does not start with the reserved specials")
    pairs = []
    with open(merges_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            a, b = line.split(" ")
            pairs.append((a, b))
    return Vocabulary(id_to_token=tokens, lowercase=lowercase), MergeRules(pairs)


def vocab_hash(vocab: Vocabulary) -> str:
    """Stable fingerprint used to detect teacher/student vocabulary mismatch."""
    import hashlib

    h = hashlib.sha256()
    for token in vocab.id_to_token:
        h.update(token.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:16]
