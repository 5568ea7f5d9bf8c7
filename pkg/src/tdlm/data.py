"""Corpus loading, sequence packing, and dynamic masking for MLM training.

Corpus format: UTF-8 text, one sentence per line, blank line between
documents, CRLF normalized to LF. Masking follows the 80/10/10
mask/random/keep split over tokens selected at ``p_mask``; special ids
(PAD..TGT_CLOSE) and padding are never corrupted.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError
from .tokenizer import CLS, MASK, NUM_SPECIALS, PAD, SEP

IGNORE_INDEX = -1


@dataclass
class Document:
    """Ordered sentences, each a non-empty token-id sequence."""

    sentences: list

    def __post_init__(self):
        if any(len(s) == 0 for s in self.sentences):
            raise FormatError("documents must not contain empty sentences")


@dataclass
class MaskedBatch:
    """Corrupted inputs plus reconstruction targets (IGNORE_INDEX where uncorrupted)."""

    input_ids: np.ndarray
    target_ids: np.ndarray
    pad_mask: np.ndarray
    seed: int
    warning: bool = False  # set when a row had nothing maskable

    @property
    def batch_size(self) -> int:
        return self.input_ids.shape[0]


def load_corpus(path) -> list[list[str]]:
    """Read blank-line-separated documents; returns sentence strings per document."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"corpus is not valid UTF-8 at byte offset {e.start}") from e
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    docs: list[list[str]] = []
    current: list[str] = []
    for line in text.split("\n"):
        if line.strip():
            current.append(line.strip())
        elif current:
            docs.append(current)
            current = []
    if current:
        docs.append(current)
    return docs


def encode_documents(raw_docs, vocab, rules) -> list[Document]:
    """Tokenize sentence strings into Documents, dropping empty encodings."""
    from .tokenizer import encode

    docs = []
    for sentences in raw_docs:
        ids = [encode(s, vocab, rules) for s in sentences]
        ids = [s for s in ids if s]
        if ids:
            docs.append(Document(sentences=ids))
    return docs


def pack_documents(documents, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Pack sentences into [CLS] ... [SEP] [PAD]* rows of width ``seq_len``.

    Sentences from different documents never share a row. Returns
    (ids, pad_mask) with pad_mask True on real tokens.
    """
    if seq_len < 3:
        raise ParameterError(f"seq_len must fit CLS + token + SEP, got {seq_len}")
    body = seq_len - 2
    rows: list[list[int]] = []
    for doc in documents:
        current: list[int] = []
        for sent in doc.sentences:
            sent = list(sent[:body])
            if current and len(current) + len(sent) > body:
                rows.append(current)
                current = []
            current.extend(sent)
            if len(current) >= body:
                rows.append(current[:body])
                current = []
        if current:
            rows.append(current)
    n = len(rows)
    ids = np.full((n, seq_len), PAD, dtype=np.int64)
    pad_mask = np.zeros((n, seq_len), dtype=bool)
    for r, toks in enumerate(rows):
        ids[r, 0] = CLS
        ids[r, 1 : 1 + len(toks)] = toks
        ids[r, 1 + len(toks)] = SEP
        pad_mask[r, : len(toks) + 2] = True
    return ids, pad_mask


def dynamic_mask(
    tokens: np.ndarray,
    p_mask: float,
    rng_seed,
    vocab_size: int,
    pad_mask: np.ndarray = None,
) -> MaskedBatch:
    """Corrupt each non-special token independently with probability ``p_mask``.

    Selected tokens become [MASK] with probability 0.8, a uniform random
    non-special id with 0.1, and stay unchanged with 0.1; the target always
    records the original id. A row with nothing maskable is returned
    unchanged and flips the batch warning flag.
    """
    if not 0.0 < p_mask < 1.0:
        raise ParameterError(f"p_mask must lie in (0, 1), got {p_mask}")
    if vocab_size <= NUM_SPECIALS:
        raise ParameterError("vocab_size leaves no non-special tokens to sample")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if pad_mask is None:
        pad_mask = tokens != PAD
    else:
        pad_mask = np.asarray(pad_mask, dtype=bool).reshape(tokens.shape)

    rng = np.random.default_rng(rng_seed)
    seed_int = int(np.random.SeedSequence(rng_seed).generate_state(1)[0]) if not isinstance(
        rng_seed, (int, np.integer)
    ) else int(rng_seed)

    maskable = (tokens >= NUM_SPECIALS) & pad_mask
    selected = (rng.random(tokens.shape) < p_mask) & maskable
    action = rng.random(tokens.shape)
    randoms = rng.integers(NUM_SPECIALS, vocab_size, size=tokens.shape, dtype=np.int64)

    input_ids = tokens.copy()
    input_ids[selected & (action < 0.8)] = MASK
    swap = selected & (action >= 0.8) & (action < 0.9)
    input_ids[swap] = randoms[swap]
    target_ids = np.where(selected, tokens, IGNORE_INDEX)

    warning = bool((~maskable.any(axis=1)).any())
    return MaskedBatch(
        input_ids=input_ids,
        target_ids=target_ids,
        pad_mask=pad_mask,
        seed=seed_int,
        warning=warning,
    )


def batch_seed(shuffle_seed: int, epoch: int, index: int) -> int:
    """Deterministic per-batch masking seed."""
    return int(np.random.SeedSequence([shuffle_seed, epoch, index]).generate_state(1)[0])


def make_batches(
    documents,
    batch_size: int,
    seq_len: int,
    shuffle_seed: int,
    p_mask: float,
    vocab_size: int,
    epoch: int = 0,
):
    """Yield MaskedBatch objects in a seed-deterministic shuffled order."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    ids, pad = pack_documents(documents, seq_len)
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(ids))
    for bi, start in enumerate(range(0, len(order), batch_size)):
        rows = order[start : start + batch_size]
        yield dynamic_mask(
            ids[rows],
            p_mask,
            batch_seed(shuffle_seed, epoch, bi),
            vocab_size,
            pad_mask=pad[rows],
        )


def prefetch(iterable, capacity: int = 4):
    """Produce ``iterable`` on a worker thread through a bounded queue.

    The consumed order equals the input order regardless of scheduling, so
    training results do not depend on whether prefetching is enabled.
    """
    if capacity < 1:
        raise ParameterError(f"capacity must be >= 1, got {capacity}")
    q: queue.Queue = queue.Queue(maxsize=capacity)
    _END = object()

    def producer():
        try:
            for item in iterable:
                q.put(item)
            q.put(_END)
        except BaseException as e:  # propagate into the consumer
            q.put(e)

    thread = threading.Thread(target=producer, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is _END:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    thread.join()
