"""Gloss classification for word sense disambiguation (LMGC and LMGC-M).

An ambiguous word is resolved by scoring context-gloss pairs with a binary
head on the aggregate token: ``[CLS] left [TGT] word [/TGT] right [SEP]
lemma : gloss [SEP]``. Training uses focal loss over K candidate slots
(padded or sampled); LMGC-M adds a masked-language-model term computed on a
corrupted copy of the same pairs so language modeling ability is not lost.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWState, Tape, Tensor, adamw_step, backward, no_tape
from .data import dynamic_mask
from .distill import mlm_ce
from .errors import (
    ConfigError,
    FormatError,
    ParameterError,
    ValidationError,
)
from .tokenizer import CLS, PAD, SEP, TGT_CLOSE, TGT_OPEN, encode
from .transformer import Model, cls_head_forward, encode_batch

log = logging.getLogger(__name__)

FOCAL_EPS = 1e-12


class SenseInventory:
    """(lemma, pos) -> ordered senses; lookups without a POS pool across all POS."""

    def __init__(self):
        self._by_key: dict[tuple[str, str], list[tuple[str, str]]] = {}
        self._by_lemma: dict[str, list[tuple[str, str]]] = {}
        self._ids: set[str] = set()

    def add(self, lemma: str, pos: str, sense_id: str, gloss: str):
        if not gloss:
            raise FormatError(f"sense {sense_id!r} has an empty gloss")
        if sense_id in self._ids:
            raise FormatError(f"duplicate sense_id {sense_id!r}")
        self._ids.add(sense_id)
        self._by_key.setdefault((lemma, pos), []).append((sense_id, gloss))
        self._by_lemma.setdefault(lemma, []).append((sense_id, gloss))

    def senses(self, lemma: str, pos: str = None) -> list[tuple[str, str]]:
        if pos is not None:
            found = self._by_key.get((lemma, pos))
            if found:
                return list(found)
        return list(self._by_lemma.get(lemma, []))

    def __len__(self):
        return len(self._ids)

    def __contains__(self, sense_id: str):
        return sense_id in self._ids


def load_sense_inventory(path) -> SenseInventory:
    """Parse the JSON-Lines inventory: {"lemma","pos","sense_id","gloss"} per line."""
    inv = SenseInventory()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                lemma, pos = obj["lemma"], obj.get("pos", "")
                sense_id, gloss = obj["sense_id"], obj["gloss"]
            except (json.JSONDecodeError, KeyError) as e:
                raise FormatError(f"bad inventory record at line {lineno}: {e}") from e
            if not gloss:
                raise FormatError(f"missing gloss at line {lineno}")
            inv.add(lemma, pos, sense_id, gloss)
    if len(inv) == 0:
        raise ValidationError(f"sense inventory {path} is empty")
    return inv


@dataclass
class WsdInstance:
    """One annotated occurrence of an ambiguous word."""

    tokens: list
    target_index: int
    lemma: str
    pos: str = ""
    gold: list = field(default_factory=list)
    dataset: str = "all"

    def __post_init__(self):
        if not 0 <= self.target_index < len(self.tokens):
            raise ValidationError(
                f"target index {self.target_index} outside context of {len(self.tokens)} tokens"
            )


def load_wsd_instances(path, require_gold: bool = True) -> list[WsdInstance]:
    """Parse JSON-Lines instances: {"tokens","target_index","lemma","pos","gold"[,"dataset"]}."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                inst = WsdInstance(
                    tokens=list(obj["tokens"]),
                    target_index=int(obj["target_index"]),
                    lemma=obj["lemma"],
                    pos=obj.get("pos", ""),
                    gold=list(obj.get("gold", [])),
                    dataset=obj.get("dataset", "all"),
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"bad instance record at line {lineno}: {e}") from e
            if require_gold and not inst.gold:
                raise FormatError(f"instance at line {lineno} has no gold senses")
            out.append(inst)
    return out


@dataclass
class ContextGlossPair:
    """One candidate slot; pad slots carry no label and contribute no gradient."""

    input_ids: np.ndarray
    label: int = 0
    sense_id: str = ""
    is_pad: bool = False


@dataclass
class CandidateSet:
    """Fixed-K slots (training) or all-sense slots (inference) for one instance."""

    pairs: list
    instance: WsdInstance

    def real_pairs(self) -> list[ContextGlossPair]:
        return [p for p in self.pairs if not p.is_pad]


def build_pair_ids(instance: WsdInstance, gloss: str, vocab, rules, max_len: int) -> np.ndarray:
    """Token ids for one context-gloss pair, context truncated before the gloss."""
    word_ids = [encode(w, vocab, rules) for w in instance.tokens]
    ti = instance.target_index
    target = word_ids[ti]
    left = [t for w in word_ids[:ti] for t in w]
    right = [t for w in word_ids[ti + 1 :] for t in w]
    gseg = encode(f"{instance.lemma} : {gloss}", vocab, rules)
    overhead = 4 + len(target)  # CLS, TGT, /TGT, trailing SEP around the context

    def total():
        return overhead + len(left) + len(right) + len(gseg) + 1

    while total() > max_len and (left or right):
        if len(right) >= len(left):
            right.pop()
        else:
            left.pop(0)
    if total() > max_len:
        gseg = gseg[: max(0, len(gseg) - (total() - max_len))]
    ids = [CLS] + left + [TGT_OPEN] + target + [TGT_CLOSE] + right + [SEP] + gseg + [SEP]
    return np.asarray(ids[:max_len], dtype=np.int64)


def build_candidate_set(
    instance: WsdInstance,
    inventory: SenseInventory,
    vocab,
    rules,
    k: int = 8,
    rng_seed=0,
    max_len: int = 160,
    inference: bool = False,
) -> CandidateSet:
    """Assemble candidate slots for one instance.

    Training: m <= K senses give m real slots plus pads; m > K samples K
    senses always including every gold one (fresh sample per seed).
    Inference uses all m senses with no pads.
    """
    senses = inventory.senses(instance.lemma, instance.pos or None)
    if not senses:
        raise ValidationError(f"lemma {instance.lemma!r} not in inventory")
    ids = {sid for sid, _ in senses}
    missing = [g for g in instance.gold if g not in ids]
    if missing:
        raise ValidationError(f"gold senses {missing} absent from inventory for {instance.lemma!r}")

    if inference or len(senses) <= k:
        chosen = senses if inference else senses[:]
    else:
        rng = np.random.default_rng(rng_seed)
        gold_entries = [s for s in senses if s[0] in instance.gold]
        other = [s for s in senses if s[0] not in instance.gold]
        if len(gold_entries) >= k:
            pick = rng.choice(len(gold_entries), size=k, replace=False)
            chosen = [gold_entries[i] for i in sorted(pick)]
        else:
            pick = rng.choice(len(other), size=k - len(gold_entries), replace=False)
            keep = {other[i][0] for i in pick} | {s[0] for s in gold_entries}
            chosen = [s for s in senses if s[0] in keep]

    pairs = []
    for sid, gloss in chosen:
        pairs.append(
            ContextGlossPair(
                input_ids=build_pair_ids(instance, gloss, vocab, rules, max_len),
                label=1 if sid in instance.gold else 0,
                sense_id=sid,
            )
        )
    if not inference:
        while len(pairs) < k:
            pairs.append(ContextGlossPair(input_ids=np.asarray([PAD], dtype=np.int64), is_pad=True))
    return CandidateSet(pairs=pairs, instance=instance)


def focal_loss(p, y, gamma: float = 2.0, alpha: float = 0.25, paper_literal: bool = False) -> Tensor:
    """Focal loss, mean over elements: -alpha (1 - p_t)^gamma log(p_t).

    ``p_t`` is p for y=1 and 1-p for y=0; alpha scales both branches, so
    gamma=0, alpha=1 reproduces binary cross-entropy exactly.
    ``paper_literal`` switches the negative branch to -(1+p)^gamma log(1-p)
    with no alpha weighting, matching the printed equation rather than its
    cited source.
    """
    if gamma < 0:
        raise ParameterError(f"gamma must be >= 0, got {gamma}")
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    yarr = np.asarray(y, dtype=np.float64)
    pc = ad.clip(p, FOCAL_EPS, 1.0 - FOCAL_EPS)
    one_minus = ad.sub(1.0, pc)
    pos = ad.neg(ad.mul(ad.power(one_minus, gamma), ad.log(pc)))
    if paper_literal:
        neg = ad.neg(ad.mul(ad.power(ad.add(1.0, pc), gamma), ad.log(one_minus)))
        mixed = ad.add(ad.mul(yarr, pos), ad.mul(1.0 - yarr, neg))
    else:
        neg = ad.neg(ad.mul(ad.power(pc, gamma), ad.log(one_minus)))
        mixed = ad.mul(alpha, ad.add(ad.mul(yarr, pos), ad.mul(1.0 - yarr, neg)))
    return ad.tmean(mixed)


def _require_binary_head(model: Model):
    if "head.w" not in model.params or model.params["head.w"].data.shape[0] != 2:
        raise ConfigError("model needs a 2-class head for gloss classification")


def _stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(p.input_ids) for p in pairs)
    ids = np.full((len(pairs), width), PAD, dtype=np.int64)
    for r, p in enumerate(pairs):
        ids[r, : len(p.input_ids)] = p.input_ids
    return ids, ids != PAD


def lmgc_forward(model: Model, candidate_set: CandidateSet, train: bool = False, rng=None) -> Tensor:
    """Positive-class probability for each real candidate slot, in slot order.

    Pad slots are skipped entirely (they get no score); the caller aligns the
    returned vector with ``candidate_set.real_pairs()``.
    """
    _require_binary_head(model)
    real = candidate_set.real_pairs()
    if not real:
        raise ValidationError("candidate set has no real slots")
    ids, pad_mask = _stack_pairs(real)
    out = encode_batch(model, ids, pad_mask, train=train, rng=rng)
    probs2 = cls_head_forward(out.aggregate, model.params["head.w"], model.params["head.b"])
    return ad.reshape(ad.take_rows(ad.transpose(probs2), np.array([1])), (len(real),))


def lmgc_loss(probs: Tensor, labels, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean focal loss over the real slots."""
    return focal_loss(probs, np.asarray(labels, dtype=np.float64), gamma, alpha)


def lmgcm_loss(
    model: Model,
    candidate_set: CandidateSet,
    mask_seed,
    gamma: float = 2.0,
    alpha: float = 0.25,
    p_mask: float = 0.15,
    train: bool = False,
    rng=None,
) -> Tensor:
    """Focal loss on clean pairs plus summed MLM cross-entropy on corrupted copies.

    Both forwards share the model parameters; corruption follows the standard
    masking rules over sentence and gloss alike.
    """
    real = candidate_set.real_pairs()
    probs = lmgc_forward(model, candidate_set, train=train, rng=rng)
    loss = lmgc_loss(probs, [p.label for p in real], gamma, alpha)
    ids, pad_mask = _stack_pairs(real)
    batch = dynamic_mask(ids, p_mask, mask_seed, model.config.vocab_size, pad_mask=pad_mask)
    ce_mean, count = mlm_ce(model, batch, train=train, rng=rng)
    if count:
        loss = ad.add(loss, ad.scale(ce_mean, float(count)))
    return loss


def predict_sense(probs, candidate_set: CandidateSet) -> str:
    """Argmax over real candidates; ties resolve to the lowest slot index.

    The softmax over positive scores is monotone, so the argmax is taken on
    the probabilities directly. Pads are never scored, hence never chosen.
    """
    real = candidate_set.real_pairs()
    if not real:
        raise ValidationError("candidate set has no real slots")
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return real[int(np.argmax(arr))].sense_id


@dataclass
class WsdReport:
    rows: list  # dicts: dataset, instances, correct, f1
    pooled_f1: float
    missing_lemmas: list


def evaluate_wsd(
    model: Model,
    instances,
    inventory: SenseInventory,
    vocab,
    rules,
    max_len: int = 160,
) -> WsdReport:
    """Score instances; a prediction is correct iff it is one of the gold senses."""
    if not instances:
        raise ValidationError("no instances to evaluate")
    per_ds: dict[str, list[int]] = {}
    missing = []
    with no_tape():
        for inst in instances:
            stats = per_ds.setdefault(inst.dataset, [0, 0])
            stats[0] += 1
            try:
                cand = build_candidate_set(
                    inst, inventory, vocab, rules, max_len=max_len, inference=True
                )
            except ValidationError:
                missing.append(inst.lemma)
                log.warning("lemma %r missing from inventory; counted as wrong", inst.lemma)
                continue
            pred = predict_sense(lmgc_forward(model, cand), cand)
            if pred in inst.gold:
                stats[1] += 1
    rows = [
        {"dataset": ds, "instances": n, "correct": c, "f1": c / n}
        for ds, (n, c) in sorted(per_ds.items())
    ]
    total = sum(r["instances"] for r in rows)
    correct = sum(r["correct"] for r in rows)
    return WsdReport(rows=rows, pooled_f1=correct / total, missing_lemmas=missing)


@dataclass
class WsdTrainConfig:
    objective: str = "lmgc"  # "lmgc" | "lmgc-m"
    k: int = 8
    gamma: float = 2.0
    alpha: float = 0.25
    epochs: int = 3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_len: int = 160
    p_mask: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.objective not in ("lmgc", "lmgc-m"):
            raise ParameterError(f"objective must be lmgc or lmgc-m, got {self.objective!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def train_wsd(
    model: Model,
    instances,
    inventory: SenseInventory,
    vocab,
    rules,
    config: WsdTrainConfig,
) -> list[dict]:
    """Train gloss classification (optionally with the MLM co-objective)."""
    if not instances:
        raise ValidationError("no training instances")
    _require_binary_head(model)
    opt_state = AdamWState()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng(np.random.SeedSequence([config.seed, 13, epoch])).permutation(
            len(instances)
        )
        epoch_loss = 0.0
        for idx in order:
            inst = instances[int(idx)]
            cand_seed = int(
                np.random.SeedSequence([config.seed, 17, epoch, int(idx)]).generate_state(1)[0]
            )
            cand = build_candidate_set(
                inst, inventory, vocab, rules, k=config.k, rng_seed=cand_seed, max_len=config.max_len
            )
            with Tape() as tape:
                if config.objective == "lmgc":
                    probs = lmgc_forward(model, cand, train=True, rng=rng)
                    loss = lmgc_loss(
                        probs, [p.label for p in cand.real_pairs()], config.gamma, config.alpha
                    )
                else:
                    loss = lmgcm_loss(
                        model,
                        cand,
                        mask_seed=cand_seed + 1,
                        gamma=config.gamma,
                        alpha=config.alpha,
                        p_mask=config.p_mask,
                        train=True,
                        rng=rng,
                    )
            backward(loss, tape)
            adamw_step(
                model.params.tensors,
                model.params.grads(),
                opt_state,
                lr=config.lr,
                beta1=config.beta1,
                beta2=config.beta2,
                eps=config.eps,
                weight_decay=config.weight_decay,
            )
            model.params.zero_grads()
            epoch_loss += loss.item()
            step += 1
        history.append({"epoch": epoch, "step": step, "train_loss": epoch_loss / len(instances)})
        model.step = step
    return history


def wsd_mlm_ce(
    model: Model,
    instances,
    inventory: SenseInventory,
    vocab,
    rules,
    mask_seed: int,
    max_len: int = 160,
    p_mask: float = 0.15,
) -> float:
    """Mean MLM cross-entropy over corrupted context-gloss pairs (fixed masking seed)."""
    total, count = 0.0, 0
    with no_tape():
        for i, inst in enumerate(instances):
            cand = build_candidate_set(
                inst, inventory, vocab, rules, max_len=max_len, inference=True
            )
            ids, pad_mask = _stack_pairs(cand.real_pairs())
            batch = dynamic_mask(
                ids, p_mask, int(mask_seed) + i, model.config.vocab_size, pad_mask=pad_mask
            )
            ce_mean, n = mlm_ce(model, batch)
            if n:
                total += ce_mean.item() * n
                count += n
    if count == 0:
        raise ValidationError("no masked tokens in the MLM validation pairs")
    return total / count
