"""Multi-teacher knowledge distillation with confidence-weighted soft targets.

Per masked position, each teacher's softened prediction is weighted by its
(clamped) probability on the gold token, normalized across teachers; the
weighted mixture is the student's soft target. Every ``ground_truth_step``-th
step trains on hard labels instead. A hidden-feature MSE against the same
convex combination of teacher final states supplements the soft loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWState, PROB_EPS, Tape, Tensor, adamw_step, backward, no_tape
from .data import IGNORE_INDEX, make_batches, prefetch
from .errors import ConfigError, ParameterError, ValidationError
from .transformer import Model, mlm_forward


@dataclass
class DistillConfig:
    temperature: float = 2.5
    ground_truth_step: int = 100
    p_mask: float = 0.15
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    feature_weight: float = 1.0
    batch_size: int = 32
    accum_steps: int = 1
    max_steps: int = 1000
    seq_len: int = 64
    seed: int = 0
    val_interval: int = 100
    val_mask_seed: int = 1234
    prefetch_threads: int = 0  # >0 enables the producer thread

    def __post_init__(self):
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.ground_truth_step < 1:
            raise ParameterError(f"ground_truth_step must be >= 1, got {self.ground_truth_step}")
        if self.feature_weight < 0:
            raise ParameterError(f"feature_weight must be >= 0, got {self.feature_weight}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TeacherSet:
    """Frozen teacher models sharing one vocabulary and one hidden size."""

    models: list

    def __post_init__(self):
        if not self.models:
            raise ConfigError("TeacherSet needs at least one teacher")
        hashes = {m.vocab_hash for m in self.models}
        if len(hashes) > 1:
            raise ConfigError(f"teachers use different vocabularies: {sorted(hashes)}")
        widths = {m.config.hidden for m in self.models}
        if len(widths) > 1:
            raise ConfigError(f"teachers differ in hidden size: {sorted(widths)}")

    def __len__(self):
        return len(self.models)

    @property
    def hidden(self) -> int:
        return self.models[0].config.hidden

    @property
    def vocab_hash(self) -> str:
        return self.models[0].vocab_hash


def teacher_forward_all(teachers: TeacherSet, batch, temperature: float):
    """Frozen forward of every teacher on the corrupted batch.

    Returns (soft, hiddens): ``soft`` has shape (n, M, V) with
    temperature-softened distributions at the M masked positions, ``hiddens``
    shape (n, B, s, H) with final encoder states. Runs outside any tape.
    """
    soft = []
    hiddens = []
    with no_tape():
        for t in teachers.models:
            out = mlm_forward(t, batch, train=False)
            if out.mlm_logits is None:
                raise ValidationError("batch has no masked positions to distill on")
            z = out.mlm_logits.data / temperature
            z = z - z.max(axis=-1, keepdims=True)
            e = np.exp(z)
            soft.append(e / e.sum(axis=-1, keepdims=True))
            hiddens.append(out.final.data)
    return np.stack(soft), np.stack(hiddens)


def confidence_weights(teacher_dists, gold: int, paper_literal: bool = False) -> np.ndarray:
    """Per-teacher weights at one masked position.

    Default: softmax over teachers of -KL(onehot(gold) || dist), which reduces
    to each teacher's clamped gold-class probability renormalized across
    teachers. ``paper_literal`` instead returns the raw printed weights
    KL(dist || onehot(gold)) with clamping; those do not sum to one.
    """
    d = np.asarray(teacher_dists, dtype=np.float64)
    if d.ndim != 2:
        raise ValidationError(f"expected (n_teachers, vocab) distributions, got shape {d.shape}")
    if paper_literal:
        y = np.full(d.shape[-1], PROB_EPS)
        y[gold] = 1.0
        dc = np.clip(d, PROB_EPS, 1.0)
        return (dc * (np.log(dc) - np.log(y))).sum(axis=-1)
    g = np.clip(d[:, gold], PROB_EPS, 1.0)
    return g / g.sum()


def _weights_at_positions(soft: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Vectorized confidence weights: soft (n, M, V), gold (M,) -> (M, n)."""
    g = np.clip(soft[:, np.arange(gold.size), gold], PROB_EPS, 1.0)  # (n, M)
    return (g / g.sum(axis=0, keepdims=True)).T


def weighted_target(teacher_dists, weights) -> np.ndarray:
    """Convex combination of teacher distributions; stays a probability vector."""
    d = np.asarray(teacher_dists, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[0] != d.shape[0]:
        raise ValidationError(f"{w.shape[0]} weights for {d.shape[0]} teachers")
    return np.tensordot(w, d, axes=(0, 0))


def feature_target(teacher_hiddens, weights) -> np.ndarray:
    """Per-position convex combination of teacher hidden states.

    ``teacher_hiddens`` is (n, ..., H); ``weights`` is (..., n) aligned with
    the leading axes (uniform rows for positions without a masked target).
    """
    h = np.asarray(teacher_hiddens, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if h.shape[0] != w.shape[-1]:
        raise ConfigError(f"{w.shape[-1]} weight columns for {h.shape[0]} teachers")
    return np.einsum("...n,n...h->...h", w, h)


def build_soft_targets(teachers: TeacherSet, batch, temperature: float):
    """Teacher side of one distillation step: soft target mixture + feature target.

    Returns (y_target (M, V), h_target (B, s, H), gold (M,)).
    """
    soft, hiddens = teacher_forward_all(teachers, batch, temperature)
    targets = np.asarray(batch.target_ids)
    flat_positions = np.flatnonzero(targets.reshape(-1) != IGNORE_INDEX)
    gold = targets.reshape(-1)[flat_positions]
    w = _weights_at_positions(soft, gold)  # (M, n)
    y_target = np.einsum("mn,nmv->mv", w, soft)

    n = len(teachers)
    B, s, H = hiddens.shape[1:]
    w_full = np.full((B * s, n), 1.0 / n)
    w_full[flat_positions] = w
    h_target = feature_target(hiddens.reshape(n, B * s, H), w_full).reshape(B, s, H)
    return y_target, h_target, gold


def hard_loss(student_out, gold: np.ndarray) -> Tensor:
    """Ground-truth branch: plain cross-entropy on unsoftened logits."""
    return ad.cross_entropy(student_out.mlm_logits, gold, from_logits=True)


def soft_loss(student_out, y_target: np.ndarray, temperature: float) -> Tensor:
    """Distillation branch: CE against the weighted mixture at T, scaled by T^2."""
    scaled = ad.scale(student_out.mlm_logits, 1.0 / temperature)
    return ad.scale(ad.cross_entropy(scaled, y_target, from_logits=True), temperature**2)


def feature_loss(student_out, h_target: np.ndarray, pad_mask: np.ndarray, proj: dict) -> Tensor:
    """MSE between (projected) student final states and the teacher mixture.

    Only non-pad positions enter the mean. ``proj`` holds the learned
    H_s x H_t map when widths differ; empty means identity.
    """
    B, s, H = student_out.final.shape
    flat = ad.reshape(student_out.final, (B * s, H))
    valid = np.flatnonzero(np.asarray(pad_mask, dtype=bool).reshape(-1))
    rows = ad.take_rows(flat, valid)
    if proj:
        rows = ad.add(ad.matmul(rows, proj["w"]), proj["b"])
    target_rows = h_target.reshape(B * s, -1)[valid]
    return ad.mse(rows, target_rows)


def make_projection(student_hidden: int, teacher_hidden: int, rng) -> dict:
    """Feature projection params; identity (empty dict) when widths match."""
    if student_hidden == teacher_hidden:
        return {}
    return {
        "w": Tensor(rng.normal(0.0, 0.02, size=(student_hidden, teacher_hidden)), requires_grad=True),
        "b": Tensor(np.zeros(teacher_hidden), requires_grad=True),
    }


def _accumulate_distill_grads(
    student: Model,
    teachers: TeacherSet,
    batch,
    config: DistillConfig,
    step_index: int,
    proj: dict,
    rng: np.random.Generator,
    loss_scale: float = 1.0,
) -> tuple[float, str]:
    """Forward/backward for one micro-batch; gradients accumulate on the params."""
    ground_truth = step_index % config.ground_truth_step == 0
    if not ground_truth:
        y_target, h_target, gold = build_soft_targets(teachers, batch, config.temperature)

    with Tape() as tape:
        out = mlm_forward(student, batch, train=True, rng=rng)
        if ground_truth:
            targets = np.asarray(batch.target_ids).reshape(-1)
            gold = targets[targets != IGNORE_INDEX]
            loss = hard_loss(out, gold)
            branch = "gt"
        else:
            loss = soft_loss(out, y_target, config.temperature)
            if config.feature_weight > 0:
                f = feature_loss(out, h_target, batch.pad_mask, proj)
                loss = ad.add(loss, ad.scale(f, config.feature_weight))
            branch = "distill"
        scaled = loss if loss_scale == 1.0 else ad.scale(loss, loss_scale)
    backward(scaled, tape)
    return loss.item(), branch


def _optimizer_step(params: dict, opt_state: AdamWState, config: DistillConfig):
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()}
    adamw_step(
        params,
        grads,
        opt_state,
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    for t in params.values():
        t.grad = None


def _trainable_params(student: Model, proj: dict) -> dict:
    params = dict(student.params.tensors)
    for name, t in proj.items():
        params[f"distill_proj.{name}"] = t
    return params


def distill_step(
    student: Model,
    teachers: TeacherSet,
    batch,
    config: DistillConfig,
    step_index: int,
    opt_state: AdamWState,
    proj: dict,
    rng: np.random.Generator,
) -> tuple[float, str]:
    """One optimizer step of the distillation algorithm; returns (loss, branch)."""
    if step_index < 1:
        raise ParameterError(f"step_index starts at 1, got {step_index}")
    loss, branch = _accumulate_distill_grads(student, teachers, batch, config, step_index, proj, rng)
    _optimizer_step(_trainable_params(student, proj), opt_state, config)
    return loss, branch


def mlm_ce(model: Model, batch, train: bool = False, rng=None):
    """Mean cross-entropy over the batch's masked tokens as a Tensor, plus the count.

    This is the single code path behind both training-time MLM terms and
    validation CE, so the two are comparable by construction.
    """
    out = mlm_forward(model, batch, train=train, rng=rng)
    if out.mlm_logits is None:
        return None, 0
    targets = np.asarray(batch.target_ids).reshape(-1)
    gold = targets[targets != IGNORE_INDEX]
    return ad.cross_entropy(out.mlm_logits, gold, from_logits=True), int(gold.size)


def validate_ce(
    model: Model,
    documents,
    mask_seed: int,
    p_mask: float = 0.15,
    batch_size: int = 32,
    seq_len: int = 64,
) -> tuple[float, float]:
    """Mean masked-token cross-entropy at T=1 and PPL = exp(CE) on a fixed masking."""
    vocab_size = model.config.vocab_size
    total, count = 0.0, 0
    with no_tape():
        for batch in make_batches(documents, batch_size, seq_len, mask_seed, p_mask, vocab_size):
            ce, n = mlm_ce(model, batch)
            if n:
                total += ce.item() * n
                count += n
    if count == 0:
        raise ValidationError("validation corpus produced no masked tokens")
    mean_ce = total / count
    return mean_ce, math.exp(mean_ce)


def _batch_stream(documents, config: DistillConfig, vocab_size: int):
    """Endless masked-batch stream; masking is freshly seeded every epoch.

    Batches where the draw selected nothing to corrupt are skipped; the skip
    pattern is part of the seed-deterministic order.
    """
    epoch = 0
    while True:
        gen = make_batches(
            documents,
            config.batch_size,
            config.seq_len,
            config.seed,
            config.p_mask,
            vocab_size,
            epoch=epoch,
        )
        if config.prefetch_threads > 0:
            gen = prefetch(gen, capacity=2 * config.prefetch_threads)
        yielded = False
        for b in gen:
            yielded = True
            if (np.asarray(b.target_ids) != IGNORE_INDEX).any():
                yield b
        if not yielded:
            raise ValidationError("training corpus produced no batches")
        epoch += 1


def _maybe_validate(model, val_docs, config, k, row):
    if config.val_interval and (k % config.val_interval == 0 or k == config.max_steps):
        ce, ppl = validate_ce(
            model, val_docs, config.val_mask_seed,
            p_mask=config.p_mask, batch_size=config.batch_size, seq_len=config.seq_len,
        )
        row["val_ce"], row["val_ppl"] = ce, ppl


def train_distill(
    student: Model,
    teachers: TeacherSet,
    train_docs,
    val_docs,
    config: DistillConfig,
) -> list[dict]:
    """Run distillation over the masked-batch stream; returns the loss history.

    With ``accum_steps`` > 1 the loss is averaged over that many micro-batches
    before each optimizer step.
    """
    if student.vocab_hash != teachers.vocab_hash:
        raise ConfigError(
            f"student vocabulary {student.vocab_hash!r} does not match "
            f"teacher vocabulary {teachers.vocab_hash!r}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    proj = make_projection(student.config.hidden, teachers.hidden, rng)
    params = _trainable_params(student, proj)
    opt_state = AdamWState()
    history: list[dict] = []
    stream = _batch_stream(train_docs, config, student.config.vocab_size)
    accum = max(1, config.accum_steps)
    for k in range(1, config.max_steps + 1):
        losses = []
        branch = ""
        for _ in range(accum):
            loss, branch = _accumulate_distill_grads(
                student, teachers, next(stream), config, k, proj, rng, loss_scale=1.0 / accum
            )
            losses.append(loss)
        _optimizer_step(params, opt_state, config)
        row = {"step": k, "train_loss": sum(losses) / accum, "branch": branch,
               "val_ce": "", "val_ppl": ""}
        _maybe_validate(student, val_docs, config, k, row)
        history.append(row)
        student.step = k
    return history


def train_mlm(model: Model, train_docs, val_docs, config: DistillConfig) -> list[dict]:
    """Plain MLM training (the ground-truth branch only); used for teachers and baselines."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    opt_state = AdamWState()
    history: list[dict] = []
    stream = _batch_stream(train_docs, config, model.config.vocab_size)
    accum = max(1, config.accum_steps)
    for k in range(1, config.max_steps + 1):
        losses = []
        for _ in range(accum):
            batch = next(stream)
            with Tape() as tape:
                out = mlm_forward(model, batch, train=True, rng=rng)
                targets = np.asarray(batch.target_ids).reshape(-1)
                gold = targets[targets != IGNORE_INDEX]
                loss = hard_loss(out, gold)
                scaled = loss if accum == 1 else ad.scale(loss, 1.0 / accum)
            backward(scaled, tape)
            losses.append(loss.item())
        _optimizer_step(model.params.tensors, opt_state, config)
        row = {"step": k, "train_loss": sum(losses) / accum, "branch": "gt",
               "val_ce": "", "val_ppl": ""}
        _maybe_validate(model, val_docs, config, k, row)
        history.append(row)
        model.step = k
    return history
