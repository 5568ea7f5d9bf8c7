"""Mini encoder-only transformer on the autodiff core.

Pre-layer-norm blocks, sinusoidal positions, full or windowed local-global
self-attention, an MLM projection tied to the token embedding, and optional
classification/regression heads. Everything runs in float64; weights start
from normal(0, 0.02) with zero biases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ValidationError

IGNORE_INDEX = -1


@dataclass
class ModelConfig:
    layers: int
    hidden: int
    heads: int
    ff_dim: int
    vocab_size: int
    max_seq: int = 160
    dropout: float = 0.1
    attention: str = "full"  # "full" | "windowed"
    window: int = 0
    global_positions: tuple = ()

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ParameterError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.attention not in ("full", "windowed"):
            raise ParameterError(f"unknown attention mode {self.attention!r}")
        if self.attention == "windowed":
            if self.window < 0:
                raise ParameterError("window must be >= 0")
            for g in self.global_positions:
                if not 0 <= g < self.max_seq:
                    raise ParameterError(f"global position {g} outside [0, {self.max_seq})")
        self.global_positions = tuple(self.global_positions)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "ff_dim": self.ff_dim,
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
            "dropout": self.dropout,
            "attention": self.attention,
            "window": self.window,
            "global_positions": list(self.global_positions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["global_positions"] = tuple(d.get("global_positions", ()))
        return cls(**d)


class ModelParams:
    """Named parameter tensors; iteration order is creation order (checkpoint order)."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.tensors.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.tensors.items()}
        )


@dataclass
class Model:
    """Bundle of config + parameters; ``vocab_hash`` ties it to a tokenizer."""

    config: ModelConfig
    params: ModelParams
    vocab_hash: str = ""
    step: int = 0
    _pos_cache: np.ndarray = field(default=None, repr=False, compare=False)

    def positions(self, s: int) -> np.ndarray:
        if self._pos_cache is None or self._pos_cache.shape[0] < s:
            self._pos_cache = sinusoidal_positions(self.config.max_seq, self.config.hidden)
        return self._pos_cache[:s]


@dataclass
class ForwardOutput:
    """hiddens[0] is the embedding stream, hiddens[i] the i-th block output."""

    hiddens: list
    final: Tensor
    aggregate: Tensor
    mlm_logits: Tensor = None
    mlm_positions: np.ndarray = None


def sinusoidal_positions(s: int, hidden: int) -> np.ndarray:
    """Interleaved sin/cos position table of shape (s, hidden)."""
    if hidden % 2 != 0:
        raise ParameterError(f"hidden size must be even for sin/cos pairs, got {hidden}")
    pos = np.arange(s, dtype=np.float64)[:, None]
    i = np.arange(hidden // 2, dtype=np.float64)[None, :]
    angle = pos * np.exp(-math.log(10000.0) * (2.0 * i) / hidden)
    table = np.empty((s, hidden), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def init_params(config: ModelConfig, rng: np.random.Generator, head: int = 0) -> ModelParams:
    """Fresh parameters; ``head`` > 0 adds a classification/regression head of that width."""
    H, F, V = config.hidden, config.ff_dim, config.vocab_size
    t = {}

    def w(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    t["embed"] = w((V, H))
    for i in range(config.layers):
        p = f"layers.{i}."
        t[p + "ln1.g"] = ones((H,))
        t[p + "ln1.b"] = zeros((H,))
        t[p + "wq"] = w((H, H))
        t[p + "bq"] = zeros((H,))
        t[p + "wk"] = w((H, H))
        t[p + "bk"] = zeros((H,))
        t[p + "wv"] = w((H, H))
        t[p + "bv"] = zeros((H,))
        t[p + "wo"] = w((H, H))
        t[p + "bo"] = zeros((H,))
        t[p + "ln2.g"] = ones((H,))
        t[p + "ln2.b"] = zeros((H,))
        t[p + "w1"] = w((H, F))
        t[p + "b1"] = zeros((F,))
        t[p + "w2"] = w((F, H))
        t[p + "b2"] = zeros((H,))
    t["ln_f.g"] = ones((H,))
    t["ln_f.b"] = zeros((H,))
    t["mlm_bias"] = zeros((V,))
    if head:
        t["head.w"] = w((head, H))
        t["head.b"] = zeros((head,))
    return ModelParams(t)


def add_head(model: Model, width: int, rng: np.random.Generator):
    """Attach a ``width``-way head (2*H + 2 extra parameters when width == 2)."""
    H = model.config.hidden
    model.params.tensors["head.w"] = Tensor(rng.normal(0.0, 0.02, size=(width, H)), requires_grad=True)
    model.params.tensors["head.b"] = Tensor(np.zeros(width), requires_grad=True)


def window_mask(s: int, w: int, global_positions=()) -> np.ndarray:
    """Boolean (s, s) mask: local band of half-width w plus global rows/columns."""
    if w < 0:
        raise ParameterError(f"window must be >= 0, got {w}")
    idx = np.arange(s)
    allowed = np.abs(idx[:, None] - idx[None, :]) <= w
    for g in global_positions:
        allowed[g, :] = True
        allowed[:, g] = True
    return allowed


def _combine_masks(scores_shape, pad_mask, allowed):
    """Merge a key-validity vector and an (s, s) pattern into one boolean mask."""
    s = scores_shape[-1]
    mask = None
    if pad_mask is not None:
        pm = np.asarray(pad_mask, dtype=bool)
        mask = np.broadcast_to(pm[..., None, :], pm.shape[:-1] + (s, s))
        while mask.ndim < len(scores_shape):
            mask = mask[None]
    if allowed is not None:
        al = np.asarray(allowed, dtype=bool)
        mask = al if mask is None else (mask & al)
    return mask


def attention(q, k, v, pad_mask=None, allowed=None) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d_k)) V with exact zeros on masked columns.

    Accepts (..., s, d) stacks; ``pad_mask`` is a boolean key-validity vector
    (..., s) and ``allowed`` an optional (s, s) attention pattern.
    """
    d_k = (q.data if isinstance(q, Tensor) else np.asarray(q)).shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_k))
    mask = _combine_masks(scores.shape, pad_mask, allowed)
    weights = ad.softmax_temperature(scores, 1.0, mask=mask)
    return ad.matmul(weights, v)


def windowed_attention(q, k, v, w: int, global_positions=(), pad_mask=None) -> Tensor:
    """Local-global attention: window of half-width w plus globally attending positions."""
    s = (q.data if isinstance(q, Tensor) else np.asarray(q)).shape[-2]
    return attention(q, k, v, pad_mask=pad_mask, allowed=window_mask(s, w, global_positions))


def _linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def encode_batch(
    model: Model,
    input_ids: np.ndarray,
    pad_mask: np.ndarray = None,
    train: bool = False,
    rng: np.random.Generator = None,
    inputs_embeds: Tensor = None,
) -> ForwardOutput:
    """Run the encoder stack over (B, s) token ids; ids must be < vocab_size.

    ``inputs_embeds`` (B, s, H) bypasses the embedding lookup; gradient
    checking differentiates end to end with respect to that stream.
    """
    cfg = model.config
    p = model.params
    ids = np.asarray(input_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, s = ids.shape
    if s > cfg.max_seq:
        raise ValidationError(f"sequence length {s} exceeds model max {cfg.max_seq}")
    if pad_mask is None:
        pad_mask = np.ones((B, s), dtype=bool)
    else:
        pad_mask = np.asarray(pad_mask, dtype=bool).reshape(B, s)
    drop = cfg.dropout if train else 0.0
    if drop > 0.0 and rng is None:
        raise ParameterError("training forward with dropout needs an rng")

    allowed = None
    if cfg.attention == "windowed":
        allowed = window_mask(s, cfg.window, [g for g in cfg.global_positions if g < s])

    if inputs_embeds is None:
        x = ad.reshape(ad.take_rows(p["embed"], ids.reshape(-1)), (B, s, cfg.hidden))
    else:
        x = inputs_embeds
    x = ad.add(x, model.positions(s)[None, :, :])
    hiddens = [x]
    A, dk = cfg.heads, cfg.head_dim

    for i in range(cfg.layers):
        pre = f"layers.{i}."
        h = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def split_heads(t):
            return ad.transpose(ad.reshape(t, (B, s, A, dk)), (0, 2, 1, 3))

        q = split_heads(_linear(h, p[pre + "wq"], p[pre + "bq"]))
        k = split_heads(_linear(h, p[pre + "wk"], p[pre + "bk"]))
        v = split_heads(_linear(h, p[pre + "wv"], p[pre + "bv"]))
        ctx = attention(q, k, v, pad_mask=pad_mask[:, None, :], allowed=allowed)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, s, cfg.hidden))
        ctx = _linear(ctx, p[pre + "wo"], p[pre + "bo"])
        if drop > 0.0:
            ctx = ad.dropout(ctx, drop, rng)
        x = ad.add(x, ctx)

        h2 = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        ff = _linear(ad.gelu(_linear(h2, p[pre + "w1"], p[pre + "b1"])), p[pre + "w2"], p[pre + "b2"])
        if drop > 0.0:
            ff = ad.dropout(ff, drop, rng)
        x = ad.add(x, ff)
        hiddens.append(x)

    final = ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    flat = ad.reshape(final, (B * s, cfg.hidden))
    aggregate = ad.take_rows(flat, np.arange(B) * s)
    return ForwardOutput(hiddens=hiddens, final=final, aggregate=aggregate)


def mlm_forward(
    model: Model,
    batch,
    train: bool = False,
    rng: np.random.Generator = None,
    inputs_embeds: Tensor = None,
) -> ForwardOutput:
    """Encoder stack plus tied-projection logits at the batch's corrupted positions."""
    out = encode_batch(
        model, batch.input_ids, batch.pad_mask, train=train, rng=rng, inputs_embeds=inputs_embeds
    )
    B, s = np.asarray(batch.input_ids).shape
    positions = np.flatnonzero(np.asarray(batch.target_ids).reshape(-1) != IGNORE_INDEX)
    if positions.size:
        flat = ad.reshape(out.final, (B * s, model.config.hidden))
        rows = ad.take_rows(flat, positions)
        logits = ad.add(ad.matmul(rows, ad.transpose(model.params["embed"])), model.params["mlm_bias"])
        out.mlm_logits = logits
        out.mlm_positions = positions
    return out


def cls_head_forward(aggregate, head_w: Tensor, head_b: Tensor, kind: str = "classify"):
    """softmax(C Wᵀ + B) for ``classify`` (K >= 2); raw value for ``regress`` (K == 1).

    Accepts a single aggregate vector (H,) or a batch (B, H).
    """
    k = head_w.data.shape[0]
    if kind == "classify" and k < 2:
        raise ParameterError(f"classification head needs K >= 2, got {k}")
    if kind == "regress" and k != 1:
        raise ParameterError(f"regression head needs K == 1, got {k}")
    if kind not in ("classify", "regress"):
        raise ParameterError(f"unknown head kind {kind!r}")
    data = aggregate.data if isinstance(aggregate, Tensor) else np.asarray(aggregate)
    single = data.ndim == 1
    if single:
        aggregate = ad.reshape(aggregate, (1, data.shape[0]))
    z = ad.add(ad.matmul(aggregate, ad.transpose(head_w)), head_b)
    out = z if kind == "regress" else ad.softmax_temperature(z, 1.0)
    return ad.reshape(out, (k,)) if single else out


def init_student_from(teacher: Model) -> Model:
    """Student with ceil(L/2) layers: keep the top layer and every second one below it.

    Weights (embeddings, retained blocks, final norm, MLM bias, any head) are
    copied bit for bit.
    """
    L = teacher.config.layers
    if L < 2:
        raise ParameterError(f"teacher must have at least 2 layers, got {L}")
    kept = sorted(range(L - 1, -1, -2))
    cfg = replace(teacher.config, layers=len(kept))
    src = teacher.params.tensors
    t = {}
    for name, tensor in src.items():
        if name.startswith("layers."):
            continue
        t[name] = Tensor(tensor.data.copy(), requires_grad=True)
    out = {}
    out["embed"] = t.pop("embed")
    for new_i, old_i in enumerate(kept):
        for name, tensor in src.items():
            prefix = f"layers.{old_i}."
            if name.startswith(prefix):
                out[f"layers.{new_i}." + name[len(prefix):]] = Tensor(
                    tensor.data.copy(), requires_grad=True
                )
    out.update(t)
    return Model(config=cfg, params=ModelParams(out), vocab_hash=teacher.vocab_hash)
