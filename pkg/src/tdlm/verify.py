"""Finite-difference verification of the whole differentiable-op catalog."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .data import MaskedBatch
from .transformer import (
    Model,
    ModelConfig,
    attention,
    cls_head_forward,
    init_params,
    mlm_forward,
    windowed_attention,
)
from .wsd import focal_loss


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def gradient_check_catalog(h: float = 1e-6, seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per op, each against central differences."""
    rng = np.random.default_rng(seed)
    checks: dict[str, float] = {}

    a = _t(rng, 3, 4)
    b = _t(rng, 4, 2)
    checks["matmul"] = grad_check(lambda x, y: ad.tsum(ad.matmul(x, y)), [a, b], h)

    x = _t(rng, 2, 5)
    y = _t(rng, 2, 5)
    probe25 = rng.uniform(size=(2, 5))
    probe52 = rng.uniform(size=(5, 2))
    probe5 = rng.uniform(size=5)
    checks["add"] = grad_check(lambda u, v: ad.tsum(ad.mul(ad.add(u, v), probe25)), [x, y], h)
    checks["sub"] = grad_check(lambda u, v: ad.tsum(ad.mul(ad.sub(u, v), probe25)), [x, y], h)
    checks["mul"] = grad_check(lambda u, v: ad.tsum(ad.mul(u, v)), [x, y], h)
    checks["neg"] = grad_check(lambda u: ad.tsum(ad.mul(ad.neg(u), probe25)), [x], h)
    checks["scale"] = grad_check(lambda u: ad.tsum(ad.mul(ad.scale(u, 2.5), probe25)), [x], h)

    checks["transpose"] = grad_check(
        lambda u: ad.tsum(ad.mul(ad.transpose(u), probe52)), [x], h
    )
    checks["reshape"] = grad_check(
        lambda u: ad.tsum(ad.mul(ad.reshape(u, (5, 2)), probe52)), [x], h
    )
    emb = _t(rng, 6, 3)
    idx = np.array([0, 2, 2, 5])
    probe43 = rng.uniform(size=(4, 3))
    checks["take_rows"] = grad_check(
        lambda u: ad.tsum(ad.mul(ad.take_rows(u, idx), probe43)), [emb], h
    )

    checks["sum_axis"] = grad_check(
        lambda u: ad.tsum(ad.mul(ad.tsum(u, axis=0), probe5)), [x], h
    )
    checks["mean"] = grad_check(lambda u: ad.tmean(ad.mul(u, probe25)), [x], h)

    pos = _t(rng, 2, 6, lo=0.1, hi=2.0)
    checks["log"] = grad_check(lambda u: ad.tsum(ad.log(u)), [pos], h)
    small = _t(rng, 2, 6, lo=-1.5, hi=1.5)
    checks["exp"] = grad_check(lambda u: ad.tmean(ad.exp(u)), [small], h)
    frac = _t(rng, 2, 6, lo=0.1, hi=0.9)
    checks["power"] = grad_check(lambda u: ad.tsum(ad.power(u, 2.0)), [frac], h)
    checks["clip"] = grad_check(lambda u: ad.tsum(ad.mul(ad.clip(u, 0.2, 0.8), 3.0)), [frac], h)
    checks["gelu"] = grad_check(lambda u: ad.tsum(ad.gelu(u)), [small], h)
    checks["dropout"] = grad_check(
        lambda u: ad.tsum(ad.dropout(u, 0.3, np.random.default_rng(5))), [small], h
    )

    g = _t(rng, 6, lo=0.5, hi=1.5)
    bb = _t(rng, 6, lo=-0.2, hi=0.2)
    probe26 = rng.uniform(size=(2, 6))
    checks["layer_norm"] = grad_check(
        lambda u, gg, bbb: ad.tsum(ad.mul(ad.layer_norm(u, gg, bbb), probe26)),
        [small, g, bb],
        h,
    )

    z = _t(rng, 3, 7, lo=-2.0, hi=2.0)
    probe = rng.uniform(size=(3, 7))
    checks["softmax_t1"] = grad_check(
        lambda u: ad.tsum(ad.mul(ad.softmax_temperature(u, 1.0), probe)), [z], h
    )
    checks["softmax_t2.5"] = grad_check(
        lambda u: ad.tsum(ad.mul(ad.softmax_temperature(u, 2.5), probe)), [z], h
    )
    mask = rng.random((3, 7)) < 0.7
    mask[:, 0] = True
    checks["softmax_masked"] = grad_check(
        lambda u: ad.tsum(ad.mul(ad.softmax_temperature(u, 1.0, mask=mask), probe)), [z], h
    )

    logits = _t(rng, 4, 8, lo=-2.0, hi=2.0)
    classes = rng.integers(0, 8, size=4)
    checks["cross_entropy_logits"] = grad_check(
        lambda u: ad.cross_entropy(u, classes, from_logits=True), [logits], h
    )
    soft = rng.dirichlet(np.ones(8), size=4)
    checks["cross_entropy_soft"] = grad_check(
        lambda u: ad.cross_entropy(u, soft, from_logits=True), [logits], h
    )
    probs = _t(rng, 8, lo=0.05, hi=0.95)
    checks["cross_entropy_probs"] = grad_check(
        lambda u: ad.cross_entropy(u, 3, from_logits=False), [probs], h
    )

    p_raw = rng.uniform(0.1, 1.0, size=6)
    q_raw = rng.uniform(0.1, 1.0, size=6)
    p = Tensor(p_raw / p_raw.sum(), requires_grad=True)
    q = Tensor(q_raw / q_raw.sum(), requires_grad=True)
    checks["kl_divergence"] = grad_check(
        lambda u, v: ad.kl_divergence(u, v, validate=False), [p, q], h
    )

    m1 = _t(rng, 3, 4)
    m2 = _t(rng, 3, 4)
    checks["mse"] = grad_check(lambda u, v: ad.mse(u, v), [m1, m2], h)

    fp = _t(rng, 5, lo=0.1, hi=0.9)
    fy = rng.integers(0, 2, size=5)
    checks["focal_loss"] = grad_check(lambda u: focal_loss(u, fy, 2.0, 0.25), [fp], h)

    q4 = _t(rng, 4, 3)
    k4 = _t(rng, 4, 3)
    v4 = _t(rng, 4, 3)
    probe_att = rng.uniform(size=(4, 3))
    pad = np.array([True, True, True, False])
    checks["attention"] = grad_check(
        lambda qq, kk, vv: ad.tsum(ad.mul(attention(qq, kk, vv, pad_mask=pad), probe_att)),
        [q4, k4, v4],
        h,
    )
    checks["windowed_attention"] = grad_check(
        lambda qq, kk, vv: ad.tsum(
            ad.mul(windowed_attention(qq, kk, vv, w=1, global_positions=(0,), pad_mask=pad), probe_att)
        ),
        [q4, k4, v4],
        h,
    )

    cw = _t(rng, 3, 5)
    cb = _t(rng, 3, lo=-0.5, hi=0.5)
    agg = _t(rng, 2, 5)
    probe_head = rng.uniform(size=(2, 3))
    checks["cls_head"] = grad_check(
        lambda c, w, bs: ad.tsum(ad.mul(cls_head_forward(c, w, bs), probe_head)),
        [agg, cw, cb],
        h,
    )

    checks["transformer_mlm"] = _transformer_check(h, seed)
    return checks


def _transformer_check(h: float, seed: int) -> float:
    """End-to-end check of the full 2-layer stack (H=16, A=2, s=8).

    Differentiates the masked-LM loss with respect to the embedded input
    stream, so the numeric/analytic comparison exercises every backward op
    from logits down through both blocks. A fixed linear probe term keeps
    each input gradient bounded away from zero; otherwise elements whose
    true gradient falls below ~1e-7 are dominated by the one-ulp rounding
    noise of the central difference and the relative error measures noise,
    not backprop correctness. The probe is linear, so it is differentiated
    exactly by both sides and cannot mask a real gradient bug.
    """
    rng = np.random.default_rng(seed + 1)
    cfg = ModelConfig(
        layers=2, hidden=16, heads=2, ff_dim=24, vocab_size=24, max_seq=8, dropout=0.0
    )
    model = Model(config=cfg, params=init_params(cfg, rng), vocab_hash="check")
    ids = rng.integers(7, cfg.vocab_size, size=(1, 8))
    masked = [1, 2, 5, 7]
    target_ids = np.full((1, 8), -1, dtype=np.int64)
    target_ids[0, masked] = ids[0, masked]
    input_ids = ids.copy()
    input_ids[0, masked] = 4  # MASK
    batch = MaskedBatch(
        input_ids=input_ids,
        target_ids=target_ids,
        pad_mask=np.ones((1, 8), dtype=bool),
        seed=0,
    )
    gold = target_ids.reshape(-1)
    gold = gold[gold >= 0]
    stream = Tensor(rng.normal(0.0, 0.5, size=(1, 8, cfg.hidden)), requires_grad=True)
    signs = np.where(rng.random((1, 8, cfg.hidden)) < 0.5, -1.0, 1.0)
    probe = signs * rng.uniform(0.1, 0.2, size=(1, 8, cfg.hidden))

    def loss_fn(x):
        out = mlm_forward(model, batch, inputs_embeds=x)
        ce = ad.cross_entropy(out.mlm_logits, gold, from_logits=True)
        return ad.add(ce, ad.tsum(ad.mul(x, probe)))

    return grad_check(loss_fn, [stream], h)
