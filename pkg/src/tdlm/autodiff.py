"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` is a Wengert list: every differentiable operation executed while a
tape is active appends one record. ``backward`` replays the records in reverse
and accumulates gradients by summation, so gradient order is fixed by
execution order and results are deterministic. Tapes are tracked per thread;
independent tapes on different threads never interact as long as they do not
share parameter tensors.

All forward operations reject non-finite results: an overflow raises
``NumericsError`` instead of propagating NaN/Inf silently.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericsError, ParameterError, ShapeError, StateError, ValidationError

PROB_EPS = 1e-12  # probability clamp applied before any log

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    """The innermost tape on this thread, or None outside any tape context."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_tape:
    """Context that hides any enclosing tape (e.g. frozen teacher forwards)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _tape_stack().pop()
        return False


class Tensor:
    """Dense n-dimensional float64 array with optional gradient.

    ``data`` is row-major float64; ``grad`` (same shape) appears after a
    backward pass touches this tensor and accumulates across backward calls
    until cleared. Values are treated as immutable once the tensor has entered
    a tape; only optimizer steps mutate parameter data in place.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


@dataclass
class _TapeEntry:
    out: Tensor
    inputs: tuple
    backward_fn: object  # g_out -> tuple of grads aligned with inputs (None allowed)


class Tape:
    """Ordered record of differentiable operations; one backward per tape."""

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._spent = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._entries)


def _as_array(x):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _finite_or_raise(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")
    return arr


def _emit(op: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it on the active tape."""
    _finite_or_raise(out_data, op)
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if tape is not None and needs:
        tape._entries.append(_TapeEntry(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    out = da + db

    def bwd(g):
        return (_unbroadcast(g, da.shape), _unbroadcast(g, db.shape))

    return _emit("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    out = da - db

    def bwd(g):
        return (_unbroadcast(g, da.shape), _unbroadcast(-g, db.shape))

    return _emit("sub", out, (a, b), bwd)


def neg(a) -> Tensor:
    return _emit("neg", -_as_array(a), (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    out = da * db

    def bwd(g):
        return (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape))

    return _emit("mul", out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product with gradients to both operands; supports stacked dims."""
    da, db = _as_array(a), _as_array(b)
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-d operands, got {da.shape} x {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {da.shape} x {db.shape}")
    out = da @ db

    def bwd(g):
        ga = g @ db.swapaxes(-1, -2)
        gb = da.swapaxes(-1, -2) @ g
        return (_unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape))

    return _emit("matmul", out, (a, b), bwd)


def transpose(a, axes=None) -> Tensor:
    da = _as_array(a)
    if axes is None:
        axes = tuple(range(da.ndim - 2)) + (da.ndim - 1, da.ndim - 2)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _emit("transpose", np.transpose(da, axes), (a,), bwd)


def reshape(a, shape) -> Tensor:
    da = _as_array(a)
    orig = da.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _emit("reshape", da.reshape(shape), (a,), bwd)


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (duplicate indices sum)."""
    da = _as_array(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= da.shape[0]):
        raise IndexError(f"row index out of range for extent {da.shape[0]}")
    out = da[idx]

    def bwd(g):
        ga = np.zeros_like(da)
        np.add.at(ga, idx, g)
        return (ga,)

    return _emit("take_rows", out, (a,), bwd)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _as_array(a)
    out = da.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, da.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, da.shape).copy(),)

    return _emit("sum", out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _as_array(a)
    n = da.size if axis is None else da.shape[axis]
    out = da.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, da.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, da.shape).copy(),)

    return _emit("mean", out, (a,), bwd)


def log(a) -> Tensor:
    """Natural log with the package-wide probability clamp."""
    da = np.clip(_as_array(a), PROB_EPS, None)
    out = np.log(da)

    def bwd(g):
        mask = (_as_array(a) >= PROB_EPS).astype(np.float64)
        return (g * mask / da,)

    return _emit("log", out, (a,), bwd)


def exp(a) -> Tensor:
    with np.errstate(over="ignore"):  # the finiteness guard turns overflow into an error
        out = np.exp(_as_array(a))

    def bwd(g):
        return (g * out,)

    return _emit("exp", out, (a,), bwd)


def power(a, p: float) -> Tensor:
    """Elementwise a**p for real p; inputs are assumed nonnegative when p is fractional."""
    da = _as_array(a)
    out = np.power(da, p)

    def bwd(g):
        return (g * p * np.power(da, p - 1.0),)

    return _emit("power", out, (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    da = _as_array(a)
    out = np.clip(da, lo, hi)

    def bwd(g):
        inside = ((da >= lo) & (da <= hi)).astype(np.float64)
        return (g * inside,)

    return _emit("clip", out, (a,), bwd)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    da = _as_array(a)
    cdf = 0.5 * (1.0 + erf(da / math.sqrt(2.0)))
    out = da * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * da * da) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + da * pdf),)

    return _emit("gelu", out, (a,), bwd)


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask comes from ``rng`` so runs are seed-deterministic."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    da = _as_array(a)
    if p == 0.0:
        return _emit("dropout", da.copy(), (a,), lambda g: (g,))
    keep = (rng.random(da.shape) >= p).astype(np.float64) / (1.0 - p)

    def bwd(g):
        return (g * keep,)

    return _emit("dropout", da * keep, (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    da, dg, db = _as_array(a), _as_array(gain), _as_array(bias)
    mu = da.mean(axis=-1, keepdims=True)
    var = da.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (da - mu) * inv
    out = xhat * dg + db
    n = da.shape[-1]

    def bwd(g):
        gxhat = g * dg
        gvar = (gxhat * (da - mu) * (-0.5) * inv**3).sum(axis=-1, keepdims=True)
        gmu = (-gxhat * inv).sum(axis=-1, keepdims=True) + gvar * (-2.0 / n) * (da - mu).sum(
            axis=-1, keepdims=True
        )
        ga = gxhat * inv + gvar * 2.0 / n * (da - mu) + gmu / n
        ggain = _unbroadcast(g * xhat, dg.shape)
        gbias = _unbroadcast(g, db.shape)
        return (ga, ggain, gbias)

    return _emit("layer_norm", out, (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# probability ops
# ---------------------------------------------------------------------------

def softmax_temperature(z, temperature: float = 1.0, mask=None) -> Tensor:
    """Temperature softmax over the last axis.

    ``mask`` is an optional boolean array broadcastable to ``z``; False
    entries receive exactly zero probability and no gradient. A slice with no
    True entry is an error. Max-subtraction keeps the exponentials bounded.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    dz = _as_array(z)
    if dz.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    scaled = dz / temperature
    if mask is None:
        shifted = scaled - scaled.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), dz.shape)
        if not m.any(axis=-1).all():
            raise ValidationError("softmax mask leaves at least one slice fully masked")
        masked = np.where(m, scaled, -np.inf)
        shifted = masked - masked.max(axis=-1, keepdims=True)
        e = np.exp(shifted)  # exp(-inf) == 0.0 exactly, so masked lanes vanish
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner) / temperature,)

    return _emit("softmax", p, (z,), bwd)


def _check_distribution(arr: np.ndarray, name: str, tol: float = 1e-9):
    sums = arr.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=tol, rtol=0.0):
        raise ValidationError(f"{name} is not normalized (sum deviates by more than {tol})")
    if (arr < -tol).any():
        raise ValidationError(f"{name} has negative entries")


def cross_entropy(x, target, from_logits: bool = False) -> Tensor:
    """Cross-entropy −Σ_j y_j log p_j reduced over the last axis.

    ``target`` is either a class index (int or int array over the leading
    axes) or a distribution with the same trailing extent as ``x``; soft
    targets are what distillation feeds in. With ``from_logits`` the softmax
    is fused (log-sum-exp path); otherwise ``x`` holds probabilities and is
    clamped to [1e-12, 1] before the log. Leading axes are averaged so the
    result is a scalar. No gradient flows to the target.
    """
    dx = _as_array(x)
    n = dx.shape[-1]
    lead = dx.shape[:-1]
    count = int(np.prod(lead)) if lead else 1

    if isinstance(target, Tensor):
        target = target.data
    tarr = np.asarray(target)
    if tarr.dtype.kind in "iu" and (tarr.ndim == max(0, dx.ndim - 1)):
        if tarr.size and (tarr.min() < 0 or tarr.max() >= n):
            raise IndexError(f"class index out of range for {n} classes")
        y = np.zeros_like(dx)
        np.put_along_axis(y, tarr.astype(np.int64)[..., None], 1.0, axis=-1)
    else:
        y = np.asarray(tarr, dtype=np.float64)
        if y.shape != dx.shape:
            raise ShapeError(f"target shape {y.shape} does not match input shape {dx.shape}")
        _check_distribution(y, "target distribution")

    if from_logits:
        m = dx.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(dx - m).sum(axis=-1, keepdims=True))
        logp = dx - lse
        ce = -(y * logp).sum(axis=-1)
        p = np.exp(logp)

        def bwd_logits(g):  # output is scalar, so g is too
            return ((p - y) * (float(g) / count),)

        return _emit("cross_entropy", np.asarray(ce.mean()), (x,), bwd_logits)

    pc = np.clip(dx, PROB_EPS, 1.0)
    ce = -(y * np.log(pc)).sum(axis=-1)

    def bwd_probs(g):
        inside = ((dx >= PROB_EPS) & (dx <= 1.0)).astype(np.float64)
        return ((-y / pc) * inside * (float(g) / count),)

    return _emit("cross_entropy", np.asarray(ce.mean()), (x,), bwd_probs)


def kl_divergence(p, q, validate: bool = True) -> Tensor:
    """Kullback-Leibler divergence Σ_j p_j log(p_j/q_j) over the last axis.

    Both arguments must be probability vectors (sums within 1e-9) unless
    ``validate`` is off (finite-difference probes sit just off the simplex).
    Terms with p_j == 0 contribute exactly zero; elsewhere both operands are
    clamped to [1e-12, 1] before the log. Leading axes are averaged.
    """
    dp, dq = _as_array(p), _as_array(q)
    if dp.shape != dq.shape:
        raise ShapeError(f"kl_divergence shapes differ: {dp.shape} vs {dq.shape}")
    if validate:
        _check_distribution(dp, "p")
        _check_distribution(dq, "q")
    lead = dp.shape[:-1]
    count = int(np.prod(lead)) if lead else 1
    pc = np.clip(dp, PROB_EPS, 1.0)
    qc = np.clip(dq, PROB_EPS, 1.0)
    nonzero = dp > 0.0
    terms = np.where(nonzero, pc * (np.log(pc) - np.log(qc)), 0.0)
    out = terms.sum(axis=-1).mean()

    def bwd(g):
        scale = float(g) / count
        inside_p = ((dp >= PROB_EPS) & (dp <= 1.0)).astype(np.float64)
        inside_q = ((dq >= PROB_EPS) & (dq <= 1.0)).astype(np.float64)
        gp = np.where(nonzero, (np.log(pc) - np.log(qc) + 1.0) * inside_p, 0.0) * scale
        gq = np.where(nonzero, -pc / qc * inside_q, 0.0) * scale
        return (gp, gq)

    return _emit("kl_divergence", np.asarray(out), (p, q), bwd)


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    da = _as_array(a)

    def bwd(g):
        return (g * c,)

    return _emit("scale", da * c, (a,), bwd)


def mse(a, b) -> Tensor:
    """Mean of squared element differences; shapes must match exactly."""
    da, db = _as_array(a), _as_array(b)
    if da.shape != db.shape:
        raise ShapeError(f"mse shapes differ: {da.shape} vs {db.shape}")
    diff = da - db
    n = da.size
    out = np.asarray((diff * diff).sum() / n)

    def bwd(g):
        return (g * 2.0 * diff / n, g * (-2.0) * diff / n)

    return _emit("mse", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# backward pass and verification
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients are accumulated by summation in reverse tape order. A tensor's
    existing ``grad`` (from a previous backward on another tape) is added to,
    which is what micro-batch accumulation relies on.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._spent:
        raise StateError("tape already consumed by a previous backward")
    tape._spent = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape._entries):
        g_out = grads.pop(id(entry.out), None)
        holders.pop(id(entry.out), None)
        if g_out is None:
            continue
        in_grads = entry.backward_fn(g_out)
        for t, g in zip(entry.inputs, in_grads):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.array(g, dtype=np.float64, copy=True)
                holders[key] = t
    for key, t in holders.items():
        if t.requires_grad:
            t.grad = grads[key] if t.grad is None else t.grad + grads[key]


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def grad_check(f, inputs, h: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` takes the given tensors and returns a scalar Tensor; it must be
    deterministic across calls. Never raises for a mismatch, just reports.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ParameterError(f"step h must lie in [1e-7, 1e-4], got {h}")
    inputs = list(inputs)
    saved = [t.grad for t in inputs]
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = f(*inputs)
    backward(loss, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t, g in zip(inputs, saved):
        t.grad = g

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    """First/second moment estimates keyed like the parameter dict; t counts steps."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict,
    grads: dict,
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamWState:
    """One AdamW update in place: decoupled decay, then bias-corrected moments."""
    if lr <= 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    state.t += 1
    t = state.t
    for name in params:
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return state
