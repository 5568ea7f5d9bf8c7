"""Machine-paraphrase detection: averaged word vectors, classical classifiers
with grid search, a transformer fine-tuning path, and a synthetic spinner.

Texts are lowercased and whitespace-split before averaging. All three
classifiers are trained from scratch (full-batch optimizers over numpy), so
grid axes map onto this package's own optimizer variants rather than external
solver names.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import AdamWState, Tape, adamw_step, backward, no_tape
from .errors import FormatError, ParameterError, ValidationError
from .metrics import f1_micro
from .tokenizer import CLS, PAD, SEP, encode
from .transformer import Model, encode_batch

log = logging.getLogger(__name__)

LOGREG_SOLVERS = ("gd", "momentum", "backtracking", "momentum+backtracking")


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

@dataclass
class WordVectorTable:
    dim: int
    vectors: dict

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, word):
        return word in self.vectors


def load_word_vectors(path) -> WordVectorTable:
    """Parse "word f1 ... fD" lines; the first line fixes the dimension."""
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            word, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise FormatError(f"no vector components at line {lineno}")
            if len(values) != dim:
                raise FormatError(
                    f"line {lineno} has {len(values)} components, expected {dim}"
                )
            if word in vectors:
                log.warning("duplicate word %r at line %d; keeping the last occurrence", word, lineno)
            try:
                vectors[word] = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as e:
                raise FormatError(f"non-numeric component at line {lineno}") from e
    if not vectors:
        raise ValidationError(f"word vector file {path} is empty")
    return WordVectorTable(dim=dim, vectors=vectors)


class EmbedResult(NamedTuple):
    vector: np.ndarray
    all_oov: bool


def simple_tokens(text: str) -> list[str]:
    return text.lower().split()


def embed_average(tokens, table: WordVectorTable) -> EmbedResult:
    """Mean vector of in-vocabulary tokens; all-OOV yields a flagged zero vector."""
    hits = [table.vectors[t] for t in tokens if t in table.vectors]
    if not hits:
        return EmbedResult(np.zeros(table.dim), True)
    return EmbedResult(np.mean(hits, axis=0), False)


@dataclass
class FeatureMatrix:
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) in {0, 1}

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("feature matrix contains non-finite rows")
        if not set(np.unique(self.labels)) <= {0, 1}:
            raise ValidationError("labels must be 0 (original) or 1 (paraphrased)")


def build_features(samples, table: WordVectorTable) -> FeatureMatrix:
    """Average-embed labeled samples ({"text", "label"} dicts)."""
    feats, labels = [], []
    for s in samples:
        feats.append(embed_average(simple_tokens(s["text"]), table).vector)
        labels.append(int(s["label"]))
    return FeatureMatrix(np.asarray(feats), np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------

def _with_bias(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _check_two_classes(y: np.ndarray):
    classes = set(np.unique(y))
    if classes != {0, 1}:
        raise ValidationError(f"training data must contain both classes, got {sorted(classes)}")


@dataclass
class LogisticRegression:
    weights: np.ndarray  # (D+1,), bias last

    def decision(self, X) -> np.ndarray:
        return _with_bias(np.asarray(X)) @ self.weights

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision(X))

    def predict(self, X) -> np.ndarray:
        return (self.decision(X) >= 0.0).astype(np.int64)


def _logloss_and_grad(w, Xb, y01, l2):
    z = Xb @ w
    # log(1 + exp(-m)) evaluated stably for both signs
    m = np.where(y01 == 1, z, -z)
    loss = float(np.mean(np.logaddexp(0.0, -m)))
    penalty = w.copy()
    penalty[-1] = 0.0  # intercept is not regularized
    loss += 0.5 * l2 * float(penalty @ penalty)
    grad = Xb.T @ (expit(z) - y01) / len(y01) + l2 * penalty
    return loss, grad


def train_logreg(
    X,
    y,
    lr: float = 0.5,
    tolerance: float = 1e-4,
    max_iter: int = 500,
    l2: float = 0.0,
    solver: str = "gd",
    multinomial: bool = False,
) -> LogisticRegression:
    """Full-batch gradient descent on L2-regularized log-loss.

    ``solver`` picks an optimizer variant (momentum and/or backtracking line
    search); ``multinomial`` trains a two-class softmax instead of a single
    sigmoid and stores the equivalent weight difference. Stops when the loss
    improves by less than ``tolerance``.
    """
    if solver not in LOGREG_SOLVERS:
        raise ParameterError(f"unknown solver {solver!r}; options: {LOGREG_SOLVERS}")
    X = np.asarray(X, dtype=np.float64)
    y01 = np.asarray(y, dtype=np.float64)
    if len(X) < 2:
        raise ValidationError("need at least two training samples")
    _check_two_classes(y01)
    Xb = _with_bias(X)

    # A two-class softmax over rows (w0, w1) scores with d = w1 - w0; from zero
    # init its gradient steps move d twice as fast as the sigmoid path moves w
    # (exact at l2=0), so train the sigmoid weights at 2*lr and store (D+1) values.
    effective_lr = lr * 2.0 if multinomial else lr

    momentum = "momentum" in solver
    backtracking = "backtracking" in solver
    w = np.zeros(Xb.shape[1])
    velocity = np.zeros_like(w)
    loss, grad = _logloss_and_grad(w, Xb, y01, l2)
    for _ in range(max_iter):
        direction = grad if not momentum else (velocity * 0.9 + grad)
        if momentum:
            velocity = direction
        step = effective_lr
        if backtracking:
            while step > 1e-12:
                cand = w - step * direction
                new_loss, new_grad = _logloss_and_grad(cand, Xb, y01, l2)
                if new_loss <= loss:
                    break
                step *= 0.5
            else:
                break
        else:
            cand = w - step * direction
            new_loss, new_grad = _logloss_and_grad(cand, Xb, y01, l2)
        improved = loss - new_loss
        w, loss, grad = cand, new_loss, new_grad
        if abs(improved) < tolerance:
            break
    return LogisticRegression(weights=w)


@dataclass
class GaussianNB:
    means: np.ndarray  # (2, D)
    variances: np.ndarray  # (2, D), floored
    priors: np.ndarray  # (2,)

    VAR_FLOOR = 1e-9

    def log_posteriors(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty((len(X), 2))
        for c in range(2):
            var = self.variances[c]
            ll = -0.5 * (np.log(2.0 * np.pi * var) + (X - self.means[c]) ** 2 / var).sum(axis=1)
            out[:, c] = ll + np.log(self.priors[c])
        return out

    def predict_proba(self, X) -> np.ndarray:
        lp = self.log_posteriors(X)
        lp -= lp.max(axis=1, keepdims=True)
        e = np.exp(lp)
        return (e / e.sum(axis=1, keepdims=True))[:, 1]

    def predict(self, X) -> np.ndarray:
        lp = self.log_posteriors(X)
        return (lp[:, 1] > lp[:, 0]).astype(np.int64)


def train_nb(X, y) -> GaussianNB:
    """Closed-form Gaussian naive Bayes with a variance floor."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_two_classes(y)
    means = np.stack([X[y == c].mean(axis=0) for c in (0, 1)])
    variances = np.stack(
        [np.maximum(X[y == c].var(axis=0), GaussianNB.VAR_FLOOR) for c in (0, 1)]
    )
    priors = np.array([(y == 0).mean(), (y == 1).mean()])
    return GaussianNB(means=means, variances=variances, priors=priors)


@dataclass
class LinearSVM:
    weights: np.ndarray  # (D+1,), bias last

    def decision(self, X) -> np.ndarray:
        return _with_bias(np.asarray(X)) @ self.weights

    def predict(self, X) -> np.ndarray:
        return (self.decision(X) >= 0.0).astype(np.int64)


def _svm_objective(w, Xb, ysign, lam):
    margins = 1.0 - ysign * (Xb @ w)
    hinge = np.maximum(margins, 0.0).mean()
    reg = w.copy()
    reg[-1] = 0.0
    return hinge + 0.5 * lam * float(reg @ reg)


def train_linear_svm(X, y, C: float = 1.0, tolerance: float = 1e-4, max_iter: int = 1000) -> LinearSVM:
    """Primal hinge loss with ridge weight 1/(2C), deterministic subgradient descent.

    Uses the parameter-free 1/(lam*t) schedule with norm projection and
    averaged iterates; the mean-hinge objective makes decisions invariant to
    duplicating the training set.
    """
    if C <= 0:
        raise ParameterError(f"C must be positive, got {C}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_two_classes(y)
    Xb = _with_bias(X)
    ysign = np.where(y == 1, 1.0, -1.0)
    lam = 1.0 / C
    w = np.zeros(Xb.shape[1])
    avg = np.zeros_like(w)
    prev_obj = _svm_objective(avg, Xb, ysign, lam)
    radius = 1.0 / np.sqrt(lam)
    for t in range(1, max_iter + 1):
        margins = ysign * (Xb @ w)
        violating = margins < 1.0
        sub = -(ysign[violating, None] * Xb[violating]).sum(axis=0) / len(ysign)
        sub[:-1] += lam * w[:-1]
        eta = 1.0 / (lam * t)
        w = w - eta * sub
        norm = np.linalg.norm(w[:-1])
        if norm > radius:
            w[:-1] *= radius / norm
        avg = avg + (w - avg) / t
        if t % 10 == 0:
            obj = _svm_objective(avg, Xb, ysign, lam)
            if abs(prev_obj - obj) < tolerance:
                break
            prev_obj = obj
    return LinearSVM(weights=avg)


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

@dataclass
class GridSpec:
    """Named axes in evaluation order, each a finite value list."""

    axes: dict

    def __post_init__(self):
        if not self.axes or any(len(v) == 0 for v in self.axes.values()):
            raise ParameterError("GridSpec needs at least one non-empty axis")

    def cells(self):
        names = list(self.axes)
        for combo in itertools.product(*(self.axes[n] for n in names)):
            yield dict(zip(names, combo))

    def size(self) -> int:
        out = 1
        for v in self.axes.values():
            out *= len(v)
        return out


def default_logreg_grid() -> GridSpec:
    """The 4 x 3 x 2 x 4 logistic-regression search grid (96 cells)."""
    return GridSpec(
        axes={
            "solver": list(LOGREG_SOLVERS),
            "max_iter": [500, 1000, 1500],
            "multinomial": [False, True],
            "tolerance": [0.01, 0.001, 0.0001, 0.00001],
        }
    )


def default_svm_grid() -> GridSpec:
    return GridSpec(axes={"C": [1, 10, 100], "tolerance": [0.01, 0.001, 0.0001, 0.00001]})


def grid_search(trainer, grid: GridSpec, X_train, y_train, X_val, y_val, metric=f1_micro):
    """Exhaustively evaluate the Cartesian product in axis order.

    ``trainer(config, X, y)`` must return a classifier with ``predict``.
    Returns (best_config, results) where results rows carry the config plus
    its score; ties keep the earliest cell.
    """
    best_cfg, best_score = None, -np.inf
    results = []
    for cfg in grid.cells():
        clf = trainer(cfg, X_train, y_train)
        score = metric(clf.predict(X_val), y_val)
        results.append({**cfg, "score": score})
        if score > best_score:
            best_cfg, best_score = cfg, score
    return best_cfg, results


def logreg_trainer(cfg: dict, X, y) -> LogisticRegression:
    return train_logreg(
        X,
        y,
        solver=cfg.get("solver", "gd"),
        max_iter=cfg.get("max_iter", 500),
        multinomial=cfg.get("multinomial", False),
        tolerance=cfg.get("tolerance", 1e-4),
        lr=cfg.get("lr", 0.5),
        l2=cfg.get("l2", 0.0),
    )


# ---------------------------------------------------------------------------
# synthetic paraphrasing and fine-tuning
# ---------------------------------------------------------------------------

def load_labeled_paragraphs(path) -> list[dict]:
    """Parse JSON-Lines {"text","label","source"} samples."""
    import json

    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                label = int(obj["label"])
                text = str(obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"bad paragraph record at line {lineno}: {e}") from e
            if label not in (0, 1):
                raise FormatError(f"label must be 0 or 1 at line {lineno}")
            out.append({"text": text, "label": label, "source": obj.get("source", "")})
    if not out:
        raise ValidationError(f"no labeled paragraphs in {path}")
    return out


def load_synonyms(path) -> dict:
    """Parse a JSON object mapping word -> list of synonyms."""
    import json

    with open(path, encoding="utf-8") as fh:
        table = json.load(fh)
    if not isinstance(table, dict) or not all(isinstance(v, list) for v in table.values()):
        raise FormatError(f"{path} must map words to synonym lists")
    return {str(k).lower(): [str(s) for s in v] for k, v in table.items() if v}


def synth_paraphrase(paragraphs, synonym_table: dict, replace_ratio: float, seed=0):
    """Spin each paragraph into an original/paraphrased labeled pair.

    Every word with an entry in ``synonym_table`` is independently replaced
    with probability ``replace_ratio`` by one of its synonyms. Returns
    (samples, realized_ratio) where samples follow the labeled-paragraph
    schema and the ratio counts replacements over replaceable words.
    """
    if not 0.0 < replace_ratio < 1.0:
        raise ParameterError(f"replace_ratio must lie in (0, 1), got {replace_ratio}")
    if not synonym_table:
        raise ValidationError("synonym table is empty")
    rng = np.random.default_rng(seed)
    samples = []
    replaceable = 0
    replaced = 0
    for text in paragraphs:
        words = text.split()
        spun = []
        for word in words:
            options = synonym_table.get(word.lower())
            if options:
                replaceable += 1
                if rng.random() < replace_ratio:
                    replaced += 1
                    spun.append(str(options[rng.integers(len(options))]))
                    continue
            spun.append(word)
        samples.append({"text": text, "label": 0, "source": "original"})
        samples.append({"text": " ".join(spun), "label": 1, "source": "synth"})
    realized = replaced / replaceable if replaceable else 0.0
    return samples, realized


def finetune_classifier(
    model: Model,
    samples,
    vocab,
    rules,
    epochs: int = 1,
    lr: float = 2e-5,
    batch_size: int = 8,
    seed: int = 0,
    val_fraction: float = 0.25,
    freeze_encoder: bool = False,
) -> tuple[float, list]:
    """Fine-tune the 2-class head (optionally the encoder too) on labeled paragraphs.

    Returns (held-out F1-micro, per-epoch history). With ``epochs=0`` the
    model is untouched and only evaluated.
    """
    if not samples:
        raise ValidationError("no labeled paragraphs")
    if "head.w" not in model.params:
        raise ParameterError("model needs a classification head; call add_head first")
    s = model.config.max_seq
    ids = np.full((len(samples), s), PAD, dtype=np.int64)
    labels = np.empty(len(samples), dtype=np.int64)
    for i, sample in enumerate(samples):
        toks = encode(sample["text"], vocab, rules)[: s - 2]
        row = [CLS] + toks + [SEP]
        ids[i, : len(row)] = row
        labels[i] = int(sample["label"])
    pad_mask = ids != PAD

    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    order = rng.permutation(len(samples))
    n_val = max(1, int(len(samples) * val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        raise ValidationError("no samples left for training after the validation split")

    head_names = [n for n in model.params.names() if n.startswith("head.")]
    trained = head_names if freeze_encoder else model.params.names()
    params = {n: model.params[n] for n in trained}
    opt_state = AdamWState()
    history = []
    for epoch in range(epochs):
        eorder = np.random.default_rng(np.random.SeedSequence([seed, 29, epoch])).permutation(
            train_idx
        )
        total = 0.0
        for start in range(0, len(eorder), batch_size):
            rows = eorder[start : start + batch_size]
            with Tape() as tape:
                out = encode_batch(model, ids[rows], pad_mask[rows], train=True, rng=rng)
                logits = ad.add(
                    ad.matmul(out.aggregate, ad.transpose(model.params["head.w"])),
                    model.params["head.b"],
                )
                loss = ad.cross_entropy(logits, labels[rows], from_logits=True)
            backward(loss, tape)
            grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for n, t in params.items()}
            adamw_step(params, grads, opt_state, lr=lr)
            model.params.zero_grads()
            total += loss.item() * len(rows)
        history.append({"epoch": epoch, "train_loss": total / len(eorder)})

    preds = []
    with no_tape():
        for start in range(0, len(val_idx), batch_size):
            rows = val_idx[start : start + batch_size]
            out = encode_batch(model, ids[rows], pad_mask[rows], train=False)
            z = (out.aggregate.data @ model.params["head.w"].data.T) + model.params["head.b"].data
            preds.extend(np.argmax(z, axis=1).tolist())
    return f1_micro(np.asarray(preds), labels[val_idx]), history
