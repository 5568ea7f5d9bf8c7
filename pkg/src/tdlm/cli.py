"""Command-line surface tying the experiments together.

Every command takes ``--seed``, ``--config`` (a JSON tree), and ``--out-dir``.
Any other ``--dotted.path value`` flag overrides the matching config entry.
Each run locks its output directory, echoes the fully resolved configuration
to ``resolved_config.json`` (valid input for an identical rerun), and keeps
timestamps out of every artifact except ``run.log``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import paraphrase as mpp
from .checkpoint import load_checkpoint, save_checkpoint
from .data import encode_documents, load_corpus
from .distill import DistillConfig, TeacherSet, train_distill, train_mlm, validate_ce
from .errors import TdlmError
from .metrics import f1_micro
from .paraphrase import (
    FeatureMatrix,
    GridSpec,
    build_features,
    default_logreg_grid,
    default_svm_grid,
    finetune_classifier,
    grid_search,
    load_labeled_paragraphs,
    load_synonyms,
    load_word_vectors,
    logreg_trainer,
    synth_paraphrase,
    train_linear_svm,
    train_logreg,
    train_nb,
)
from .tokenizer import bpe_train, load_tokenizer, save_tokenizer, vocab_hash
from .transformer import Model, ModelConfig, add_head, init_params, init_student_from
from .verify import gradient_check_catalog
from .wsd import (
    WsdTrainConfig,
    evaluate_wsd,
    load_sense_inventory,
    load_wsd_instances,
    train_wsd,
    wsd_mlm_ce,
)

log = logging.getLogger(__name__)

COMMANDS = {}

DEFAULT_MODEL = {
    "layers": 2,
    "hidden": 64,
    "heads": 4,
    "ff_dim": 128,
    "vocab_size": 512,
    "max_seq": 64,
    "dropout": 0.1,
    "attention": "full",
    "window": 0,
    "global_positions": [],
}


def command(name):
    def register(fn):
        COMMANDS[name] = fn
        return fn

    return register


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(cfg: dict, path: str, value):
    keys = path.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise UsageError(f"config path {path!r} crosses a non-dict entry")
    node[keys[-1]] = value


class UsageError(Exception):
    pass


def _parse_overrides(tokens: list[str]) -> dict:
    """Turn leftover ``--dotted.path value`` pairs into a nested dict."""
    out: dict = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unknown flag {tok!r}")
        path = tok[2:]
        if "=" in path:
            path, raw = path.split("=", 1)
        else:
            i += 1
            if i >= len(tokens):
                raise UsageError(f"flag {tok!r} needs a value")
            raw = tokens[i]
        _set_dotted(out, path, _parse_value(raw))
        i += 1
    return out


def _deep_update(base: dict, override: dict) -> dict:
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _resolve_config(args, extra: list[str]) -> dict:
    cfg: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    _deep_update(cfg, _parse_overrides(extra))
    run = cfg.setdefault("run", {})
    if args.seed is not None:
        run["seed"] = args.seed
    run.setdefault("seed", 0)
    if getattr(args, "threads", None) is not None:
        run["threads"] = args.threads
    run.setdefault("threads", 1)
    return cfg


def _write_csv(path, rows: list[dict], fieldnames=None):
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _load_tok(cfg):
    data = cfg.get("data", {})
    return load_tokenizer(data["vocab"], data["merges"], lowercase=data.get("lowercase", True))


def _load_docs(path, vocab, rules):
    return encode_documents(load_corpus(path), vocab, rules)


def _model_config(cfg) -> ModelConfig:
    merged = dict(DEFAULT_MODEL)
    merged.update(cfg.get("model", {}))
    return ModelConfig.from_dict(merged)


def _train_config(cfg) -> DistillConfig:
    params = dict(cfg.get("train", {}))
    params["seed"] = cfg["run"]["seed"]
    if cfg["run"].get("threads", 1) > 1:
        params.setdefault("prefetch_threads", cfg["run"]["threads"] - 1)
    return DistillConfig(**params)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@command("tokenizer-train")
def cmd_tokenizer_train(cfg, out_dir: Path) -> int:
    data = cfg["data"]
    docs = load_corpus(data["corpus"])
    lines = [line for doc in docs for line in doc]
    vocab, rules = bpe_train(lines, data["vocab_size"], lowercase=data.get("lowercase", True))
    save_tokenizer(vocab, rules, out_dir / "vocab.txt", out_dir / "merges.txt")
    print(f"trained vocabulary of {len(vocab)} tokens with {len(rules)} merges")
    return 0


@command("pretrain-mlm")
def cmd_pretrain_mlm(cfg, out_dir: Path) -> int:
    vocab, rules = _load_tok(cfg)
    data = cfg["data"]
    train_docs = _load_docs(data["corpus"], vocab, rules)
    val_docs = _load_docs(data.get("val_corpus", data["corpus"]), vocab, rules)
    mcfg = _model_config(cfg)
    seed = cfg["run"]["seed"]
    model = Model(
        config=mcfg,
        params=init_params(mcfg, np.random.default_rng(np.random.SeedSequence([seed, 3]))),
        vocab_hash=vocab_hash(vocab),
    )
    history = train_mlm(model, train_docs, val_docs, _train_config(cfg))
    _write_csv(out_dir / "losses.csv", history, ["step", "train_loss", "branch", "val_ce", "val_ppl"])
    save_checkpoint(model, out_dir / "checkpoint.tdlm")
    if history:
        print(f"final train loss {history[-1]['train_loss']:.4f}")
    return 0


@command("distill")
def cmd_distill(cfg, out_dir: Path) -> int:
    vocab, rules = _load_tok(cfg)
    data = cfg["data"]
    run = cfg["run"]
    teachers = TeacherSet([load_checkpoint(p) for p in run["teachers"]])
    init_mode = run.get("student_init", "layer-removal")
    seed = run["seed"]
    if run.get("student_checkpoint"):
        student = load_checkpoint(run["student_checkpoint"])
    elif init_mode == "layer-removal":
        student = init_student_from(teachers.models[0])
    elif init_mode == "scratch":
        mcfg = _model_config(cfg)
        student = Model(
            config=mcfg,
            params=init_params(mcfg, np.random.default_rng(np.random.SeedSequence([seed, 3]))),
            vocab_hash=teachers.vocab_hash,
        )
    else:
        raise UsageError(f"unknown student_init {init_mode!r}")
    train_docs = _load_docs(data["corpus"], vocab, rules)
    val_docs = _load_docs(data.get("val_corpus", data["corpus"]), vocab, rules)
    history = train_distill(student, teachers, train_docs, val_docs, _train_config(cfg))
    _write_csv(out_dir / "losses.csv", history, ["step", "train_loss", "branch", "val_ce", "val_ppl"])
    save_checkpoint(student, out_dir / "student.tdlm")
    if history:
        print(f"final train loss {history[-1]['train_loss']:.4f}")
    else:
        print("no training steps requested; wrote the initialized student unchanged")
    return 0


@command("eval-ppl")
def cmd_eval_ppl(cfg, out_dir: Path) -> int:
    vocab, rules = _load_tok(cfg)
    data = cfg["data"]
    ev = cfg.get("eval", {})
    model = load_checkpoint(cfg["run"]["checkpoint"])
    docs = _load_docs(data["corpus"], vocab, rules)
    ce, ppl = validate_ce(
        model,
        docs,
        mask_seed=ev.get("mask_seed", 1234),
        p_mask=ev.get("p_mask", 0.15),
        batch_size=ev.get("batch_size", 32),
        seq_len=ev.get("seq_len", model.config.max_seq),
    )
    _write_csv(out_dir / "metrics.csv", [{"val_ce": ce, "val_ppl": ppl}])
    print(f"validation CE {ce:.6f}  PPL {ppl:.4f}")
    return 0


def _wsd_model(cfg, vocab) -> Model:
    run = cfg["run"]
    seed = run["seed"]
    if run.get("checkpoint"):
        model = load_checkpoint(run["checkpoint"])
    else:
        mcfg = _model_config(cfg)
        model = Model(
            config=mcfg,
            params=init_params(mcfg, np.random.default_rng(np.random.SeedSequence([seed, 3]))),
            vocab_hash=vocab_hash(vocab),
        )
    if "head.w" not in model.params:
        add_head(model, 2, np.random.default_rng(np.random.SeedSequence([seed, 5])))
    return model


@command("wsd-train")
def cmd_wsd_train(cfg, out_dir: Path) -> int:
    vocab, rules = _load_tok(cfg)
    data = cfg["data"]
    inventory = load_sense_inventory(data["inventory"])
    instances = load_wsd_instances(data["instances"])
    model = _wsd_model(cfg, vocab)
    params = dict(cfg.get("wsd", {}))
    params["seed"] = cfg["run"]["seed"]
    wcfg = WsdTrainConfig(**params)
    history = train_wsd(model, instances, inventory, vocab, rules, wcfg)
    _write_csv(out_dir / "losses.csv", history, ["epoch", "step", "train_loss"])
    save_checkpoint(model, out_dir / "checkpoint.tdlm")
    mlm_seed = cfg.get("eval", {}).get("mask_seed", 1234)
    ce = wsd_mlm_ce(model, instances, inventory, vocab, rules, mlm_seed, max_len=wcfg.max_len)
    _write_csv(out_dir / "metrics.csv", [{"mlm_ce": ce}])
    print(f"trained {wcfg.objective} for {wcfg.epochs} epochs; MLM CE {ce:.4f}")
    return 0


@command("wsd-eval")
def cmd_wsd_eval(cfg, out_dir: Path) -> int:
    vocab, rules = _load_tok(cfg)
    data = cfg["data"]
    inventory = load_sense_inventory(data["inventory"])
    instances = load_wsd_instances(data["instances"])
    model = load_checkpoint(cfg["run"]["checkpoint"])
    report = evaluate_wsd(
        model, instances, inventory, vocab, rules, max_len=cfg.get("wsd", {}).get("max_len", 160)
    )
    rows = report.rows + [
        {
            "dataset": "ALL",
            "instances": sum(r["instances"] for r in report.rows),
            "correct": sum(r["correct"] for r in report.rows),
            "f1": report.pooled_f1,
        }
    ]
    _write_csv(out_dir / "report.csv", rows, ["dataset", "instances", "correct", "f1"])
    print(f"pooled F1 {report.pooled_f1:.4f}")
    return 0


@command("mpp-features")
def cmd_mpp_features(cfg, out_dir: Path) -> int:
    data = cfg["data"]
    table = load_word_vectors(data["vectors"])
    samples = load_labeled_paragraphs(data["paragraphs"])
    fm = build_features(samples, table)
    np.savez(out_dir / "features.npz", features=fm.features, labels=fm.labels)
    print(f"embedded {len(fm.labels)} paragraphs into {fm.features.shape[1]} dimensions")
    return 0


def _load_features(path) -> FeatureMatrix:
    blob = np.load(path)
    return FeatureMatrix(features=blob["features"], labels=blob["labels"])


def _split_features(fm: FeatureMatrix, val_fraction: float, seed: int):
    order = np.random.default_rng(np.random.SeedSequence([seed, 31])).permutation(len(fm.labels))
    n_val = max(1, int(len(order) * val_fraction))
    va, tr = order[:n_val], order[n_val:]
    return (fm.features[tr], fm.labels[tr], fm.features[va], fm.labels[va])


@command("mpp-train")
def cmd_mpp_train(cfg, out_dir: Path) -> int:
    clf_cfg = dict(cfg.get("clf", {}))
    algo = clf_cfg.pop("algo", "lr")
    fm = _load_features(cfg["data"]["features"])
    val_fraction = clf_cfg.pop("val_fraction", 0.25)
    Xtr, ytr, Xva, yva = _split_features(fm, val_fraction, cfg["run"]["seed"])
    if algo == "lr":
        clf = train_logreg(Xtr, ytr, **clf_cfg)
        arrays = {"kind": "lr", "weights": clf.weights}
    elif algo == "nb":
        clf = train_nb(Xtr, ytr)
        arrays = {"kind": "nb", "means": clf.means, "variances": clf.variances, "priors": clf.priors}
    elif algo == "svm":
        clf = train_linear_svm(Xtr, ytr, **clf_cfg)
        arrays = {"kind": "svm", "weights": clf.weights}
    else:
        raise UsageError(f"unknown classifier algo {algo!r}")
    train_f1 = f1_micro(clf.predict(Xtr), ytr)
    val_f1 = f1_micro(clf.predict(Xva), yva)
    np.savez(out_dir / "classifier.npz", **arrays)
    _write_csv(out_dir / "metrics.csv", [{"algo": algo, "train_f1": train_f1, "val_f1": val_f1}])
    print(f"{algo}: train F1 {train_f1:.4f}  val F1 {val_f1:.4f}")
    return 0


@command("mpp-gridsearch")
def cmd_mpp_gridsearch(cfg, out_dir: Path) -> int:
    clf_cfg = dict(cfg.get("clf", {}))
    algo = clf_cfg.pop("algo", "lr")
    fm = _load_features(cfg["data"]["features"])
    Xtr, ytr, Xva, yva = _split_features(fm, clf_cfg.pop("val_fraction", 0.25), cfg["run"]["seed"])
    if "grid" in cfg:
        grid = GridSpec(axes=cfg["grid"])
    elif algo == "lr":
        grid = default_logreg_grid()
    elif algo == "svm":
        grid = default_svm_grid()
    else:
        raise UsageError(f"no default grid for algo {algo!r}")
    if algo == "lr":
        trainer = logreg_trainer
    else:
        def trainer(c, X, y):
            return train_linear_svm(X, y, C=c.get("C", 1.0), tolerance=c.get("tolerance", 1e-4))
    best, results = grid_search(trainer, grid, Xtr, ytr, Xva, yva)
    _write_csv(out_dir / "grid_results.csv", results)
    with open(out_dir / "best_config.json", "w", encoding="utf-8") as fh:
        json.dump(best, fh, indent=2, sort_keys=True)
    best_score = max(r["score"] for r in results)
    print(f"evaluated {len(results)} cells; best score {best_score:.4f} at {best}")
    return 0


@command("mpp-finetune")
def cmd_mpp_finetune(cfg, out_dir: Path) -> int:
    vocab, rules = _load_tok(cfg)
    samples = load_labeled_paragraphs(cfg["data"]["paragraphs"])
    model = load_checkpoint(cfg["run"]["checkpoint"])
    seed = cfg["run"]["seed"]
    if "head.w" not in model.params:
        add_head(model, 2, np.random.default_rng(np.random.SeedSequence([seed, 5])))
    ft = cfg.get("finetune", {})
    f1, history = finetune_classifier(
        model,
        samples,
        vocab,
        rules,
        epochs=ft.get("epochs", 1),
        lr=ft.get("lr", 2e-5),
        batch_size=ft.get("batch_size", 8),
        seed=seed,
        val_fraction=ft.get("val_fraction", 0.25),
        freeze_encoder=ft.get("freeze_encoder", False),
    )
    save_checkpoint(model, out_dir / "finetuned.tdlm")
    _write_csv(out_dir / "metrics.csv", [{"f1_micro": f1}])
    print(f"held-out F1-micro {f1:.4f}")
    return 0


@command("mpp-synth")
def cmd_mpp_synth(cfg, out_dir: Path) -> int:
    data = cfg["data"]
    docs = load_corpus(data["corpus"])
    paragraphs = [line for doc in docs for line in doc]
    synonyms = load_synonyms(data["synonyms"])
    ratio = cfg.get("synth", {}).get("ratio", 0.2)
    samples, realized = synth_paraphrase(paragraphs, synonyms, ratio, seed=cfg["run"]["seed"])
    with open(out_dir / "paragraphs.jsonl", "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s, sort_keys=True) + "\n")
    _write_csv(out_dir / "stats.csv", [{"requested_ratio": ratio, "realized_ratio": realized}])
    print(f"spun {len(samples) // 2} paragraphs; realized ratio {realized:.4f}")
    return 0


@command("gradcheck")
def cmd_gradcheck(cfg, out_dir: Path) -> int:
    tol = cfg.get("eval", {}).get("tolerance", 1e-5)
    results = gradient_check_catalog(seed=cfg["run"]["seed"])
    rows = [{"op": op, "max_rel_error": err} for op, err in results.items()]
    _write_csv(out_dir / "gradcheck.csv", rows)
    ok = True
    for op, err in results.items():
        status = "ok" if err < tol else "FAIL"
        print(f"{op:24s} {err:.3e}  {status}")
        ok = ok and err < tol
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--threads", type=int, default=None)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _resolve_config(args, extra)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"))
    try:
        with lock:
            handler = logging.FileHandler(out_dir / "run.log")
            handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
            logging.getLogger().addHandler(handler)
            try:
                resolved = dict(cfg)
                resolved["run"] = dict(cfg.get("run", {}))
                with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
                    json.dump(resolved, fh, indent=2, sort_keys=True)
                return COMMANDS[args.command](cfg, out_dir)
            finally:
                logging.getLogger().removeHandler(handler)
                handler.close()
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (TdlmError, FileNotFoundError, KeyError, TypeError) as e:
        log.error("command failed: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
