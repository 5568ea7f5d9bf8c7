"""Command-line surface: artifacts, determinism, config closure, usage errors."""

import csv
import json
import math

import numpy as np
import pytest

from tdlm.checkpoint import load_checkpoint, save_checkpoint
from tdlm.cli import main
from tdlm.tokenizer import load_tokenizer, vocab_hash
from tdlm.transformer import Model, ModelConfig, init_params

WORDS = ["red", "blue", "green", "bird", "fish", "tree", "rock", "wind", "rain", "fire"]


def write_corpus(path, seed=0, n_docs=12, lines_per_doc=3):
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        lines = [
            " ".join(WORDS[i] for i in rng.integers(0, len(WORDS), size=6))
            for _ in range(lines_per_doc)
        ]
        docs.append("\n".join(lines))
    path.write_text("\n\n".join(docs) + "\n", encoding="utf-8")


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.txt"
    write_corpus(corpus)
    tok_dir = root / "tok"
    rc = main([
        "tokenizer-train", "--out-dir", str(tok_dir),
        "--data.corpus", str(corpus), "--data.vocab_size", "80",
    ])
    assert rc == 0
    return {
        "root": root,
        "corpus": corpus,
        "vocab": tok_dir / "vocab.txt",
        "merges": tok_dir / "merges.txt",
    }


def data_flags(ws):
    return [
        "--data.corpus", str(ws["corpus"]),
        "--data.vocab", str(ws["vocab"]),
        "--data.merges", str(ws["merges"]),
    ]


def model_flags(vocab_size=80):
    return [
        "--model.layers", "1", "--model.hidden", "16", "--model.heads", "2",
        "--model.ff_dim", "24", "--model.vocab_size", str(vocab_size),
        "--model.max_seq", "16", "--model.dropout", "0.0",
    ]


def train_flags(steps=4):
    return [
        "--train.max_steps", str(steps), "--train.lr", "0.001",
        "--train.batch_size", "4", "--train.seq_len", "16",
        "--train.val_interval", "0",
    ]


class TestTokenizerTrain:
    def test_artifacts_exist(self, workspace):
        vocab, rules = load_tokenizer(workspace["vocab"], workspace["merges"])
        # ten distinct surface words exhaust their merges before the budget
        assert 7 < len(vocab) <= 80
        assert len(rules) > 0
        assert (workspace["root"] / "tok" / "resolved_config.json").exists()


class TestPretrainAndEval:
    def test_pretrain_writes_checkpoint_and_losses(self, workspace, tmp_path):
        out = tmp_path / "pre"
        rc = main(
            ["pretrain-mlm", "--out-dir", str(out), "--seed", "3"]
            + data_flags(workspace) + model_flags() + train_flags()
        )
        assert rc == 0
        rows = read_csv(out / "losses.csv")
        assert len(rows) == 4
        assert set(rows[0]) == {"step", "train_loss", "branch", "val_ce", "val_ppl"}
        model = load_checkpoint(out / "checkpoint.tdlm")
        assert model.step == 4

    def test_eval_ppl_uniform_model_reports_vocab_size(self, workspace, tmp_path):
        """A zeroed output head yields uniform logits: PPL == |V|."""
        vocab, _ = load_tokenizer(workspace["vocab"], workspace["merges"])
        cfg = ModelConfig(layers=1, hidden=16, heads=2, ff_dim=24, vocab_size=len(vocab),
                          max_seq=16, dropout=0.0)
        model = Model(config=cfg, params=init_params(cfg, np.random.default_rng(0)),
                      vocab_hash=vocab_hash(vocab))
        model.params["embed"].data[:] = 0.0
        model.params["mlm_bias"].data[:] = 0.0
        ckpt = tmp_path / "uniform.tdlm"
        save_checkpoint(model, ckpt)
        out = tmp_path / "eval"
        rc = main(
            ["eval-ppl", "--out-dir", str(out), "--run.checkpoint", str(ckpt),
             "--eval.seq_len", "16"] + data_flags(workspace)
        )
        assert rc == 0
        row = read_csv(out / "metrics.csv")[0]
        np.testing.assert_allclose(float(row["val_ppl"]), len(vocab), rtol=1e-9)
        np.testing.assert_allclose(float(row["val_ce"]), math.log(len(vocab)), atol=1e-9)


@pytest.fixture(scope="module")
def teacher_ckpt(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("teacher")
    rc = main(
        ["pretrain-mlm", "--out-dir", str(out), "--seed", "5"]
        + data_flags(workspace)
        + ["--model.layers", "2", "--model.hidden", "16", "--model.heads", "2",
           "--model.ff_dim", "24", "--model.vocab_size", "80",
           "--model.max_seq", "16", "--model.dropout", "0.0"]
        + train_flags(steps=3)
    )
    assert rc == 0
    return out / "checkpoint.tdlm"


class TestDistillCommand:
    def test_zero_steps_roundtrips_input_checkpoint(self, workspace, teacher_ckpt, tmp_path):
        """distill --train.max_steps 0 writes the input student byte for byte."""
        student_in = tmp_path / "student_in.tdlm"
        save_checkpoint(load_checkpoint(teacher_ckpt), student_in)
        out = tmp_path / "distill0"
        rc = main(
            ["distill", "--out-dir", str(out), "--seed", "1",
             "--run.teachers", json.dumps([str(teacher_ckpt)]),
             "--run.student_checkpoint", str(student_in),
             "--train.max_steps", "0", "--train.batch_size", "4",
             "--train.seq_len", "16", "--train.val_interval", "0"]
            + data_flags(workspace)
        )
        assert rc == 0
        assert (out / "student.tdlm").read_bytes() == student_in.read_bytes()

    def test_layer_removal_init_and_training(self, workspace, teacher_ckpt, tmp_path):
        out = tmp_path / "distill"
        rc = main(
            ["distill", "--out-dir", str(out), "--seed", "2",
             "--run.teachers", json.dumps([str(teacher_ckpt)])]
            + train_flags(steps=3) + data_flags(workspace)
        )
        assert rc == 0
        student = load_checkpoint(out / "student.tdlm")
        assert student.config.layers == 1  # teacher had 2
        rows = read_csv(out / "losses.csv")
        assert [r["branch"] for r in rows] == ["distill"] * 3

    def test_same_seed_byte_identical_checkpoints(self, workspace, teacher_ckpt, tmp_path):
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / f"det_{run}"
            rc = main(
                ["distill", "--out-dir", str(out), "--seed", "9",
                 "--run.teachers", json.dumps([str(teacher_ckpt)])]
                + train_flags(steps=3) + data_flags(workspace)
            )
            assert rc == 0
            blobs.append((out / "student.tdlm").read_bytes())
        assert blobs[0] == blobs[1]


@pytest.fixture(scope="module")
def wsd_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("wsd")
    inv = root / "inventory.jsonl"
    rows = []
    for lemma in ("bank", "bat"):
        for j in range(2):
            rows.append(
                {"lemma": lemma, "pos": "n", "sense_id": f"{lemma}%{j}",
                 "gloss": f"{lemma} gloss {'red blue' if j == 0 else 'fish tree'}"}
            )
    inv.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
    inst = root / "instances.jsonl"
    items = [
        {"tokens": ["red", "bank", "blue"], "target_index": 1, "lemma": "bank", "pos": "n",
         "gold": ["bank%0"], "dataset": "toy"},
        {"tokens": ["fish", "bat", "tree"], "target_index": 1, "lemma": "bat", "pos": "n",
         "gold": ["bat%1"], "dataset": "toy"},
    ]
    inst.write_text("\n".join(json.dumps(r) for r in items), encoding="utf-8")
    return {"inventory": inv, "instances": inst}


class TestWsdCommands:
    def test_train_then_eval(self, workspace, wsd_files, tmp_path):
        out = tmp_path / "wsd"
        rc = main(
            ["wsd-train", "--out-dir", str(out), "--seed", "4",
             "--data.inventory", str(wsd_files["inventory"]),
             "--data.instances", str(wsd_files["instances"]),
             "--wsd.epochs", "1", "--wsd.k", "2", "--wsd.lr", "0.001",
             "--wsd.max_len", "16"]
            + data_flags(workspace) + model_flags()
        )
        assert rc == 0
        assert (out / "checkpoint.tdlm").exists()
        assert len(read_csv(out / "losses.csv")) == 1
        ev = tmp_path / "wsd_eval"
        rc = main(
            ["wsd-eval", "--out-dir", str(ev),
             "--run.checkpoint", str(out / "checkpoint.tdlm"),
             "--data.inventory", str(wsd_files["inventory"]),
             "--data.instances", str(wsd_files["instances"]),
             "--wsd.max_len", "16"]
            + data_flags(workspace)
        )
        assert rc == 0
        rows = read_csv(ev / "report.csv")
        assert rows[-1]["dataset"] == "ALL"
        assert 0.0 <= float(rows[-1]["f1"]) <= 1.0

    def test_wsd_train_determinism(self, workspace, wsd_files, tmp_path):
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / f"wsd_{run}"
            rc = main(
                ["wsd-train", "--out-dir", str(out), "--seed", "8",
                 "--data.inventory", str(wsd_files["inventory"]),
                 "--data.instances", str(wsd_files["instances"]),
                 "--wsd.epochs", "1", "--wsd.k", "2", "--wsd.max_len", "16"]
                + data_flags(workspace) + model_flags()
            )
            assert rc == 0
            blobs.append((out / "checkpoint.tdlm").read_bytes())
        assert blobs[0] == blobs[1]


@pytest.fixture(scope="module")
def mpp_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("mpp")
    rng = np.random.default_rng(0)
    vectors = root / "vectors.txt"
    lines = []
    for i in range(20):
        vec = rng.normal(size=4)
        lines.append("w%d %s" % (i, " ".join(f"{v:.6f}" for v in vec)))
        lines.append("s%d %s" % (i, " ".join(f"{v:.6f}" for v in vec + 2.0)))
    vectors.write_text("\n".join(lines), encoding="utf-8")
    corpus = root / "paragraphs.txt"
    paras = [" ".join(f"w{j}" for j in rng.integers(0, 20, size=12)) for _ in range(30)]
    corpus.write_text("\n".join(paras), encoding="utf-8")
    synonyms = root / "synonyms.json"
    synonyms.write_text(json.dumps({f"w{i}": [f"s{i}"] for i in range(20)}), encoding="utf-8")
    return {"vectors": vectors, "corpus": corpus, "synonyms": synonyms}


class TestMppCommands:
    def test_synth_features_train_grid(self, mpp_files, tmp_path):
        synth = tmp_path / "synth"
        rc = main(
            ["mpp-synth", "--out-dir", str(synth), "--seed", "1",
             "--data.corpus", str(mpp_files["corpus"]),
             "--data.synonyms", str(mpp_files["synonyms"]),
             "--synth.ratio", "0.3"]
        )
        assert rc == 0
        stats = read_csv(synth / "stats.csv")[0]
        assert 0.15 < float(stats["realized_ratio"]) < 0.45

        feats = tmp_path / "feats"
        rc = main(
            ["mpp-features", "--out-dir", str(feats),
             "--data.vectors", str(mpp_files["vectors"]),
             "--data.paragraphs", str(synth / "paragraphs.jsonl")]
        )
        assert rc == 0
        blob = np.load(feats / "features.npz")
        assert blob["features"].shape == (60, 4)

        train = tmp_path / "clf"
        rc = main(
            ["mpp-train", "--out-dir", str(train), "--seed", "2",
             "--data.features", str(feats / "features.npz"),
             "--clf.algo", "lr", "--clf.max_iter", "200", "--clf.lr", "0.5"]
        )
        assert rc == 0
        metrics = read_csv(train / "metrics.csv")[0]
        assert float(metrics["val_f1"]) > 0.8

        grid = tmp_path / "grid"
        rc = main(
            ["mpp-gridsearch", "--out-dir", str(grid), "--seed", "2",
             "--data.features", str(feats / "features.npz"),
             "--grid.max_iter", "[50, 100]", "--grid.tolerance", "[0.01, 0.001]",
             "--clf.algo", "lr"]
        )
        assert rc == 0
        assert len(read_csv(grid / "grid_results.csv")) == 4
        assert (grid / "best_config.json").exists()

    def test_finetune_command(self, workspace, mpp_files, teacher_ckpt, tmp_path):
        synth = tmp_path / "synth_ft"
        main(
            ["mpp-synth", "--out-dir", str(synth), "--seed", "3",
             "--data.corpus", str(mpp_files["corpus"]),
             "--data.synonyms", str(mpp_files["synonyms"]),
             "--synth.ratio", "0.3"]
        )
        out = tmp_path / "ft"
        rc = main(
            ["mpp-finetune", "--out-dir", str(out), "--seed", "3",
             "--run.checkpoint", str(teacher_ckpt),
             "--data.paragraphs", str(synth / "paragraphs.jsonl"),
             "--finetune.epochs", "0"]
            + data_flags(workspace)
        )
        assert rc == 0
        assert (out / "finetuned.tdlm").exists()
        assert "f1_micro" in read_csv(out / "metrics.csv")[0]


class TestGradcheckCommand:
    def test_exit_zero_and_report(self, tmp_path, capsys):
        out = tmp_path / "gc"
        rc = main(["gradcheck", "--out-dir", str(out)])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "transformer_mlm" in printed and "FAIL" not in printed
        rows = read_csv(out / "gradcheck.csv")
        assert all(float(r["max_rel_error"]) < 1e-5 for r in rows)


class TestConfigHandling:
    def test_unknown_flag_is_usage_error(self, tmp_path):
        rc = main(["gradcheck", "--out-dir", str(tmp_path / "x"), "--bogus", "1"])
        assert rc == 2

    def test_unknown_subcommand_nonzero(self):
        assert main(["no-such-command", "--out-dir", "x"]) != 0

    def test_resolved_config_closure(self, workspace, tmp_path):
        """Rerunning from the echoed config reproduces the run byte for byte."""
        out1 = tmp_path / "r1"
        rc = main(
            ["pretrain-mlm", "--out-dir", str(out1), "--seed", "6"]
            + data_flags(workspace) + model_flags() + train_flags(steps=2)
        )
        assert rc == 0
        out2 = tmp_path / "r2"
        rc = main(
            ["pretrain-mlm", "--out-dir", str(out2),
             "--config", str(out1 / "resolved_config.json")]
        )
        assert rc == 0
        assert (out1 / "checkpoint.tdlm").read_bytes() == (out2 / "checkpoint.tdlm").read_bytes()
        assert (out1 / "losses.csv").read_bytes() == (out2 / "losses.csv").read_bytes()

    def test_timestamps_only_in_log(self, workspace, tmp_path):
        out = tmp_path / "ts"
        main(
            ["pretrain-mlm", "--out-dir", str(out), "--seed", "7"]
            + data_flags(workspace) + model_flags() + train_flags(steps=1)
        )
        for artifact in ("losses.csv", "resolved_config.json"):
            content = (out / artifact).read_text(encoding="utf-8")
            assert "20" not in content.split("\n")[0] or ":" not in content  # no wall-clock strings
        assert (out / "run.log").exists()
