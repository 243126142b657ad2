import csv
import json
import subprocess
import sys

import pytest

from selfrefine_vlm.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from selfrefine_vlm.config import RunConfig, default_config
from selfrefine_vlm.data import load_corpus

TINY = [
    "--set", "data.n_examples=20",
    "--set", "data.split_counts=[14,3,3]",
    "--set", "train.epochs=1",
    "--set", "eval.max_len=8",
    "--set", "eval.beam_width=1",
]  # fmt: skip


def _train(tmp_path, name, *extra):
    out = tmp_path / name
    assert main(["train", *TINY, *extra, "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """One trained tiny model and a small corpus to decode."""
    tmp = tmp_path_factory.mktemp("cli")
    out = _train(tmp, "run")
    spec = tmp / "spec.json"
    spec.write_text(json.dumps({"n_examples": 4, "seed": 9}))
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp / "small.jsonl")]) == EXIT_OK
    return tmp, out


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_default_and_reproducible(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a.jsonl")]) == EXIT_OK
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 720
    split = json.loads((tmp_path / "a.split.json").read_text())
    assert [len(split[k]) for k in ("train", "val", "test")] == [504, 72, 144]
    assert main(["gen-data", "--out", str(tmp_path / "b.jsonl")]) == EXIT_OK
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_gen_data_split_counts(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_examples": 30, "split_counts": [20, 4, 6]}))
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "c.jsonl")]) == EXIT_OK
    split = json.loads((tmp_path / "c.split.json").read_text())
    assert [len(split[k]) for k in ("train", "val", "test")] == [20, 4, 6]


def test_gen_data_unknown_key(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_exampels": 5}))
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "x.jsonl")]) == EXIT_USAGE
    assert "n_exampels" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train


def test_train_outputs(run):
    _, out = run
    rows = list(csv.DictReader((out / "losses.csv").open()))
    assert list(rows[0]) == ["epoch", "split", "l_report", "l_refine", "l_total"]
    assert len(rows) == 4
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["train"]["epochs"] == 1 and resolved["data"]["n_examples"] == 20
    assert (out / "model.ckpt").read_bytes()[:4] == b"SRPM"


def test_train_rerun_is_byte_identical(run, tmp_path):
    _, out = run
    again = _train(tmp_path, "again")
    for name in ("losses.csv", "model.ckpt", "resolved_config.json"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_report_only_run_logs_zero_refine(tmp_path):
    out = _train(tmp_path, "ro", "--set", "train.lambda_report=1", "--set", "train.lambda_refine=0")
    rows = list(csv.DictReader((out / "losses.csv").open()))
    assert all(float(r["l_refine"]) == 0.0 for r in rows)
    assert all(r["l_total"] == r["l_report"] for r in rows)


def test_train_config_errors(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["train", "--set", "train.epoch=3", "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "train.epoch" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text('{"refine": {"similarity": "l2"}}')
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE


def test_seed_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SERPENT_SEED", "17")
    out = _train(tmp_path, "env")
    assert json.loads((out / "resolved_config.json").read_text())["seed"] == 17
    assert RunConfig.from_dict({}, env={"SERPENT_SEED": "5"}).train_config().seed == 5


def test_numerical_failure_exit_code(tmp_path, capsys):
    code = main(["train", *TINY, "--set", "refine.similarity=dot", "--set", "train.lr=1e30", "--out", str(tmp_path / "nan")])
    assert code == EXIT_NUMERIC
    assert "step" in capsys.readouterr().err


def test_default_config_is_complete():
    cfg = RunConfig.from_dict(default_config(), env={})
    assert cfg.split_counts == (500, 70, 150)
    assert cfg.loss_weights().report == 0.3
    assert cfg.eval_settings() == ([0.0, 0.1, 0.2, 0.3, 0.5], 3, 24)


# ---------------------------------------------------------------------------
# generate / evaluate


def test_generate_beam_one_matches_greedy_and_reruns(run):
    tmp, out = run
    ck, data = str(out / "model.ckpt"), str(tmp / "small.jsonl")
    assert main(["generate", "--checkpoint", ck, "--input", data, "--beam", "1", "--out", str(tmp / "b1.jsonl")]) == 0
    assert main(["generate", "--checkpoint", ck, "--input", data, "--beam", "1", "--greedy", "--out", str(tmp / "g.jsonl")]) == 0
    beam = [json.loads(line) for line in (tmp / "b1.jsonl").read_text().splitlines()]
    greedy = [json.loads(line) for line in (tmp / "g.jsonl").read_text().splitlines()]
    assert [b["report"] for b in beam] == [g["report"] for g in greedy]
    assert [b["score"] for b in beam] == pytest.approx([g["score"] for g in greedy], abs=1e-12)
    assert main(["generate", "--checkpoint", ck, "--input", data, "--out", str(tmp / "b3a.jsonl")]) == 0
    assert main(["generate", "--checkpoint", ck, "--input", data, "--out", str(tmp / "b3b.jsonl")]) == 0
    assert (tmp / "b3a.jsonl").read_bytes() == (tmp / "b3b.jsonl").read_bytes()
    assert len((tmp / "b3a.jsonl").read_text().splitlines()) == 4


def test_corrupt_checkpoint_exit_code(run, tmp_path):
    tmp, out = run
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + (out / "model.ckpt").read_bytes()[4:])
    args = ["generate", "--checkpoint", str(bad), "--input", str(tmp / "small.jsonl"), "--out", str(tmp_path / "g.jsonl")]
    assert main(args) == EXIT_DATA
    bad.write_bytes((out / "model.ckpt").read_bytes()[:50])
    assert main(args) == EXIT_DATA


def test_corrupt_corpus_exit_code(run, tmp_path):
    _, out = run
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"image": 3}\n')
    assert main(["evaluate", "--checkpoint", str(out / "model.ckpt"), "--data", str(bad), "--out", str(tmp_path)]) == EXIT_DATA


def test_evaluate_reference_is_perfect(run):
    tmp, out = run
    dest = tmp / "ref_eval"
    args = ["evaluate", "--checkpoint", str(out / "model.ckpt"), "--data", str(tmp / "small.jsonl"), "--reference"]
    assert main([*args, "--out", str(dest)]) == EXIT_OK
    m = json.loads((dest / "metrics.json").read_text())
    for key in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "emb_sim"):
        assert m[key] == 1.0
    assert m["hallucination_rate"] == 0.0 and m["n"] == 4
    assert (dest / "metrics.csv").read_text().startswith("config,bleu1,")


def test_evaluate_model(run):
    tmp, out = run
    dest = tmp / "model_eval"
    args = ["evaluate", "--checkpoint", str(out / "model.ckpt"), "--data", str(tmp / "small.jsonl"), "--beam", "2"]
    assert main([*args, "--max-len", "8", "--out", str(dest)]) == EXIT_OK
    m = json.loads((dest / "metrics.json").read_text())
    assert all(0.0 <= m[k] <= 1.0 for k in m if k != "n")


# ---------------------------------------------------------------------------
# ablate / noise


def test_ablate_lambda_rows(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--mode", "lambda", *TINY, "--save-models", "--out", str(out)]) == EXIT_OK
    rows = list(csv.reader((out / "ablation_lambda.csv").open()))
    assert rows[0][0] == "config" and len(rows) == 6
    assert [r[0] for r in rows[1:]] == [
        "lambda_report=0;lambda_refine=1",
        "lambda_report=0.3;lambda_refine=0.7",
        "lambda_report=0.5;lambda_refine=0.5",
        "lambda_report=0.7;lambda_refine=0.3",
        "lambda_report=1;lambda_refine=0",
    ]
    assert (out / "lambda_1_0.ckpt").exists() and (out / "lambda_0.3_0.7.ckpt").exists()
    assert (out / "resolved_config.json").exists()


def test_noise_sweep_includes_clean_row(run):
    tmp, out = run
    dest = tmp / "noise"
    ck = str(out / "model.ckpt")
    args = ["noise", "--checkpoints", f"{ck},{ck}", "--data", str(tmp / "small.jsonl"), "--beam", "1"]
    assert main([*args, "--max-len", "8", "--variances", "0,0.3", "--out", str(dest)]) == EXIT_OK
    rows = list(csv.reader((dest / "noise.csv").open()))
    assert rows[1][0] == "model;variance=0" and rows[-1][0] == "model;variance=0.3"
    assert main([*args, "--variances", "0.1,0.3", "--out", str(dest)]) == EXIT_USAGE
    assert main([*args, "--variances", "a,b", "--out", str(dest)]) == EXIT_USAGE


def test_console_module_runs(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "selfrefine_vlm.cli", "gen-data", "--out", str(tmp_path / "d.jsonl")],
        capture_output=True,
        text=True,
        check=False,
    )
    assert proc.returncode == 0, proc.stderr
    assert len(load_corpus(tmp_path / "d.jsonl")) == 720
    proc = subprocess.run([sys.executable, "-m", "selfrefine_vlm.cli"], capture_output=True, text=True, check=False)
    assert proc.returncode == 2
