import json
import subprocess
import sys

import pytest

from docfuse.cli import main


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_no_args_is_usage_error(capsys):
    code, _, err = _run(capsys)
    assert code == 2 and "usage" in err


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["chunk-plan", "--bogus"])
    assert exc.value.code == 2


def test_chunk_plan(capsys):
    code, out, _ = _run(capsys, "chunk-plan", "--input-len", "20", "--core", "8", "--overlap", "1", "--prefix", "2")
    assert code == 0
    assert [ln.split()[2] for ln in out.splitlines()] == ["input=[0,6)", "input=[5,11)", "input=[10,16)",
                                                          "input=[15,20)"]


def test_chunk_plan_bad_config(capsys):
    code, _, err = _run(capsys, "chunk-plan", "--input-len", "20", "--core", "8", "--prefix", "8")
    assert code == 4 and "ConfigError" in err


def test_missing_checkpoint(capsys, tmp_path):
    code, _, err = _run(capsys, "infer", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(tmp_path))
    assert code == 3 and "not found" in err


def test_budget(capsys, tmp_path):
    code, out, _ = _run(capsys, "budget", "--toggle", "sparsity")
    rec = json.loads(out)
    assert code == 0 and rec["toggles"] == ["sparsity"] and rec["max_context"] > 0
    code, out, _ = _run(capsys, "budget", "--sweep", "--mode", "training")
    assert code == 0 and out.splitlines()[1].startswith("vanilla")
    code, _, err = _run(capsys, "budget", "--mode", "inference", "--toggle", "cpu_offload")
    assert code == 4


def test_grad_check_subcommand(capsys):
    code, out, _ = _run(capsys, "grad-check", "--d", "8", "--max-entries", "2")
    assert code == 0 and out.startswith("PASS")


def test_small_pipeline(capsys, tmp_path):
    spec = tmp_path / "spec.cfg"
    spec.write_text("num_docs = 12\nvisual_marker_fraction = 0.5\nseed = 2\n")
    cfg = tmp_path / "train.cfg"
    cfg.write_text("total_steps = 3\nbatch_size = 4\nmodel.d = 16\nmodel.num_heads = 2\nmodel.d_ff = 32\n")
    assert _run(capsys, "gen-data", "--spec", str(spec), "--out", str(tmp_path / "c"))[0] == 0
    assert _run(capsys, "train", "--config", str(cfg), "--data", str(tmp_path / "c"), "--out", str(tmp_path / "r"))[0] == 0
    code, out, _ = _run(capsys, "infer", "--checkpoint", str(tmp_path / "r" / "model.ckpt"), "--data",
                        str(tmp_path / "c"), "--split", "train", "--out", str(tmp_path / "p"))
    assert code == 0 and json.loads(out)["count"] > 0
    code, out, _ = _run(capsys, "eval", "--pred", str(tmp_path / "p" / "predictions.jsonl"))
    assert code == 0 and "ece" in json.loads(out)
    for name in ("calibration.tsv", "risk_coverage.tsv", "metrics.json"):
        assert (tmp_path / "p" / name).exists()
    doc = sorted((tmp_path / "c" / "docs").iterdir())[0]
    code, out, _ = _run(capsys, "infer", "--checkpoint", str(tmp_path / "r" / "model.ckpt"), "--doc", str(doc),
                        "--question", "3 9")
    rec = json.loads(out)
    assert code == 0 and rec["confidence"] == min(rec["token_scores"])


def test_train_rejects_small_vocab(capsys, tmp_path):
    spec = tmp_path / "spec.cfg"
    spec.write_text("num_docs = 4\nvocab_size = 256\nseed = 1\n")
    _run(capsys, "gen-data", "--spec", str(spec), "--out", str(tmp_path / "c"))
    cfg = tmp_path / "t.cfg"
    cfg.write_text("total_steps = 1\n")
    code, _, err = _run(capsys, "train", "--config", str(cfg), "--data", str(tmp_path / "c"), "--out", str(tmp_path / "r"))
    assert code == 4 and "vocab" in err


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "docfuse.cli", "chunk-plan", "--input-len", "5"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == "chunk=0 prefix=[0,0) input=[0,5) len=5"
