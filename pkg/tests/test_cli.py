import json

import pytest

from condlr.cli import main

COMMON = ["--set", "dataset=blobs", "--set", "blobs_per_class=20", "--set", "widths=20,16,12,10",
          "--set", "batch_size=32", "--set", "timing=false", "--set", "epsilons=0,0.05",
          "--set", "milestones=1", "--epochs", "1"]


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "train" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["train", "--bogus"]) == 1
    assert main(["verify", "--suite", "nope"]) == 1


def test_config_error_exit(tmp_path, capsys):
    assert main(["train", "--set", "lr=-1", "--out", str(tmp_path)]) == 1
    assert "configuration error" in capsys.readouterr().err
    assert main(["train", *COMMON, "--alpha", "0.97", "--out", str(tmp_path)]) == 1


def test_data_error_exit(tmp_path, capsys):
    assert main(["train", "--set", f"root={tmp_path}", "--out", str(tmp_path / "o")]) == 2
    assert main(["attack", "--checkpoint", str(tmp_path / "missing.npz"), *COMMON]) == 2


def test_train_attack_audit(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", *COMMON, "--out", str(out), "--quiet"]) == 0
    assert "condlr(tau=0.1)" in capsys.readouterr().out
    summary = json.loads((out / "summary.json").read_text())
    assert summary["epochs"] == 1
    assert main(["attack", "--checkpoint", str(out / "checkpoint.npz"), *COMMON,
                 "--eps", "0,0.1", "--csv", str(tmp_path / "a.csv")]) == 0
    text = (tmp_path / "a.csv").read_text()
    assert text.splitlines()[0] == "epsilon,robust_acc" and len(text.splitlines()) == 3
    assert main(["audit", "--checkpoint", str(out / "checkpoint.npz"), *COMMON, "--points", "3",
                 "--csv", str(tmp_path / "audit.csv")]) == 0
    assert "network bound" in capsys.readouterr().out
    assert (tmp_path / "audit.csv").read_text().startswith("layer,kind")


def test_train_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["train", *COMMON, "--out", str(tmp_path / name), "--quiet"]) == 0
    for f in ("metrics.csv", "summary.json", "checkpoint.npz"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_compare(tmp_path, capsys):
    assert main(["compare", *COMMON, "--variants", "condlr:0.5,vanilla_uv,full", "--out", str(tmp_path),
                 "--quiet"]) == 0
    lines = (tmp_path / "compare.csv").read_text().splitlines()
    assert {l.split(",")[0] for l in lines[1:]} == {"condlr-tau0.5", "vanilla_uv", "full"}


def test_data_gen_then_train(tmp_path, capsys):
    assert main(["data", "gen", "--out", str(tmp_path), "--per-class", "10", "--dim", "12"]) == 0
    assert (tmp_path / "mnist" / "train-images-idx3-ubyte.gz").exists()
    assert main(["train", "--set", f"root={tmp_path}", "--set", "widths=12,8,10", "--set", "ranks=2,2",
                 "--set", "timing=false", "--epochs", "1", "--out", str(tmp_path / "run"), "--quiet"]) == 0


def test_verify_exit_codes(tmp_path, capsys):
    assert main(["verify", "--suite", "tangent", "--suite", "composition",
                 "--csv", str(tmp_path / "v.csv")]) == 0
    assert "pass" in (tmp_path / "v.csv").read_text()
    assert main(["verify", "--suite", "theorem2", "--lam", "20"]) == 0
    captured = capsys.readouterr()
    assert "not_certified" in captured.out and "warning" in captured.err
