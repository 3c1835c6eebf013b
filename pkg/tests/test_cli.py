"""Command line: every subcommand, exit codes and reproducibility."""
import json
import subprocess
import sys
from pathlib import Path

import pandas as pd
import pytest

from app.cli import main

MODEL_FLAGS = ["--dim", "8", "--heads", "2", "--enc-layers", "1", "--enc-heads", "2"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_dataset_dir):
    out = tmp_path_factory.mktemp("cli_run")
    code = main([
        "train", "--dataset", str(tiny_dataset_dir), "--out", str(out), *MODEL_FLAGS,
        "--epochs", "1", "--batch-size", "8", "--lr", "0.005", "--quiet",
    ])
    assert code == 0
    return out


def test_gen_data_is_deterministic_and_creates_directories(tmp_path, capsys):
    flags = ["--seed", "7", "--k", "4", "--n-train", "40", "--n-val", "8", "--n-test", "8"]
    assert main(["gen-data", "--out", str(tmp_path / "a" / "nested"), *flags]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "b"), *flags]) == 0
    first = (tmp_path / "a" / "nested" / "manifest.json").read_text()
    assert first == (tmp_path / "b" / "manifest.json").read_text()
    assert json.loads(first)["counts"] == {"train": 40, "val": 8, "test": 8}
    assert "Dataset Summary" in capsys.readouterr().out


def test_gen_data_rejects_a_single_concept(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--k", "1"]) == 2
    assert "K must be >= 2" in capsys.readouterr().err


def test_validate_data(tiny_dataset_dir, capsys):
    assert main(["validate-data", "--dataset", str(tiny_dataset_dir)]) == 0
    assert "consistent" in capsys.readouterr().out


def test_train_writes_artifacts(trained):
    for name in ("last.ckpt", "best.ckpt", "loss_log.csv", "last.ckpt.json"):
        assert (trained / name).is_file()
    sidecar = json.loads((trained / "last.ckpt.json").read_text())
    assert sidecar["run"]["model"]["dim"] == 8
    assert sidecar["run"]["optim"]["lr"] == pytest.approx(0.005)


def test_train_rejects_single_pair_batches(tmp_path, tiny_dataset_dir, capsys):
    code = main(["train", "--dataset", str(tiny_dataset_dir), "--out", str(tmp_path), "--batch-size", "1"])
    assert code == 2
    assert "negatives" in capsys.readouterr().err


def test_train_needs_a_dataset(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["train", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 3


def test_config_file_is_overridden_by_flags(tmp_path, tiny_dataset_dir):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "model": {"dim": 8, "heads": 2, "enc_layers": 1, "enc_heads": 2},
        "optim": {"epochs": 3, "batch_size": 8},
    }))
    out = tmp_path / "run"
    assert main([
        "train", "--config", str(config), "--dataset", str(tiny_dataset_dir),
        "--out", str(out), "--epochs", "1", "--quiet",
    ]) == 0
    sidecar = json.loads((out / "last.ckpt.json").read_text())
    assert sidecar["run"]["optim"]["epochs"] == 1
    assert sidecar["run"]["optim"]["batch_size"] == 8


def test_eval_both_templates(tmp_path, trained, tiny_dataset_dir):
    out = tmp_path / "eval"
    args = ["eval", "--checkpoint", str(trained / "last.ckpt"), "--dataset", str(tiny_dataset_dir),
            "--template", "P1,P2", "--out", str(out)]
    assert main(args) == 0
    p1 = json.loads((out / "eval_P1_mean.json").read_text())
    p2 = json.loads((out / "eval_P2_mean.json").read_text())
    assert p1["aligned"] and not p2["aligned"]
    assert p1["config"]["model"]["dim"] == 8
    assert pd.read_csv(out / "comparison.csv")["template"].tolist() == ["P1", "P2"]

    first = (out / "eval_P1_mean.json").read_bytes()
    assert main(args) == 0
    assert (out / "eval_P1_mean.json").read_bytes() == first


def test_eval_in_a_fresh_process_matches_in_process_eval(tmp_path, trained, tiny_dataset_dir):
    args = ["eval", "--checkpoint", str(trained / "last.ckpt"), "--dataset", str(tiny_dataset_dir)]
    assert main([*args, "--out", str(tmp_path / "here")]) == 0
    completed = subprocess.run(
        [sys.executable, "-m", "app.cli", *args, "--out", str(tmp_path / "fresh")],
        cwd=Path(__file__).resolve().parents[1],
        capture_output=True,
        text=True,
        timeout=300,
    )
    assert completed.returncode == 0, completed.stderr
    for name in ("eval_P1_mean.json", "eval_P1_mean.csv"):
        assert (tmp_path / "fresh" / name).read_bytes() == (tmp_path / "here" / name).read_bytes()


def test_eval_unknown_template(trained, capsys):
    assert main(["eval", "--checkpoint", str(trained / "last.ckpt"), "--template", "P7"]) == 2
    assert "P1, P2" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == 3


def test_export_attention_maps(tmp_path, trained, tiny_dataset):
    split = tiny_dataset.split("test")
    concept = tiny_dataset.concepts[0]
    sample_ids = [int(s) for s in split.ids[:2]]
    out = tmp_path / "maps"
    assert main([
        "export-attn", "--checkpoint", str(trained / "last.ckpt"), "--concept", concept,
        "--samples", ",".join(map(str, sample_ids)), "--out", str(out),
    ]) == 0
    for sid in sample_ids:
        blob = (out / f"test_{sid}_{concept}.pgm").read_bytes()
        assert blob.startswith(b"P5\n32 32\n255\n") and len(blob) == 13 + 32 * 32
    log = pd.read_csv(out / "attention_maps.csv")
    assert log["sample_id"].tolist() == sample_ids
    echo = json.loads(log["config"].iloc[0])
    assert echo["model"]["dim"] == 8
    assert echo["export"]["concept"] == concept


def test_export_rejects_unknown_concept_and_sample(tmp_path, trained):
    base = ["export-attn", "--checkpoint", str(trained / "last.ckpt"), "--out", str(tmp_path)]
    assert main([*base, "--concept", "zebra", "--samples", "0"]) == 2
    assert main([*base, "--concept", "atelectasis", "--samples", "999999"]) == 3


def test_ablate_two_heads(tmp_path, tiny_dataset_dir):
    out = tmp_path / "ablate"
    assert main([
        "ablate", "--dataset", str(tiny_dataset_dir), "--out", str(out), *MODEL_FLAGS,
        "--epochs", "1", "--batch-size", "8", "--head-kinds", "linear,mlp", "--kv-choices", "local",
    ]) == 0
    table = pd.read_csv(out / "ablation.csv")
    assert table["head_kind"].tolist() == ["linear", "mlp"]
    assert (table["status"] == "ok").all()
