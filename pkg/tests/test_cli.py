"""Command-line verbs and exit-code mapping."""

import json

import pytest

from muan.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from muan.data import read_dataset, toy_vocabulary


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_config(tmp_path, train_name="train.jsonl", val_name="val.jsonl", **train_over):
    cfg = {
        "model": {
            "core": {"task": "vqa", "L": 1, "d": 16, "h": 2, "d_g": 4,
                     "dropout": 0.1, "d_y": 8},
            "vocab_size": len(toy_vocabulary()), "d_e": 8,
            "n_answers": 26, "m_max": 14, "n_visual": 10,
        },
        "data": {"train_path": train_name, "val_path": val_name},
        "train": {"epochs": 2, "batch_size": 32, "seed": 5, **train_over},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_gen_data_writes_a_readable_dataset(tmp_path, capsys):
    out = tmp_path / "data.jsonl"
    code, stdout, _ = run_cli(capsys, "gen-data", "--task", "vqa", "--n", "12",
                              "--out", str(out), "--seed", "3")
    assert code == EXIT_OK
    assert json.loads(stdout) == {"task": "vqa", "n": 12, "out": str(out)}
    assert len(read_dataset(out)) == 12


def test_gen_data_rejects_nonpositive_n(tmp_path, capsys):
    code, _, err = run_cli(capsys, "gen-data", "--task", "vqa", "--n", "0",
                           "--out", str(tmp_path / "x.jsonl"), "--seed", "1")
    assert code == EXIT_CONFIG
    assert "--n" in err


def test_train_eval_export_cycle(tmp_path, capsys):
    run_cli(capsys, "gen-data", "--task", "vqa", "--n", "64",
            "--out", str(tmp_path / "train.jsonl"), "--seed", "3")
    run_cli(capsys, "gen-data", "--task", "vqa", "--n", "16",
            "--out", str(tmp_path / "val.jsonl"), "--seed", "4")
    cfg = write_config(tmp_path)

    code, stdout, _ = run_cli(capsys, "train", "--config", str(cfg),
                              "--run-dir", str(tmp_path / "run"))
    assert code == EXIT_OK
    summary = json.loads(stdout)
    assert summary["task"] == "vqa"
    ckpt = tmp_path / "run" / "best.ckpt"
    assert ckpt.exists()

    code, stdout, _ = run_cli(capsys, "eval", "--ckpt", str(ckpt),
                              "--data", str(tmp_path / "val.jsonl"))
    assert code == EXIT_OK
    metrics = json.loads(stdout)
    assert metrics["task"] == "vqa" and metrics["n"] == 16

    code, stdout, _ = run_cli(capsys, "export-attn", "--ckpt", str(ckpt),
                              "--data", str(tmp_path / "val.jsonl"),
                              "--sample", "0", "--out", str(tmp_path / "maps"))
    assert code == EXIT_OK
    assert (tmp_path / "maps" / "attention.json").exists()
    assert (tmp_path / "maps" / "block00" / "head0.csv").exists()


def test_train_with_ablation_flag(tmp_path, capsys):
    run_cli(capsys, "gen-data", "--task", "vqa", "--n", "32",
            "--out", str(tmp_path / "train.jsonl"), "--seed", "3")
    run_cli(capsys, "gen-data", "--task", "vqa", "--n", "8",
            "--out", str(tmp_path / "val.jsonl"), "--seed", "4")
    cfg = write_config(tmp_path, epochs=1)
    code, stdout, _ = run_cli(capsys, "train", "--config", str(cfg),
                              "--ablate", "no-co",
                              "--run-dir", str(tmp_path / "run"))
    assert code == EXIT_OK
    assert json.loads(stdout)["ablate"] == "no-co"


def test_missing_config_is_exit_two(tmp_path, capsys):
    code, _, err = run_cli(capsys, "train", "--config", str(tmp_path / "ghost.json"))
    assert code == EXIT_CONFIG
    assert "no config" in err


def test_bad_checkpoint_is_exit_two(tmp_path, capsys):
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"not a checkpoint at all")
    run_cli(capsys, "gen-data", "--task", "vqa", "--n", "4",
            "--out", str(tmp_path / "val.jsonl"), "--seed", "4")
    code, _, err = run_cli(capsys, "eval", "--ckpt", str(bogus),
                           "--data", str(tmp_path / "val.jsonl"))
    assert code == EXIT_CONFIG
    assert "magic" in err


def test_divergence_is_exit_three(tmp_path, capsys):
    run_cli(capsys, "gen-data", "--task", "vqa", "--n", "96",
            "--out", str(tmp_path / "train.jsonl"), "--seed", "3")
    run_cli(capsys, "gen-data", "--task", "vqa", "--n", "8",
            "--out", str(tmp_path / "val.jsonl"), "--seed", "4")
    cfg = write_config(tmp_path, epochs=1, lr_coefficient=1e155)
    code, _, err = run_cli(capsys, "train", "--config", str(cfg),
                           "--run-dir", str(tmp_path / "run"))
    assert code == EXIT_NUMERIC
    assert "numerical failure" in err


def test_export_sample_index_out_of_range(tmp_path, capsys):
    run_cli(capsys, "gen-data", "--task", "vqa", "--n", "16",
            "--out", str(tmp_path / "train.jsonl"), "--seed", "3")
    run_cli(capsys, "gen-data", "--task", "vqa", "--n", "8",
            "--out", str(tmp_path / "val.jsonl"), "--seed", "4")
    cfg = write_config(tmp_path, epochs=1)
    run_cli(capsys, "train", "--config", str(cfg), "--run-dir", str(tmp_path / "run"))
    code, _, err = run_cli(capsys, "export-attn",
                           "--ckpt", str(tmp_path / "run" / "best.ckpt"),
                           "--data", str(tmp_path / "val.jsonl"),
                           "--sample", "99", "--out", str(tmp_path / "maps"))
    assert code == EXIT_CONFIG
    assert "out of range" in err


def test_unknown_verb_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["conjure"])
    assert exc.value.code == 2


def test_eval_task_mismatch_is_exit_two(tmp_path, capsys):
    run_cli(capsys, "gen-data", "--task", "vqa", "--n", "32",
            "--out", str(tmp_path / "train.jsonl"), "--seed", "3")
    run_cli(capsys, "gen-data", "--task", "vqa", "--n", "8",
            "--out", str(tmp_path / "val.jsonl"), "--seed", "4")
    run_cli(capsys, "gen-data", "--task", "grounding", "--n", "4",
            "--out", str(tmp_path / "gdata.jsonl"), "--seed", "5")
    cfg = write_config(tmp_path, epochs=1)
    run_cli(capsys, "train", "--config", str(cfg), "--run-dir", str(tmp_path / "run"))
    code, _, err = run_cli(capsys, "eval",
                           "--ckpt", str(tmp_path / "run" / "best.ckpt"),
                           "--data", str(tmp_path / "gdata.jsonl"))
    assert code == EXIT_CONFIG
    assert "other tasks" in err
