import json

import pytest

from sslalm.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_OK, build_parser, main)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(["synth", "--out", str(data),
               "--set", "data.train_clips=4", "--set", "data.eval_clips=2"])
    assert rc == EXIT_OK
    return root, data


def test_synth_outputs(workspace):
    _, data = workspace
    assert (data / "train.jsonl").exists() and (data / "eval.jsonl").exists()
    assert (data / "synth_spec.json").exists()
    assert (data / "resolved_config.cfg").exists()
    assert len(list((data / "spectrograms").glob("*.spec"))) == 6


def test_shapes_paper_preset(capsys):
    assert main(["shapes", "--preset", "paper-sslm-small"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "input              1024x128" in out
    assert "group3             32x4x768" in out
    assert "audio_tokens       32 tokens of dim 2560" in out


def test_count_params_paper_presets(capsys):
    assert main(["count-params", "--preset", "paper-sslm-small"]) == EXIT_OK
    small = capsys.readouterr().out
    assert "6,553,600" in small
    assert main(["count-params", "--preset", "paper-hybrid-small"]) == EXIT_OK
    assert "4,194,304" in capsys.readouterr().out


def test_train_eval_generate_round_trip(workspace, capsys):
    root, data = workspace
    run = root / "run"
    rc = main(["train", "--data", str(data), "--out", str(run),
               "--set", "train.max_steps=2", "--set", "train.batch_size=2"])
    assert rc == EXIT_OK
    assert (run / "checkpoint.ckpt").exists()
    assert (run / "loss_curve.png").exists()
    assert len((run / "metrics.tsv").read_text().strip().splitlines()) == 2
    capsys.readouterr()

    rc = main(["eval", "--checkpoint", str(run / "checkpoint.ckpt"),
               "--data", str(data / "eval.jsonl"), "--out", str(run),
               "--set", "sampler.max_new_tokens=8"])
    assert rc == EXIT_OK
    report = json.loads((run / "eval_report.json").read_text())
    assert "single" in report["metrics"] and len(report["predictions"]) == 2
    assert (run / "eval_metrics.png").exists()

    spec = json.loads((data / "train.jsonl").read_text().splitlines()[0])
    rc = main(["generate", "--checkpoint", str(run / "checkpoint.ckpt"),
               "--spectrogram", str(data / spec["spectrogram"]),
               "--max-new-tokens", "8", "--temperature", "0"])
    assert rc == EXIT_OK


def test_exit_codes(tmp_path, capsys):
    assert main(["shapes", "--preset", "nope"]) == EXIT_CONFIG
    assert main(["synth", "--out", str(tmp_path / "x"),
                 "--set", "data.F=4"]) == EXIT_CONFIG  # too few bands
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(bad),
                 "--data", str(tmp_path / "missing.jsonl")]) == EXIT_DATA
    capsys.readouterr()


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("SSLALM_THREADS", "abc")
    assert main(["shapes"]) == EXIT_CONFIG
    monkeypatch.setenv("SSLALM_THREADS", "2")
    monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
    assert main(["shapes"]) == EXIT_OK
    import os
    assert os.environ["OMP_NUM_THREADS"] == "2"


def test_parser_has_all_subcommands():
    sub = {a.dest: a for a in build_parser()._actions}["command"]
    assert set(sub.choices) == {"synth", "train", "eval", "generate",
                                "count-params", "shapes"}
