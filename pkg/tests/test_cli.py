import json

import pytest

from dfacon.cli import build_parser, run


def lines(path):
    return [json.loads(x) for x in path.read_text().splitlines() if x.strip()]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> split -> train (3 epochs) -> build-index, shared by the tests below."""
    d = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--anchors", "10", "--out", str(d / "data")]) == 0
    assert run(["split", "--manifest", str(d / "data"), "--out", str(d / "parts")]) == 0
    assert run(["train", "--manifest", str(d / "data" / "manifest"), "--epochs", "3",
                "--out", str(d / "model.ckpt"), "--log", str(d / "train.jsonl"),
                "--figures", str(d / "fig")]) == 0
    assert run(["build-index", "--model", str(d / "model.ckpt"), "--originals", str(d / "data"),
                "--out", str(d / "idx.bin")]) == 0
    return d


def test_train_outputs(workspace):
    assert (workspace / "model.ckpt").stat().st_size > 0
    log = lines(workspace / "train.jsonl")
    assert [r["epoch"] for r in log] == [0, 1, 2]
    assert (workspace / "fig" / "training.png").exists()


def test_detect_returns_topk(workspace, capsys):
    q = sorted((workspace / "data" / "forgeries").iterdir())[0]
    out = workspace / "verdict.jsonl"
    code = run(["detect", "--index", str(workspace / "idx.bin"), "--image", str(q),
                "--threshold", "0.8", "--k", "5", "--out", str(out)])
    assert code == 0
    (rec,) = lines(out)
    assert len(rec["topk"]) == 5
    assert rec["best_match"] == rec["topk"][0][0]
    assert rec["infringing"] == (rec["best_score"] >= 0.8)
    assert "best" in capsys.readouterr().out


def test_detect_is_repeatable(workspace):
    q = str(sorted((workspace / "data" / "originals").iterdir())[3])
    outs = []
    for k in range(2):
        out = workspace / f"rep{k}.jsonl"
        run(["detect", "--index", str(workspace / "idx.bin"), "--image", q, "--threshold", "0.5",
             "--out", str(out), "--seed", "0"])
        outs.append(out.read_text())
    assert outs[0] == outs[1]


def test_evaluate_needs_threshold_or_calibration(workspace, capsys):
    code = run(["evaluate", "--model", str(workspace / "model.ckpt"), "--manifest", str(workspace / "data")])
    assert code == 1
    err = capsys.readouterr().err
    assert "--threshold" in err and "--calibrate" in err


def test_evaluate_and_calibrate(workspace):
    parts = workspace / "parts"
    code = run(["calibrate", "--model", str(workspace / "model.ckpt"), "--manifest", str(parts / "train.jsonl"),
                "--out", str(workspace / "thr.jsonl")])
    assert code == 0
    thr = lines(workspace / "thr.jsonl")[0]["threshold"]
    out = workspace / "eval.jsonl"
    code = run(["evaluate", "--model", str(workspace / "model.ckpt"), "--manifest", str(parts / "val.jsonl"),
                "--threshold", str(thr), "--out", str(out), "--figures", str(workspace / "fig")])
    assert code == 0
    rows = lines(out)
    assert rows[0]["row"] == "overall" and rows[0]["threshold"] == thr
    assert (workspace / "fig" / "scores.png").exists() and (workspace / "fig" / "per_attack.png").exists()


def test_ablate(workspace):
    out = workspace / "ablate.jsonl"
    assert run(["ablate", "--model", str(workspace / "model.ckpt"), "--manifest", str(workspace / "data"),
                "--out", str(out), "--figures", str(workspace / "fig")]) == 0
    rows = lines(out)
    assert {r.get("probe"): r.get("dim") for r in rows[:2]} == {"encoder_output": 64, "projection_output": 128}
    assert "f1" in rows[2]["delta_encoder_minus_projection"]
    assert (workspace / "fig" / "ablation.png").exists()


def test_pairscore(workspace, capsys):
    a = str(sorted((workspace / "data" / "originals").iterdir())[0])
    assert run(["pairscore", "--model", str(workspace / "model.ckpt"), "--a", a, "--b", a]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1.0, abs=1e-6)


def test_criterion_check(workspace):
    orig = sorted((workspace / "data" / "originals").iterdir())[0]
    out = workspace / "crit.jsonl"
    assert run(["criterion-check", "--generated", str(orig), "--original", str(orig),
                "--grid", "--out", str(out)]) == 0
    (rec,) = lines(out)
    assert rec["infringing"] and rec["witness"]["distance"] == 0.0 and rec["grid"]


def test_criterion_calibration(workspace):
    out = workspace / "delta.jsonl"
    assert run(["criterion-check", "--calibrate", str(workspace / "parts" / "val.jsonl"),
                "--transforms", "identity", "--out", str(out)]) == 0
    assert lines(out)[0]["delta"] > 0


def test_usage_errors_exit_one(capsys):
    assert run(["nope"]) == 1
    assert run(["synth", "--bogus"]) == 1
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_file_exits_one(tmp_path):
    assert run(["calibrate", "--model", str(tmp_path / "missing.ckpt"), "--manifest", str(tmp_path)]) == 1


def test_runtime_failure_exits_two(tmp_path, monkeypatch):
    import dfacon.synth as S
    from dfacon.errors import NumericError

    def boom(*a, **k):
        raise NumericError("overflow")

    monkeypatch.setattr(S, "generate", boom)
    assert run(["synth", "--out", str(tmp_path)]) == 2


def test_config_file_defaults_and_explicit_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"anchors": 3, "dissimilar": 2, "size": 16}))
    assert run(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert len((tmp_path / "a" / "manifest.jsonl").read_text().splitlines()) == 3 * 4 + 2
    assert run(["synth", "--config", str(cfg), "--anchors", "2", "--out", str(tmp_path / "b")]) == 0
    assert len((tmp_path / "b" / "manifest.jsonl").read_text().splitlines()) == 2 * 4 + 2


def test_data_root_environment(tmp_path, monkeypatch):
    assert run(["synth", "--anchors", "2", "--dissimilar", "1", "--size", "16", "--out", str(tmp_path / "ds")]) == 0
    monkeypatch.setenv("DFACON_DATA_ROOT", str(tmp_path))
    monkeypatch.chdir(tmp_path.parent)
    assert run(["split", "--manifest", "ds", "--ratio", "0.5", "--out", str(tmp_path / "parts")]) == 0


def test_help_lists_every_flag_with_defaults():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) >= {"synth", "train", "build-index", "detect", "pairscore", "calibrate",
                                "evaluate", "ablate", "criterion-check"}
    for name, sp in sub.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
        assert "default" in text
