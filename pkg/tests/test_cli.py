import json

import pytest

from struvis.cli import build_parser, main
from struvis.clients import mock_prompt

from .fixtures import STATE, rollout

MINIMAL = ('{"entities":[{"id":"cat_1","name":"cat","count":1}],"relations":[],'
           '"layout":{"cat_1":{"x0":0.1,"y0":0.1,"x1":0.9,"y1":0.9,"depth":0}}}')


def run(capsys, argv):
    code = main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def payload(out):
    return json.loads(out)


def test_validate_codes(tmp_path, capsys):
    good = tmp_path / "s.json"
    good.write_text(MINIMAL)
    code, out, _ = run(capsys, ["validate", str(good)])
    assert code == 0 and payload(out)["valid"] is True
    bad = tmp_path / "b.json"
    bad.write_text("{")
    code, out, _ = run(capsys, ["validate", str(bad)])
    assert code == 1 and payload(out)["violations"][0]["path"] == "$"
    code, out, err = run(capsys, ["validate", str(tmp_path / "missing.json")])
    assert code == 2 and out == "" and "cannot read" in err


def test_validate_missing_argument(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["validate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_validate_stdin(monkeypatch, capsys):
    import io

    monkeypatch.setattr("sys.stdin", io.StringIO(MINIMAL))
    code, out, _ = run(capsys, ["validate", "-"])
    assert code == 0


def test_score_gated_and_fixed(tmp_path, capsys):
    r = tmp_path / "r.txt"
    r.write_text("no tags here")
    code, out, _ = run(capsys, ["score", str(r), "--prompt", "p", "--mock"])
    b = payload(out)
    assert code == 0 and b["gate_passed"] is False and b["external_calls_made"] == 0 and b["r_final"] == 0.0
    r.write_text(rollout(STATE, "a red cat"))
    code, out, _ = run(capsys, ["score", str(r), "--prompt", "p", "--mock", "--mock-judge", "1", "2", "0",
                                "--mock-hps", "0.5", "--mock-vlm", "1.0"])
    b = payload(out)
    assert code == 0 and abs(b["r_final"] - (0.3 * 0.5 + 0.7 * 0.7)) <= 1e-12


def test_score_unreachable_exit_3(tmp_path, capsys):
    r = tmp_path / "r.txt"
    r.write_text(rollout(STATE, "a red cat"))
    ep = tmp_path / "ep.yaml"
    ep.write_text("endpoints:\n  base_url: http://127.0.0.1:9\n  timeout: 2\n")
    code, out, err = run(capsys, ["score", str(r), "--prompt", "p", "--endpoints", str(ep), "--backoff", "0"])
    assert code == 3
    assert payload(out)["partial"]["external_calls_made"] == 3
    assert "retry 2/2" in err


def test_score_unreachable_but_gated_needs_no_service(tmp_path, capsys):
    r = tmp_path / "r.txt"
    r.write_text("no tags")
    ep = tmp_path / "ep.yaml"
    ep.write_text("endpoints:\n  base_url: http://127.0.0.1:9\n")
    code, out, _ = run(capsys, ["score", str(r), "--prompt", "p", "--endpoints", str(ep)])
    assert code == 0 and payload(out)["external_calls_made"] == 0


def _pipeline_cfg(tmp_path, extra=""):
    cfg = tmp_path / "p.yaml"
    cfg.write_text(f"pipeline:\n  per_domain: 10\n  output: {tmp_path / 'out.jsonl'}\n"
                   f"  backoff: 0\nmock:\n  enabled: true\n{extra}")
    return cfg


def test_pipeline_mock_resume_and_faults(tmp_path, capsys):
    cfg = _pipeline_cfg(tmp_path)
    code, out, _ = run(capsys, ["pipeline", str(cfg)])
    assert code == 0 and payload(out)["records_written"] == 80
    assert len((tmp_path / "out.jsonl").read_text().splitlines()) == 80
    code, out, _ = run(capsys, ["pipeline", str(cfg), "--resume"])
    rep = payload(out)
    assert code == 0 and rep["records_written"] == 0 and sum(rep["skips"].values()) == 80

    bad = [mock_prompt("entity", 0), mock_prompt("entity", 9)]
    faulty = _pipeline_cfg(tmp_path, "  bad_extract:\n" + "".join(f"    - {p}\n" for p in bad))
    code, out, _ = run(capsys, ["pipeline", str(faulty), "--output", str(tmp_path / "f.jsonl")])
    rep = payload(out)
    assert code == 1 and rep["failures_by_stage"] == {"extract": 2} and rep["records_written"] == 78


def test_pipeline_bad_config(tmp_path, capsys):
    cfg = tmp_path / "p.yaml"
    cfg.write_text("pipeline:\n  targets: {sports: 3}\n")
    code, _, err = run(capsys, ["pipeline", str(cfg)])
    assert code == 2 and "sports" in err
    cfg.write_text("pipeline: [1, 2\n")
    assert run(capsys, ["pipeline", str(cfg)])[0] == 2


def test_train_toy_short_and_deterministic(tmp_path, capsys):
    argv = ["train", "toy", "--seed", "0", "--steps", "20", "--out-dir"]
    code, out, _ = run(capsys, argv + [str(tmp_path / "a")])
    summary = payload(out)
    assert code == 0 and summary["steps"] == 20
    run(capsys, argv + [str(tmp_path / "b")])
    a = (tmp_path / "a" / "toy_curve.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "toy_curve.jsonl").read_bytes()
    rows = [json.loads(line) for line in a.decode().splitlines()]
    assert len(rows) == 20 and set(rows[0]) == {"step", "mean_reward", "loss", "grad_norm", "lr"}
    ckpt = json.loads((tmp_path / "a" / "toy_checkpoint.json").read_text())
    assert ckpt["format"] == "struvis-checkpoint" and ckpt["stage"] == "grpo"


def test_train_toy_from_checkpoint(tmp_path, capsys):
    run(capsys, ["train", "toy", "--steps", "3", "--out-dir", str(tmp_path / "a")])
    code, out, _ = run(capsys, ["train", "toy", "--steps", "3", "--out-dir", str(tmp_path / "b"),
                                "--init", str(tmp_path / "a" / "toy_checkpoint.json")])
    assert code == 0
    code, _, err = run(capsys, ["train", "toy", "--init", str(tmp_path / "nope.json"), "--out-dir", str(tmp_path)])
    assert code == 2


def test_train_toy_prompt_file(tmp_path, capsys):
    good = tmp_path / "prompts.txt"
    good.write_text("a red cat\n\nthe sky above a tree\n")
    code, out, _ = run(capsys, ["train", "toy", "--steps", "2", "--prompts", str(good), "--out-dir", str(tmp_path)])
    assert code == 0 and payload(out)["steps"] == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("a red cat\na purple cat\n")
    code, out, _ = run(capsys, ["train", "toy", "--steps", "2", "--prompts", str(bad), "--out-dir", str(tmp_path)])
    assert code == 1 and "prompt 2" in payload(out)["error"]
    code, _, _ = run(capsys, ["train", "toy", "--prompts", str(tmp_path / "missing.txt"), "--out-dir", str(tmp_path)])
    assert code == 2


def test_train_sft(tmp_path, capsys):
    cfg = tmp_path / "p.yaml"
    cfg.write_text(f"pipeline:\n  per_domain: 4\n  output: {tmp_path / 'cot.jsonl'}\nmock:\n  enabled: true\n")
    assert run(capsys, ["pipeline", str(cfg)])[0] == 0
    code, out, _ = run(capsys, ["train", "sft", "--data", str(tmp_path / "cot.jsonl"), "--epochs", "3",
                                "--seed", "0", "--out-dir", str(tmp_path / "runs")])
    summary = payload(out)
    assert code == 0 and summary["strictly_decreasing"] is True and summary["records"] == 32


def test_train_sft_bad_dataset_and_flags(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{}\n")
    code, out, _ = run(capsys, ["train", "sft", "--data", str(bad), "--out-dir", str(tmp_path)])
    assert code == 1 and "bad dataset" in payload(out)["error"]
    assert run(capsys, ["train", "sft", "--out-dir", str(tmp_path)])[0] == 2
    assert run(capsys, ["train", "toy", "--steps", "0", "--out-dir", str(tmp_path)])[0] == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "toy", "--steps", "many"])
    assert exc.value.code == 2


def test_help_documents_exit_codes_and_every_flag():
    parser = build_parser()
    text = parser.format_help()
    for code in ("0 success", "1 validation", "2 usage", "3 external"):
        assert code in text
    # every settings flag names its config key in square brackets
    for action in parser._subparsers._group_actions[0].choices["score"]._actions:
        if action.option_strings and action.dest not in ("help", "prompt", "endpoints"):
            assert "[" in (action.help or ""), action.dest
