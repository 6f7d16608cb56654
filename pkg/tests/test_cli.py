import json

import numpy as np
import pytest

from xedit.checkpoint import load_model
from xedit.cli import main
from xedit.editor import ProjectionCache

TINY = {
    "data": {"n_per_class": 12, "synthetic": {"image_size": 8}},
    "model": {"image_size": 8, "patch_size": 4, "d_model": 8, "n_heads": 2, "n_layers": 2, "d_mlp": 16},
    "train": {"epochs": 2, "batch_size": 8},
    "trace": {"n_runs": 2, "top_k": 2},
    "edit": {"top_k": 2},
    "harvest": {"n_anchors": 4},
    "baseline": {"train": {"epochs": 1}},
}


@pytest.fixture
def run(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    work = tmp_path / "work"
    work.mkdir()

    def _run(*args):
        return main([args[0], "--config", str(cfg), "--workdir", str(work), *args[1:]])

    _run.work = work
    return _run


def test_help_lists_defaults(capsys):
    assert main(["edit", "--help"]) == 0
    out = capsys.readouterr().out
    for text in ("--steps", "(default: 5)", "(default: 0.1)", "(default: 500)", "(default: 32)", "(default: 3)"):
        assert text in out


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["train", "--nope"]) == 1
    assert main(["sweep", "--axis", "bogus", "--values", "1"]) == 1


def test_missing_output_dir_exit_2(tmp_path, capsys):
    assert main(["gen-data", "--workdir", str(tmp_path / "absent")]) == 2
    assert "absent" in capsys.readouterr().err


def test_missing_prerequisite_exit_2(run):
    assert run("train") == 2
    assert run("gen-data") == 0
    assert run("trace") == 2


def test_pipeline_and_idempotence(run, capsys):
    w = run.work
    assert run("gen-data") == 0
    first = {p: (w / p).read_bytes() for p in ("train.xeds", "val.xeds", "test.xeds")}
    assert run("gen-data") == 0
    assert all((w / p).read_bytes() == b for p, b in first.items())
    assert len(np.frombuffer(first["train.xeds"][14:], np.uint8)) == 20 * 65  # round(0.4 * 12) = 5 per class, 8*8+1 bytes each

    assert run("train") == 0
    ck = (w / "base.xeck").read_bytes()
    assert run("train") == 0
    assert (w / "base.xeck").read_bytes() == ck

    assert run("trace") == 0
    traces = json.loads((w / "traces.json").read_text())
    n_edits = len(traces["meta"]["edit_ids"])
    assert n_edits > 0

    # zero steps leaves the model untouched: no accuracy change and nothing fixed
    assert run("edit", "--steps", "0") == 0
    capsys.readouterr()
    assert run("eval") == 0
    rep = json.loads((w / "report.json").read_text())["reports"][0]
    assert rep["delta_acc_pp"] == 0.0 and rep["n_corrected"] == 0 and rep["n_edits"] == n_edits
    assert rep["config"]["edit"]["target_steps"] == 0

    # no anchors means no protected subspace
    assert run("edit", "--anchors", "0") == 0
    cache = ProjectionCache.load(w / "projection.xeck")
    assert all(np.allclose(e.P, np.eye(16)) for e in cache.entries.values())
    assert run("edit", "--resume", "--per-sample") == 0
    assert run("edit", "--retrace") == 0

    for method in ("finetune", "finetune-l2", "retrain"):
        assert run("baseline", "--method", method) == 0
    assert load_model(w / "baseline-finetune.xeck")[1]["method"] == "FineTune"
    capsys.readouterr()
    assert run("eval", "--include-tracing") == 0
    out = capsys.readouterr().out
    assert "X-Edit" in out and "ReTrain" in out
    assert (w / "report.txt").exists() and (w / "report.png").exists()

    assert run("sweep", "--axis", "target_steps", "--values", "0,1,2", "--steps", "1") == 0
    lines = (w / "sweep-target_steps.csv").read_text().splitlines()
    assert lines[1] == "value,fix_ratio,delta_acc_pp" and len(lines) == 5
    assert lines[2].startswith("0.0,0.0,0.0")
    assert (w / "sweep-target_steps.png").exists()
    assert run("sweep", "--axis", "anchor_size", "--values", "a,b") == 1


def test_numerical_failure_exit_3(run, capsys):
    assert run("gen-data") == 0
    assert run("train", "--train-lr", "1e300") == 3
    assert "numerical failure in trainer" in capsys.readouterr().err


def test_run_all(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["run-all", "--config", str(cfg), "--workdir", str(tmp_path / "w")]) == 0
    out = capsys.readouterr().out
    for tag in ("X-Edit", "FineTune", "FineTune+L2", "ReTrain"):
        assert tag in out
