import numpy as np
import pytest

from xedit.data import Dataset, SampleSet
from xedit.errors import ConfigError, FormatError
from xedit.evaluation import (SweepRow, compute_report, drop_per_edit, evaluate_accuracy, format_table, load_reports,
                              read_sweep_csv, round_half_up, save_reports, spearman, write_sweep_csv)
from xedit.model import init_model, predict


def test_accuracy_against_loop(tiny_model64, rng):
    imgs = rng.integers(0, 256, size=(10, 8, 8)).astype(np.uint8)
    labels = rng.integers(0, 3, size=10)
    ds = Dataset(imgs, labels, 3, "test")
    loop = sum(int(predict(tiny_model64, imgs[i])[0][0] == labels[i]) for i in range(10)) / 10
    assert evaluate_accuracy(tiny_model64, ds) == loop
    assert evaluate_accuracy(tiny_model64, ds, batch=3) == loop
    with pytest.raises(ConfigError):
        evaluate_accuracy(tiny_model64, Dataset(imgs[:0], labels[:0], 3))


def test_constant_class_model_on_balanced_set(tiny_config, rng):
    m = init_model(tiny_config.__class__(**{**tiny_config.to_dict(), "n_classes": 4}), dtype=np.float64)
    m.params["head.weight"][:] = 0
    m.params["head.bias"][:] = [0, 0, 5, 0]
    imgs = rng.integers(0, 256, size=(8, 8, 8)).astype(np.uint8)
    assert evaluate_accuracy(m, Dataset(imgs, np.repeat(np.arange(4), 2), 4)) == 0.25


@pytest.mark.parametrize("drop,n,want", [(0.36, 14, 0.03), (28.38, 77, 0.37), (-0.23, 14, 0.00)])
def test_drop_per_edit_rounding(drop, n, want):
    dpe, no_fix = drop_per_edit(drop, n)
    assert not no_fix
    assert round_half_up(dpe, 2) == want


def test_drop_per_edit_without_fixes():
    assert drop_per_edit(3.0, 0) == (0.0, True)


def test_report_fields():
    r = compute_report("X", 0.9, 0.88, 7, 10, 2.0, config={"a": 1})
    assert r.delta_acc_pp == pytest.approx(2.0)
    assert r.fix_ratio == 0.7 and r.edit_time_s_per_sample == 0.2
    assert r.dpe == pytest.approx(2.0 / 7)
    identity = compute_report("id", 0.9, 0.9, 0, 5, 0.0)
    assert identity.delta_acc_pp == 0 and identity.fix_ratio == 0 and identity.no_fix
    with pytest.raises(ConfigError):
        compute_report("X", 0.9, 0.9, 5, 3, 1.0)


def test_report_json_and_table(tmp_path):
    reports = [compute_report("X-Edit", 0.95, 0.9464, 14, 14, 1.4),
               compute_report("FineTune", 0.95, 0.95, 0, 14, 2.0)]
    save_reports(tmp_path / "r.json", reports)
    back = load_reports(tmp_path / "r.json")
    assert [b.to_dict() for b in back] == [r.to_dict() for r in reports]
    table = format_table(reports)
    lines = table.splitlines()
    assert lines[0].startswith("Method") and "100.00% (14/14)" in table and "(no fix)" in table
    assert len({len(l) for l in lines[:2]}) == 1
    (tmp_path / "bad.json").write_text('{"schema": "other"}')
    with pytest.raises(FormatError):
        load_reports(tmp_path / "bad.json")


def test_spearman():
    assert spearman([1, 2, 3, 4], [1, 2, 2, 5]) > 0
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3, 4], [0.5, 0.5, 0.5, 0.5]) == 0.0


def test_sweep_csv_round_trip(tmp_path):
    rows = [SweepRow(1.0, 0.5, 0.1), SweepRow(2.0, 0.75, -0.3)]
    write_sweep_csv(tmp_path / "s.csv", rows, "target_steps")
    text = (tmp_path / "s.csv").read_text().splitlines()
    assert text[1] == "value,fix_ratio,delta_acc_pp"
    axis, back = read_sweep_csv(tmp_path / "s.csv")
    assert axis == "target_steps" and back == rows
