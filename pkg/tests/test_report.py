import json

import pytest

from langneck.evaluation import EvalResult
from langneck.report import REPORT_COLUMNS, EpochStats, MetricsReport, emit_report, read_report_csv


def _report():
    report = MetricsReport(method="token_sim", metadata={"config_hash": "0123456789abcdef", "seed": 0})
    report.epochs.append(EpochStats(1, 2.5, 0.4, 3.1, 2.54, 0.25))
    report.add(EvalResult("hard", "clean", 0, 0.5, 0.1, 3.0, 3.5, 0, 16))
    report.add(EvalResult("hard", "gaussian_noise", 3, 0.375, 0.2, 3.2, 3.0, 1, 16))
    return report


def test_csv_columns_and_values(tmp_path):
    csv_path, _ = emit_report(_report(), tmp_path / "report")
    assert csv_path.read_text().splitlines()[0] == "# config_hash=0123456789abcdef"
    frame = read_report_csv(csv_path)
    assert list(frame.columns) == REPORT_COLUMNS
    assert len(REPORT_COLUMNS) == 6
    assert frame["method"].tolist() == ["token_sim", "token_sim"]
    assert frame["severity"].tolist() == [0, 3]
    assert frame["accuracy"].tolist() == [0.5, 0.375]


def test_json_holds_everything(tmp_path):
    _, json_path = emit_report(_report(), tmp_path / "report.csv")
    data = json.loads(json_path.read_text())
    assert json_path.name == "report.json"
    assert data["metadata"]["config_hash"] == "0123456789abcdef"
    assert data["epochs"][0]["val_hard_accuracy"] == 0.25
    assert data["evaluations"][1]["corruption"] == "gaussian_noise"


def test_outputs_are_byte_identical(tmp_path):
    a = emit_report(_report(), tmp_path / "a" / "report")
    b = emit_report(_report(), tmp_path / "b" / "report")
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()


def test_accuracy_lookup():
    report = _report()
    assert report.accuracy("hard") == 0.5
    assert report.accuracy("hard", "gaussian_noise", 3) == 0.375
    with pytest.raises(KeyError):
        report.accuracy("soft")


def test_add_keeps_explicit_method():
    report = MetricsReport(method="grid")
    report.add(EvalResult("hard", "clean", 0, 1.0, 0.0, 0.0, 4.0, 0, 1), method="plain")
    assert report.evaluations[0].method == "plain"
