import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_vgg, toy_dataset
from filterprune.pipeline import PruneConfig, StepRecord, quantize, run_prune_schedule
from filterprune.report import CSV_COLUMNS, comparison_table, emit_report, read_csv, read_summary, write_csv

HEADER = "step,layer_id,criterion,kept,acc_damage,acc_recovery,epochs_to_peak,params,mult_adds"
TRAIN, EVAL = toy_dataset(n=30, seed=1), toy_dataset(n=20, seed=2, split="eval")


def _report(**kw):
    return run_prune_schedule(tiny_vgg(dtype=np.float32), PruneConfig(final_finetune_epochs=1, **kw), TRAIN, EVAL)[1]


def test_header_and_encoding(tmp_path):
    csv_path, summary_path = emit_report(_report(), tmp_path / "out")
    raw = csv_path.read_bytes()
    assert raw.decode("utf-8").splitlines()[0] == HEADER == ",".join(CSV_COLUMNS)
    assert b"\r" not in raw and raw.endswith(b"\n")
    summary = read_summary(summary_path)
    assert summary["random_generator"] == "numpy.random.PCG64"
    assert "baseline_accuracy" in summary and "wall_time_s" in summary
    assert b"\r" not in summary_path.read_bytes()


def test_zero_prune_rows(tmp_path):
    report = _report(prune_percent=0)
    csv_path, _ = emit_report(report, tmp_path)
    rows = read_csv(csv_path)
    assert len(rows) == 3 and all(r.acc_damage == r.acc_recovery for r in rows)


def test_round_trip_exact(tmp_path):
    report = _report(criterion="l1-norm")
    rows = read_csv(emit_report(report, tmp_path)[0])
    for a, b in zip(report.steps, rows):
        assert [getattr(a, f) for f in CSV_COLUMNS] == [getattr(b, f) for f in CSV_COLUMNS]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.integers(0, 10**12)), min_size=1, max_size=5))
def test_numeric_round_trip(tmp_path_factory, values):
    steps = [StepRecord(i + 1, f"conv{i}", "random", 3, quantize(d), quantize(r), 0, p, p * 3)
             for i, (d, r, p) in enumerate(values)]
    path = tmp_path_factory.mktemp("rt") / "r.csv"
    write_csv(steps, path)
    back = read_csv(path)
    assert [(s.acc_damage, s.acc_recovery, s.params, s.mult_adds) for s in back] == \
        [(s.acc_damage, s.acc_recovery, s.params, s.mult_adds) for s in steps]


def test_comparison_table(tmp_path):
    runs = {}
    for criterion in ("random", "l1-norm"):
        path = emit_report(_report(criterion=criterion), tmp_path / criterion)[0]
        runs[criterion] = read_csv(path)
    table = comparison_table(runs).splitlines()
    assert table[0] == "layer_id,random,l1-norm"
    assert [line.split(",")[0] for line in table[1:]] == ["conv4", "conv3", "conv2"]
    for line, a, b in zip(table[1:], runs["random"], runs["l1-norm"]):
        assert [float(np.float32(v)) for v in line.split(",")[1:]] == [a.acc_recovery, b.acc_recovery]
