"""CSV and summary output for prune runs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .pipeline import RunReport, StepRecord

CSV_COLUMNS = ["step", "layer_id", "criterion", "kept", "acc_damage", "acc_recovery", "epochs_to_peak",
               "params", "mult_adds"]
CSV_NAME = "report.csv"
SUMMARY_NAME = "summary.txt"


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _parse_acc(s: str) -> float:
    return float(np.float32(float(s)))


def write_csv(steps: list[StepRecord], path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in steps:
            writer.writerow([r.step, r.layer_id, r.criterion, r.kept, _fmt(r.acc_damage), _fmt(r.acc_recovery),
                             r.epochs_to_peak, r.params, r.mult_adds])


def read_csv(path) -> list[StepRecord]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            StepRecord(int(row["step"]), row["layer_id"], row["criterion"], int(row["kept"]),
                       _parse_acc(row["acc_damage"]), _parse_acc(row["acc_recovery"]), int(row["epochs_to_peak"]),
                       int(row["params"]), int(row["mult_adds"]))
            for row in reader
        ]


def summary_text(report: RunReport) -> str:
    lines = [
        f"baseline_accuracy: {_fmt(report.baseline_accuracy)}",
        f"final_accuracy: {_fmt(report.final_accuracy)}",
        f"final_curve: {' '.join(_fmt(a) for a in report.final_curve)}",
        f"final_epochs_to_peak: {report.final_epochs_to_peak}",
        f"params: {report.params}",
        f"mult_adds: {report.mult_adds}",
        f"steps: {len(report.steps)}",
        f"random_generator: {report.random_generator}",
        f"wall_time_s: {report.wall_time:.3f}",
    ]
    for r in report.steps:
        lines.append(f"step_{r.step}_curve: {r.layer_id} {' '.join(_fmt(a) for a in r.curve)}")
        lines.append(f"step_{r.step}_wall_time_s: {r.wall_time:.3f}")
    lines.append(f"config: {json.dumps(report.config, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def emit_report(report: RunReport, directory) -> tuple[Path, Path]:
    """Write ``report.csv`` and ``summary.txt`` into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, summary_path = out / CSV_NAME, out / SUMMARY_NAME
    write_csv(report.steps, csv_path)
    with open(summary_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(summary_text(report))
    return csv_path, summary_path


def read_summary(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            key, _, value = line.rstrip("\n").partition(": ")
            out[key] = value
    return out


def comparison_table(runs: dict[str, list[StepRecord]], field: str = "acc_recovery") -> str:
    """Per-layer table with one column per run, for side-by-side plotting."""
    names = list(runs)
    layers = []
    for steps in runs.values():
        for r in steps:
            if r.layer_id not in layers:
                layers.append(r.layer_id)
    rows = ["layer_id," + ",".join(names)]
    for lid in layers:
        cells = []
        for name in names:
            match = [r for r in runs[name] if r.layer_id == lid]
            cells.append(_fmt(getattr(match[0], field)) if match else "")
        rows.append(lid + "," + ",".join(cells))
    return "\n".join(rows) + "\n"
