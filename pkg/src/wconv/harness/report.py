"""Result rows, CSV emission and confusion-matrix heat images.

CSV columns, in order::

    method, variant, kernel, alpha, split, seed, epochs, loss,
    accuracy, f1, nrmse, psnr, ssim, fsim, uiq, input_psnr,
    sec_per_epoch, selected, timestamp

Metrics that do not apply to a task are left empty; an infinite PSNR is
written as ``inf``. ``sec_per_epoch`` and ``timestamp`` are wall-clock
derived and are the only columns that differ between repeated runs.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from ..data import save_ppm
from ..metrics import ConfusionMatrix

COLUMNS = (
    "method", "variant", "kernel", "alpha", "split", "seed", "epochs", "loss",
    "accuracy", "f1", "nrmse", "psnr", "ssim", "fsim", "uiq", "input_psnr",
    "sec_per_epoch", "selected", "timestamp",
)
WALL_CLOCK_COLUMNS = ("sec_per_epoch", "timestamp")
_TEXT = {"method", "variant", "kernel", "alpha", "split", "timestamp"}
_INT = {"seed", "epochs", "selected"}


class MetricReport:
    """Append-only list of result rows (dicts keyed by ``COLUMNS``)."""

    def __init__(self, rows=None):
        self._rows: list[dict] = []
        for row in rows or ():
            self.append(row)

    def append(self, row: dict) -> None:
        unknown = set(row) - set(COLUMNS)
        if unknown:
            raise KeyError(f"unknown report columns {sorted(unknown)}")
        self._rows.append({c: row.get(c) for c in COLUMNS})

    def extend(self, rows) -> None:
        for row in rows:
            self.append(row)

    @property
    def rows(self) -> list[dict]:
        return [dict(r) for r in self._rows]

    def __len__(self):
        return len(self._rows)

    def __iter__(self):
        return iter(self.rows)

    def __eq__(self, other):
        return isinstance(other, MetricReport) and self.rows == other.rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def _parse(column: str, text: str):
    if text == "":
        return None
    if column in _TEXT:
        return text
    if column in _INT:
        return int(text)
    return float(text)


def report_to_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in report.rows:
        writer.writerow([_fmt(row[c]) for c in COLUMNS])
    return buf.getvalue()


def emit_report(report: MetricReport, path) -> Path:
    if len(report) == 0:
        raise ValueError("refusing to write an empty report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_to_csv(report))
    return path


def read_report(path) -> MetricReport:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        return MetricReport({c: _parse(c, r[c]) for c in COLUMNS} for r in reader)


def strip_wall_clock(csv_text: str) -> str:
    """CSV text with the wall-clock columns removed, for determinism checks."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    keep = [i for i, c in enumerate(rows[0]) if c not in WALL_CLOCK_COLUMNS]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for r in rows:
        writer.writerow([r[i] for i in keep])
    return buf.getvalue()


def confusion_image(cm: ConfusionMatrix) -> np.ndarray:
    """``[n, n]`` intensities in [0, 1]: each row scaled by its maximum."""
    counts = cm.counts.astype(np.float64)
    row_max = counts.max(axis=1, keepdims=True)
    return np.divide(counts, row_max, out=np.zeros_like(counts), where=row_max > 0)


def render_confusion(cm: ConfusionMatrix, path) -> Path:
    """Write the confusion matrix as an ``n x n`` grayscale (P5) image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_ppm(path, confusion_image(cm))
    return path
