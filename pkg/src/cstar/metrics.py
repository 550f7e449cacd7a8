"""Per-epoch CSV metrics and the JSON run summary.

CSV columns, in this order (``HEADER``):

    phase, epoch, lr, rho, loss, train_benign, train_robust, test_benign,
    test_robust, median_rel_gap, rel_gaps, dual_gaps, ranks, compressed_params,
    wall_time

``rel_gaps`` and ``dual_gaps`` hold ``layer=value`` pairs joined by ``;`` and
``ranks`` holds ``layer=R1xR2`` pairs the same way. Floats use
Python's shortest round-trip repr; missing values are empty. Only
``wall_time`` varies between identical seeded runs.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable

from .cstar_train import EpochRecord, TrainReport

HEADER = ("phase", "epoch", "lr", "rho", "loss", "train_benign", "train_robust", "test_benign",
          "test_robust", "median_rel_gap", "rel_gaps", "dual_gaps", "ranks", "compressed_params",
          "wall_time")


def _num(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def _pairs(d: dict) -> str:
    return ";".join(f"{k}={_num(v)}" for k, v in d.items())


def record_row(rec: EpochRecord) -> list[str]:
    return [
        rec.phase, str(rec.epoch), _num(rec.lr), _num(rec.rho), _num(rec.loss),
        _num(rec.train_benign), _num(rec.train_robust), _num(rec.test_benign),
        _num(rec.test_robust), _num(rec.median_rel_gap), _pairs(rec.rel_gap),
        _pairs(rec.dual_gap), ";".join(f"{k}={a}x{b}" for k, (a, b) in rec.ranks.items()),
        str(rec.compressed_params) if rec.compressed_params else "", _num(rec.wall_time),
    ]


class MetricsWriter:
    """Appends one row per epoch; creates the file with its header when needed.

    An existing file is only appended to if its first line is exactly the
    header, so rows from different schemas never mix.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        try:
            if self.path.exists() and self.path.stat().st_size > 0:
                with open(self.path, newline="") as f:
                    first = next(csv.reader(f), [])
                if tuple(first) != HEADER:
                    raise ValueError(f"{self.path} has a different header; refusing to append")
            else:
                with open(self.path, "w", newline="") as f:
                    csv.writer(f).writerow(HEADER)
        except OSError as exc:
            raise OSError(f"cannot write metrics file {self.path}: {exc.strerror}") from exc

    def __call__(self, rec: EpochRecord) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(record_row(rec))


def write_metrics(records: Iterable[EpochRecord] | TrainReport, path: str | Path) -> None:
    if isinstance(records, TrainReport):
        records = records.records
    w = MetricsWriter(path)
    for rec in records:
        w(rec)


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _clean(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def write_summary(report: TrainReport, path: str | Path, **extra) -> dict:
    """JSON summary: achieved ratio, final accuracies and rank plan (NaN -> null)."""
    data = _clean({**report.summary(), **extra})
    try:
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write summary {path}: {exc.strerror}") from exc
    return data
