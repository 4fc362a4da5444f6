"""Error metrics, source-only vs transfer comparison reports and plot-ready CSV exports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInput, IoError, ShapeError

REPORT_COLUMNS = [
    "source_id",
    "target_id",
    "similar",
    "method",
    "mae",
    "rmse",
    "improvement_mae_pct",
    "improvement_rmse_pct",
]

SOURCE_ONLY = "source-only"
TRANSFER = "source+residual"


def _pair(measured, estimated):
    y = np.asarray(measured, dtype=float).ravel()
    yh = np.asarray(estimated, dtype=float).ravel()
    if y.size != yh.size:
        raise ShapeError(f"length mismatch: {y.size} measured vs {yh.size} estimated")
    if y.size == 0:
        raise InvalidInput("empty input")
    return y, yh


def mae(measured, estimated) -> float:
    y, yh = _pair(measured, estimated)
    return float(np.mean(np.abs(y - yh)))


def rmse(measured, estimated) -> float:
    y, yh = _pair(measured, estimated)
    return float(np.sqrt(np.mean((y - yh) ** 2)))


def improvement(base: float, new: float) -> float:
    """Relative error reduction in percent, full precision."""
    if not base > 0:
        raise InvalidInput(f"baseline error must be positive, got {base}")
    return 100.0 * (base - new) / base


def round_half_up(value: float) -> int:
    return int(Decimal(repr(value)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class EvalRow:
    source_id: str
    target_id: str
    similar: bool
    method: str
    mae: float
    rmse: float
    improvement_mae_pct: float | None = None
    improvement_rmse_pct: float | None = None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add_comparison(self, source_id, target_id, similar, measured, source_only, combined):
        """Append a source-only row and a transfer row with its improvement over the former."""
        base = EvalRow(source_id, target_id, similar, SOURCE_ONLY, mae(measured, source_only), rmse(measured, source_only))
        m, r = mae(measured, combined), rmse(measured, combined)
        self.rows.append(base)
        self.rows.append(
            EvalRow(
                source_id,
                target_id,
                similar,
                TRANSFER,
                m,
                r,
                improvement(base.mae, m) if base.mae > 0 else None,
                improvement(base.rmse, r) if base.rmse > 0 else None,
            )
        )
        return self


def compare(model, battery, from_cycle: int = 1) -> EvalReport:
    """Source-only vs combined estimates of ``battery`` from ``from_cycle`` on."""
    from .pipeline import TargetModel, estimate_cycles

    cycles = [c for c in battery.cycles if c.cycle_index >= from_cycle]
    if not cycles:
        raise InvalidInput(f"no cycles at or after {from_cycle}")
    est = estimate_cycles(model, cycles)
    measured = [c.capacity for c in cycles]
    if isinstance(model, TargetModel):
        src_id = model.source.train_meta["battery_id"]
        similar = model.verdict.similar
    else:
        src_id = model.train_meta["battery_id"]
        similar = True
    return EvalReport().add_comparison(
        src_id,
        battery.id,
        similar,
        measured,
        [e.source_component for e in est],
        [e.total for e in est],
    )


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _pct(value):
    return "" if value is None else f"{round_half_up(value)}%"


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(REPORT_COLUMNS)
    for row in report.rows:
        w.writerow([_cell(getattr(row, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_to_markdown(report: EvalReport) -> str:
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    for r in report.rows:
        cells = [
            r.source_id,
            r.target_id,
            "Yes" if r.similar else "No",
            r.method,
            f"{r.mae:.4f}",
            f"{r.rmse:.4f}",
            _pct(r.improvement_mae_pct),
            _pct(r.improvement_rmse_pct),
        ]
        lines.append("| " + " | ".join(c.replace("|", "\\|") for c in cells) + " |")
    return "\n".join(lines) + "\n"


def read_report_csv(path) -> EvalReport:
    def opt(s):
        return None if s == "" else float(s)

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [
            EvalRow(
                d["source_id"],
                d["target_id"],
                d["similar"] == "true",
                d["method"],
                float(d["mae"]),
                float(d["rmse"]),
                opt(d["improvement_mae_pct"]),
                opt(d["improvement_rmse_pct"]),
            )
            for d in reader
        ]
    return EvalReport(rows)


def _write(path, text):
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from None


def emit_report(report: EvalReport, format: str, path) -> None:
    if format == "csv":
        _write(path, report_to_csv(report))
    elif format in ("markdown", "md"):
        _write(path, report_to_markdown(report))
    else:
        raise InvalidInput(f"unknown report format {format!r}")


def emit_series(name: str, x: Sequence, series: Mapping[str, Sequence], path) -> None:
    """One x column named ``name`` plus one column per named y series."""
    x = list(x)
    for label, ys in series.items():
        if len(ys) != len(x):
            raise ShapeError(f"series {label!r} has {len(ys)} points, x has {len(x)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([name, *series])
    cols = [list(v) for v in series.values()]
    for i, xi in enumerate(x):
        w.writerow([_cell(_num(xi)), *(_cell(_num(c[i])) for c in cols)])
    _write(path, buf.getvalue())


def _num(v):
    if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return float(v)
    return v
