"""Post-hoc analysis of metrics streams and plot-ready output files."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .errors import UsageError
from .orchestrator import MetricsRow, moving_average

FLOAT_DIGITS = 9


def fmt_float(x: float) -> float:
    """Round to 9 significant digits so serialized output does not depend on platform repr quirks."""
    if x == 0 or not math.isfinite(x):
        return x
    return float(f"{x:.{FLOAT_DIGITS}g}")


def pin_floats(obj):
    if isinstance(obj, float):
        return fmt_float(obj)
    if isinstance(obj, dict):
        return {k: pin_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [pin_floats(v) for v in obj]
    if isinstance(obj, np.floating):
        return fmt_float(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(pin_floats(obj), sort_keys=True)


def write_jsonl(rows, path: Path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(dumps(row.to_json() if isinstance(row, MetricsRow) else row) + "\n")


def write_json(obj, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(pin_floats(obj), sort_keys=True, indent=2) + "\n")


def accept_series(rows) -> list[float]:
    return [r.accept_len_mean if isinstance(r, MetricsRow) else r["accept_len_mean"] for r in rows]


# -- shift analysis -----------------------------------------------------------------


def plateau(series, boundary: int, window: int = 500) -> float:
    """Mean of the ``window`` points right before ``boundary``."""
    if boundary < 1:
        raise UsageError("boundary must be >= 1")
    seg = series[max(0, boundary - window): boundary]
    return math.fsum(seg) / len(seg)


def window_means(series, start: int, stop: int, window: int = 500) -> list[float]:
    """Means of full ``window``-point windows lying entirely inside ``series[start:stop]``.

    Entry ``i`` covers ``series[start + i : start + i + window]``.
    """
    seg = np.asarray(series[start:stop], dtype=np.float64)
    if seg.size < window:
        return []
    c = np.concatenate([[0.0], np.cumsum(seg)])
    return list((c[window:] - c[:-window]) / window)


def recovery_requests(series, boundary: int, stop: int | None = None, window: int = 500,
                      frac: float = 0.9) -> int | None:
    """Requests after ``boundary`` until a full post-boundary window reaches ``frac`` of the pre-boundary plateau.

    The count is measured to the end of the first qualifying window, so it is
    at least ``window``. ``None`` means no window before ``stop`` qualifies.
    """
    level = frac * plateau(series, boundary, window)
    stop = len(series) if stop is None else stop
    for i, m in enumerate(window_means(series, boundary, stop, window)):
        if m >= level:
            return i + window
    return None


def shift_report(series, boundaries, window: int = 500, frac: float = 0.9) -> list[dict]:
    out = []
    edges = list(boundaries) + [len(series)]
    for b, stop in zip(edges[:-1], edges[1:]):
        post = window_means(series, b, stop, window)
        out.append({
            "boundary": b,
            "plateau": plateau(series, b, window),
            "first_window": post[0] if post else None,
            "best_window": max(post) if post else None,
            "recovery": recovery_requests(series, b, stop, window, frac),
        })
    return out


# -- sweeps --------------------------------------------------------------------------

SWEEP_COLUMNS = ("value", "final_moving_avg_accept_len", "mean_accept_len", "mean_throughput",
                 "total_sync_time", "syncs", "total_sim_time", "mean_staleness", "drops")


def sweep_csv(parameter: str, rows: list[tuple[object, dict]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("parameter",) + SWEEP_COLUMNS)
    for value, summary in rows:
        cells = [value] + [summary.get(k) for k in SWEEP_COLUMNS[1:]]
        w.writerow([parameter] + [fmt_float(c) if isinstance(c, float) else c for c in cells])
    return buf.getvalue()
