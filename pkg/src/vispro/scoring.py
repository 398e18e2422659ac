"""PHM12 prognostic metrics and report tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

LN_HALF = math.log(0.5)


@dataclass(frozen=True)
class BearingResult:
    bearing: str
    t_c: float
    y_hat: float
    y: float
    bounds: dict = field(default_factory=dict)  # level -> (lower, upper)

    def __post_init__(self):
        if not self.y > 0:
            raise InputError(f"bearing {self.bearing}: ground-truth RUL must be positive")
        if not self.t_c > 0:
            raise InputError(f"bearing {self.bearing}: truncation time must be positive")

    @property
    def percent_error(self) -> float:
        return percent_error(self.y, self.y_hat)

    @property
    def accuracy(self) -> float:
        return accuracy_score(self.percent_error)


def percent_error(y: float, y_hat: float) -> float:
    """Signed percent error; negative means the RUL was over-predicted."""
    if not y > 0:
        raise InputError(f"ground-truth RUL must be positive, got {y}")
    return (y - y_hat) / y * 100.0


def accuracy_score(er: float) -> float:
    """Asymmetric accuracy: half-life 5 % for late predictions, 20 % for early ones."""
    if er <= 0:
        return math.exp(-LN_HALF * er / 5.0)
    return math.exp(LN_HALF * er / 20.0)


@dataclass(frozen=True)
class Score:
    score: float
    mean_er: float
    std_er: float
    mean_abs_er: float
    n: int


def aggregate_from_errors(errors) -> Score:
    er = np.asarray(list(errors), dtype=float)
    if er.size == 0:
        raise InputError("cannot score an empty result list")
    acc = np.array([accuracy_score(e) for e in er])
    # Mean/STD rows: signed errors, population standard deviation.
    return Score(
        score=float(np.sum(np.sort(acc)) / er.size),
        mean_er=float(np.mean(np.sort(er))),
        std_er=float(np.std(np.sort(er))),
        mean_abs_er=float(np.mean(np.sort(np.abs(er)))),
        n=int(er.size),
    )


def aggregate_score(results: list[BearingResult]) -> Score:
    if not results:
        raise InputError("cannot score an empty result list")
    return aggregate_from_errors(r.percent_error for r in results)


@dataclass(frozen=True)
class CoverageReport:
    level: float
    count: int
    mean_width: float
    invalid: int


def coverage_report(results: list[BearingResult], level: float) -> CoverageReport:
    widths, invalid = [], 0
    for r in results:
        if level not in r.bounds:
            raise InputError(f"bearing {r.bearing} has no {level:.0%} bounds")
        lo, hi = r.bounds[level]
        widths.append(hi - lo)
        if not lo <= r.y <= hi:
            invalid += 1
    mean_width = float(np.mean(widths)) if widths else 0.0
    return CoverageReport(level, len(results), mean_width, invalid)


def _num(v: float) -> str:
    return f"{v:.6g}"


def results_table_csv(results: list[BearingResult], level: float = 0.90) -> str:
    """Per-bearing Er and A followed by Mean, STD and Score rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    tag = f"{round(level * 100)}"
    w.writerow(["bearing", "t_c", "y", "y_hat", "Er", "A", f"lower{tag}", f"upper{tag}"])
    for r in results:
        lo, hi = r.bounds.get(level, (float("nan"), float("nan")))
        w.writerow([r.bearing, _num(r.t_c), _num(r.y), _num(r.y_hat), f"{r.percent_error:.2f}",
                    f"{r.accuracy:.4f}", _num(lo), _num(hi)])
    s = aggregate_score(results)
    w.writerow(["Mean", "", "", "", f"{s.mean_er:.2f}", "", "", ""])
    w.writerow(["STD", "", "", "", f"{s.std_er:.2f}", "", "", ""])
    w.writerow(["Score", "", "", "", "", f"{s.score:.4f}", "", ""])
    return buf.getvalue()


def coverage_table_csv(results: list[BearingResult], levels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "count", "mean_width", "invalid"])
    for lv in levels:
        c = coverage_report(results, lv)
        w.writerow([f"{lv:.2f}", c.count, _num(c.mean_width), c.invalid])
    return buf.getvalue()
