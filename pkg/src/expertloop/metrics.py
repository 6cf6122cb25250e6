"""Confusion-matrix bookkeeping and derived run metrics.

Counts are the ground truth; every rate is recomputed from them by exact
rational division, and a rate whose denominator is zero is reported as
absent rather than coerced to 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional


@dataclass
class Confusion:
    """Per-(truth, prediction) counts."""

    counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def record(self, truth: str, prediction: str, n: int = 1) -> None:
        if n < 0:
            raise ValueError("counts must be non-negative")
        key = (truth, prediction)
        self.counts[key] = self.counts.get(key, 0) + n

    def total(self) -> int:
        return sum(self.counts.values())

    def correct(self) -> int:
        return sum(n for (truth, pred), n in self.counts.items() if truth == pred)

    def binary_cells(self, positive: str) -> tuple[int, int, int, int]:
        """(TP, FN, TN, FP) with respect to the positive label."""
        tp = fn = tn = fp = 0
        for (truth, pred), n in self.counts.items():
            if truth == positive:
                if pred == positive:
                    tp += n
                else:
                    fn += n
            else:
                if pred == positive:
                    fp += n
                else:
                    tn += n
        return tp, fn, tn, fp

    def to_dict(self) -> dict:
        return {f"{truth}|{pred}": n for (truth, pred), n in sorted(self.counts.items())}

    @staticmethod
    def from_dict(raw: dict) -> "Confusion":
        confusion = Confusion()
        for key, n in raw.items():
            truth, pred = key.split("|", 1)
            confusion.record(truth, pred, int(n))
        return confusion


def _ratio(num: int, den: int) -> Optional[float]:
    if den == 0:
        return None
    return float(Fraction(num, den))


@dataclass(frozen=True)
class MetricsResult:
    n: int
    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


def compute_metrics(confusion: Confusion, mode: str = "binary", positive: str = "Match") -> MetricsResult:
    """Derive accuracy (always) and sensitivity/specificity (binary mode)."""
    total = confusion.total()
    accuracy = _ratio(confusion.correct(), total)
    sensitivity = specificity = None
    if mode == "binary":
        tp, fn, tn, fp = confusion.binary_cells(positive)
        sensitivity = _ratio(tp, tp + fn)
        specificity = _ratio(tn, tn + fp)
    return MetricsResult(n=total, accuracy=accuracy, sensitivity=sensitivity, specificity=specificity)


@dataclass
class RunMetrics:
    overall: MetricsResult
    per_phase: list[tuple[int, MetricsResult]] = field(default_factory=list)  # (start_ordinal, metrics)
    queries_by_kind: dict[str, int] = field(default_factory=dict)
    budget_spent: int = 0
    budget_total: int = 0
    aht_proxy_s: Optional[float] = None
    confusion: Confusion = field(default_factory=Confusion)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "per_phase": [[start, m.to_dict()] for start, m in self.per_phase],
            "queries_by_kind": dict(sorted(self.queries_by_kind.items())),
            "budget_spent": self.budget_spent,
            "budget_total": self.budget_total,
            "aht_proxy_s": self.aht_proxy_s,
            "confusion": self.confusion.to_dict(),
        }


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def render_metrics_table(metrics: RunMetrics, title: str = "run") -> str:
    """Aligned text table: one row per segment plus budget/query footers."""
    header = f"{'segment':<14}{'n':>8}{'accuracy':>12}{'sensitivity':>14}{'specificity':>14}"
    rows = [f"== metrics: {title} ==", header, "-" * len(header)]
    rows.append(
        f"{'overall':<14}{metrics.overall.n:>8}{_fmt(metrics.overall.accuracy):>12}"
        f"{_fmt(metrics.overall.sensitivity):>14}{_fmt(metrics.overall.specificity):>14}"
    )
    for start, seg in metrics.per_phase:
        label = f"phase@{start}"
        rows.append(
            f"{label:<14}{seg.n:>8}{_fmt(seg.accuracy):>12}"
            f"{_fmt(seg.sensitivity):>14}{_fmt(seg.specificity):>14}"
        )
    rows.append("-" * len(header))
    rows.append(f"budget spent: {metrics.budget_spent}/{metrics.budget_total}")
    if metrics.queries_by_kind:
        kinds = ", ".join(f"{kind}={n}" for kind, n in sorted(metrics.queries_by_kind.items()))
        rows.append(f"queries: {kinds}")
    if metrics.aht_proxy_s is not None:
        rows.append(f"mean handling seconds per case: {metrics.aht_proxy_s:.2f}")
    return "\n".join(rows)
