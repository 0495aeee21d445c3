"""Tabular prediction-error reports (CSV and plain text)."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ReportRow:
    concept: str
    method: str
    mse_mean: float
    mse_sd: float
    n_clients: int


@dataclass(frozen=True)
class ValidationReport:
    """Per-concept, per-method validation errors aggregated over clients."""

    concepts: tuple[str, ...]
    rows: tuple[ReportRow, ...]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["concept", "method", "mse_mean", "mse_sd", "n_clients"])
        for r in self.rows:
            writer.writerow([r.concept, r.method, _fmt(r.mse_mean), _fmt(r.mse_sd), r.n_clients])
        return out.getvalue()

    def to_text(self) -> str:
        width = max(len(c) for c in self.concepts) if self.concepts else 7
        mw = max((len(r.method) for r in self.rows), default=6)
        lines = ["validation errors (mean squared error over clients)", ""]
        header = f"{'concept':<{width}}  {'method':<{mw}}  {'mse_mean':>12}  {'mse_sd':>12}  {'n':>3}"
        lines.append(header)
        lines.append("-" * len(header))
        for r in self.rows:
            lines.append(
                f"{r.concept:<{width}}  {r.method:<{mw}}  {_fmt_fixed(r.mse_mean):>12}  "
                f"{_fmt_fixed(r.mse_sd):>12}  {r.n_clients:>3}"
            )
        return "\n".join(lines) + "\n"

    def mean_error(self, concept: str, method: str) -> float:
        for r in self.rows:
            if r.concept == concept and r.method == method:
                return r.mse_mean
        raise KeyError(f"no row for ({concept!r}, {method!r})")


def _fmt(v: float) -> str:
    return "" if v is None or math.isnan(v) else repr(float(v))


def _fmt_fixed(v: float) -> str:
    return "-" if v is None or math.isnan(v) else f"{v:.6f}"
