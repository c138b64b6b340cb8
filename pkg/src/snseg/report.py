"""Manual-vs-model statistics and the result bundle.

Correlation between manual and model-derived normalized OD is summarized
with Pearson r, its two-sided t-test p-value (t with n-2 degrees of
freedom, evaluated through the regularized incomplete beta function), and
the least-squares line. The report bundle reproduces the structure of the
published tables and scatter plots, embedding the published numbers only
as labeled, non-reproducible reference constants.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from snseg.errors import ValidationError

# Published results; they depend on an internal mouse dataset and are NOT
# reproducible from this artifact. Reports carry them as labeled references.
PUBLISHED_REFERENCE = {
    "note": "published values from an internal mouse dataset; not reproducible at desk scale",
    "test_set_metrics": {
        "with_elastic": {"iou": 0.79, "dice": 0.87, "recall": 0.88, "precision": 0.86},
        "without_elastic": {"iou": 0.78, "dice": 0.86, "recall": 0.87, "precision": 0.85},
    },
    "correlation_r_squared": {"SNr": 0.8678, "SNCD": 0.7928},
    "correlation_p_value": "< 0.0001",
    "best_backbone_iou": 0.73,
}


@dataclass(frozen=True)
class PairedSeries:
    """Paired manual (x) and model (y) values with sample labels."""

    labels: tuple[str, ...]
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.shape != y.shape or x.ndim != 1:
            raise ValidationError(f"x and y must be equal-length vectors, got {x.shape} and {y.shape}")
        if len(self.labels) != len(x):
            raise ValidationError(f"{len(self.labels)} labels for {len(x)} pairs")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise ValidationError("paired series contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class CorrelationResult:
    n: int
    pearson_r: float
    r_squared: float
    t_statistic: float
    p_value: float
    slope: float
    intercept: float

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


def student_t_sf(t: float, df: int) -> float:
    """One-sided survival P(T > t) for Student's t via the regularized
    incomplete beta function."""
    if df < 1:
        raise ValidationError(f"degrees of freedom must be >= 1, got {df}")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * float(special.betainc(df / 2.0, 0.5, x))
    return tail if t > 0 else 1.0 - tail


def correlate(series: PairedSeries) -> CorrelationResult:
    """Pearson correlation with a two-sided t-test and least-squares fit."""
    if series.n < 3:
        raise ValidationError(f"correlation needs n >= 3 pairs, got {series.n}")
    x, y, n = series.x, series.y, series.n
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0:
        raise ValidationError("x series is constant (zero variance); correlation undefined")
    if syy == 0.0:
        raise ValidationError("y series is constant (zero variance); correlation undefined")
    sxy = float(dx @ dy)
    r = sxy / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        t = math.inf if r > 0 else -math.inf
        p = 0.0
    else:
        t = r * math.sqrt((n - 2) / (1.0 - r * r))
        p = 2.0 * student_t_sf(abs(t), n - 2)
    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    return CorrelationResult(n=n, pearson_r=r, r_squared=r * r, t_statistic=t,
                             p_value=min(p, 1.0), slope=slope, intercept=intercept)


def paired_series_from_od(
    manual_rows: list[dict],
    model_rows: list[dict],
    region: str | None = None,
) -> PairedSeries:
    """Join two OD row lists on (sample_id, region) into a paired series.

    Rows are dicts with sample_id, region, normalized_od (the CSV schema
    of `quantify.write_od_csv`). With `region=None` all regions pool into
    one series labeled 'sample_id/region'.
    """
    def key(row):
        return (row["sample_id"], row["region"])

    manual = {key(r): float(r["normalized_od"]) for r in manual_rows
              if region is None or r["region"] == region}
    model = {key(r): float(r["normalized_od"]) for r in model_rows
             if region is None or r["region"] == region}
    shared = sorted(manual.keys() & model.keys())
    if not shared:
        raise ValidationError(f"no shared (sample, region) pairs for region={region!r}")
    labels = tuple(f"{sid}/{reg}" for sid, reg in shared)
    return PairedSeries(
        labels=labels,
        x=np.array([manual[k] for k in shared]),
        y=np.array([model[k] for k in shared]),
    )


def build_report(
    out_dir: str | Path,
    metric_reports: dict | None = None,
    od_series: dict[str, PairedSeries] | None = None,
    correlations: dict[str, CorrelationResult] | None = None,
) -> dict:
    """Write report.json, metrics_table.csv, and correlation CSVs.

    `metric_reports` maps a column label (e.g. "with_elastic",
    "without_elastic") to a dataset-mean metrics dict; `od_series` and
    `correlations` map region labels (plus "pooled") to their data. Missing
    inputs are listed but a partial report is still produced.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    missing = []
    metric_reports = metric_reports or {}
    od_series = od_series or {}
    correlations = correlations or {}
    if not metric_reports:
        missing.append("metric_reports")
    if not correlations:
        missing.append("correlations")

    doc = {
        "published_reference": PUBLISHED_REFERENCE,
        "metrics": metric_reports,
        "correlations": {k: v.to_json_dict() for k, v in sorted(correlations.items())},
        "missing_inputs": missing,
    }
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    metric_names = ("iou", "dice", "precision", "recall")
    columns = sorted(metric_reports.keys())
    with open(out_dir / "metrics_table.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric"] + (columns if columns else ["absent"]))
        for m in metric_names:
            row = [m]
            for col in (columns if columns else ["absent"]):
                value = metric_reports.get(col, {}).get(m) if columns else None
                row.append("" if value is None else repr(float(value)))
            w.writerow(row)

    for label, series in sorted(od_series.items()):
        fit = correlations.get(label)
        with open(out_dir / f"correlation_{label}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["label", "manual_od", "model_od", "fit"])
            for lab, xi, yi in zip(series.labels, series.x, series.y):
                fit_y = "" if fit is None else repr(fit.slope * xi + fit.intercept)
                w.writerow([lab, repr(float(xi)), repr(float(yi)), fit_y])
    return doc
