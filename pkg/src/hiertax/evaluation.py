"""Per-level metrics, taxonomic-distance statistics and error-propagation tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from hiertax.errors import DataError
from hiertax.taxonomy import LEVELS, N_LEVELS, Level, TaxonomyTree

MAX_DISTANCE = N_LEVELS


def accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) == 0:
        raise DataError("cannot score an empty prediction set")
    return float(np.mean(y_true == y_pred))


def weighted_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Support-weighted mean of per-class F1 (classes with no support weigh 0)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    n = len(y_true)
    if n == 0:
        raise DataError("cannot score an empty prediction set")
    # shift so that -1 ("undefined") becomes a valid bincount slot
    lo = min(y_true.min(), y_pred.min())
    t, p = y_true - lo, y_pred - lo
    size = int(max(t.max(), p.max())) + 1
    support = np.bincount(t, minlength=size).astype(np.float64)
    predicted = np.bincount(p, minlength=size).astype(np.float64)
    tp = np.bincount(t[t == p], minlength=size).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return float(np.sum(f1 * support) / n)


def per_level_metrics(
    pred: np.ndarray, true: np.ndarray, levels: Sequence[Level] = LEVELS
) -> dict[str, dict[str, float]]:
    """``{level: {"accuracy": .., "weighted_f1": ..}}``; -1 predictions count as wrong."""
    pred, true = np.asarray(pred), np.asarray(true)
    if len(pred) != len(true):
        raise DataError(f"{len(pred)} predictions for {len(true)} truths")
    if len(true) == 0:
        raise DataError("cannot score an empty prediction set")
    return {
        Level(lv).label: {
            "accuracy": accuracy(true[:, lv], pred[:, lv]),
            "weighted_f1": weighted_f1(true[:, lv], pred[:, lv]),
        }
        for lv in levels
    }


@dataclass
class DistanceStats:
    histogram: list[int]
    mean_all: float
    mean_errors: float | None
    std_errors: float | None
    std_errors_sample: float | None = None
    severity_reduction: float | None = None
    std_convention: str = "population"

    @property
    def n(self) -> int:
        return int(sum(self.histogram))

    @property
    def n_errors(self) -> int:
        return int(sum(self.histogram[1:]))

    @property
    def error_shares(self) -> list[float] | None:
        """Share of errors at distance 1..5 (None without errors)."""
        e = self.n_errors
        return None if e == 0 else [h / e for h in self.histogram[1:]]


def distance_stats_from_histogram(
    histogram: Sequence[int], baseline: DistanceStats | None = None
) -> DistanceStats:
    h = np.asarray(histogram, dtype=np.int64)
    if h.shape != (MAX_DISTANCE + 1,) or np.any(h < 0):
        raise DataError("distance histogram needs six non-negative counts (0..5)")
    n = int(h.sum())
    if n == 0:
        raise DataError("cannot score an empty prediction set")
    d = np.arange(MAX_DISTANCE + 1, dtype=np.float64)
    mean_all = float((d * h).sum() / n)
    n_err = int(h[1:].sum())
    mean_err = std_err = std_sample = None
    if n_err > 0:
        mean_err = float((d[1:] * h[1:]).sum() / n_err)
        ss = float((h[1:] * (d[1:] - mean_err) ** 2).sum())
        std_err = math.sqrt(ss / n_err)
        std_sample = math.sqrt(ss / (n_err - 1)) if n_err > 1 else None
    reduction = None
    if baseline is not None and mean_err is not None and baseline.mean_errors:
        reduction = 1.0 - mean_err / baseline.mean_errors
    return DistanceStats([int(v) for v in h], mean_all, mean_err, std_err, std_sample, reduction)


def distance_stats(
    tree: TaxonomyTree,
    pred_species: np.ndarray,
    true_species: np.ndarray,
    baseline: DistanceStats | None = None,
) -> DistanceStats:
    dist = tree.distances(pred_species, true_species)
    hist = np.bincount(dist, minlength=MAX_DISTANCE + 1)
    return distance_stats_from_histogram(hist, baseline)


@dataclass
class ErrorPropagationTable:
    n_errors: int
    level: str
    rates: dict[str, float]


def error_propagation(
    pred: np.ndarray, true: np.ndarray, deepest: Level = Level.SPECIES
) -> ErrorPropagationTable | None:
    """Ancestor-level correctness restricted to samples wrong at ``deepest``."""
    pred, true = np.asarray(pred), np.asarray(true)
    wrong = pred[:, deepest] != true[:, deepest]
    n = int(wrong.sum())
    if n == 0:
        return None
    rates = {
        Level(lv).label: float(np.mean(pred[wrong, lv] == true[wrong, lv]))
        for lv in range(deepest)
    }
    return ErrorPropagationTable(n, Level(deepest).label, rates)


@dataclass
class MetricsReport:
    model: str
    strategy: str
    taxonomy_checksum: str
    n_samples: int
    levels: list[str]
    metrics: dict[str, dict[str, float]]
    distance: DistanceStats | None = None
    propagation: ErrorPropagationTable | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        if d.get("distance") is not None:
            d["distance"] = DistanceStats(**d["distance"])
        if d.get("propagation") is not None:
            d["propagation"] = ErrorPropagationTable(**d["propagation"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (ValueError, TypeError, KeyError) as exc:
            raise DataError(f"{path}: malformed metrics report: {exc}") from None


def evaluate(
    tree: TaxonomyTree,
    pred: np.ndarray,
    true: np.ndarray,
    levels: Sequence[Level],
    model: str = "",
    strategy: str = "",
    baseline: DistanceStats | None = None,
) -> MetricsReport:
    pred, true = np.asarray(pred), np.asarray(true)
    metrics = per_level_metrics(pred, true, levels)
    dist = prop = None
    if Level.SPECIES in levels:
        dist = distance_stats(tree, pred[:, Level.SPECIES], true[:, Level.SPECIES], baseline)
    deepest = max(levels)
    if deepest > Level.CLASS:
        prop = error_propagation(pred, true, deepest)
    return MetricsReport(
        model=model,
        strategy=strategy,
        taxonomy_checksum=tree.checksum,
        n_samples=len(true),
        levels=[Level(lv).label for lv in levels],
        metrics=metrics,
        distance=dist,
        propagation=prop,
        meta={"std_convention": "population (sample std also reported)"},
    )


# comparison --------------------------------------------------------------

COMPARISON_COLUMNS = ("section", "metric", "level", "report", "model", "strategy", "value", "delta")


@dataclass
class Comparison:
    rows: list[dict]
    summary: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in COMPARISON_COLUMNS})
        return buf.getvalue()


def _distance_values(rep: MetricsReport) -> dict[str, float | None]:
    d = rep.distance
    if d is None:
        return {}
    out = {"mean_all": d.mean_all, "mean_errors": d.mean_errors, "std_errors": d.std_errors}
    shares = d.error_shares or [None] * MAX_DISTANCE
    for k, s in enumerate(shares, start=1):
        out[f"share_d{k}"] = s
    return out


def compare_models(reports: Sequence[MetricsReport]) -> Comparison:
    """Side-by-side table; deltas are relative to the first report."""
    if not reports:
        raise DataError("nothing to compare")
    sums = {r.taxonomy_checksum for r in reports}
    if len(sums) > 1:
        raise DataError(f"refusing to compare reports over different taxonomies: {sorted(sums)}")
    if len({r.n_samples for r in reports}) > 1:
        raise DataError("refusing to compare reports over different evaluation splits")
    ref = reports[0]
    rows = []

    def add(section, metric, level, values):
        base = values[0]
        for i, (rep, v) in enumerate(zip(reports, values)):
            delta = None if v is None or base is None else v - base
            rows.append(
                dict(section=section, metric=metric, level=level, report=i, model=rep.model,
                     strategy=rep.strategy, value=v, delta=delta)
            )

    levels = [lv.label for lv in LEVELS if any(lv.label in r.metrics for r in reports)]
    for metric in ("accuracy", "weighted_f1"):
        for lv in levels:
            add("levels", metric, lv, [r.metrics.get(lv, {}).get(metric) for r in reports])
    dvals = [_distance_values(r) for r in reports]
    for key in _distance_values(ref) or next((d for d in dvals if d), {}):
        add("distance", key, "species", [d.get(key) for d in dvals])
    for lv in levels:
        vals = [
            None if r.propagation is None else r.propagation.rates.get(lv) for r in reports
        ]
        if any(v is not None for v in vals):
            add("propagation", "ancestor_correct_given_error", lv, vals)

    lines = []
    header = "level     " + "".join(f"{(r.model + ':' + r.strategy)[:18]:>20}" for r in reports)
    lines.append("accuracy / weighted F1")
    lines.append(header)
    for lv in levels:
        cells = []
        for r in reports:
            m = r.metrics.get(lv)
            cells.append("-" if m is None else f"{m['accuracy']:.3f}/{m['weighted_f1']:.3f}")
        lines.append(f"{lv:<10}" + "".join(f"{c:>20}" for c in cells))
    if any(r.distance for r in reports):
        lines.append("")
        lines.append("mean taxonomic distance (errors only)")
        for r in reports:
            d = r.distance
            val = "-" if d is None or d.mean_errors is None else f"{d.mean_errors:.3f}"
            red = "" if d is None or d.severity_reduction is None else f"  reduction {d.severity_reduction:.1%}"
            lines.append(f"  {r.model}:{r.strategy:<12} {val}{red}")
    return Comparison(rows, "\n".join(lines) + "\n")
