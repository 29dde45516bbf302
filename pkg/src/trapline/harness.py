"""Trial evaluation harness: sample sizing, stratified folds, per-fold
one-vs-rest metrics, fold averaging and pooled confusion matrices.

An image's predicted label is the label of its highest-scoring surviving
detection, or the blank class when nothing survived the confidence floor.
Fold averages are arithmetic means of per-fold metric values (undefined
values excluded); the pooled view tabulates every (actual, predicted) pair
across folds into one confusion matrix.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

from trapline.core import BLANK, SpeciesLabel
from trapline.inference import ClassifiedImage
from trapline.interchange import LabeledRow, ordered_labels
from trapline.metrics import (
    METRIC_NAMES,
    ConfusionMatrix,
    MetricSet,
    build_confusion,
    classification_metrics,
    one_vs_rest_counts,
)

logger = logging.getLogger(__name__)

Z_TABLE = {0.90: 1.645, 0.95: 1.96, 0.99: 2.576}


def required_sample_size(population: int, margin: float, confidence: float) -> int:
    """Cochran sample size with finite-population correction, rounded up.

    Uses the worst-case proportion p = 0.5 and z values from the standard
    normal table; the result never exceeds the population.
    """
    if population < 1:
        raise ValueError("population must be >= 1")
    if not 0.0 < margin < 1.0:
        raise ValueError(f"margin must be in (0, 1), got {margin}")
    if confidence not in Z_TABLE:
        raise ValueError(f"confidence must be one of {sorted(Z_TABLE)}, got {confidence}")
    z = Z_TABLE[confidence]
    n0 = z * z * 0.25 / (margin * margin)
    corrected = n0 / (1 + (n0 - 1) / population)
    return min(population, math.ceil(corrected))


def predicted_label(classified: ClassifiedImage) -> SpeciesLabel:
    """Image-level label: highest-scoring surviving detection, else blank."""
    if classified.is_blank:
        return BLANK
    best = max(classified.detections, key=lambda d: d.score)
    return best.label


@dataclass
class FoldSpec:
    """Plan for a stratified trial: the ordered classes (species plus blank),
    images per class per fold, number of folds and the sampling seed."""

    classes: list[SpeciesLabel]
    per_class: int = 25
    folds: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")
        if not self.classes:
            raise ValueError("classes must be nonempty")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("classes must be distinct")


@dataclass
class FoldPlan:
    """Sampled folds plus the classes that had enough support to be included."""

    folds: list[list[tuple[str, SpeciesLabel]]]
    included: list[SpeciesLabel]
    excluded: dict[SpeciesLabel, int]  # class -> available image count


def sample_folds(pool: Sequence[tuple[str, SpeciesLabel]], spec: FoldSpec) -> FoldPlan:
    """Draw ``spec.folds`` stratified folds from a labeled image pool.

    Within a fold each included class contributes exactly ``per_class``
    images sampled without replacement; folds are drawn independently, so an
    image may recur across folds. Classes with fewer than ``per_class``
    images are excluded up front and reported.
    """
    by_class: dict[SpeciesLabel, list[str]] = {cls: [] for cls in spec.classes}
    for image_id, label in pool:
        if label in by_class:
            by_class[label].append(image_id)
    included = [cls for cls in spec.classes if len(by_class[cls]) >= spec.per_class]
    excluded = {cls: len(by_class[cls]) for cls in spec.classes if cls not in included}
    for cls, available in excluded.items():
        logger.warning("class %r excluded: %d image(s) available, %d required",
                       cls.canonical_name, available, spec.per_class)
    rng = random.Random(spec.seed)
    folds = []
    for _ in range(spec.folds):
        fold: list[tuple[str, SpeciesLabel]] = []
        for cls in included:
            fold.extend((image_id, cls) for image_id in rng.sample(by_class[cls], spec.per_class))
        folds.append(fold)
    return FoldPlan(folds=folds, included=included, excluded=excluded)


@dataclass
class FoldReport:
    """Per-class and macro-averaged metrics for one fold."""

    per_class: dict[SpeciesLabel, MetricSet]
    overall: MetricSet
    support: dict[SpeciesLabel, int]
    confusion: ConfusionMatrix


def _mean_metrics(metric_sets: Sequence[MetricSet]) -> MetricSet:
    values: dict[str, float | None] = {}
    for name in METRIC_NAMES:
        defined = [getattr(m, name) for m in metric_sets if getattr(m, name) is not None]
        values[name] = sum(defined) / len(defined) if defined else None
    return MetricSet(**values)


def _report_from_pairs(pairs: Sequence[tuple[SpeciesLabel, SpeciesLabel]],
                       classes: Sequence[SpeciesLabel]) -> FoldReport:
    confusion = build_confusion(pairs, classes)
    per_class = {cls: classification_metrics(one_vs_rest_counts(confusion, cls))
                 for cls in classes}
    support = {cls: confusion.row_sum(cls) for cls in classes}
    return FoldReport(
        per_class=per_class,
        overall=_mean_metrics(list(per_class.values())),
        support=support,
        confusion=confusion,
    )


def evaluate_fold(
    fold: Sequence[tuple[str, SpeciesLabel]],
    predictions: Mapping[str, SpeciesLabel],
    classes: Sequence[SpeciesLabel],
) -> FoldReport:
    """Score one fold against image-level predictions.

    Every fold image must have a prediction (possibly the blank class);
    a missing one is an error naming the image.
    """
    pairs = []
    for image_id, actual in fold:
        if image_id not in predictions:
            raise ValueError(f"missing prediction for image {image_id!r}")
        pairs.append((actual, predictions[image_id]))
    return _report_from_pairs(pairs, classes)


@dataclass
class TrialReport:
    """Fold reports, their per-class averages and the pooled confusion matrix."""

    classes: list[SpeciesLabel]
    folds: list[FoldReport]
    averages: dict[SpeciesLabel, MetricSet]
    overall: MetricSet
    pooled_confusion: ConfusionMatrix
    excluded: dict[SpeciesLabel, int] = field(default_factory=dict)
    cochran_note: str | None = None


def aggregate_trial(reports: Sequence[FoldReport], classes: Sequence[SpeciesLabel]) -> TrialReport:
    """Average metrics across folds and pool every fold's pairs into one matrix."""
    if not reports:
        raise ValueError("at least one fold report is required")
    averages = {
        cls: _mean_metrics([r.per_class[cls] for r in reports])
        for cls in classes
    }
    overall = _mean_metrics([r.overall for r in reports])
    pooled = build_confusion([], classes)
    for report in reports:
        pooled.cells += report.confusion.cells
    return TrialReport(
        classes=list(classes),
        folds=list(reports),
        averages=averages,
        overall=overall,
        pooled_confusion=pooled,
    )


def run_trial(rows: Sequence[LabeledRow], spec: FoldSpec) -> TrialReport:
    """Sample folds from labeled rows and evaluate them against the recorded
    predictions."""
    pool = [(row.image_id, row.true_label) for row in rows]
    predictions = {row.image_id: row.predicted_label for row in rows}
    plan = sample_folds(pool, spec)
    if not plan.included:
        raise ValueError("no class has enough support for the requested per-class count")
    # the matrix label set must also cover predictions naming excluded classes
    classes = list(plan.included)
    for fold in plan.folds:
        for image_id, _ in fold:
            label = predictions.get(image_id)
            if label is not None and label not in classes:
                classes.append(label)
    reports = [evaluate_fold(fold, predictions, classes) for fold in plan.folds]
    trial = aggregate_trial(reports, classes)
    trial.excluded = plan.excluded
    return trial


def replay_rows(rows: Sequence[LabeledRow],
                classes: Sequence[SpeciesLabel] | None = None) -> TrialReport:
    """Evaluate all rows pooled as a single fold (exact fixture replay)."""
    if not rows:
        raise ValueError("fixture is empty")
    if classes is None:
        classes = ordered_labels(rows)
    pairs = [(row.true_label, row.predicted_label) for row in rows]
    report = _report_from_pairs(pairs, classes)
    return TrialReport(
        classes=list(classes),
        folds=[report],
        averages=dict(report.per_class),
        overall=report.overall,
        pooled_confusion=report.confusion,
    )


# -- presentation -------------------------------------------------------------

def format_percent(value: float | None) -> str:
    """Percentage with two decimals, rounded half-up; undefined renders as n/a."""
    if value is None:
        return "n/a"
    quantized = Decimal(repr(value * 100)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{quantized}%"


_METRIC_TITLES = {
    "accuracy": "Accuracy",
    "precision": "Precision",
    "sensitivity": "Sensitivity",
    "specificity": "Specificity",
    "f1": "F1-Score",
}
_REPORT_METRIC_ORDER = ("accuracy", "precision", "sensitivity", "specificity", "f1")


def _render_text(trial: TrialReport) -> str:
    lines: list[str] = []
    fold_headers = [f"Fold{i + 1}" for i in range(len(trial.folds))]
    header = ["Metric"] + fold_headers + ["Average"]
    widths = [13] + [9] * (len(fold_headers) + 1)

    def row(cells: list[str]) -> str:
        return "  ".join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()

    lines.append("Per-class inference metrics")
    lines.append("")
    for cls in list(trial.classes) + ["Overall Model"]:
        if isinstance(cls, SpeciesLabel):
            name = cls.canonical_name
            fold_sets = [r.per_class[cls] for r in trial.folds]
            average = trial.averages[cls]
        else:
            name = cls
            fold_sets = [r.overall for r in trial.folds]
            average = trial.overall
        lines.append(name)
        lines.append(row(header))
        for metric in _REPORT_METRIC_ORDER:
            cells = [_METRIC_TITLES[metric]]
            cells += [format_percent(getattr(m, metric)) for m in fold_sets]
            cells.append(format_percent(getattr(average, metric)))
            lines.append(row(cells))
        lines.append("")
    if trial.excluded:
        for cls, available in trial.excluded.items():
            lines.append(f"excluded: {cls.canonical_name} ({available} images available)")
        lines.append("")
    if trial.cochran_note:
        lines.append(trial.cochran_note)
        lines.append("")

    lines.append("Pooled confusion matrix (rows: actual, columns: predicted;")
    lines.append("[n] marks the diagonal true-positive cells)")
    lines.append("")
    matrix = trial.pooled_confusion
    names = [cls.canonical_name for cls in matrix.labels]
    name_width = max(len(n) for n in names) + 2
    cell_width = max(max(len(n) for n in names), 7) + 2
    lines.append(" " * name_width + "".join(n.rjust(cell_width) for n in names))
    for i, actual in enumerate(matrix.labels):
        cells = []
        for j in range(len(matrix.labels)):
            value = int(matrix.cells[i, j])
            cells.append(f"[{value}]" if i == j else str(value))
        lines.append(names[i].ljust(name_width) + "".join(c.rjust(cell_width) for c in cells))
    lines.append("")
    return "\n".join(lines)


def _metricset_json(m: MetricSet) -> dict:
    return {name: getattr(m, name) for name in _REPORT_METRIC_ORDER}


def _render_json(trial: TrialReport) -> str:
    payload = {
        "classes": [cls.canonical_name for cls in trial.classes],
        "folds": [
            {
                "per_class": {cls.canonical_name: _metricset_json(r.per_class[cls])
                              for cls in trial.classes},
                "overall": _metricset_json(r.overall),
                "support": {cls.canonical_name: r.support[cls] for cls in trial.classes},
            }
            for r in trial.folds
        ],
        "averages": {cls.canonical_name: _metricset_json(trial.averages[cls])
                     for cls in trial.classes},
        "overall": _metricset_json(trial.overall),
        "pooled_confusion": {
            "labels": [cls.canonical_name for cls in trial.pooled_confusion.labels],
            "cells": trial.pooled_confusion.cells.tolist(),
        },
        "excluded": {cls.canonical_name: n for cls, n in trial.excluded.items()},
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def emit_report(trial: TrialReport, fmt: str = "text") -> str:
    """Render a trial deterministically as 'text' or 'json'."""
    if fmt == "text":
        return _render_text(trial)
    if fmt == "json":
        return _render_json(trial)
    raise ValueError(f"unknown report format {fmt!r}")
