"""Detection evaluation mathematics.

Covers box IoU, greedy detection-to-truth matching, 101-point interpolated
average precision (per class, per IoU threshold, per size bucket), averaged
recall at a detections-per-image cap, one-vs-rest classification metrics and
confusion matrices.

An undefined ratio (0/0) is represented as ``None`` and excluded from
averages, never coerced to 0 or 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from trapline.core import BoundingBox, Detection, SpeciesLabel, box_area

IOU_RANGE = tuple(i / 100 for i in range(50, 100, 5))
RECALL_GRID = tuple(i / 100 for i in range(101))

SMALL_MAX_AREA = 32**2
MEDIUM_MAX_AREA = 96**2


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area of two boxes; 0 when disjoint."""
    ix = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    iy = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (box_area(a) + box_area(b) - inter)


class SizeBucket(enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


def size_bucket(truth_box: BoundingBox) -> SizeBucket:
    """Bucket a ground-truth box by area: <32^2 small, <96^2 medium, else large."""
    area = box_area(truth_box)
    if area < SMALL_MAX_AREA:
        return SizeBucket.SMALL
    if area < MEDIUM_MAX_AREA:
        return SizeBucket.MEDIUM
    return SizeBucket.LARGE


@dataclass(frozen=True)
class GroundTruth:
    """A tagged object: its label and box."""

    label: SpeciesLabel
    box: BoundingBox


@dataclass
class ImageSample:
    """Truths and detections for one image, the unit of evaluation input."""

    image_id: str
    truths: list[GroundTruth] = field(default_factory=list)
    detections: list[Detection] = field(default_factory=list)


@dataclass
class MatchResult:
    """Outcome of matching detections against truths for one image.

    ``pairs`` holds (detection index, truth index, iou) triples; indices refer
    to the input sequences. Every detection and truth appears in at most one
    pair.
    """

    pairs: list[tuple[int, int, float]]
    unmatched_detections: list[int]
    unmatched_truths: list[int]


def match_detections(
    dets: Sequence[Detection],
    truths: Sequence[GroundTruth],
    iou_threshold: float,
) -> MatchResult:
    """Greedy matching: detections in descending score order each take the
    unmatched same-class truth with the highest IoU at or above the threshold.

    Ties break deterministically by higher IoU, then lower truth index.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken: set[int] = set()
    pairs: list[tuple[int, int, float]] = []
    for di in order:
        det = dets[di]
        best_iou = 0.0
        best_ti = -1
        for ti, truth in enumerate(truths):
            if ti in taken or truth.label != det.label:
                continue
            value = iou(det.box, truth.box)
            if value >= iou_threshold and value > best_iou:
                best_iou, best_ti = value, ti
        if best_ti >= 0:
            taken.add(best_ti)
            pairs.append((di, best_ti, best_iou))
    matched_dets = {di for di, _, _ in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_detections=[i for i in range(len(dets)) if i not in matched_dets],
        unmatched_truths=[i for i in range(len(truths)) if i not in taken],
    )


@dataclass(frozen=True)
class BinaryCounts:
    """One-vs-rest outcome counts."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricSet:
    """Classification ratios; a ``None`` value means undefined (0/0)."""

    precision: float | None
    sensitivity: float | None
    specificity: float | None
    f1: float | None
    accuracy: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {
            "precision": self.precision,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "f1": self.f1,
            "accuracy": self.accuracy,
        }


METRIC_NAMES = ("precision", "sensitivity", "specificity", "f1", "accuracy")


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def classification_metrics(c: BinaryCounts) -> MetricSet:
    """Precision, sensitivity, specificity, F1 and accuracy from counts.

    Any 0/0 ratio is undefined and propagates as ``None``.
    """
    precision = _ratio(c.tp, c.tp + c.fp)
    sensitivity = _ratio(c.tp, c.tp + c.fn)
    specificity = _ratio(c.tn, c.tn + c.fp)
    if precision is None or sensitivity is None or precision + sensitivity == 0:
        f1 = None
    else:
        f1 = 2 * precision * sensitivity / (precision + sensitivity)
    accuracy = _ratio(c.tp + c.tn, c.total)
    return MetricSet(precision, sensitivity, specificity, f1, accuracy)


def _class_detection_flags(
    samples: Sequence[ImageSample],
    label: SpeciesLabel,
    iou_threshold: float,
    bucket: SizeBucket | None,
) -> tuple[list[tuple[float, bool]], int]:
    """Per-image matching for one class: global (score, is_tp) flags and the
    truth count. With a size bucket, out-of-bucket truths and the detections
    matched to them are dropped; unmatched detections stay false positives.
    """
    flags: list[tuple[float, bool]] = []
    n_truth = 0
    for sample in samples:
        dets = [d for d in sample.detections if d.label == label]
        truths = [t for t in sample.truths if t.label == label]
        result = match_detections(dets, truths, iou_threshold) if dets else None
        matched = {di: ti for di, ti, _ in result.pairs} if result else {}
        if bucket is None:
            keep = [True] * len(truths)
        else:
            keep = [size_bucket(t.box) == bucket for t in truths]
        n_truth += sum(keep)
        for di, det in enumerate(dets):
            ti = matched.get(di)
            if ti is None:
                flags.append((det.score, False))
            elif keep[ti]:
                flags.append((det.score, True))
    return flags, n_truth


def average_precision(
    samples: Sequence[ImageSample],
    label: SpeciesLabel,
    iou_threshold: float = 0.5,
    bucket: SizeBucket | None = None,
) -> float | None:
    """101-point interpolated average precision for one class.

    The precision-recall curve runs over all detections of the class sorted
    globally by descending score; AP is the mean over recall levels
    r in {0.00, 0.01, ..., 1.00} of the maximum precision at recall >= r.
    Returns 0 when detections exist without truths and ``None`` when the
    class has neither truths nor detections.
    """
    flags, n_truth = _class_detection_flags(samples, label, iou_threshold, bucket)
    if n_truth == 0:
        return 0.0 if flags else None
    flags.sort(key=lambda f: -f[0])
    hits = np.array([hit for _, hit in flags], dtype=np.float64)
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / n_truth
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in RECALL_GRID:
        i = int(np.searchsorted(recall, r, side="left"))
        if i < len(recall):
            total += float(envelope[i])
    return total / len(RECALL_GRID)


def mean_average_precision(per_class_ap: Mapping[SpeciesLabel, float | None]) -> float:
    """Arithmetic mean of the defined per-class AP values."""
    if not per_class_ap:
        raise ValueError("per-class AP map is empty")
    defined = [v for v in per_class_ap.values() if v is not None]
    if not defined:
        raise ValueError("every class AP is undefined")
    return sum(defined) / len(defined)


def collect_labels(samples: Iterable[ImageSample]) -> list[SpeciesLabel]:
    """Distinct non-blank labels appearing in truths or detections, name-sorted."""
    labels = {t.label for s in samples for t in s.truths}
    labels |= {d.label for s in samples for d in s.detections}
    return sorted(labels, key=lambda label: label.canonical_name)


def map_at(
    samples: Sequence[ImageSample],
    iou_thresholds: Sequence[float] = (0.50,),
    bucket: SizeBucket | None = None,
    labels: Sequence[SpeciesLabel] | None = None,
) -> float:
    """Mean average precision for one configuration.

    Each class AP is averaged over the requested IoU thresholds (undefined
    entries excluded), then :func:`mean_average_precision` is taken over
    classes. A size bucket restricts truths (and their matches) to the bucket.
    """
    if labels is None:
        labels = collect_labels(samples)
    per_class: dict[SpeciesLabel, float | None] = {}
    for label in labels:
        values = [
            ap
            for t in iou_thresholds
            if (ap := average_precision(samples, label, t, bucket)) is not None
        ]
        per_class[label] = sum(values) / len(values) if values else None
    return mean_average_precision(per_class)


def average_recall_at_k(
    samples: Sequence[ImageSample],
    k: int,
    bucket: SizeBucket | None = None,
) -> float | None:
    """Recall with at most ``k`` detections per image, averaged over the IoU
    thresholds 0.50:0.05:0.95.

    Per image only the k highest-scoring detections (across classes) are
    considered. Returns ``None`` when no truths exist (after bucket filtering).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")

    def in_bucket(truth: GroundTruth) -> bool:
        return bucket is None or size_bucket(truth.box) == bucket

    n_truth = sum(1 for s in samples for t in s.truths if in_bucket(t))
    if n_truth == 0:
        return None
    recalls = []
    for threshold in IOU_RANGE:
        matched = 0
        for sample in samples:
            top = sorted(sample.detections, key=lambda d: -d.score)[:k]
            for label in {d.label for d in top}:
                dets = [d for d in top if d.label == label]
                truths = [t for t in sample.truths if t.label == label]
                result = match_detections(dets, truths, threshold)
                matched += sum(1 for _, ti, _ in result.pairs if in_bucket(truths[ti]))
        recalls.append(matched / n_truth)
    return sum(recalls) / len(recalls)


@dataclass
class ConfusionMatrix:
    """Counts of (actual, predicted) label pairs over a declared label set."""

    labels: list[SpeciesLabel]
    cells: np.ndarray  # [actual, predicted]

    def index(self, label: SpeciesLabel) -> int:
        return self.labels.index(label)

    def cell(self, actual: SpeciesLabel, predicted: SpeciesLabel) -> int:
        return int(self.cells[self.index(actual), self.index(predicted)])

    def row_sum(self, label: SpeciesLabel) -> int:
        return int(self.cells[self.index(label)].sum())

    def col_sum(self, label: SpeciesLabel) -> int:
        return int(self.cells[:, self.index(label)].sum())

    @property
    def total(self) -> int:
        return int(self.cells.sum())


def build_confusion(
    rows: Iterable[tuple[SpeciesLabel, SpeciesLabel]],
    labels: Sequence[SpeciesLabel],
) -> ConfusionMatrix:
    """Tabulate (actual, predicted) pairs; labels outside the set are an error."""
    index = {label: i for i, label in enumerate(labels)}
    cells = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for actual, predicted in rows:
        if actual not in index:
            raise ValueError(f"actual label {actual.canonical_name!r} not in the declared label set")
        if predicted not in index:
            raise ValueError(f"predicted label {predicted.canonical_name!r} not in the declared label set")
        cells[index[actual], index[predicted]] += 1
    return ConfusionMatrix(labels=list(labels), cells=cells)


def one_vs_rest_counts(m: ConfusionMatrix, label: SpeciesLabel) -> BinaryCounts:
    """TP/FP/TN/FN for one class against the rest of the matrix."""
    i = m.index(label)
    tp = int(m.cells[i, i])
    fn = int(m.cells[i].sum()) - tp
    fp = int(m.cells[:, i].sum()) - tp
    tn = m.total - tp - fn - fp
    return BinaryCounts(tp=tp, fp=fp, tn=tn, fn=fn)
