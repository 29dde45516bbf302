"""Line-delimited JSON interchange files for evaluation inputs.

Two record shapes are used:

* detection/truth samples, one image per line:
  ``{"image_id", "truths": [{"label", "box": [xmin, ymin, xmax, ymax]}],
  "detections": [{"label", "score", "box": [...]}]}``

* labeled prediction rows for trial replay, one image per line:
  ``{"image_id", "true_label", "predicted_label", "score"}`` (score may be
  null, e.g. for blank predictions)

The blank class is written by its canonical name "Blank" and resolved back
to the reserved blank label on read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

from trapline.core import BLANK, BoundingBox, Detection, QualityFlag, SpeciesLabel, normalize_label
from trapline.metrics import GroundTruth, ImageSample


def resolve_label(name: str) -> SpeciesLabel:
    """Map a serialized label name back to a label; "Blank" is the reserved blank."""
    if name.strip() == BLANK.canonical_name:
        return BLANK
    label = normalize_label(name)
    if isinstance(label, QualityFlag):
        raise ValueError(f"{name!r} is a quality flag, not a label")
    return label


def _box_list(box: BoundingBox) -> list[float]:
    return [box.xmin, box.ymin, box.xmax, box.ymax]


def write_samples(path, samples: Iterable[ImageSample]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for sample in samples:
            f.write(json.dumps({
                "image_id": sample.image_id,
                "truths": [
                    {"label": t.label.canonical_name, "box": _box_list(t.box)}
                    for t in sample.truths
                ],
                "detections": [
                    {"label": d.label.canonical_name, "score": d.score, "box": _box_list(d.box)}
                    for d in sample.detections
                ],
            }, sort_keys=True) + "\n")
            count += 1
    return count


def read_samples(path) -> list[ImageSample]:
    samples = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                truths = [
                    GroundTruth(resolve_label(t["label"]), BoundingBox(*map(float, t["box"])))
                    for t in row.get("truths", [])
                ]
                detections = [
                    Detection(resolve_label(d["label"]), float(d["score"]),
                              BoundingBox(*map(float, d["box"])))
                    for d in row.get("detections", [])
                ]
                samples.append(ImageSample(str(row["image_id"]), truths, detections))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad sample record: {exc}") from exc
    return samples


@dataclass(frozen=True)
class LabeledRow:
    """One evaluated image: its verified label and the pipeline's prediction."""

    image_id: str
    true_label: SpeciesLabel
    predicted_label: SpeciesLabel
    score: float | None = None


def write_label_rows(path, rows: Iterable[LabeledRow]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps({
                "image_id": row.image_id,
                "true_label": row.true_label.canonical_name,
                "predicted_label": row.predicted_label.canonical_name,
                "score": row.score,
            }, sort_keys=True) + "\n")
            count += 1
    return count


def read_label_rows(path) -> list[LabeledRow]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                rows.append(LabeledRow(
                    image_id=str(raw["image_id"]),
                    true_label=resolve_label(raw["true_label"]),
                    predicted_label=resolve_label(raw["predicted_label"]),
                    score=None if raw.get("score") is None else float(raw["score"]),
                ))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad labeled row: {exc}") from exc
    return rows


def ordered_labels(rows: Sequence[LabeledRow]) -> list[SpeciesLabel]:
    """Distinct labels in first-appearance order, true labels before
    prediction-only ones."""
    seen: dict[SpeciesLabel, None] = {}
    for row in rows:
        seen.setdefault(row.true_label)
    for row in rows:
        seen.setdefault(row.predicted_label)
    return list(seen)
