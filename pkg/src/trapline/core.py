"""Shared vocabulary types and elementary box geometry.

Everything here is an immutable value, safe to share across threads.
Coordinates are continuous pixel values in the image frame with the origin
at the top-left corner.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class TraplineError(Exception):
    """Base class for errors raised by this package."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned rectangle as (xmin, ymin, xmax, ymax) corner coordinates.

    Construction performs no validation so that malformed annotation input
    can be represented and inspected; use :func:`validate_box` to collect
    violations before trusting a box.
    """

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin


@dataclass(frozen=True)
class SpeciesLabel:
    """A class label, compared exactly after whitespace normalization.

    The synthetic blank class is a reserved label (``is_blank=True``); it is
    never produced by a detection backend and only assigned by the
    confidence-threshold rule.
    """

    canonical_name: str
    is_blank: bool = False

    def __post_init__(self) -> None:
        if not self.canonical_name:
            raise ValueError("label name must be nonempty")


BLANK = SpeciesLabel("Blank", is_blank=True)


@dataclass(frozen=True)
class QualityFlag:
    """Marker for annotation names that flag image quality rather than a species."""

    reason: str


NO_GOOD = QualityFlag("no good")


@dataclass(frozen=True)
class Detection:
    """One backend prediction: label, confidence score and box."""

    label: SpeciesLabel
    score: float
    box: BoundingBox

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {self.score!r}")
        if self.label.is_blank:
            raise ValueError("a detection never carries the blank label")


@dataclass
class AnnotatedImage:
    """Image metadata plus its ground-truth tagged objects."""

    image_id: str
    width: float
    height: float
    objects: list[tuple[SpeciesLabel, BoundingBox]] = field(default_factory=list)
    quality_flag: str | None = None


SENSITIVITIES = ("low", "medium", "high")


@dataclass(frozen=True)
class CameraSource:
    """A registered field camera and its configured capture parameters."""

    camera_id: str
    resolution: tuple[int, int]
    dpi: int
    sensitivity: str = "medium"

    def __post_init__(self) -> None:
        if not self.camera_id:
            raise ValueError("camera_id must be nonempty")
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise ValueError(f"resolution components must be positive, got {self.resolution}")
        if self.sensitivity not in SENSITIVITIES:
            raise ValueError(f"sensitivity must be one of {SENSITIVITIES}, got {self.sensitivity!r}")


def box_area(b: BoundingBox) -> float:
    """Area of a box in square pixels; raises on degenerate boxes."""
    if b.xmax <= b.xmin or b.ymax <= b.ymin:
        raise ValueError(f"degenerate box {b}: area is not defined")
    return (b.xmax - b.xmin) * (b.ymax - b.ymin)


def validate_box(b: BoundingBox, width: float, height: float) -> list[str]:
    """Return all invariant violations of ``b`` against a width x height frame.

    An empty list means the box is valid. Inverted and degenerate coordinates,
    negative coordinates and out-of-frame extents are each reported separately.
    """
    violations: list[str] = []
    if b.xmin > b.xmax:
        violations.append(f"inverted x coordinates: xmin {b.xmin} >= xmax {b.xmax}")
    elif b.xmin == b.xmax:
        violations.append(f"degenerate box: xmin == xmax == {b.xmin}")
    if b.ymin > b.ymax:
        violations.append(f"inverted y coordinates: ymin {b.ymin} >= ymax {b.ymax}")
    elif b.ymin == b.ymax:
        violations.append(f"degenerate box: ymin == ymax == {b.ymin}")
    if b.xmin < 0 or b.ymin < 0:
        violations.append(f"negative coordinates: ({b.xmin}, {b.ymin})")
    if b.xmax > width:
        violations.append(f"box exceeds width: xmax {b.xmax} > {width}")
    if b.ymax > height:
        violations.append(f"box exceeds height: ymax {b.ymax} > {height}")
    return violations


def normalize_label(raw: str) -> SpeciesLabel | QualityFlag:
    """Normalize a raw annotation name into a species label.

    Trims and collapses internal whitespace. The reserved name "no good"
    (case-insensitive) marks image quality and maps to :data:`NO_GOOD`
    instead of a label. Empty input raises ValueError.
    """
    name = " ".join(raw.split())
    if not name:
        raise ValueError("label is empty after trimming")
    if name.lower() == NO_GOOD.reason:
        return NO_GOOD
    return SpeciesLabel(name)
