"""Annotation parsing, dataset filtering and statistics, splitting and export.

Annotation files are VOC-style XML: a root ``annotation`` element with
``filename``, ``size{width,height,depth}`` and zero or more
``object{name, bndbox{xmin,ymin,xmax,ymax}}`` children.
"""

from __future__ import annotations

import logging
import math
import random
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from trapline.core import (
    AnnotatedImage,
    BoundingBox,
    QualityFlag,
    SpeciesLabel,
    TraplineError,
    normalize_label,
    validate_box,
)
from trapline import records

logger = logging.getLogger(__name__)

_KNOWN_OBJECT_FIELDS = {"name", "bndbox"}
_BOX_FIELDS = ("xmin", "ymin", "xmax", "ymax")


class AnnotationError(TraplineError):
    """An annotation document cannot be parsed."""


def parse_annotation(document: str, source: str = "<annotation>") -> AnnotatedImage:
    """Parse one VOC-style annotation document into an AnnotatedImage.

    A missing ``size`` element is a hard error. Objects with unparseable
    boxes are reported with image context and skipped; objects carrying
    unknown fields are reported and kept. An object named "no good" sets
    the image quality flag instead of adding a tagged object.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise AnnotationError(f"{source}: malformed XML: {exc}") from exc

    size = root.find("size")
    if size is None:
        raise AnnotationError(f"{source}: missing size element")
    try:
        width = float(size.findtext("width"))
        height = float(size.findtext("height"))
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"{source}: size element lacks numeric width/height") from exc
    if width <= 0 or height <= 0:
        raise AnnotationError(f"{source}: non-positive image dimensions {width}x{height}")

    image_id = (root.findtext("filename") or "").strip() or source
    image = AnnotatedImage(image_id=image_id, width=width, height=height)

    for obj in root.iter("object"):
        for child in obj:
            if child.tag not in _KNOWN_OBJECT_FIELDS:
                logger.warning("%s: object field %r unknown, object kept", image_id, child.tag)
        name = obj.findtext("name")
        if name is None or not name.strip():
            logger.warning("%s: object without a name skipped", image_id)
            continue
        label = normalize_label(name)
        if isinstance(label, QualityFlag):
            image.quality_flag = label.reason
            continue
        bndbox = obj.find("bndbox")
        if bndbox is None:
            logger.warning("%s: object %r has no bndbox, skipped", image_id, label.canonical_name)
            continue
        try:
            coords = [float(bndbox.findtext(f)) for f in _BOX_FIELDS]
        except (TypeError, ValueError):
            logger.warning("%s: object %r has a malformed bndbox, skipped", image_id, label.canonical_name)
            continue
        image.objects.append((label, BoundingBox(*coords)))
    return image


def parse_annotation_file(path) -> AnnotatedImage:
    with open(path, "r", encoding="utf-8") as f:
        return parse_annotation(f.read(), source=str(path))


def filter_unusable(images: Sequence[AnnotatedImage]) -> tuple[list[AnnotatedImage], list[AnnotatedImage]]:
    """Split images into (kept, removed), preserving order.

    Removal is image-level: an image is removed when its quality flag is set
    or it has no valid objects left. Objects whose boxes violate the image
    frame are dropped from kept images with a warning.
    """
    kept: list[AnnotatedImage] = []
    removed: list[AnnotatedImage] = []
    for image in images:
        if image.quality_flag is not None:
            removed.append(image)
            continue
        valid_objects = []
        for label, box in image.objects:
            violations = validate_box(box, image.width, image.height)
            if violations:
                logger.warning(
                    "%s: dropping object %r: %s", image.image_id, label.canonical_name, "; ".join(violations)
                )
            else:
                valid_objects.append((label, box))
        if not valid_objects:
            removed.append(image)
            continue
        if len(valid_objects) != len(image.objects):
            image.objects = valid_objects
        kept.append(image)
    return kept, removed


@dataclass
class DatasetSummary:
    """Aggregate statistics over a set of annotated images."""

    image_count: int
    tag_count: int
    mean_resolution: tuple[float, float]
    resolution_histogram: dict[tuple[float, float], int]
    class_counts: dict[SpeciesLabel, int]


def dataset_summary(images: Sequence[AnnotatedImage]) -> DatasetSummary:
    """Image/tag counts, mean resolution, resolution histogram and per-class tag counts."""
    if not images:
        raise ValueError("dataset_summary requires at least one image")
    histogram = Counter((im.width, im.height) for im in images)
    class_counts = Counter(label for im in images for label, _ in im.objects)
    mean_w = sum(im.width for im in images) / len(images)
    mean_h = sum(im.height for im in images) / len(images)
    return DatasetSummary(
        image_count=len(images),
        tag_count=sum(class_counts.values()),
        mean_resolution=(mean_w, mean_h),
        resolution_histogram=dict(histogram),
        class_counts=dict(class_counts),
    )


@dataclass
class SplitAssignment:
    """A train/validation partition of image ids."""

    train: list[str]
    validation: list[str]
    ratio: float
    seed: int


def split_dataset(image_ids: Sequence[str], ratio: float, seed: int) -> SplitAssignment:
    """Randomly partition ``image_ids`` into train/validation at ``ratio``.

    Uniform sampling without replacement, deterministic under (input order,
    seed). The train size is ratio*N rounded half-up; validation receives
    the remainder.
    """
    if not image_ids:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    n_train = int(math.floor(ratio * len(image_ids) + 0.5))
    order = list(image_ids)
    random.Random(seed).shuffle(order)
    train, validation = order[:n_train], order[n_train:]
    if not validation:
        logger.warning("validation split is empty (N=%d, ratio=%s)", len(image_ids), ratio)
    return SplitAssignment(train=train, validation=validation, ratio=ratio, seed=seed)


def encode_image_payload(image: AnnotatedImage, data: bytes) -> bytes:
    """Build the key-value record payload for one image.

    Box coordinates are normalized to [0, 1] by the image dimensions.
    """
    features = {
        "image/encoded": records.bytes_feature([data]),
        "image/width": records.int64_feature([int(image.width)]),
        "image/height": records.int64_feature([int(image.height)]),
        "image/object/class/text": records.bytes_feature(
            [label.canonical_name.encode("utf-8") for label, _ in image.objects]
        ),
        "image/object/bbox/xmin": records.float_feature([b.xmin / image.width for _, b in image.objects]),
        "image/object/bbox/xmax": records.float_feature([b.xmax / image.width for _, b in image.objects]),
        "image/object/bbox/ymin": records.float_feature([b.ymin / image.height for _, b in image.objects]),
        "image/object/bbox/ymax": records.float_feature([b.ymax / image.height for _, b in image.objects]),
    }
    return records.encode_example(features)


def export_records(
    images: Iterable[AnnotatedImage],
    image_bytes_provider: Callable[[str], bytes],
    path,
) -> int:
    """Write one record per image to ``path``; returns the count written.

    Images whose bytes cannot be resolved are skipped and reported.
    """
    written = 0
    with records.RecordWriter(path) as writer:
        for image in images:
            try:
                data = image_bytes_provider(image.image_id)
            except (LookupError, OSError) as exc:
                logger.warning("%s: image bytes unresolvable (%s), record skipped", image.image_id, exc)
                continue
            writer.write(encode_image_payload(image, data))
            written += 1
    return written


def read_records(path) -> list[bytes]:
    """Read back raw record payloads (CRC-verified); see trapline.records."""
    return records.read_records(path)
