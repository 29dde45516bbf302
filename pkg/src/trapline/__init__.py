"""Camera-trap image ingestion, detection pipeline and evaluation toolkit."""

__version__ = "0.1.0"

from trapline.core import (
    BLANK,
    AnnotatedImage,
    BoundingBox,
    CameraSource,
    Detection,
    SpeciesLabel,
    TraplineError,
    box_area,
    normalize_label,
    validate_box,
)

__all__ = [
    "BLANK",
    "AnnotatedImage",
    "BoundingBox",
    "CameraSource",
    "Detection",
    "SpeciesLabel",
    "TraplineError",
    "box_area",
    "normalize_label",
    "validate_box",
    "__version__",
]
