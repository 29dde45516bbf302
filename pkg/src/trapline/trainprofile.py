"""Training hyperparameter profile: emission, validation and round-trippable
rendering.

No training happens here; the profile is a configuration artifact handed to
an external training framework. The file grammar is plain ``key = value``
lines with augmentations as ``aug.<kind> = on`` plus optional
``aug.<kind>.<param> = value`` lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from trapline.core import TraplineError


@dataclass(frozen=True)
class Augmentation:
    kind: str
    params: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class TrainProfile:
    resize_min: int
    resize_max: int
    feature_stride: int
    batch_size: int
    learning_rate: float
    augmentations: tuple[Augmentation, ...]
    epochs: int
    steps: int
    base_model: str


def reference_profile() -> TrainProfile:
    """The deployed model's training configuration."""
    return TrainProfile(
        resize_min=1024,
        resize_max=1024,
        feature_stride=16,
        batch_size=32,
        learning_rate=0.0004,
        augmentations=(
            Augmentation("hue"),
            Augmentation("contrast"),
            Augmentation("saturation"),
            Augmentation("square_crop", {"scale_min": 0.6, "scale_max": 1.3}),
        ),
        epochs=58,
        steps=30000,
        base_model="faster-rcnn-resnet101-coco",
    )


def validate_profile(p: TrainProfile) -> list[str]:
    """Return all invariant violations; an empty list means the profile is valid."""
    violations = []
    if p.resize_min <= 0 or p.resize_max <= 0:
        violations.append("resize values must be positive")
    if p.resize_min > p.resize_max:
        violations.append(f"resize_min {p.resize_min} exceeds resize_max {p.resize_max}")
    if p.feature_stride <= 0:
        violations.append("feature_stride must be positive")
    elif p.resize_min > 0 and p.resize_min % p.feature_stride != 0:
        violations.append(f"feature_stride {p.feature_stride} does not divide resize_min {p.resize_min}")
    if p.batch_size < 1:
        violations.append("batch_size must be >= 1")
    if p.learning_rate <= 0:
        violations.append("learning_rate must be positive")
    if p.epochs < 1:
        violations.append("epochs must be >= 1")
    if p.steps < 1:
        violations.append("steps must be >= 1")
    if not p.base_model:
        violations.append("base_model must be nonempty")
    for aug in p.augmentations:
        if not aug.kind or not aug.kind.replace("_", "").isalnum():
            violations.append(f"augmentation kind {aug.kind!r} is not a valid token")
        if aug.kind == "square_crop":
            lo, hi = aug.params.get("scale_min"), aug.params.get("scale_max")
            if lo is None or hi is None or not 0 < lo <= hi:
                violations.append(f"square_crop scale range {lo}..{hi} is invalid")
    return violations


class ProfileError(TraplineError):
    """A profile is invalid or a profile document cannot be parsed."""


_SCALAR_KEYS = (
    "resize_min", "resize_max", "feature_stride", "batch_size",
    "learning_rate", "epochs", "steps", "base_model",
)
_INT_KEYS = {"resize_min", "resize_max", "feature_stride", "batch_size", "epochs", "steps"}


def render_profile(p: TrainProfile, fmt: str = "kv") -> str:
    """Deterministic rendering of a valid profile; round-trips via parse_profile."""
    if fmt != "kv":
        raise ValueError(f"unknown profile format {fmt!r}")
    violations = validate_profile(p)
    if violations:
        raise ProfileError("invalid profile: " + "; ".join(violations))
    lines = [f"{key} = {getattr(p, key)}" for key in _SCALAR_KEYS]
    for aug in p.augmentations:
        lines.append(f"aug.{aug.kind} = on")
        for param in sorted(aug.params):
            lines.append(f"aug.{aug.kind}.{param} = {repr(aug.params[param])}")
    return "\n".join(lines) + "\n"


def _parse_value(raw: str):
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def parse_profile(text: str) -> TrainProfile:
    """Parse the key-value grammar back into a TrainProfile."""
    scalars: dict[str, object] = {}
    augmentations: dict[str, dict[str, float]] = {}
    order: list[str] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ProfileError(f"line {line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key.startswith("aug."):
            parts = key.split(".")
            if len(parts) == 2:
                kind = parts[1]
                if kind not in augmentations:
                    augmentations[kind] = {}
                    order.append(kind)
            elif len(parts) == 3:
                kind, param = parts[1], parts[2]
                if kind not in augmentations:
                    augmentations[kind] = {}
                    order.append(kind)
                augmentations[kind][param] = float(raw)
            else:
                raise ProfileError(f"line {line_no}: malformed augmentation key {key!r}")
        else:
            scalars[key] = _parse_value(raw)
    missing = [key for key in _SCALAR_KEYS if key not in scalars]
    if missing:
        raise ProfileError(f"missing keys: {', '.join(missing)}")
    try:
        profile = TrainProfile(
            **{key: int(scalars[key]) for key in _INT_KEYS},
            learning_rate=float(scalars["learning_rate"]),
            base_model=str(scalars["base_model"]),
            augmentations=tuple(Augmentation(kind, augmentations[kind]) for kind in order),
        )
    except (TypeError, ValueError) as exc:
        raise ProfileError(f"bad scalar value: {exc}") from exc
    return profile
