"""Client for a pluggable remote detection backend.

Submits image bytes, applies the confidence-floor rule (a detection is kept
only when its score strictly exceeds the floor; an image with nothing left
is blank) and reports backend health. A deterministic fixture-driven mock
backend stands in for the model server in tests and dry runs.

Wire contract: POST ``<endpoint>/v1/detect`` with a JSON body
``{"model": ..., "image": <base64>}``; the response is
``{"detections": [{"label": ..., "score": ..., "box": [xmin, ymin, xmax, ymax]}]}``.
Status 200 is success, 429 and 5xx are retryable, other 4xx are not.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import requests

from trapline.core import BoundingBox, Detection, QualityFlag, TraplineError, normalize_label
from trapline.ingest import IngestEvent

logger = logging.getLogger(__name__)


class BackendUnavailable(TraplineError):
    """The backend did not produce a result; the call may be retried."""


class BackendRejected(TraplineError):
    """The backend refused the request; retrying will not help."""


class FixtureError(TraplineError):
    """A mock-backend fixture file is malformed."""


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "http://localhost:8000"
    model: str = "bird-detector"
    timeout_s: float = 30.0
    max_retries: int = 3
    confidence_floor: float = 0.5
    workers: int = 4

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence_floor < 1.0:
            raise ValueError(f"confidence_floor must be in [0, 1), got {self.confidence_floor}")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")


@dataclass(frozen=True)
class ClassifiedImage:
    """Post-threshold result for one event; blank means nothing survived."""

    event_id: str
    detections: tuple[Detection, ...]
    is_blank: bool
    latency_ms: float

    def __post_init__(self) -> None:
        if self.is_blank != (len(self.detections) == 0):
            raise ValueError("is_blank must mirror an empty detection list")


def apply_threshold(dets: Sequence[Detection], floor: float) -> tuple[list[Detection], bool]:
    """Keep detections whose score strictly exceeds ``floor``.

    The blank flag is set exactly when nothing is kept; a score equal to the
    floor does not survive.
    """
    if not 0.0 <= floor < 1.0:
        raise ValueError(f"confidence floor must be in [0, 1), got {floor}")
    kept = [d for d in dets if d.score > floor]
    return kept, not kept


class Backend(Protocol):
    def detect(self, image_bytes: bytes) -> list[Detection]: ...

    def ping(self) -> None: ...


def parse_detection_payload(items: list) -> list[Detection]:
    detections = []
    for item in items:
        label = normalize_label(str(item["label"]))
        if isinstance(label, QualityFlag):
            raise BackendRejected("backend returned a quality flag as a label")
        xmin, ymin, xmax, ymax = (float(v) for v in item["box"])
        detections.append(Detection(label, float(item["score"]), BoundingBox(xmin, ymin, xmax, ymax)))
    return detections


class HttpBackend:
    """Thin adapter speaking the detect wire contract over HTTP."""

    def __init__(self, config: BackendConfig, session: requests.Session | None = None):
        self.config = config
        self._session = session or requests.Session()

    def _post(self, payload: dict) -> requests.Response:
        url = self.config.endpoint.rstrip("/") + "/v1/detect"
        try:
            return self._session.post(url, json=payload, timeout=self.config.timeout_s)
        except requests.RequestException as exc:
            raise BackendUnavailable(f"backend unreachable: {exc}") from exc

    def detect(self, image_bytes: bytes) -> list[Detection]:
        response = self._post({
            "model": self.config.model,
            "image": base64.b64encode(image_bytes).decode("ascii"),
        })
        if response.status_code == 429 or response.status_code >= 500:
            raise BackendUnavailable(f"backend returned {response.status_code}")
        if response.status_code != 200:
            raise BackendRejected(f"backend returned {response.status_code}: {response.text[:200]}")
        try:
            return parse_detection_payload(response.json()["detections"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendRejected(f"malformed backend response: {exc}") from exc

    def ping(self) -> None:
        self._post({"model": self.config.model, "image": ""})


class MockBackend:
    """Deterministic test double mapping image content hashes to detections.

    The fixture directory holds ``detections.json``: an object keyed by the
    sha256 hex of image bytes, each value a list of
    ``{"label", "score", "box"}`` entries. Unknown images yield no
    detections.
    """

    def __init__(self, fixture_dir):
        path = Path(fixture_dir) / "detections.json"
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            if not isinstance(raw, dict):
                raise FixtureError(f"{path}: expected an object keyed by content hash")
            self._fixtures = {key: parse_detection_payload(items) for key, items in raw.items()}
        except FileNotFoundError as exc:
            raise FixtureError(f"missing fixture file: {path}") from exc
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FixtureError(f"{path}: {exc}") from exc

    def detect(self, image_bytes: bytes) -> list[Detection]:
        return list(self._fixtures.get(hashlib.sha256(image_bytes).hexdigest(), []))

    def ping(self) -> None:
        return None


def classify(
    event: IngestEvent,
    cfg: BackendConfig,
    backend: Backend,
    sleep: Callable[[float], None] = time.sleep,
    clock: Callable[[], float] = time.monotonic,
) -> ClassifiedImage:
    """Run one event through the backend and apply the confidence floor.

    Retryable failures back off up to ``max_retries`` retries; when retries
    are exhausted the error propagates so the caller can park the event
    rather than drop it.
    """
    started = clock()
    attempts = cfg.max_retries + 1
    last_error: BackendUnavailable | None = None
    for attempt in range(attempts):
        try:
            raw = backend.detect(event.image_bytes)
            break
        except BackendUnavailable as exc:
            last_error = exc
            if attempt + 1 < attempts:
                delay = min(2.0**attempt, cfg.timeout_s)
                logger.warning("stage=classify event=%s attempt=%d retrying in %.1fs: %s",
                               event.event_id, attempt + 1, delay, exc)
                sleep(delay)
    else:
        raise last_error or BackendUnavailable("no attempts made")
    kept, blank = apply_threshold(raw, cfg.confidence_floor)
    latency_ms = (clock() - started) * 1000.0
    logger.info("stage=classify event=%s detections=%d blank=%s", event.event_id, len(kept), blank)
    return ClassifiedImage(
        event_id=event.event_id,
        detections=tuple(kept),
        is_blank=blank,
        latency_ms=latency_ms,
    )


@dataclass(frozen=True)
class HealthStatus:
    state: str  # live | degraded | down
    latency_ms: float | None


def backend_health(backend: Backend, cfg: BackendConfig, clock: Callable[[], float] = time.monotonic) -> HealthStatus:
    """Probe the backend: down on failure, degraded when the round trip takes
    longer than half the configured timeout, live otherwise."""
    started = clock()
    try:
        backend.ping()
    except TraplineError:
        return HealthStatus(state="down", latency_ms=None)
    latency_s = clock() - started
    state = "degraded" if latency_s > cfg.timeout_s / 2 else "live"
    return HealthStatus(state=state, latency_ms=latency_s * 1000.0)
