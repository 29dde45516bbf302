"""Persistence of classified images, alert evaluation and species reporting.

Backed by an embedded transactional store (sqlite). Schema:

    cameras(camera_id PK, width, height, dpi, sensitivity, registered_at)
    events(camera_id, content_hash, event_id, captured_at, received_at,
           stored_at, is_blank, latency_ms, flagged,
           PRIMARY KEY (camera_id, content_hash))        -- the dedup key
    detections(record_id PK, event_id, camera_id, captured_at, label, score,
               xmin, ymin, xmax, ymax, stored_at)
    blanks(record_id PK, event_id, camera_id, captured_at, stored_at)
    alerts(alert_id PK, rule_id, event_id, species, score, camera_id,
           captured_at, delivered, created_at)
    parked(event_id PK, camera_id, captured_at, received_at, image_b64,
           reason, parked_at)

Writes are serialized per event (one transaction per classified image);
reads may run concurrently. Alert delivery never blocks the pipeline.
"""

from __future__ import annotations

import base64
import json
import logging
import sqlite3
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Iterable, Sequence

import requests

from trapline.core import BoundingBox, CameraSource, SpeciesLabel, TraplineError
from trapline.inference import ClassifiedImage
from trapline.ingest import IngestEvent

logger = logging.getLogger(__name__)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS cameras (
    camera_id TEXT PRIMARY KEY,
    width INTEGER NOT NULL,
    height INTEGER NOT NULL,
    dpi INTEGER NOT NULL,
    sensitivity TEXT NOT NULL,
    registered_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS events (
    camera_id TEXT NOT NULL,
    content_hash TEXT NOT NULL,
    event_id TEXT NOT NULL,
    captured_at TEXT NOT NULL,
    received_at TEXT NOT NULL,
    stored_at TEXT NOT NULL,
    is_blank INTEGER NOT NULL,
    latency_ms REAL,
    flagged INTEGER NOT NULL DEFAULT 0,
    PRIMARY KEY (camera_id, content_hash)
);
CREATE TABLE IF NOT EXISTS detections (
    record_id INTEGER PRIMARY KEY AUTOINCREMENT,
    event_id TEXT NOT NULL,
    camera_id TEXT NOT NULL,
    captured_at TEXT NOT NULL,
    label TEXT NOT NULL,
    score REAL NOT NULL,
    xmin REAL NOT NULL, ymin REAL NOT NULL, xmax REAL NOT NULL, ymax REAL NOT NULL,
    stored_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS blanks (
    record_id INTEGER PRIMARY KEY AUTOINCREMENT,
    event_id TEXT NOT NULL,
    camera_id TEXT NOT NULL,
    captured_at TEXT NOT NULL,
    stored_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS alerts (
    alert_id INTEGER PRIMARY KEY AUTOINCREMENT,
    rule_id TEXT NOT NULL,
    event_id TEXT NOT NULL,
    species TEXT NOT NULL,
    score REAL NOT NULL,
    camera_id TEXT NOT NULL,
    captured_at TEXT NOT NULL,
    delivered INTEGER NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS parked (
    event_id TEXT PRIMARY KEY,
    camera_id TEXT NOT NULL,
    captured_at TEXT NOT NULL,
    received_at TEXT NOT NULL,
    image_b64 TEXT NOT NULL,
    reason TEXT NOT NULL,
    parked_at TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_detections_order ON detections (captured_at, record_id);
CREATE INDEX IF NOT EXISTS idx_detections_label ON detections (label);
"""


MAX_PAGE_SIZE = 1000


class DuplicateCameraError(TraplineError):
    """The camera id is already registered."""


class StorageError(TraplineError):
    """A write could not be completed; the event should return to retry."""


def _iso(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat()


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class DetectionRecord:
    record_id: int
    event_id: str
    camera_id: str
    captured_at: str
    label: str
    score: float
    box: BoundingBox
    stored_at: str


@dataclass(frozen=True)
class BlankRecord:
    record_id: int
    event_id: str
    camera_id: str
    captured_at: str
    stored_at: str


@dataclass(frozen=True)
class AlertRule:
    rule_id: str
    species: SpeciesLabel
    min_prob: float
    channel: str

    def __post_init__(self) -> None:
        if not 0.0 < self.min_prob <= 1.0:
            raise ValueError(f"min_prob must be in (0, 1], got {self.min_prob}")


@dataclass(frozen=True)
class Alert:
    rule_id: str
    event_id: str
    species: str
    score: float
    camera_id: str
    captured_at: str


@dataclass
class SpeciesCounts:
    """Species report over a time range.

    ``detection_records`` counts individual detections per species while
    ``detection_images``/``blank_images`` count at image level, where each
    classified image is exactly one of the two.
    """

    detection_records: dict[str, int]
    detection_record_total: int
    detection_images: int
    blank_images: int

    @property
    def total_images(self) -> int:
        return self.detection_images + self.blank_images


class Store:
    """Single-writer transactional store for pipeline results."""

    def __init__(self, path=":memory:"):
        self._conn = sqlite3.connect(str(path), check_same_thread=False)
        self._conn.execute("PRAGMA foreign_keys = ON")
        self._lock = threading.RLock()
        with self._lock, self._conn:
            self._conn.executescript(_SCHEMA)

    def close(self) -> None:
        self._conn.close()

    # -- cameras ------------------------------------------------------------

    def register_camera(self, camera: CameraSource) -> None:
        with self._lock:
            try:
                with self._conn:
                    self._conn.execute(
                        "INSERT INTO cameras VALUES (?, ?, ?, ?, ?, ?)",
                        (camera.camera_id, camera.resolution[0], camera.resolution[1],
                         camera.dpi, camera.sensitivity, _iso(_utcnow())),
                    )
            except sqlite3.IntegrityError as exc:
                raise DuplicateCameraError(f"camera {camera.camera_id!r} already registered") from exc

    def known_camera(self, camera_id: str) -> bool:
        with self._lock:
            row = self._conn.execute(
                "SELECT 1 FROM cameras WHERE camera_id = ?", (camera_id,)).fetchone()
        return row is not None

    def cameras(self) -> list[CameraSource]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT camera_id, width, height, dpi, sensitivity FROM cameras ORDER BY camera_id"
            ).fetchall()
        return [CameraSource(r[0], (r[1], r[2]), r[3], r[4]) for r in rows]

    # -- results ------------------------------------------------------------

    def _insert_detection(self, cur, event: IngestEvent, label: str, score: float,
                          box: BoundingBox, stored_at: str) -> None:
        cur.execute(
            "INSERT INTO detections (event_id, camera_id, captured_at, label, score,"
            " xmin, ymin, xmax, ymax, stored_at) VALUES (?,?,?,?,?,?,?,?,?,?)",
            (event.event_id, event.camera_id, _iso(event.captured_at), label, score,
             box.xmin, box.ymin, box.xmax, box.ymax, stored_at),
        )

    def record_result(self, classified: ClassifiedImage, event: IngestEvent) -> list[int]:
        """Persist one classified image atomically.

        Returns the new record ids; an empty list means the event content was
        already stored (duplicate suppressed by (camera, content hash)).
        """
        stored_at = _iso(_utcnow())
        flagged = 0 if self.known_camera(event.camera_id) else 1
        if flagged:
            logger.info("stage=store event=%s camera=%s unregistered, flagged",
                        event.event_id, event.camera_id)
        with self._lock:
            try:
                with self._conn:
                    cur = self._conn.cursor()
                    cur.execute(
                        "INSERT INTO events VALUES (?,?,?,?,?,?,?,?,?)",
                        (event.camera_id, event.content_hash, event.event_id,
                         _iso(event.captured_at), _iso(event.received_at), stored_at,
                         1 if classified.is_blank else 0, classified.latency_ms, flagged),
                    )
                    ids: list[int] = []
                    if classified.is_blank:
                        cur.execute(
                            "INSERT INTO blanks (event_id, camera_id, captured_at, stored_at)"
                            " VALUES (?,?,?,?)",
                            (event.event_id, event.camera_id, _iso(event.captured_at), stored_at),
                        )
                        ids.append(cur.lastrowid)
                    else:
                        for det in classified.detections:
                            self._insert_detection(
                                cur, event, det.label.canonical_name, det.score, det.box, stored_at)
                            ids.append(cur.lastrowid)
                    return ids
            except sqlite3.IntegrityError:
                logger.info("stage=store event=%s duplicate content, skipped", event.event_id)
                return []
            except sqlite3.Error as exc:
                raise StorageError(str(exc)) from exc

    # -- reporting ----------------------------------------------------------

    def species_counts(self, since: str | None = None, until: str | None = None,
                       camera_id: str | None = None) -> SpeciesCounts:
        """Detection-record counts per species plus image-level accounting."""
        where, params = self._range_filter(since, until, camera_id)
        with self._lock:
            rows = self._conn.execute(
                f"SELECT label, COUNT(*) FROM detections {where} GROUP BY label ORDER BY label",
                params).fetchall()
            detection_records = {label: count for label, count in rows}
            blank_images = self._conn.execute(
                f"SELECT COUNT(*) FROM blanks {where}", params).fetchone()[0]
            detection_images = self._conn.execute(
                f"SELECT COUNT(*) FROM events {where}"
                f"{' AND' if where else ' WHERE'} is_blank = 0",
                params).fetchone()[0]
        return SpeciesCounts(
            detection_records=detection_records,
            detection_record_total=sum(detection_records.values()),
            detection_images=detection_images,
            blank_images=blank_images,
        )

    @staticmethod
    def _range_filter(since, until, camera_id) -> tuple[str, list]:
        clauses, params = [], []
        if since is not None:
            clauses.append("captured_at >= ?")
            params.append(since)
        if until is not None:
            clauses.append("captured_at < ?")
            params.append(until)
        if camera_id is not None:
            clauses.append("camera_id = ?")
            params.append(camera_id)
        return ("WHERE " + " AND ".join(clauses)) if clauses else "", params

    def query_detections(
        self,
        species: str | None = None,
        camera_id: str | None = None,
        since: str | None = None,
        until: str | None = None,
        min_score: float | None = None,
        max_score: float | None = None,
        page: int = 0,
        page_size: int = 100,
    ) -> list[DetectionRecord]:
        """One page of detection records, stably ordered by (captured_at, record_id)."""
        if page < 0 or not 1 <= page_size <= MAX_PAGE_SIZE:
            raise ValueError(f"page must be >= 0 and page_size in [1, {MAX_PAGE_SIZE}]")
        if min_score is not None and max_score is not None and min_score > max_score:
            raise ValueError("min_score must not exceed max_score")
        where, params = self._range_filter(since, until, camera_id)
        clauses = [where[6:]] if where else []
        if species is not None:
            clauses.append("label = ?")
            params.append(species)
        if min_score is not None:
            clauses.append("score >= ?")
            params.append(min_score)
        if max_score is not None:
            clauses.append("score <= ?")
            params.append(max_score)
        where_sql = ("WHERE " + " AND ".join(clauses)) if clauses else ""
        with self._lock:
            rows = self._conn.execute(
                f"SELECT record_id, event_id, camera_id, captured_at, label, score,"
                f" xmin, ymin, xmax, ymax, stored_at FROM detections {where_sql}"
                f" ORDER BY captured_at, record_id LIMIT ? OFFSET ?",
                params + [page_size, page * page_size]).fetchall()
        return [
            DetectionRecord(r[0], r[1], r[2], r[3], r[4], r[5],
                            BoundingBox(r[6], r[7], r[8], r[9]), r[10])
            for r in rows
        ]

    def blank_records(self) -> list[BlankRecord]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT record_id, event_id, camera_id, captured_at, stored_at FROM blanks"
                " ORDER BY captured_at, record_id").fetchall()
        return [BlankRecord(*r) for r in rows]

    def export_detections_jsonl(self, path, **filters) -> int:
        """Dump query_detections results as line-delimited JSON; returns rows written."""
        written = 0
        with open(path, "w", encoding="utf-8") as f:
            page = 0
            while True:
                batch = self.query_detections(page=page, page_size=500, **filters)
                if not batch:
                    return written
                for r in batch:
                    f.write(json.dumps({
                        "record_id": r.record_id, "event_id": r.event_id,
                        "camera_id": r.camera_id, "captured_at": r.captured_at,
                        "label": r.label, "score": r.score,
                        "box": [r.box.xmin, r.box.ymin, r.box.xmax, r.box.ymax],
                    }, sort_keys=True) + "\n")
                    written += 1
                page += 1

    # -- retry store ----------------------------------------------------------

    def park_event(self, event: IngestEvent, reason: str) -> None:
        """Hold an event that could not be classified; never silently dropped."""
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT OR REPLACE INTO parked VALUES (?,?,?,?,?,?,?)",
                (event.event_id, event.camera_id, _iso(event.captured_at),
                 _iso(event.received_at), base64.b64encode(event.image_bytes).decode("ascii"),
                 reason, _iso(_utcnow())),
            )

    def parked_events(self) -> list[IngestEvent]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT event_id, camera_id, captured_at, received_at, image_b64 FROM parked"
                " ORDER BY parked_at, event_id").fetchall()
        return [
            IngestEvent(
                event_id=r[0], camera_id=r[1],
                captured_at=datetime.fromisoformat(r[2]),
                image_bytes=base64.b64decode(r[4]),
                received_at=datetime.fromisoformat(r[3]),
            )
            for r in rows
        ]

    def unpark(self, event_id: str) -> None:
        with self._lock, self._conn:
            self._conn.execute("DELETE FROM parked WHERE event_id = ?", (event_id,))

    # -- alerts ---------------------------------------------------------------

    def record_alert(self, alert: Alert, delivered: bool) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO alerts (rule_id, event_id, species, score, camera_id,"
                " captured_at, delivered, created_at) VALUES (?,?,?,?,?,?,?,?)",
                (alert.rule_id, alert.event_id, alert.species, alert.score,
                 alert.camera_id, alert.captured_at, 1 if delivered else 0, _iso(_utcnow())),
            )


Deliverer = Callable[[Alert], None]


def deliver_webhook(url: str, timeout_s: float = 10.0) -> Deliverer:
    def deliver(alert: Alert) -> None:
        requests.post(url, json={
            "rule_id": alert.rule_id, "species": alert.species, "score": alert.score,
            "camera_id": alert.camera_id, "captured_at": alert.captured_at,
        }, timeout=timeout_s).raise_for_status()
    return deliver


def deliver_to_log(path) -> Deliverer:
    def deliver(alert: Alert) -> None:
        with open(path, "a", encoding="utf-8") as f:
            f.write(json.dumps({
                "rule_id": alert.rule_id, "species": alert.species, "score": alert.score,
                "camera_id": alert.camera_id, "captured_at": alert.captured_at,
            }, sort_keys=True) + "\n")
    return deliver


def resolve_channel(channel: str) -> Deliverer:
    if channel.startswith("http://") or channel.startswith("https://"):
        return deliver_webhook(channel)
    return deliver_to_log(channel)


def evaluate_alerts(
    classified: ClassifiedImage,
    event: IngestEvent,
    rules: Sequence[AlertRule],
    store: Store | None = None,
    resolver: Callable[[str], Deliverer] = resolve_channel,
) -> list[Alert]:
    """Fire one alert per (rule, detection) at or above the rule threshold.

    Delivery is attempted once per alert; failures are logged and never block
    the pipeline. Returns the fired alerts.
    """
    fired: list[Alert] = []
    for rule in rules:
        for det in classified.detections:
            if det.label == rule.species and det.score >= rule.min_prob:
                alert = Alert(
                    rule_id=rule.rule_id,
                    event_id=classified.event_id,
                    species=det.label.canonical_name,
                    score=det.score,
                    camera_id=event.camera_id,
                    captured_at=_iso(event.captured_at),
                )
                delivered = True
                try:
                    resolver(rule.channel)(alert)
                except Exception as exc:  # delivery must never block the pipeline
                    delivered = False
                    logger.warning("alert delivery failed for rule %s: %s", rule.rule_id, exc)
                if store is not None:
                    store.record_alert(alert, delivered)
                fired.append(alert)
    return fired


def load_alert_rules(path) -> list[AlertRule]:
    """Read alert rules from a JSON list of {rule_id, species, min_prob, channel}."""
    raw = json.loads(open(path, encoding="utf-8").read())
    return [
        AlertRule(
            rule_id=str(item["rule_id"]),
            species=SpeciesLabel(str(item["species"])),
            min_prob=float(item["min_prob"]),
            channel=str(item["channel"]),
        )
        for item in raw
    ]
