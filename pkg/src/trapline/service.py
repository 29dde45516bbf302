"""End-to-end pipeline wiring: source -> bounded queue -> classify workers ->
store and alerts.

Every dequeued event ends in exactly one place: a stored result (detections
or a blank), the duplicate bin, or the retry store. Worker failures never
drop events.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from trapline.inference import (
    Backend,
    BackendConfig,
    BackendRejected,
    BackendUnavailable,
    classify,
)
from trapline.ingest import BoundedQueue, IngestEvent, QueueStats
from trapline.store import AlertRule, StorageError, Store, evaluate_alerts

logger = logging.getLogger(__name__)


@dataclass
class PipelineReport:
    """Counters from one pipeline run."""

    processed: int = 0
    stored_detection_images: int = 0
    stored_blanks: int = 0
    duplicates: int = 0
    parked: int = 0
    alerts_fired: int = 0
    queue_stats: QueueStats | None = None

    def merge_event(self, outcome: str) -> None:
        self.processed += 1
        if outcome == "detections":
            self.stored_detection_images += 1
        elif outcome == "blank":
            self.stored_blanks += 1
        elif outcome == "duplicate":
            self.duplicates += 1
        elif outcome == "parked":
            self.parked += 1


def process_event(
    event: IngestEvent,
    cfg: BackendConfig,
    backend: Backend,
    store: Store,
    rules: Sequence[AlertRule] = (),
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[str, int]:
    """Classify and persist one event.

    Returns (outcome, alerts_fired) where outcome is one of "detections",
    "blank", "duplicate" or "parked".
    """
    try:
        classified = classify(event, cfg, backend, sleep=sleep)
    except (BackendUnavailable, BackendRejected) as exc:
        store.park_event(event, reason=str(exc))
        logger.warning("stage=store event=%s parked: %s", event.event_id, exc)
        return "parked", 0
    except Exception as exc:  # a worker must never lose a dequeued event
        logger.exception("stage=classify event=%s unexpected failure", event.event_id)
        store.park_event(event, reason=f"unexpected failure: {exc}")
        return "parked", 0
    try:
        record_ids = store.record_result(classified, event)
    except StorageError as exc:
        store.park_event(event, reason=f"storage failure: {exc}")
        return "parked", 0
    if not record_ids:
        return "duplicate", 0
    fired = evaluate_alerts(classified, event, rules, store=store) if rules else []
    outcome = "blank" if classified.is_blank else "detections"
    logger.info("stage=store event=%s outcome=%s records=%d alerts=%d",
                event.event_id, outcome, len(record_ids), len(fired))
    return outcome, len(fired)


def run_pipeline(
    events: Iterable[IngestEvent],
    cfg: BackendConfig,
    backend: Backend,
    store: Store,
    rules: Sequence[AlertRule] = (),
    workers: int | None = None,
    queue_capacity: int = 1024,
    sleep: Callable[[float], None] = time.sleep,
) -> PipelineReport:
    """Drain ``events`` through the queue with concurrent classify workers.

    Returns once every event has reached a terminal outcome and the queue is
    empty.
    """
    worker_count = workers if workers is not None else cfg.workers
    work_queue = BoundedQueue(capacity=queue_capacity)
    report = PipelineReport()
    report_lock = threading.Lock()

    def worker() -> None:
        while True:
            event = work_queue.dequeue()
            if event is None:
                return
            outcome, fired = process_event(event, cfg, backend, store, rules, sleep=sleep)
            with report_lock:
                report.merge_event(outcome)
                report.alerts_fired += fired

    threads = [threading.Thread(target=worker, name=f"classify-{i}", daemon=True)
               for i in range(max(1, worker_count))]
    for thread in threads:
        thread.start()
    for event in events:
        work_queue.enqueue(event)
        logger.info("stage=queue event=%s enqueued", event.event_id)
    work_queue.shutdown()
    for thread in threads:
        thread.join()
    report.queue_stats = work_queue.stats()
    return report


def retry_parked(
    cfg: BackendConfig,
    backend: Backend,
    store: Store,
    rules: Sequence[AlertRule] = (),
    sleep: Callable[[float], None] = time.sleep,
) -> PipelineReport:
    """Re-run every parked event; successful ones leave the retry store."""
    report = PipelineReport()
    for event in store.parked_events():
        outcome, fired = process_event(event, cfg, backend, store, rules, sleep=sleep)
        report.merge_event(outcome)
        report.alerts_fired += fired
        if outcome != "parked":
            store.unpark(event.event_id)
    return report
