import hashlib
import json
import threading
from datetime import datetime, timezone

import pytest

from trapline.inference import BackendConfig, BackendUnavailable, MockBackend
from trapline.ingest import IngestEvent
from trapline.service import process_event, retry_parked, run_pipeline
from trapline.store import AlertRule, Store
from trapline.core import SpeciesLabel

NOW = datetime(2021, 3, 5, 12, 0, tzinfo=timezone.utc)


def make_events(n, detected_fraction=0.6):
    """n events; the first detected_fraction carry backend-known payloads."""
    events = []
    fixtures = {}
    split = int(n * detected_fraction)
    for i in range(n):
        payload = b"image-%04d" % i
        events.append(IngestEvent(event_id=f"e-{i:04d}", camera_id=f"CAM-0{i % 2 + 1}",
                                  captured_at=NOW, image_bytes=payload, received_at=NOW))
        if i < split:
            fixtures[hashlib.sha256(payload).hexdigest()] = [
                {"label": "Pica pica", "score": 0.9, "box": [0, 0, 10, 10]},
            ]
    return events, fixtures, split


@pytest.fixture
def backend_dir(tmp_path):
    def write(fixtures):
        (tmp_path / "detections.json").write_text(json.dumps(fixtures))
        return tmp_path
    return write


class IntermittentBackend:
    """Raises during configured call-count windows; thread-safe."""

    def __init__(self, inner, down_windows):
        self.inner = inner
        self.down_windows = down_windows
        self.calls = 0
        self._lock = threading.Lock()

    def detect(self, image_bytes):
        with self._lock:
            self.calls += 1
            call = self.calls
        for start, stop in self.down_windows:
            if start <= call <= stop:
                raise BackendUnavailable(f"backend down (call {call})")
        return self.inner.detect(image_bytes)

    def ping(self):
        return None


class TestProcessEvent:
    def test_outcomes(self, backend_dir):
        events, fixtures, _ = make_events(2, detected_fraction=0.5)
        backend = MockBackend(backend_dir(fixtures))
        store = Store(":memory:")
        cfg = BackendConfig(max_retries=0)
        assert process_event(events[0], cfg, backend, store) == ("detections", 0)
        assert process_event(events[1], cfg, backend, store) == ("blank", 0)
        assert process_event(events[0], cfg, backend, store) == ("duplicate", 0)

    def test_backend_down_parks_event(self, backend_dir):
        events, fixtures, _ = make_events(1)
        backend = IntermittentBackend(MockBackend(backend_dir(fixtures)), [(1, 10**9)])
        store = Store(":memory:")
        cfg = BackendConfig(max_retries=1)
        outcome, _ = process_event(events[0], cfg, backend, store, sleep=lambda s: None)
        assert outcome == "parked"
        assert len(store.parked_events()) == 1


class TestRunPipeline:
    def test_happy_path_counts(self, backend_dir):
        events, fixtures, split = make_events(20)
        backend = MockBackend(backend_dir(fixtures))
        store = Store(":memory:")
        report = run_pipeline(events, BackendConfig(), backend, store, workers=4,
                              sleep=lambda s: None)
        assert report.processed == 20
        assert report.stored_detection_images == split
        assert report.stored_blanks == 20 - split
        assert report.parked == 0
        stats = report.queue_stats
        assert stats.enqueued == 20
        assert stats.enqueued == stats.dequeued + stats.dropped + stats.in_flight
        assert stats.in_flight == 0
        counts = store.species_counts()
        assert counts.detection_images == split
        assert counts.blank_images == 20 - split

    def test_duplicate_events_suppressed(self, backend_dir):
        events, fixtures, split = make_events(6)
        backend = MockBackend(backend_dir(fixtures))
        store = Store(":memory:")
        run_pipeline(events, BackendConfig(), backend, store, workers=2, sleep=lambda s: None)
        replay = run_pipeline(events, BackendConfig(), backend, store, workers=2,
                              sleep=lambda s: None)
        assert replay.duplicates == 6
        assert store.species_counts().total_images == 6

    def test_every_event_reaches_exactly_one_bin(self, backend_dir):
        # a harsh fault schedule: some events exhaust retries and get parked
        events, fixtures, _ = make_events(12, detected_fraction=1.0)
        backend = IntermittentBackend(MockBackend(backend_dir(fixtures)), [(3, 9)])
        store = Store(":memory:")
        report = run_pipeline(events, BackendConfig(max_retries=1), backend, store,
                              workers=1, sleep=lambda s: None)
        assert report.processed == 12
        assert report.stored_detection_images + report.stored_blanks + report.parked == 12
        assert len(store.parked_events()) == report.parked
        stored = store.species_counts().total_images
        assert stored + report.parked == 12

    def test_retry_parked_drains_backlog(self, backend_dir):
        events, fixtures, _ = make_events(4, detected_fraction=1.0)
        mock = MockBackend(backend_dir(fixtures))
        down = IntermittentBackend(mock, [(1, 10**9)])
        store = Store(":memory:")
        cfg = BackendConfig(max_retries=0)
        report = run_pipeline(events, cfg, down, store, workers=2, sleep=lambda s: None)
        assert report.parked == 4
        recovered = retry_parked(cfg, mock, store, sleep=lambda s: None)
        assert recovered.stored_detection_images == 4
        assert store.parked_events() == []

    def test_alert_rules_fire_through_pipeline(self, backend_dir, tmp_path):
        events, fixtures, split = make_events(5, detected_fraction=1.0)
        backend = MockBackend(backend_dir(fixtures))
        store = Store(":memory:")
        log = tmp_path / "alerts.log"
        rules = [AlertRule("r1", SpeciesLabel("Pica pica"), 0.8, str(log))]
        report = run_pipeline(events, BackendConfig(), backend, store, rules=rules,
                              workers=2, sleep=lambda s: None)
        assert report.alerts_fired == 5
        assert len(log.read_text().splitlines()) == 5
