import threading
import time
from datetime import datetime, timedelta, timezone
from email.message import EmailMessage

import pytest

from trapline.ingest import (
    BoundedQueue,
    DrainStats,
    IngestEvent,
    MailboxConnectionError,
    MailMessage,
    QuarantineError,
    drain_mailbox,
    ingest_directory,
    parse_message,
    poll_mailbox,
    run_poller,
)

NOW = datetime(2021, 3, 5, 12, 0, 0, tzinfo=timezone.utc)


def make_mail(subject="CAM-07", body="time=2021-03-05T10:00:00Z\n", attachments=(b"\xff\xd8img",)):
    msg = EmailMessage()
    msg["Subject"] = subject
    msg["From"] = "cam@example.org"
    msg["Message-ID"] = f"<{abs(hash((subject, body, attachments)))}@example.org>"
    msg.set_content(body)
    for i, data in enumerate(attachments):
        msg.add_attachment(data, maintype="image", subtype="jpeg", filename=f"img-{i}.jpg")
    return bytes(msg)


class TestParseMessage:
    def test_basic_fields(self):
        event = parse_message(make_mail(), received_at=NOW)
        assert event.camera_id == "CAM-07"
        assert event.captured_at == datetime(2021, 3, 5, 10, 0, 0, tzinfo=timezone.utc)
        assert event.image_bytes == b"\xff\xd8img"
        assert event.received_at == NOW
        assert event.flags == ()

    def test_first_of_two_attachments_used(self):
        raw = make_mail(attachments=(b"first-image", b"second-image"))
        event = parse_message(raw, received_at=NOW)
        assert event.image_bytes == b"first-image"

    def test_no_attachment_quarantined(self):
        with pytest.raises(QuarantineError):
            parse_message(make_mail(attachments=()), received_at=NOW)

    def test_unparseable_timestamp_flagged(self):
        event = parse_message(make_mail(body="time=yesterday-ish\n"), received_at=NOW)
        assert event.captured_at == NOW
        assert "timestamp-unparseable" in event.flags

    def test_missing_time_line_flagged(self):
        event = parse_message(make_mail(body="hello\n"), received_at=NOW)
        assert event.captured_at == NOW
        assert "timestamp-unparseable" in event.flags

    def test_clock_skew_flagged_beyond_24h(self):
        future = (NOW + timedelta(hours=25)).isoformat()
        event = parse_message(make_mail(body=f"time={future}\n"), received_at=NOW)
        assert "clock-skew" in event.flags
        near_future = (NOW + timedelta(hours=3)).isoformat()
        event = parse_message(make_mail(body=f"time={near_future}\n"), received_at=NOW)
        assert "clock-skew" not in event.flags

    def test_event_content_hash_is_stable(self):
        a = parse_message(make_mail(), received_at=NOW)
        b = parse_message(make_mail(), received_at=NOW)
        assert a.content_hash == b.content_hash
        assert a.dedup_key == ("CAM-07", a.content_hash)


class TestIngestDirectory:
    def test_each_file_becomes_one_event(self, tmp_path):
        cam = tmp_path / "CAM-01"
        cam.mkdir()
        for i in range(10):
            (cam / f"img-{i:02d}.jpg").write_bytes(b"data-%d" % i)
        events = list(ingest_directory(tmp_path, received_at=NOW))
        assert len(events) == 10
        assert all(e.camera_id == "CAM-01" for e in events)
        assert sorted(e.event_id for e in events) == [f"CAM-01/img-{i:02d}.jpg" for i in range(10)]

    def test_sidecar_overrides_camera_and_time(self, tmp_path):
        cam = tmp_path / "north-feeder"
        cam.mkdir()
        (cam / "shot.jpg").write_bytes(b"bytes")
        (cam / "shot.meta").write_text("camera_id=CAM-02\ncaptured_at=2021-03-05T10:00:00Z\n")
        (event,) = ingest_directory(tmp_path, received_at=NOW)
        assert event.camera_id == "CAM-02"
        assert event.captured_at == datetime(2021, 3, 5, 10, 0, tzinfo=timezone.utc)

    def test_empty_directory(self, tmp_path):
        assert list(ingest_directory(tmp_path)) == []

    def test_unreadable_file_skipped(self, tmp_path, caplog):
        cam = tmp_path / "CAM-01"
        cam.mkdir()
        (cam / "good.jpg").write_bytes(b"ok")
        (cam / "bad.jpg").mkdir()  # read_bytes raises IsADirectoryError
        events = list(ingest_directory(tmp_path, received_at=NOW))
        assert [e.event_id for e in events] == ["CAM-01/good.jpg"]

    def test_non_image_files_ignored(self, tmp_path):
        cam = tmp_path / "CAM-01"
        cam.mkdir()
        (cam / "notes.txt").write_text("not an image")
        (cam / "shot.jpg").write_bytes(b"img")
        events = list(ingest_directory(tmp_path, received_at=NOW))
        assert len(events) == 1


def _event(i=0, camera="CAM-01"):
    return IngestEvent(
        event_id=f"e-{i}", camera_id=camera, captured_at=NOW,
        image_bytes=b"payload-%d" % i, received_at=NOW,
    )


class TestBoundedQueue:
    def test_enqueue_dequeue_round_trip(self):
        q = BoundedQueue(capacity=4)
        event = _event()
        q.enqueue(event)
        assert q.dequeue() is event

    def test_full_queue_blocks_until_dequeue(self):
        q = BoundedQueue(capacity=1)
        q.enqueue(_event(0))
        done = threading.Event()

        def producer():
            q.enqueue(_event(1))
            done.set()

        thread = threading.Thread(target=producer, daemon=True)
        thread.start()
        time.sleep(0.05)
        assert not done.is_set()  # blocked on the full queue
        assert q.dequeue().event_id == "e-0"
        thread.join(timeout=2)
        assert done.is_set()
        assert q.dequeue().event_id == "e-1"

    def test_shutdown_returns_terminal_marker(self):
        q = BoundedQueue(capacity=4)
        q.shutdown()
        assert q.dequeue() is None
        assert q.dequeue() is None  # every consumer sees the marker

    def test_enqueue_after_shutdown_is_dropped(self):
        q = BoundedQueue(capacity=4)
        q.shutdown()
        assert q.enqueue(_event()) is False
        stats = q.stats()
        assert stats.dropped == 1
        assert stats.enqueued == stats.dequeued + stats.dropped + stats.in_flight

    def test_stats_conservation_under_stress(self):
        q = BoundedQueue(capacity=16)
        per_producer = 250
        consumed = []

        def producer(base):
            for i in range(per_producer):
                q.enqueue(_event(base + i))

        def consumer():
            while True:
                event = q.dequeue()
                if event is None:
                    return
                consumed.append(event.event_id)

        producers = [threading.Thread(target=producer, args=(k * 1000,)) for k in range(4)]
        consumers = [threading.Thread(target=consumer) for _ in range(3)]
        for t in producers + consumers:
            t.start()
        # sample the identity mid-flight
        for _ in range(20):
            s = q.stats()
            assert s.enqueued == s.dequeued + s.dropped + s.in_flight
            time.sleep(0.001)
        for t in producers:
            t.join()
        q.shutdown()
        for t in consumers:
            t.join()
        stats = q.stats()
        assert stats.enqueued == 4 * per_producer
        assert stats.dequeued == 4 * per_producer
        assert stats.in_flight == 0
        assert stats.enqueued == stats.dequeued + stats.dropped + stats.in_flight
        assert len(consumed) == len(set(consumed)) == 4 * per_producer


class FakeMailbox:
    """In-memory mailbox with unseen flags, mirroring the client protocol."""

    def __init__(self, messages):
        self.messages = {i: raw for i, raw in enumerate(messages)}
        self.seen: set[int] = set()
        self.fail_fetches = 0
        self.fetch_calls = 0

    def fetch_unseen(self):
        self.fetch_calls += 1
        if self.fail_fetches > 0:
            self.fail_fetches -= 1
            raise MailboxConnectionError("socket timed out")
        return [MailMessage(token=i, raw=raw) for i, raw in self.messages.items()
                if i not in self.seen]

    def mark_seen(self, token):
        self.seen.add(token)


class TestMailboxDrain:
    def test_empty_mailbox(self):
        mailbox = FakeMailbox([])
        assert poll_mailbox(mailbox) == []

    def test_unseen_messages_stay_until_enqueued(self):
        mailbox = FakeMailbox([make_mail(subject=f"CAM-{i}") for i in range(3)])
        assert len(poll_mailbox(mailbox)) == 3
        assert mailbox.seen == set()  # polling alone must not mark seen
        q = BoundedQueue(capacity=8)
        stats = drain_mailbox(mailbox, q, received_at=NOW)
        assert stats == DrainStats(fetched=3, enqueued=3, quarantined=0)
        assert mailbox.seen == {0, 1, 2}
        assert q.stats().enqueued == 3

    def test_quarantined_message_marked_seen(self):
        mailbox = FakeMailbox([make_mail(attachments=())])
        q = BoundedQueue(capacity=8)
        quarantined = []
        stats = drain_mailbox(mailbox, q, quarantine=lambda m, why: quarantined.append(why),
                              received_at=NOW)
        assert stats.quarantined == 1
        assert mailbox.seen == {0}
        assert len(quarantined) == 1
        assert q.stats().enqueued == 0

    def test_transient_failure_then_recovery_loses_nothing(self):
        mailbox = FakeMailbox([make_mail(subject=f"CAM-{i}") for i in range(3)])
        mailbox.fail_fetches = 2
        q = BoundedQueue(capacity=8)
        sleeps = []
        stop = threading.Event()

        def sleep(seconds):
            sleeps.append(seconds)
            if mailbox.seen == {0, 1, 2}:
                stop.set()

        run_poller(mailbox, q, poll_interval_s=60, stop=stop, sleep=sleep)
        # exponential backoff from 5s while the mailbox was down
        assert sleeps[:2] == [5.0, 10.0]
        assert q.stats().enqueued == 3
        # replaying the same mailbox delivers nothing new (at-least-once, no dupes here)
        stats = drain_mailbox(mailbox, q, received_at=NOW)
        assert stats.fetched == 0

    def test_backoff_caps_at_five_minutes(self):
        mailbox = FakeMailbox([])
        mailbox.fail_fetches = 10
        sleeps = []
        stop = threading.Event()

        def sleep(seconds):
            sleeps.append(seconds)
            if len(sleeps) >= 8:
                stop.set()

        run_poller(mailbox, BoundedQueue(4), stop=stop, sleep=sleep)
        assert sleeps[:8] == [5.0, 10.0, 20.0, 40.0, 80.0, 160.0, 300.0, 300.0]
