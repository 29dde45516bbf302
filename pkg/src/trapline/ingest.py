"""Camera transmission acquisition: mailbox polling and directory drops.

Transmissions become immutable IngestEvents feeding a bounded FIFO work
queue. Mail retrieval is at-least-once: a message is marked seen only after
it has been parsed and enqueued (or terminally quarantined); duplicates are
removed downstream by content hash.
"""

from __future__ import annotations

import email
import email.utils
import hashlib
import imaplib
import logging
import queue
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from email.message import Message
from pathlib import Path
from typing import Callable, Iterator, Protocol

from trapline.core import TraplineError

logger = logging.getLogger(__name__)

CLOCK_SKEW_TOLERANCE = timedelta(hours=24)
BACKOFF_BASE_S = 5.0
BACKOFF_CAP_S = 300.0
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")

_TIME_LINE = re.compile(r"^\s*time=(\S+)\s*$", re.MULTILINE)


class QuarantineError(TraplineError):
    """A transmission was rejected and should be quarantined with a reason."""


class MailboxAuthError(TraplineError):
    """Credentials were refused; fatal, surfaced to the operator."""


class MailboxConnectionError(TraplineError):
    """The mailbox is unreachable; retried with backoff."""


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


def parse_iso8601(value: str) -> datetime:
    dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


@dataclass(frozen=True)
class IngestEvent:
    """One camera transmission."""

    event_id: str
    camera_id: str
    captured_at: datetime
    image_bytes: bytes
    received_at: datetime
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.image_bytes:
            raise ValueError("image_bytes must be nonempty")

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.image_bytes).hexdigest()

    @property
    def dedup_key(self) -> tuple[str, str]:
        return (self.camera_id, self.content_hash)


def _skew_flags(captured_at: datetime, received_at: datetime) -> tuple[str, ...]:
    if captured_at > received_at + CLOCK_SKEW_TOLERANCE:
        return ("clock-skew",)
    return ()


def parse_message(raw: bytes | Message, received_at: datetime | None = None) -> IngestEvent:
    """Build an IngestEvent from one mail message.

    The subject's first token is the camera id, a ``time=`` line in the body
    is the capture timestamp and the first image attachment is the payload.
    Messages without an image attachment are rejected for quarantine; an
    unparseable timestamp falls back to the receive time and is flagged.
    """
    msg = email.message_from_bytes(raw) if isinstance(raw, bytes) else raw
    received_at = received_at or _utcnow()
    flags: list[str] = []

    subject = (msg.get("Subject") or "").strip()
    if not subject:
        raise QuarantineError("message has no subject to derive a camera id from")
    camera_id = subject.split()[0]

    body_text = ""
    image_bytes = None
    extra_attachments = 0
    for part in msg.walk():
        if part.is_multipart():
            continue
        payload = part.get_payload(decode=True)
        if payload is None:
            continue
        filename = (part.get_filename() or "").lower()
        is_image = part.get_content_maintype() == "image" or filename.endswith(IMAGE_SUFFIXES)
        if is_image:
            if image_bytes is None:
                image_bytes = payload
            else:
                extra_attachments += 1
        elif part.get_content_type() == "text/plain":
            charset = part.get_content_charset() or "utf-8"
            body_text += payload.decode(charset, errors="replace")
    if image_bytes is None:
        raise QuarantineError("message carries no image attachment")
    if extra_attachments:
        logger.info("%s: %d extra attachment(s) ignored", camera_id, extra_attachments)

    match = _TIME_LINE.search(body_text)
    captured_at = None
    if match:
        try:
            captured_at = parse_iso8601(match.group(1))
        except ValueError:
            pass
    if captured_at is None:
        captured_at = received_at
        flags.append("timestamp-unparseable")
    flags.extend(_skew_flags(captured_at, received_at))

    event_id = (msg.get("Message-ID") or "").strip()
    if not event_id:
        event_id = "sha256:" + hashlib.sha256(bytes(msg)).hexdigest()
    return IngestEvent(
        event_id=event_id,
        camera_id=camera_id,
        captured_at=captured_at,
        image_bytes=image_bytes,
        received_at=received_at,
        flags=tuple(flags),
    )


def _read_sidecar(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def ingest_directory(root, received_at: datetime | None = None) -> Iterator[IngestEvent]:
    """Yield one event per image file under ``<root>/<camera_id>/``.

    An optional ``<name>.meta`` sidecar can override ``camera_id`` and
    ``captured_at``; otherwise the directory name and file mtime are used.
    Unreadable files are skipped with a report.
    """
    root = Path(root)
    for camera_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for image_path in sorted(camera_dir.iterdir()):
            if image_path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                data = image_path.read_bytes()
            except OSError as exc:
                logger.warning("skipping unreadable file %s: %s", image_path, exc)
                continue
            if not data:
                logger.warning("skipping empty file %s", image_path)
                continue
            meta: dict[str, str] = {}
            sidecar = image_path.with_suffix(".meta")
            if sidecar.exists():
                meta = _read_sidecar(sidecar)
            camera_id = meta.get("camera_id", camera_dir.name)
            now = received_at or _utcnow()
            captured_at = None
            flags: list[str] = []
            if "captured_at" in meta:
                try:
                    captured_at = parse_iso8601(meta["captured_at"])
                except ValueError:
                    flags.append("timestamp-unparseable")
            if captured_at is None and not flags:
                captured_at = datetime.fromtimestamp(image_path.stat().st_mtime, tz=timezone.utc)
            if captured_at is None:
                captured_at = now
            flags.extend(_skew_flags(captured_at, now))
            event = IngestEvent(
                event_id=f"{camera_dir.name}/{image_path.name}",
                camera_id=camera_id,
                captured_at=captured_at,
                image_bytes=data,
                received_at=now,
                flags=tuple(flags),
            )
            logger.info("stage=ingest event=%s camera=%s", event.event_id, event.camera_id)
            yield event


@dataclass(frozen=True)
class QueueStats:
    """Counter snapshot; enqueued = dequeued + dropped + in_flight always holds."""

    enqueued: int
    dequeued: int
    dropped: int
    in_flight: int


class BoundedQueue:
    """Bounded multi-producer/multi-consumer FIFO with backpressure.

    ``enqueue`` blocks when the queue is full instead of dropping work;
    ``dequeue`` blocks until an event arrives or shutdown, when it returns
    ``None`` as the terminal marker.
    """

    _SENTINEL = object()

    def __init__(self, capacity: int = 1024):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self._queue: queue.Queue = queue.Queue(maxsize=capacity)
        self._lock = threading.Lock()
        self._shutdown = False
        self._enqueued = 0
        self._dequeued = 0
        self._dropped = 0
        self._in_flight = 0

    def enqueue(self, event: IngestEvent) -> bool:
        with self._lock:
            if self._shutdown:
                self._enqueued += 1
                self._dropped += 1
                return False
        self._queue.put(event)
        with self._lock:
            self._enqueued += 1
            self._in_flight += 1
        return True

    def dequeue(self, timeout: float | None = None):
        try:
            item = self._queue.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is self._SENTINEL:
            self._queue.put(self._SENTINEL)  # wake the next consumer
            return None
        with self._lock:
            self._dequeued += 1
            self._in_flight -= 1
        return item

    def shutdown(self) -> None:
        with self._lock:
            if self._shutdown:
                return
            self._shutdown = True
        self._queue.put(self._SENTINEL)

    def stats(self) -> QueueStats:
        with self._lock:
            return QueueStats(self._enqueued, self._dequeued, self._dropped, self._in_flight)


@dataclass
class MailboxConfig:
    host: str
    port: int = 993
    user: str = ""
    password: str = ""
    folder: str = "INBOX"
    poll_interval_s: float = 60.0


@dataclass
class MailMessage:
    token: object
    raw: bytes


class MailboxClient(Protocol):
    def fetch_unseen(self) -> list[MailMessage]: ...

    def mark_seen(self, token) -> None: ...


class ImapMailboxClient:
    """Mailbox access over IMAP with TLS."""

    def __init__(self, config: MailboxConfig):
        self.config = config
        self._conn: imaplib.IMAP4_SSL | None = None

    def _connect(self) -> imaplib.IMAP4_SSL:
        if self._conn is not None:
            return self._conn
        try:
            conn = imaplib.IMAP4_SSL(self.config.host, self.config.port)
        except OSError as exc:
            raise MailboxConnectionError(f"cannot reach {self.config.host}:{self.config.port}: {exc}") from exc
        try:
            conn.login(self.config.user, self.config.password)
        except imaplib.IMAP4.error as exc:
            raise MailboxAuthError(f"login rejected for {self.config.user!r}: {exc}") from exc
        conn.select(self.config.folder)
        self._conn = conn
        return conn

    def fetch_unseen(self) -> list[MailMessage]:
        conn = self._connect()
        try:
            status, data = conn.search(None, "UNSEEN")
            if status != "OK":
                raise MailboxConnectionError(f"search failed: {status}")
            messages = []
            for msg_id in data[0].split():
                status, parts = conn.fetch(msg_id, "(BODY.PEEK[])")
                if status != "OK":
                    logger.warning("fetch failed for message %s", msg_id)
                    continue
                for part in parts:
                    if isinstance(part, tuple) and len(part) >= 2:
                        messages.append(MailMessage(token=msg_id, raw=part[1]))
                        break
            return messages
        except (imaplib.IMAP4.abort, OSError) as exc:
            self._conn = None
            raise MailboxConnectionError(str(exc)) from exc

    def mark_seen(self, token) -> None:
        conn = self._connect()
        try:
            conn.store(token, "+FLAGS", "\\Seen")
        except (imaplib.IMAP4.abort, OSError) as exc:
            self._conn = None
            raise MailboxConnectionError(str(exc)) from exc


def poll_mailbox(client: MailboxClient) -> list[MailMessage]:
    """Fetch currently unseen messages; the mailbox state is unchanged until
    each message is individually marked seen after parse+enqueue."""
    return client.fetch_unseen()


@dataclass
class DrainStats:
    fetched: int = 0
    enqueued: int = 0
    quarantined: int = 0


def drain_mailbox(
    client: MailboxClient,
    work_queue: BoundedQueue,
    quarantine: Callable[[MailMessage, str], None] | None = None,
    received_at: datetime | None = None,
) -> DrainStats:
    """Parse and enqueue every unseen message, marking each seen afterwards.

    A quarantined message (no image attachment) is recorded as handled and
    marked seen so it is not redelivered forever.
    """
    stats = DrainStats()
    for message in poll_mailbox(client):
        stats.fetched += 1
        try:
            event = parse_message(message.raw, received_at=received_at)
        except QuarantineError as exc:
            stats.quarantined += 1
            logger.warning("message quarantined: %s", exc)
            if quarantine is not None:
                quarantine(message, str(exc))
            client.mark_seen(message.token)
            continue
        work_queue.enqueue(event)
        client.mark_seen(message.token)
        stats.enqueued += 1
        logger.info("stage=poll event=%s camera=%s", event.event_id, event.camera_id)
    return stats


def run_poller(
    client: MailboxClient,
    work_queue: BoundedQueue,
    poll_interval_s: float = 60.0,
    stop: threading.Event | None = None,
    sleep: Callable[[float], None] = time.sleep,
    quarantine: Callable[[MailMessage, str], None] | None = None,
) -> None:
    """Poll until ``stop`` is set. Connection failures back off exponentially
    (base 5 s, cap 5 min); auth failures propagate as fatal."""
    stop = stop or threading.Event()
    backoff = BACKOFF_BASE_S
    while not stop.is_set():
        try:
            drain_mailbox(client, work_queue, quarantine=quarantine)
            backoff = BACKOFF_BASE_S
            sleep(poll_interval_s)
        except MailboxConnectionError as exc:
            logger.warning("mailbox unreachable, retrying in %.0fs: %s", backoff, exc)
            sleep(backoff)
            backoff = min(backoff * 2, BACKOFF_CAP_S)
