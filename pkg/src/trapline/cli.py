"""Command-line entry point.

Commands: ``prepare`` (annotation pipeline to record files), ``serve``
(ingest + classify + store loop), ``eval`` (detection metrics and trial
replay), ``config`` (training profile) and ``report`` (species counts).

Settings resolve with CLI flags first, then ``TRAPLINE_``-prefixed
environment variables, then the optional ``--config`` JSON file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from trapline import annotations as ann
from trapline import harness, interchange, metrics, trainprofile
from trapline.core import TraplineError
from trapline.inference import BackendConfig, HttpBackend, MockBackend
from trapline.ingest import ImapMailboxClient, MailboxConfig, ingest_directory
from trapline.service import run_pipeline
from trapline.store import Store, load_alert_rules

logger = logging.getLogger(__name__)

ENV_PREFIX = "TRAPLINE_"


@dataclass
class CommandResult:
    exit_code: int
    summary: str = ""
    artifacts: list[Path] = field(default_factory=list)


def _setting(args_value, key: str, config: dict, default=None, cast=None):
    """Resolve one setting: CLI flag, then TRAPLINE_<KEY> env, then config file."""
    if args_value is not None:
        return args_value
    raw = os.environ.get(ENV_PREFIX + key.upper())
    if raw is not None:
        return cast(raw) if cast else raw
    if key in config:
        value = config[key]
        return cast(value) if cast else value
    return default


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        loaded = json.load(f)
    if not isinstance(loaded, dict):
        raise TraplineError(f"{path}: config must be a JSON object")
    return loaded


def _resolve_seed(seed: int | None) -> int:
    if seed is None:
        seed = random.randrange(2**32)
        print(f"seed={seed}")
    return seed


# -- commands -----------------------------------------------------------------

def cmd_prepare(args) -> CommandResult:
    annotation_dir = Path(args.annotations)
    image_dir = Path(args.images)
    seed = _resolve_seed(args.seed)

    images = []
    for path in sorted(annotation_dir.glob("*.xml")):
        try:
            images.append(ann.parse_annotation_file(path))
        except ann.AnnotationError as exc:
            logger.warning("skipping %s: %s", path, exc)
    if not images:
        return CommandResult(1, "no parseable annotations found")
    kept, removed = ann.filter_unusable(images)
    if not kept:
        return CommandResult(1, f"all {len(images)} images were unusable")
    summary = ann.dataset_summary(kept)
    split = ann.split_dataset([im.image_id for im in kept], args.split, seed)
    by_id = {im.image_id: im for im in kept}

    def provider(image_id: str) -> bytes:
        return (image_dir / image_id).read_bytes()

    out = Path(args.out)
    train_path = out.with_name(out.stem + "-train" + (out.suffix or ".records"))
    val_path = out.with_name(out.stem + "-val" + (out.suffix or ".records"))
    n_train = ann.export_records((by_id[i] for i in split.train), provider, train_path)
    n_val = ann.export_records((by_id[i] for i in split.validation), provider, val_path)

    lines = [
        f"images parsed: {len(images)}, kept: {len(kept)}, removed: {len(removed)}",
        f"tags: {summary.tag_count}",
        f"mean resolution: {summary.mean_resolution[0]:.1f} x {summary.mean_resolution[1]:.1f}",
        f"split {args.split:g}/{1 - args.split:g} (seed {seed}): "
        f"train {len(split.train)} images, validation {len(split.validation)} images",
        f"records written: train {n_train} -> {train_path}, validation {n_val} -> {val_path}",
    ]
    return CommandResult(0, "\n".join(lines), [train_path, val_path])


def cmd_serve(args) -> CommandResult:
    config = _load_config_file(args.config)
    db_path = _setting(args.db, "db", config, default="trapline.db")
    drop_dir = _setting(args.drop_dir, "drop_dir", config)
    fixtures = _setting(args.backend_fixtures, "backend_fixtures", config)
    endpoint = _setting(args.endpoint, "endpoint", config, default="http://localhost:8000")
    cfg = BackendConfig(
        endpoint=endpoint,
        model=_setting(args.model, "model", config, default="bird-detector"),
        timeout_s=_setting(args.timeout_s, "timeout_s", config, default=30.0, cast=float),
        max_retries=_setting(args.max_retries, "max_retries", config, default=3, cast=int),
        confidence_floor=_setting(args.confidence_floor, "confidence_floor", config,
                                  default=0.5, cast=float),
        workers=_setting(args.workers, "workers", config, default=4, cast=int),
    )
    queue_capacity = _setting(args.queue_capacity, "queue_capacity", config, default=1024, cast=int)
    poll_interval = _setting(args.poll_interval, "poll_interval", config, default=60.0, cast=float)
    host = _setting(args.mailbox_host, "mailbox_host", config)
    if drop_dir is None:
        if args.dry_run:
            return CommandResult(2, "serve --dry-run requires --drop-dir")
        if host is None:
            return CommandResult(2, "serve needs either --drop-dir or --mailbox-host")
    rules = load_alert_rules(args.rules) if args.rules else []

    backend = MockBackend(fixtures) if fixtures else HttpBackend(cfg)
    store = Store(db_path)
    try:
        if drop_dir is None:
            mailbox = MailboxConfig(
                host=host,
                port=_setting(None, "mailbox_port", config, default=993, cast=int),
                user=_setting(None, "mailbox_user", config, default=""),
                password=_setting(None, "mailbox_password", config, default=""),
                folder=_setting(None, "mailbox_folder", config, default="INBOX"),
                poll_interval_s=poll_interval,
            )
            return _serve_mailbox(mailbox, cfg, backend, store, rules, queue_capacity)

        if args.dry_run:
            events = list(ingest_directory(drop_dir))
            report = run_pipeline(events, cfg, backend, store, rules,
                                  queue_capacity=queue_capacity)
            summary = (
                f"processed {report.processed} image(s): "
                f"{report.stored_detection_images} with detections, "
                f"{report.stored_blanks} blank, {report.duplicates} duplicate, "
                f"{report.parked} parked; alerts fired: {report.alerts_fired}"
            )
            return CommandResult(0, summary, [Path(db_path)] if db_path != ":memory:" else [])

        seen: set[str] = set()
        print(f"watching {drop_dir} every {poll_interval:g}s, db={db_path} (Ctrl-C to stop)")
        try:
            while True:
                events = [e for e in ingest_directory(drop_dir) if e.event_id not in seen]
                seen.update(e.event_id for e in events)
                if events:
                    report = run_pipeline(events, cfg, backend, store, rules,
                                          queue_capacity=queue_capacity)
                    print(f"cycle: processed {report.processed}, parked {report.parked}")
                time.sleep(poll_interval)
        except KeyboardInterrupt:
            return CommandResult(0, "stopped")
    finally:
        store.close()


def _serve_mailbox(mailbox, cfg, backend, store, rules, queue_capacity) -> CommandResult:
    from trapline.ingest import BoundedQueue, run_poller
    from trapline.service import process_event

    work_queue = BoundedQueue(capacity=queue_capacity)
    stop = threading.Event()
    client = ImapMailboxClient(mailbox)
    poller = threading.Thread(
        target=run_poller, args=(client, work_queue),
        kwargs={"poll_interval_s": mailbox.poll_interval_s, "stop": stop}, daemon=True)
    poller.start()
    print(f"polling {mailbox.host} every {mailbox.poll_interval_s:g}s (Ctrl-C to stop)")
    try:
        while True:
            event = work_queue.dequeue(timeout=1.0)
            if event is not None:
                process_event(event, cfg, backend, store, rules)
    except KeyboardInterrupt:
        stop.set()
        work_queue.shutdown()
        return CommandResult(0, "stopped")


def cmd_eval_trial(args) -> CommandResult:
    rows = interchange.read_label_rows(args.fixtures)
    if args.folds is None and args.per_class is None:
        trial = harness.replay_rows(rows)
    else:
        seed = _resolve_seed(args.seed)
        spec = harness.FoldSpec(
            classes=interchange.ordered_labels(rows),
            per_class=args.per_class or 25,
            folds=args.folds or 10,
            seed=seed,
        )
        trial = harness.run_trial(rows, spec)
        population = len(rows)
        needed = harness.required_sample_size(population, 0.05, 0.95)
        sampled_classes = [c for c in trial.classes if c not in trial.excluded]
        trial.cochran_note = (
            f"Cochran sample size at 95% confidence, 5% margin for N={population}: "
            f"{needed}; configured plan draws {spec.folds} fold(s) x "
            f"{spec.per_class} image(s) x {len(sampled_classes)} class(es)"
        )
    rendered = harness.emit_report(trial, args.format)
    if args.out:
        Path(args.out).write_text(rendered, encoding="utf-8")
        return CommandResult(0, f"report written to {args.out}", [Path(args.out)])
    return CommandResult(0, rendered)


def cmd_eval_detections(args) -> CommandResult:
    samples = interchange.read_samples(args.input)
    lines = [f"images: {len(samples)}"]

    def fmt(value) -> str:
        return "n/a" if value is None else f"{value:.4f}"

    def safe_map(thresholds, bucket=None):
        try:
            return metrics.map_at(samples, thresholds, bucket)
        except ValueError:
            return None

    lines.append(f"mAP@0.50          {fmt(safe_map((0.50,)))}")
    lines.append(f"mAP@0.75          {fmt(safe_map((0.75,)))}")
    lines.append(f"mAP@[.50:.95]     {fmt(safe_map(metrics.IOU_RANGE))}")
    for bucket in metrics.SizeBucket:
        lines.append(f"mAP ({bucket.value:<6})      {fmt(safe_map(metrics.IOU_RANGE, bucket))}")
    for k in (1, 10, 100):
        lines.append(f"AR@{k:<3}            {fmt(metrics.average_recall_at_k(samples, k))}")
    for bucket in metrics.SizeBucket:
        value = metrics.average_recall_at_k(samples, 100, bucket)
        lines.append(f"AR@100 ({bucket.value:<6})   {fmt(value)}")
    rendered = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(rendered + "\n", encoding="utf-8")
        return CommandResult(0, f"report written to {args.out}", [Path(args.out)])
    return CommandResult(0, rendered)


def cmd_config(args) -> CommandResult:
    if args.config_command == "emit":
        rendered = trainprofile.render_profile(trainprofile.reference_profile())
        if args.out:
            Path(args.out).write_text(rendered, encoding="utf-8")
            return CommandResult(0, f"profile written to {args.out}", [Path(args.out)])
        return CommandResult(0, rendered.rstrip("\n"))
    profile = trainprofile.parse_profile(Path(args.file).read_text(encoding="utf-8"))
    violations = trainprofile.validate_profile(profile)
    if violations:
        return CommandResult(1, "invalid profile:\n" + "\n".join(f"- {v}" for v in violations))
    return CommandResult(0, "profile ok")


def cmd_report(args) -> CommandResult:
    store = Store(args.db)
    try:
        counts = store.species_counts(since=args.since, until=args.until, camera_id=args.camera)
    finally:
        store.close()
    if args.format == "json":
        return CommandResult(0, json.dumps({
            "detection_records": counts.detection_records,
            "detection_record_total": counts.detection_record_total,
            "detection_images": counts.detection_images,
            "blank_images": counts.blank_images,
            "total_images": counts.total_images,
        }, indent=2, sort_keys=True))
    lines = ["Detections by species (detection records):"]
    for label in sorted(counts.detection_records):
        lines.append(f"  {label:<28} {counts.detection_records[label]}")
    lines.append(f"detection records total: {counts.detection_record_total}")
    lines.append(f"images with detections:  {counts.detection_images}")
    lines.append(f"blank images:            {counts.blank_images}")
    lines.append(f"total images:            {counts.total_images}")
    return CommandResult(0, "\n".join(lines))


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trapline",
        description="Camera-trap ingestion, detection pipeline and evaluation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse annotations, split and export record files")
    p.add_argument("--annotations", required=True, help="directory of VOC-style XML files")
    p.add_argument("--images", required=True, help="directory of image files named by image id")
    p.add_argument("--out", required=True, help="output record file stem")
    p.add_argument("--split", type=float, default=0.9, help="train fraction (default 0.9)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("serve", help="run the ingest + classify + store pipeline")
    p.add_argument("--drop-dir", default=None, help="drop directory <root>/<camera_id>/*.jpg")
    p.add_argument("--mailbox-host", default=None, help="mailbox host to poll instead of a directory")
    p.add_argument("--db", default=None, help="database path (default trapline.db)")
    p.add_argument("--backend-fixtures", default=None,
                   help="fixture directory for the deterministic mock backend")
    p.add_argument("--endpoint", default=None, help="HTTP detection backend endpoint")
    p.add_argument("--model", default=None)
    p.add_argument("--timeout-s", dest="timeout_s", type=float, default=None)
    p.add_argument("--max-retries", dest="max_retries", type=int, default=None)
    p.add_argument("--confidence-floor", dest="confidence_floor", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--queue-capacity", dest="queue_capacity", type=int, default=None)
    p.add_argument("--poll-interval", dest="poll_interval", type=float, default=None)
    p.add_argument("--rules", default=None, help="alert rules JSON file")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--dry-run", action="store_true",
                   help="process the drop directory once and exit")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("eval", help="evaluation commands")
    eval_sub = p.add_subparsers(dest="eval_command", required=True)

    t = eval_sub.add_parser("trial", help="trial replay or sampled fold evaluation")
    t.add_argument("--fixtures", required=True, help="labeled rows file (JSONL)")
    t.add_argument("--folds", type=int, default=None)
    t.add_argument("--per-class", dest="per_class", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--format", choices=("text", "json"), default="text")
    t.set_defaults(func=cmd_eval_trial)

    d = eval_sub.add_parser("detections", help="mAP and AR over a detection/truth file")
    d.add_argument("--input", required=True, help="detection/truth samples file (JSONL)")
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_eval_detections)

    p = sub.add_parser("config", help="training profile commands")
    config_sub = p.add_subparsers(dest="config_command", required=True)
    e = config_sub.add_parser("emit", help="emit the training profile")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_config)
    v = config_sub.add_parser("validate", help="validate a profile file")
    v.add_argument("file")
    v.set_defaults(func=cmd_config)

    p = sub.add_parser("report", help="species counts from a store")
    p.add_argument("--db", required=True)
    p.add_argument("--camera", default=None)
    p.add_argument("--since", default=None, help="ISO timestamp lower bound")
    p.add_argument("--until", default=None, help="ISO timestamp upper bound")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_report)
    return parser


def dispatch(argv: list[str]) -> CommandResult:
    """Parse and run one command; never raises for expected failure modes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CommandResult(int(exc.code or 0))
    try:
        return args.func(args)
    except TraplineError as exc:
        return CommandResult(1, f"error: {exc}")
    except (OSError, ValueError) as exc:
        return CommandResult(1, f"error: {exc}")


def main() -> None:
    logging.basicConfig(
        level=os.environ.get(ENV_PREFIX + "LOG_LEVEL", "WARNING"),
        format="%(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    result = dispatch(sys.argv[1:])
    if result.summary:
        print(result.summary, file=sys.stderr if result.exit_code else sys.stdout)
    sys.exit(result.exit_code)


if __name__ == "__main__":
    main()
