"""Append-only audit trail.

One JSON object per line. The first line carries the run manifest; every
later line is an event::

    {"manifest": {...}, "manifest_hash": "...", "run_id": "..."}
    {"seq": 1, "timestamp": "...", "run_id": "...", "record_id": "20716",
     "stage": "prompt", "payload": {...}, "manifest_hash": "..."}

Keys are sorted and timestamps come from an injectable clock, so a run
repeated with a fixed clock writes a byte-identical file.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_json(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def fixed_clock(stamp: str = "2000-01-01T00:00:00+00:00") -> Callable[[], str]:
    return lambda: stamp


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    timestamp: str
    run_id: str
    record_id: str
    stage: str
    payload: dict
    manifest_hash: str

    def to_json(self) -> str:
        return canonical_json(asdict(self))


class AuditLog:
    """Thread-safe event sink; writes through to ``path`` when given."""

    def __init__(
        self,
        run_id: str,
        manifest: dict | None = None,
        path: str | Path | None = None,
        clock: Callable[[], str] = utc_now,
    ):
        self.run_id = run_id
        self.manifest = manifest or {}
        self.manifest_hash = sha256_json(self.manifest)
        self.path = Path(path) if path else None
        self.clock = clock
        self.events: list[AuditEvent] = []
        self._lock = threading.Lock()
        if self.path:
            if self.path.exists():
                raise FileExistsError(f"audit trail {self.path} already exists")
            header = {"run_id": run_id, "manifest": self.manifest, "manifest_hash": self.manifest_hash}
            self.path.write_text(canonical_json(header) + "\n", encoding="utf-8")

    def emit(self, record_id: str, stage: str, payload: dict) -> AuditEvent:
        with self._lock:
            ev = AuditEvent(len(self.events) + 1, self.clock(), self.run_id, str(record_id), stage,
                            payload, self.manifest_hash)
            self.events.append(ev)
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(ev.to_json() + "\n")
        return ev

    def for_record(self, record_id: str) -> list[AuditEvent]:
        return [e for e in self.events if e.record_id == str(record_id)]


class Recorder:
    """Collects the events of one operation while forwarding them to a log."""

    def __init__(self, log: AuditLog | None, record_id: str = ""):
        self.log = log
        self.record_id = str(record_id)
        self.events: list[AuditEvent] = []
        self._local_seq = 0

    def emit(self, stage: str, payload: dict) -> AuditEvent:
        if self.log is not None:
            ev = self.log.emit(self.record_id, stage, payload)
        else:
            self._local_seq += 1
            ev = AuditEvent(self._local_seq, "", "", self.record_id, stage, payload, "")
        self.events.append(ev)
        return ev


def read_audit(path: str | Path) -> tuple[dict, list[AuditEvent]]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    header = json.loads(lines[0])
    events = [AuditEvent(**json.loads(ln)) for ln in lines[1:] if ln.strip()]
    return header, events


def stage_counts(events: Iterable[AuditEvent]) -> dict[str, int]:
    out: dict[str, int] = {}
    for e in events:
        out[e.stage] = out.get(e.stage, 0) + 1
    return out


def iter_stage(events: Iterable[AuditEvent], stage: str) -> Iterator[AuditEvent]:
    return (e for e in events if e.stage == stage)
