"""Creative lifecycle store: caches, state machine and generation queue.

One append-only JSON-lines journal records every state transition, so
replaying it after a crash rebuilds the exact index and queue. Final
creatives and original product images live in a content-addressed
object tree (ref = SHA-256 of the bytes), masks in a per-image-hash
cache. All check-and-act operations are linearizable per key through a
single lock; many serving threads and several pipeline workers can run
concurrently.

On-disk layout:

    data/journal.jsonl                    one transition per line
    data/objects/<2-hex>/<sha256>.png     content-addressed objects
    data/masks/<sha256>.png               mask cache (bbox in a tEXt chunk)

Journal line schema: {ts, key:{image_hash, prompt_id, bucket}, status,
object_ref?, attempts, reason?, regen?}. ``regen`` is the cumulative
regeneration counter, present only after a human regenerate; it keeps
regeneration seeds stable across crash recovery.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from io import BytesIO
from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import BitMask, Box

logger = logging.getLogger(__name__)

DEFAULT_LEASE_TIMEOUT = 600.0
DEFAULT_QUEUE_BOUND = 10_000
DEFAULT_MAX_ATTEMPTS = 3


class StoreError(Exception):
    pass


class StorageFailure(StoreError):
    """Persistence failed; callers fail open and serve the original image."""


class QueueFull(StorageFailure):
    """Generation queue at its bound; request rejected for backpressure."""


class NotFound(StoreError):
    pass


class IllegalTransition(StoreError):
    pass


class Status(str, Enum):
    QUEUED = "Queued"
    GENERATING = "Generating"
    READY = "Ready"
    FAILED = "Failed"
    REJECTED = "Rejected"


@dataclass(frozen=True, order=True)
class CacheKey:
    """Identity of one creative: (original image bytes, prompt, aspect bucket)."""

    image_hash: str
    prompt_id: str
    bucket: int

    def as_dict(self) -> dict:
        return {"image_hash": self.image_hash, "prompt_id": self.prompt_id, "bucket": self.bucket}

    @classmethod
    def from_dict(cls, d) -> "CacheKey":
        return cls(d["image_hash"], d["prompt_id"], int(d["bucket"]))

    def __str__(self):
        return f"{self.image_hash}:{self.prompt_id}:{self.bucket}"


@dataclass
class CreativeRecord:
    key: CacheKey
    status: Status
    created_ts: float
    updated_ts: float
    object_ref: str | None = None
    attempts: int = 0
    failure_reason: str | None = None
    approved: bool = False
    regen_count: int = 0


_LEGAL = {
    (Status.QUEUED, Status.GENERATING),
    (Status.GENERATING, Status.READY),
    (Status.GENERATING, Status.FAILED),
    (Status.GENERATING, Status.QUEUED),  # retry or lease expiry
    (Status.READY, Status.REJECTED),     # human reject
    (Status.READY, Status.READY),        # approve (flag only)
    (Status.REJECTED, Status.QUEUED),    # human regenerate
    (Status.FAILED, Status.QUEUED),      # human regenerate
}


# get_or_enqueue outcomes
@dataclass(frozen=True)
class Hit:
    object_ref: str


@dataclass(frozen=True)
class Enqueued:
    pass


@dataclass(frozen=True)
class InFlight:
    pass


@dataclass(frozen=True)
class Rejected:
    pass


@dataclass(frozen=True)
class QueuedJob:
    """Dequeued work descriptor; ``attempts`` counts this attempt."""

    key: CacheKey
    attempts: int
    regen_count: int


class CreativeStore:
    """Journal-backed creative index, generation queue and object store."""

    def __init__(
        self,
        data_dir: str | Path,
        clock=time.time,
        lease_timeout: float = DEFAULT_LEASE_TIMEOUT,
        queue_bound: int = DEFAULT_QUEUE_BOUND,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        auto_compact: bool = True,
    ):
        self.data_dir = Path(data_dir)
        self.clock = clock
        self.lease_timeout = lease_timeout
        self.queue_bound = queue_bound
        self.max_attempts = max_attempts
        self._lock = threading.RLock()
        self._records: dict[CacheKey, CreativeRecord] = {}
        self._queue: deque[CacheKey] = deque()
        self._journal_lines = 0

        self.objects_dir = self.data_dir / "objects"
        self.masks_dir = self.data_dir / "masks"
        self.journal_path = self.data_dir / "journal.jsonl"
        for d in (self.data_dir, self.objects_dir, self.masks_dir):
            d.mkdir(parents=True, exist_ok=True)

        self._replay()
        if auto_compact and self._journal_lines > max(64, 4 * len(self._records)):
            self.compact()
        self._journal = open(self.journal_path, "a", encoding="utf-8")

    def close(self):
        with self._lock:
            self._journal.close()

    # -- journal ------------------------------------------------------------

    def _append(self, rec: CreativeRecord, reason: str | None = None):
        line = {
            "ts": rec.updated_ts,
            "key": rec.key.as_dict(),
            "status": rec.status.value,
            "attempts": rec.attempts,
        }
        if rec.object_ref is not None:
            line["object_ref"] = rec.object_ref
        if reason is not None:
            line["reason"] = reason
        if rec.regen_count:
            line["regen"] = rec.regen_count
        try:
            self._journal.write(json.dumps(line, sort_keys=True) + "\n")
            self._journal.flush()
            self._journal_lines += 1
        except OSError as exc:
            raise StorageFailure(f"journal write failed: {exc}") from exc

    def _apply_line(self, line: dict):
        key = CacheKey.from_dict(line["key"])
        status = Status(line["status"])
        ts = float(line["ts"])
        rec = self._records.get(key)
        if rec is None:
            rec = CreativeRecord(key=key, status=status, created_ts=ts, updated_ts=ts)
            self._records[key] = rec
        rec.status = status
        rec.updated_ts = ts
        rec.attempts = int(line.get("attempts", 0))
        rec.object_ref = line.get("object_ref")
        rec.failure_reason = line.get("reason") if status == Status.FAILED else None
        rec.approved = status == Status.READY and line.get("reason") == "approved"
        rec.regen_count = int(line.get("regen", rec.regen_count))
        # mirror the live queue transitions
        if status == Status.QUEUED:
            if key not in self._queue:
                self._queue.append(key)
        elif key in self._queue:
            self._queue.remove(key)

    def _replay(self):
        if not self.journal_path.exists():
            return
        raw = self.journal_path.read_bytes().decode("utf-8", errors="replace")
        lines = [l for l in raw.split("\n") if l.strip()]
        for i, text in enumerate(lines):
            try:
                self._apply_line(json.loads(text))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                if i == len(lines) - 1:
                    logger.warning("dropping torn journal tail: %s", exc)
                    break
                raise StorageFailure(f"corrupt journal line {i + 1}: {exc}") from exc
            self._journal_lines += 1

    def compact(self):
        """Rewrite the journal with one line per key, preserving queue order."""
        with self._lock:
            tmp = self.journal_path.with_suffix(".jsonl.tmp")
            queued = [k for k in self._queue]
            others = [
                r for r in self._records.values() if r.key not in set(queued)
            ]
            with open(tmp, "w", encoding="utf-8") as f:
                count = 0
                for rec in sorted(others, key=lambda r: r.created_ts) + [
                    self._records[k] for k in queued
                ]:
                    line = {
                        "ts": rec.updated_ts,
                        "key": rec.key.as_dict(),
                        "status": rec.status.value,
                        "attempts": rec.attempts,
                    }
                    if rec.object_ref is not None:
                        line["object_ref"] = rec.object_ref
                    if rec.status == Status.FAILED and rec.failure_reason:
                        line["reason"] = rec.failure_reason
                    if rec.approved:
                        line["reason"] = "approved"
                    if rec.regen_count:
                        line["regen"] = rec.regen_count
                    f.write(json.dumps(line, sort_keys=True) + "\n")
                    count += 1
            tmp.replace(self.journal_path)
            self._journal_lines = count
            if hasattr(self, "_journal"):
                self._journal.close()
                self._journal = open(self.journal_path, "a", encoding="utf-8")

    # -- state machine ------------------------------------------------------

    def _transition(self, rec: CreativeRecord, to: Status, reason: str | None = None):
        if (rec.status, to) not in _LEGAL:
            raise IllegalTransition(f"{rec.status.value} -> {to.value} for {rec.key}")
        rec.status = to
        rec.updated_ts = self.clock()
        self._append(rec, reason=reason)

    def get_or_enqueue(self, key: CacheKey) -> Hit | Enqueued | InFlight | Rejected:
        """Atomic check-and-act on one key.

        Ready gives a Hit; a fresh key is recorded, queued and reported
        Enqueued (exactly one caller sees this under races); Queued or
        Generating report InFlight. Rejected and terminally Failed keys
        report Rejected: the original is served until a human regenerates.
        """
        with self._lock:
            rec = self._records.get(key)
            if rec is None:
                if len(self._queue) >= self.queue_bound:
                    raise QueueFull(f"queue at bound {self.queue_bound}")
                now = self.clock()
                rec = CreativeRecord(key=key, status=Status.QUEUED, created_ts=now, updated_ts=now)
                self._records[key] = rec
                self._queue.append(key)
                self._append(rec)
                return Enqueued()
            if rec.status == Status.READY:
                return Hit(rec.object_ref)
            if rec.status in (Status.QUEUED, Status.GENERATING):
                return InFlight()
            return Rejected()  # Rejected or terminal Failed

    def dequeue(self) -> QueuedJob | None:
        """FIFO pop; the popped record atomically becomes Generating."""
        with self._lock:
            self._sweep_stale_locked()
            while self._queue:
                key = self._queue.popleft()
                rec = self._records[key]
                if rec.status != Status.QUEUED:
                    continue
                rec.attempts += 1
                self._transition(rec, Status.GENERATING)
                return QueuedJob(key=key, attempts=rec.attempts, regen_count=rec.regen_count)
            return None

    def sweep_stale(self) -> int:
        with self._lock:
            return self._sweep_stale_locked()

    def _sweep_stale_locked(self) -> int:
        """Re-queue Generating records whose lease expired (worker died)."""
        now = self.clock()
        swept = 0
        for rec in self._records.values():
            if rec.status == Status.GENERATING and now - rec.updated_ts > self.lease_timeout:
                logger.warning("lease expired for %s; re-queueing", rec.key)
                self._transition(rec, Status.QUEUED, reason="lease_expired")
                self._queue.append(rec.key)
                swept += 1
        return swept

    def complete(self, key: CacheKey, object_ref: str | None = None,
                 failure_reason: str | None = None) -> CreativeRecord:
        """Finish a Generating record: Ready, or Failed with retry below max."""
        if (object_ref is None) == (failure_reason is None):
            raise ValueError("exactly one of object_ref / failure_reason required")
        with self._lock:
            rec = self._records.get(key)
            if rec is None or rec.status != Status.GENERATING:
                raise IllegalTransition(
                    f"complete() requires Generating, {key} is "
                    f"{rec.status.value if rec else 'absent'}"
                )
            if object_ref is not None:
                rec.object_ref = object_ref
                self._transition(rec, Status.READY)
            elif rec.attempts < self.max_attempts:
                self._transition(rec, Status.QUEUED, reason=failure_reason)
                self._queue.append(key)
            else:
                rec.failure_reason = failure_reason
                self._transition(rec, Status.FAILED, reason=failure_reason)
            return replace(rec)

    # -- human review --------------------------------------------------------

    def approve(self, key: CacheKey) -> CreativeRecord:
        with self._lock:
            rec = self._require(key)
            if rec.status != Status.READY:
                raise IllegalTransition(f"approve requires Ready, {key} is {rec.status.value}")
            rec.approved = True
            self._transition(rec, Status.READY, reason="approved")
            return replace(rec)

    def reject(self, key: CacheKey) -> CreativeRecord:
        with self._lock:
            rec = self._require(key)
            if rec.status != Status.READY:
                raise IllegalTransition(f"reject requires Ready, {key} is {rec.status.value}")
            rec.approved = False
            self._transition(rec, Status.REJECTED)
            return replace(rec)

    def regenerate(self, key: CacheKey) -> CreativeRecord:
        """Re-queue a Rejected or Failed key with a fresh seed salt."""
        with self._lock:
            rec = self._require(key)
            if rec.status not in (Status.REJECTED, Status.FAILED):
                raise IllegalTransition(
                    f"regenerate requires Rejected/Failed, {key} is {rec.status.value}"
                )
            rec.attempts = 0
            rec.object_ref = None
            rec.failure_reason = None
            rec.approved = False
            rec.regen_count += 1
            self._transition(rec, Status.QUEUED, reason="regenerate")
            self._queue.append(key)
            return replace(rec)

    def _require(self, key: CacheKey) -> CreativeRecord:
        rec = self._records.get(key)
        if rec is None:
            raise NotFound(f"no record for {key}")
        return rec

    # -- reads ----------------------------------------------------------------

    def get_record(self, key: CacheKey) -> CreativeRecord | None:
        with self._lock:
            rec = self._records.get(key)
            return replace(rec) if rec else None

    def list_records(self, statuses=None, limit: int | None = None) -> list[CreativeRecord]:
        with self._lock:
            recs = [
                replace(r)
                for r in self._records.values()
                if statuses is None or r.status in statuses
            ]
        recs.sort(key=lambda r: r.updated_ts, reverse=True)
        return recs[:limit] if limit else recs

    def queue_depth(self) -> int:
        with self._lock:
            return len(self._queue)

    # -- content-addressed objects --------------------------------------------

    def _object_path(self, ref: str) -> Path:
        return self.objects_dir / ref[:2] / f"{ref}.png"

    def put_object(self, data: bytes) -> str:
        """Store bytes under their SHA-256; idempotent for equal contents."""
        ref = hashlib.sha256(data).hexdigest()
        path = self._object_path(ref)
        if path.exists():
            return ref
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            tmp.replace(path)
        except OSError as exc:
            raise StorageFailure(f"object write failed: {exc}") from exc
        return ref

    def get_object(self, ref: str) -> bytes:
        path = self._object_path(ref)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"object {ref} not found") from None
        except OSError as exc:
            raise StorageFailure(f"object read failed: {exc}") from exc

    def has_object(self, ref: str) -> bool:
        return self._object_path(ref).exists()

    # -- mask cache -------------------------------------------------------------

    def put_mask(self, image_hash: str, mask: BitMask, bbox: Box | None = None) -> None:
        arr = np.where(mask.bits, 255, 0).astype(np.uint8)
        buf = BytesIO()
        Image.fromarray(arr, "L").save(buf, format="PNG")
        try:
            path = self.masks_dir / f"{image_hash}.png"
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(buf.getvalue())
            tmp.replace(path)
        except OSError as exc:
            logger.warning("mask cache write failed for %s: %s", image_hash, exc)

    def get_mask(self, image_hash: str) -> tuple[BitMask, Box] | None:
        """Cached mask with its bounding box, or None on miss or corruption."""
        path = self.masks_dir / f"{image_hash}.png"
        if not path.exists():
            return None
        try:
            bits = np.asarray(Image.open(path).convert("L"), dtype=np.uint8) >= 128
            if not bits.any():
                return None
            ys, xs = np.nonzero(bits)
            box = Box(int(xs.min()), int(ys.min()),
                      int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
            return BitMask(bits), box
        except Exception as exc:
            logger.warning("mask cache entry for %s unreadable (%s); treating as miss",
                           image_hash, exc)
            return None
