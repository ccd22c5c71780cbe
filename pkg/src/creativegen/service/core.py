"""Serving and feedback orchestration.

The request handler never blocks on generation: it assigns the A/B
group, lets the policy pick a prompt, consults the creative cache and
either serves the generated image or the original while a background
worker picks the job off the queue. Impressions open an attribution
window on an injectable clock; a click inside the window rewards the
bandit with 1, expiry rewards it with 0. Control-group outcomes are
logged for the A/B report only.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import heapq
import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import requests as requests_lib

from .. import bandit as bandit_mod
from ..bandit import LinUcbModel, RandomPolicy, build_context, select_prompt, snapshot_stats
from ..evalsim import relative_ctr_gain, two_prop_ztest
from ..generation import (
    MockBackend,
    RemoteBackend,
    job_seed,
    render_canonical,
)
from ..imaging import (
    EmptyMask,
    PlacementSpec,
    aspect_bucket,
    bounding_box,
    bucket_from_index,
    extract_mask,
    image_png_bytes,
    load_image,
    resize_bilinear,
)
from ..store import (
    CacheKey,
    CreativeStore,
    Enqueued,
    Hit,
    InFlight,
    Rejected,
    Status,
    StorageFailure,
)
from .config import AppConfig

logger = logging.getLogger(__name__)

_REQUEST_PATH = threading.local()


def in_request_path() -> bool:
    """True on a thread currently inside handle_creative_request.

    The serving path must never run generation inline; tests wrap the
    backend with an assertion on this flag.
    """
    return getattr(_REQUEST_PATH, "active", False)


class BadRequest(ValueError):
    pass


class AbGroup(str, Enum):
    BANDIT = "bandit"
    RANDOM_CONTROL = "random_control"
    ORIGINAL_ONLY = "original_only"


class RewardState(str, Enum):
    PENDING = "Pending"
    REWARDED = "Rewarded"
    EXPIRED = "Expired"


@dataclass
class RequestRecord:
    request_id: str
    ts: float
    ab_group: AbGroup
    category: str | None
    context: np.ndarray | None
    prompt_id: str | None
    key: CacheKey | None
    variant: str


@dataclass
class ImpressionRecord:
    request_id: str
    ab_group: AbGroup
    prompt_id: str | None
    context: np.ndarray | None
    ts: float
    deadline: float
    state: RewardState = RewardState.PENDING


class InstrumentedBackend:
    """Wraps a backend; refuses to run on the serving path and counts calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.backend_id = getattr(inner, "backend_id", "instrumented")

    def generate(self, request):
        if in_request_path():
            raise AssertionError("backend invoked inline on the serving path")
        self.calls += 1
        return self.inner.generate(request)


class CreativeService:
    """Ties the store, bandit, pipeline and attribution together."""

    def __init__(
        self,
        config: AppConfig,
        backend=None,
        clock=time.time,
        store: CreativeStore | None = None,
        model: LinUcbModel | None = None,
        pool=None,
    ):
        self.config = config
        self.clock = clock
        self.store = store or CreativeStore(
            config.data_dir,
            clock=clock,
            lease_timeout=config.lease_timeout_s,
            queue_bound=config.queue_bound,
            max_attempts=config.max_attempts,
        )
        self.spec = config.feature_spec()
        self._model_path = Path(config.data_dir) / "model.json"
        self.model = model or self._load_or_create_model()
        self.pool = pool or config.prompt_pool()
        self.random_policy = RandomPolicy(seed=config.control_seed)
        self.pipeline_cfg = config.pipeline()
        if backend is not None:
            self.backend = backend
        elif config.backend == "mock":
            self.backend = MockBackend()
        else:
            self.backend = RemoteBackend(config.backend, timeout=config.backend_timeout_s)

        self._lock = threading.RLock()
        self._requests: dict[str, RequestRecord] = {}
        self._impressions: dict[str, ImpressionRecord] = {}
        self._expiry_heap: list[tuple[float, str]] = []
        self._callbacks: dict[CacheKey, set[str]] = {}
        self._derived: dict[tuple[str, int, int], bytes] = {}

        self._events_path = Path(config.data_dir) / "events.jsonl"
        self._events_path.parent.mkdir(parents=True, exist_ok=True)
        self._events_lock = threading.Lock()

        self._workers: list[threading.Thread] = []
        self._stop = threading.Event()

    # -- lifecycle -------------------------------------------------------------

    def _load_or_create_model(self) -> LinUcbModel:
        if self._model_path.exists():
            try:
                model = bandit_mod.load_model(self._model_path)
                if model.spec == self.spec and model.alpha == self.config.alpha:
                    logger.info("restored bandit model from %s", self._model_path)
                    return model
                logger.warning("model snapshot disagrees with config; starting fresh")
            except (ValueError, KeyError, OSError) as exc:
                logger.warning("cannot load model snapshot: %s; starting fresh", exc)
        return LinUcbModel(self.spec, alpha=self.config.alpha)

    def save_model(self):
        try:
            bandit_mod.save_model(self.model, self._model_path)
        except OSError as exc:
            logger.error("model snapshot write failed: %s", exc)

    def start_workers(self, n: int | None = None):
        n = self.config.workers if n is None else n
        for i in range(n):
            t = threading.Thread(target=self._worker_loop, name=f"pipeline-worker-{i}", daemon=True)
            t.start()
            self._workers.append(t)

    def stop(self):
        self._stop.set()
        for t in self._workers:
            t.join(timeout=5)
        self._workers.clear()
        self.save_model()
        self.store.close()

    # -- serving -----------------------------------------------------------------

    def handle_creative_request(self, req: dict) -> dict:
        _REQUEST_PATH.active = True
        try:
            return self._handle_creative_request(req)
        finally:
            _REQUEST_PATH.active = False

    def _handle_creative_request(self, req: dict) -> dict:
        product = req.get("product") or {}
        placement = req.get("placement") or {}
        user = req.get("user") or {}
        callback_url = req.get("callback_url")

        try:
            width, height = int(placement["width"]), int(placement["height"])
            placement_spec = PlacementSpec(str(placement.get("id", "placement")), width, height)
        except (KeyError, TypeError, ValueError) as exc:
            raise BadRequest(f"invalid placement: {exc}") from exc

        image_url = product.get("image_url")
        image_b64 = product.get("image_b64")
        if (image_url is None) == (image_b64 is None):
            raise BadRequest("exactly one of product.image_url / product.image_b64 required")
        category = product.get("category")

        request_id = uuid.uuid4().hex
        now = self.clock()
        ab_group = self._assign_group(user.get("user_id", ""), req.get("ab_override"))

        image_bytes = None
        if image_b64 is not None:
            try:
                image_bytes = base64.b64decode(image_b64, validate=True)
            except (binascii.Error, ValueError) as exc:
                raise BadRequest(f"invalid base64 image: {exc}") from exc
        else:
            try:
                resp = requests_lib.get(image_url, timeout=self.config.fetch_timeout_s)
                resp.raise_for_status()
                image_bytes = resp.content
            except requests_lib.RequestException as exc:
                logger.warning("image fetch failed for %s: %s", image_url, exc)
                return self._respond(
                    request_id, now, ab_group, category, None, None, None,
                    variant="original", image_ref=image_url,
                )

        image_hash = hashlib.sha256(image_bytes).hexdigest()
        try:
            self.store.put_object(image_bytes)
        except StorageFailure as exc:
            logger.error("failing open, original store write failed: %s", exc)
            return self._respond(
                request_id, now, ab_group, category, None, None, None,
                variant="original", image_ref=None,
            )
        original_ref = f"/v1/images/{image_hash}"

        if ab_group == AbGroup.ORIGINAL_ONLY:
            return self._respond(
                request_id, now, ab_group, category, None, None, None,
                variant="original", image_ref=original_ref,
            )

        bucket = aspect_bucket(placement_spec, self.config.bucket_log_width)
        context = build_context(
            user.get("features") or {},
            {"category": category, "attributes": product.get("attributes") or {}},
            bucket,
            self.spec,
        )
        eligible = [p.prompt_id for p in self.pool.prompts_for(category)]
        if not eligible:
            logger.warning("no prompts for category %r; serving original", category)
            return self._respond(
                request_id, now, ab_group, category, context, None, None,
                variant="original", image_ref=original_ref,
            )
        if ab_group == AbGroup.BANDIT:
            prompt_id = select_prompt(self.model, context, eligible)
        else:
            prompt_id = self.random_policy.select(eligible)

        key = CacheKey(image_hash, prompt_id, bucket.index)
        try:
            outcome = self.store.get_or_enqueue(key)
        except StorageFailure as exc:
            logger.error("failing open, get_or_enqueue failed: %s", exc)
            return self._respond(
                request_id, now, ab_group, category, context, prompt_id, key,
                variant="original", image_ref=original_ref, respond_prompt=False,
            )

        if isinstance(outcome, Hit):
            if self.config.moderation_mode == "pre":
                rec = self.store.get_record(key)
                if rec is None or not rec.approved:
                    return self._respond(
                        request_id, now, ab_group, category, context, prompt_id, key,
                        variant="original", image_ref=original_ref, respond_prompt=False,
                    )
            image_ref = f"/v1/images/{outcome.object_ref}?w={width}&h={height}"
            return self._respond(
                request_id, now, ab_group, category, context, prompt_id, key,
                variant="generated", image_ref=image_ref,
            )
        if isinstance(outcome, (Enqueued, InFlight)):
            if callback_url:
                with self._lock:
                    self._callbacks.setdefault(key, set()).add(callback_url)
            return self._respond(
                request_id, now, ab_group, category, context, prompt_id, key,
                variant="original", image_ref=original_ref,
            )
        # Rejected (or terminally failed): serve the original, no new prompt exposure
        return self._respond(
            request_id, now, ab_group, category, context, prompt_id, key,
            variant="original", image_ref=original_ref, respond_prompt=False,
        )

    def _respond(
        self, request_id, ts, ab_group, category, context, prompt_id, key,
        variant, image_ref, respond_prompt=True,
    ) -> dict:
        record = RequestRecord(
            request_id=request_id, ts=ts, ab_group=ab_group, category=category,
            context=context, prompt_id=prompt_id, key=key, variant=variant,
        )
        with self._lock:
            self._requests[request_id] = record
        body = {
            "request_id": request_id,
            "variant": variant,
            "image_ref": image_ref,
            "ab_group": ab_group.value,
        }
        # prompt_id is present iff the variant is generated or a generation
        # exists for this request (enqueued or in flight)
        if prompt_id is not None and respond_prompt:
            body["prompt_id"] = prompt_id
        return body

    def _assign_group(self, user_id: str, override: str | None) -> AbGroup:
        if override:
            try:
                return AbGroup(override)
            except ValueError as exc:
                raise BadRequest(f"unknown ab_override {override!r}") from exc
        material = f"{user_id}|{self.config.experiment_salt}".encode()
        slot = int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "big") % 100
        s = self.config.splits
        if slot < s.bandit:
            return AbGroup.BANDIT
        if slot < s.bandit + s.random_control:
            return AbGroup.RANDOM_CONTROL
        return AbGroup.ORIGINAL_ONLY

    # -- feedback and attribution ---------------------------------------------

    def handle_feedback(self, request_id: str, event: str) -> dict:
        if event not in ("impression", "click"):
            raise BadRequest(f"unknown event {event!r}")
        self.expire_due()
        now = self.clock()
        with self._lock:
            if event == "impression":
                request = self._requests.get(request_id)
                if request is None:
                    logger.warning("impression for unknown request_id %s ignored", request_id)
                    return {"status": "ignored"}
                if request_id in self._impressions:
                    logger.warning("duplicate impression for %s ignored", request_id)
                    return {"status": "ignored"}
                imp = ImpressionRecord(
                    request_id=request_id,
                    ab_group=request.ab_group,
                    prompt_id=request.prompt_id,
                    context=request.context,
                    ts=now,
                    deadline=now + self.config.attribution_window_s,
                )
                self._impressions[request_id] = imp
                heapq.heappush(self._expiry_heap, (imp.deadline, request_id))
                self._log_event({
                    "ts": now, "type": "impression", "request_id": request_id,
                    "group": imp.ab_group.value, "prompt_id": imp.prompt_id,
                })
                return {"status": "ok"}

            imp = self._impressions.get(request_id)
            if imp is None:
                logger.warning("click for unknown request_id %s ignored", request_id)
                return {"status": "ignored"}
            if imp.state == RewardState.REWARDED:
                logger.warning("duplicate click for %s ignored", request_id)
                return {"status": "ignored"}
            if imp.state == RewardState.EXPIRED or now > imp.deadline:
                logger.warning("click outside attribution window for %s ignored", request_id)
                return {"status": "ignored"}
            imp.state = RewardState.REWARDED
            self._log_event({
                "ts": now, "type": "click", "request_id": request_id,
                "group": imp.ab_group.value, "prompt_id": imp.prompt_id,
            })
            if imp.ab_group == AbGroup.BANDIT and imp.prompt_id is not None:
                bandit_mod.update(self.model, imp.prompt_id, imp.context, 1)
            return {"status": "ok"}

    def expire_due(self, now: float | None = None) -> int:
        """Expire Pending impressions past their deadline (reward 0)."""
        now = self.clock() if now is None else now
        expired = 0
        with self._lock:
            while self._expiry_heap and self._expiry_heap[0][0] < now:
                _, request_id = heapq.heappop(self._expiry_heap)
                imp = self._impressions.get(request_id)
                if imp is None or imp.state != RewardState.PENDING:
                    continue
                imp.state = RewardState.EXPIRED
                self._log_event({
                    "ts": now, "type": "expiry", "request_id": request_id,
                    "group": imp.ab_group.value, "prompt_id": imp.prompt_id,
                })
                if imp.ab_group == AbGroup.BANDIT and imp.prompt_id is not None:
                    bandit_mod.update(self.model, imp.prompt_id, imp.context, 0)
                expired += 1
        return expired

    def _log_event(self, event: dict):
        try:
            with self._events_lock:
                with open(self._events_path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(event, sort_keys=True) + "\n")
        except OSError as exc:
            logger.error("event log write failed: %s", exc)

    # -- background pipeline -----------------------------------------------------

    def _worker_loop(self):
        while not self._stop.is_set():
            self.expire_due()
            try:
                job = self.store.dequeue()
            except StorageFailure as exc:
                logger.error("dequeue failed: %s", exc)
                job = None
            if job is None:
                self._stop.wait(self.config.worker_poll_s)
                continue
            self._process_job(job)

    def run_pending_jobs(self, limit: int | None = None) -> int:
        """Drain the queue synchronously; test/CLI helper."""
        done = 0
        while limit is None or done < limit:
            job = self.store.dequeue()
            if job is None:
                break
            self._process_job(job)
            done += 1
        return done

    def _process_job(self, job):
        key = job.key
        try:
            original = self.store.get_object(key.image_hash)
            product = load_image(original)
            cached = self.store.get_mask(key.image_hash)
            if cached is not None:
                mask = cached[0]
            else:
                mask = extract_mask(product)
                self.store.put_mask(key.image_hash, mask, bounding_box(mask))
            prompt = self.pool.get(key.prompt_id)
            if prompt is None:
                raise KeyError(f"prompt {key.prompt_id!r} not in pool")
            bucket = bucket_from_index(key.bucket, self.config.bucket_log_width)
            seed = job_seed(key.image_hash, key.prompt_id, key.bucket, salt=job.regen_count)
            canonical = render_canonical(
                product, mask, prompt, bucket, self.pipeline_cfg, self.backend, seed
            )
            ref = self.store.put_object(image_png_bytes(canonical))
            self.store.complete(key, object_ref=ref)
            logger.info("creative ready for %s -> %s", key, ref)
            self._fire_callbacks(key, "ready", f"/v1/images/{ref}")
        except Exception as exc:
            logger.warning("generation failed for %s: %s", key, exc)
            try:
                rec = self.store.complete(key, failure_reason=f"{type(exc).__name__}: {exc}")
            except Exception as inner:
                logger.error("cannot record failure for %s: %s", key, inner)
                return
            if rec.status == Status.FAILED:
                self._fire_callbacks(key, "failed", None)

    # -- callbacks ----------------------------------------------------------------

    def _fire_callbacks(self, key: CacheKey, status: str, image_ref: str | None):
        with self._lock:
            urls = sorted(self._callbacks.pop(key, ()))
        for url in urls:
            self.fire_callback(url, key, status, image_ref)

    def fire_callback(self, url: str, key: CacheKey, status: str, image_ref: str | None) -> bool:
        """At-least-once POST to the recommender; body is deterministic so
        deliveries are idempotent for the receiver."""
        body = {
            "image_hash": key.image_hash,
            "prompt_id": key.prompt_id,
            "bucket": key.bucket,
            "status": status,
            "image_ref": image_ref,
        }
        retries = self.config.callback_retries
        for attempt in range(retries):
            if attempt:
                time.sleep(self.config.callback_backoff_s * 2 ** (attempt - 1))
            try:
                resp = requests_lib.post(url, json=body, timeout=10)
                if resp.status_code < 400:
                    return True
                logger.warning("callback %s attempt %d: HTTP %d", url, attempt + 1, resp.status_code)
            except requests_lib.RequestException as exc:
                logger.warning("callback %s attempt %d failed: %s", url, attempt + 1, exc)
        logger.error("callback delivery to %s failed after %d attempts", url, retries)
        return False

    # -- images --------------------------------------------------------------------

    def image_bytes(self, ref: str, w: int | None = None, h: int | None = None) -> bytes:
        """Object bytes, optionally resized; derived sizes are cached."""
        if w is None or h is None:
            return self.store.get_object(ref)
        cache_key = (ref, int(w), int(h))
        with self._lock:
            cached = self._derived.get(cache_key)
        if cached is not None:
            return cached
        img = load_image(self.store.get_object(ref))
        out = image_png_bytes(resize_bilinear(img, int(w), int(h)))
        with self._lock:
            if len(self._derived) > 1024:
                self._derived.clear()
            self._derived[cache_key] = out
        return out

    # -- review ----------------------------------------------------------------------

    def list_pending(self, limit: int = 50) -> list[dict]:
        """Ready (unapproved) and Failed creatives for human review."""
        if self.config.moderation_mode == "off":
            return []
        records = self.store.list_records(statuses=(Status.READY, Status.FAILED))
        items = []
        for rec in records:
            if rec.status == Status.READY and rec.approved:
                continue
            prompt = self.pool.get(rec.key.prompt_id)
            items.append({
                "image_hash": rec.key.image_hash,
                "prompt_id": rec.key.prompt_id,
                "bucket": rec.key.bucket,
                "status": rec.status.value,
                "created_ts": rec.created_ts,
                "updated_ts": rec.updated_ts,
                "attempts": rec.attempts,
                "failure_reason": rec.failure_reason,
                "prompt_text": prompt.text if prompt else None,
                "creative_ref": f"/v1/images/{rec.object_ref}" if rec.object_ref else None,
                "original_ref": f"/v1/images/{rec.key.image_hash}",
            })
            if len(items) >= limit:
                break
        return items

    def approve(self, key: CacheKey):
        return self.store.approve(key)

    def reject(self, key: CacheKey):
        return self.store.reject(key)

    def regenerate(self, key: CacheKey):
        return self.store.regenerate(key)

    # -- stats --------------------------------------------------------------------------

    def bandit_stats(self) -> dict:
        self.expire_due()
        stats = snapshot_stats(self.model)
        for prompt_id, arm in stats["arms"].items():
            prompt = self.pool.get(prompt_id)
            arm["category_id"] = prompt.category_id if prompt else None
            arm["prompt_text"] = prompt.text if prompt else None
        return stats

    def ab_report(self, window: float | None = None, samples: int = 50) -> dict:
        """Per-group impressions, clicks, CTR, gain and significance.

        ``samples`` cumulative points over the (window-filtered)
        impression sequence feed the console's lift-over-time chart.
        """
        self.expire_due()
        now = self.clock()
        with self._lock:
            imps = sorted(self._impressions.values(), key=lambda i: i.ts)
        if window is not None:
            imps = [i for i in imps if i.ts >= now - window]

        counts = {g.value: {"impressions": 0, "clicks": 0} for g in AbGroup}
        series = []
        running = {g.value: {"impressions": 0, "clicks": 0} for g in AbGroup}
        step = max(1, len(imps) // samples) if imps else 1
        for i, imp in enumerate(imps):
            g = imp.ab_group.value
            counts[g]["impressions"] += 1
            running[g]["impressions"] += 1
            if imp.state == RewardState.REWARDED:
                counts[g]["clicks"] += 1
                running[g]["clicks"] += 1
            if (i + 1) % step == 0 or i == len(imps) - 1:
                b, c = running["bandit"], running["random_control"]
                series.append({
                    "ts": imp.ts,
                    "n": i + 1,
                    "ctr_bandit": b["clicks"] / b["impressions"] if b["impressions"] else None,
                    "ctr_control": c["clicks"] / c["impressions"] if c["impressions"] else None,
                })

        groups = {}
        for g, c in counts.items():
            n = c["impressions"]
            groups[g] = {
                "impressions": n,
                "clicks": c["clicks"],
                "ctr": c["clicks"] / n if n else 0.0,
            }
        z = p = gain = None
        b, c = groups["bandit"], groups["random_control"]
        if b["impressions"] and c["impressions"]:
            result = two_prop_ztest(
                b["clicks"], b["impressions"], c["clicks"], c["impressions"]
            )
            z, p = result.z, result.p_two_sided
            if c["ctr"] > 0:
                gain = relative_ctr_gain(b["ctr"], c["ctr"])
        return {"groups": groups, "relative_gain": gain, "z": z, "p": p, "samples": series}
