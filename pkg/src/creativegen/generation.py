"""Pipeline orchestration over pluggable generation backends.

The pipeline runs masking, layout into the bucket's canonical
dimensions, edge extraction, backend generation and cut-back
compositing, then one final bilinear resize to the exact placement
dimensions. Backends speak a small JSON wire protocol
(POST {endpoint}/generate, base64 PNG images) so a real diffusion
worker can stand in for the deterministic procedural mock used at desk
scale.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np
import requests

from .imaging import (
    BitMask,
    BucketId,
    DimensionMismatch,
    LayoutConfig,
    PlacementSpec,
    RasterImage,
    aspect_bucket,
    composite_product,
    compute_edges,
    edges_png_bytes,
    extract_mask,
    image_png_bytes,
    layout_product,
    load_image,
    load_mask,
    mask_png_bytes,
    resize_bilinear,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 3


class GenerationError(Exception):
    pass


class BackendTimeout(GenerationError):
    """Backend unreachable after the final retry."""


class MalformedResponse(GenerationError):
    """Backend answered with something that is not a valid response."""


@dataclass(frozen=True)
class Prompt:
    """One predefined environment description for a product category."""

    prompt_id: str
    category_id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("prompt text must be non-empty")
        if not self.prompt_id:
            raise ValueError("prompt_id must be non-empty")


class PromptPool:
    """Ordered prompts per category, unique ids across the pool."""

    def __init__(self, prompts):
        self._by_category: dict[str, list[Prompt]] = {}
        self._by_id: dict[str, Prompt] = {}
        for p in prompts:
            if p.prompt_id in self._by_id:
                raise ValueError(f"duplicate prompt_id {p.prompt_id!r}")
            self._by_id[p.prompt_id] = p
            self._by_category.setdefault(p.category_id, []).append(p)

    @property
    def categories(self) -> list[str]:
        return list(self._by_category)

    def prompts_for(self, category_id: str) -> list[Prompt]:
        return list(self._by_category.get(category_id, []))

    def get(self, prompt_id: str) -> Prompt | None:
        return self._by_id.get(prompt_id)

    def to_list(self) -> list[dict]:
        return [
            {"prompt_id": p.prompt_id, "category_id": p.category_id, "text": p.text}
            for plist in self._by_category.values()
            for p in plist
        ]

    @classmethod
    def from_list(cls, items) -> "PromptPool":
        return cls(Prompt(i["prompt_id"], i["category_id"], i["text"]) for i in items)

    @classmethod
    def from_json(cls, path: str | Path) -> "PromptPool":
        return cls.from_list(json.loads(Path(path).read_text()))


def default_pool() -> PromptPool:
    """Small built-in pool: three environment prompts per category."""
    return PromptPool.from_list(
        [
            {"prompt_id": "apparel-studio", "category_id": "apparel",
             "text": "soft studio light, neutral backdrop, fashion editorial"},
            {"prompt_id": "apparel-street", "category_id": "apparel",
             "text": "sunlit city street, shallow depth of field"},
            {"prompt_id": "apparel-nature", "category_id": "apparel",
             "text": "forest trail at golden hour, warm tones"},
            {"prompt_id": "electronics-desk", "category_id": "electronics",
             "text": "minimal desk setup, diffuse daylight"},
            {"prompt_id": "electronics-dark", "category_id": "electronics",
             "text": "dark gradient surface with rim lighting"},
            {"prompt_id": "electronics-loft", "category_id": "electronics",
             "text": "industrial loft interior, soft shadows"},
            {"prompt_id": "home-livingroom", "category_id": "home",
             "text": "cozy living room, morning light through linen curtains"},
            {"prompt_id": "home-terrace", "category_id": "home",
             "text": "mediterranean terrace, terracotta and greenery"},
            {"prompt_id": "home-scandi", "category_id": "home",
             "text": "scandinavian interior, pale wood and white walls"},
        ]
    )


def job_seed(image_hash: str, prompt_id: str, bucket_index: int, salt: int = 0) -> int:
    """Stable 64-bit seed from the cache key; a nonzero salt (regeneration
    counter) yields a fresh but still reproducible seed."""
    material = f"{image_hash}:{prompt_id}:{bucket_index}"
    if salt:
        material += f"#{salt}"
    return int.from_bytes(hashlib.blake2b(material.encode(), digest_size=8).digest(), "big")


@dataclass(frozen=True)
class PipelineConfig:
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    reinforce_edges: bool = True
    condition_on_product: bool = True
    bucket_log_width: float = 0.2
    max_attempts: int = DEFAULT_MAX_ATTEMPTS


@dataclass(frozen=True)
class GenerationJob:
    """One unit of backend work; all rasters share the bucket's canonical dims."""

    prompt: Prompt
    bucket: BucketId
    canvas: RasterImage
    canvas_mask: BitMask
    edges: bytes
    condition_on_product: bool
    seed: int
    attempts: int = 0


# ---------------------------------------------------------------------------
# wire protocol
# ---------------------------------------------------------------------------

def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


@dataclass(frozen=True)
class BackendRequest:
    """JSON body of POST {endpoint}/generate; images are base64 PNG."""

    prompt: str
    width: int
    height: int
    seed: int
    edges: bytes
    mask: bytes
    condition_image: bytes | None = None

    def to_wire(self) -> dict:
        body = {
            "prompt": self.prompt,
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
            "edges": _b64(self.edges),
            "mask": _b64(self.mask),
        }
        if self.condition_image is not None:
            body["condition_image"] = _b64(self.condition_image)
        return body

    @classmethod
    def from_wire(cls, body: Mapping) -> "BackendRequest":
        cond = body.get("condition_image")
        return cls(
            prompt=body["prompt"],
            width=int(body["width"]),
            height=int(body["height"]),
            seed=int(body["seed"]),
            edges=_unb64(body["edges"]),
            mask=_unb64(body["mask"]),
            condition_image=_unb64(cond) if cond is not None else None,
        )


@dataclass(frozen=True)
class BackendResponse:
    image: bytes
    backend_id: str
    latency_ms: float

    def to_wire(self) -> dict:
        return {
            "image": _b64(self.image),
            "backend_id": self.backend_id,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_wire(cls, body: Mapping) -> "BackendResponse":
        return cls(
            image=_unb64(body["image"]),
            backend_id=str(body.get("backend_id", "unknown")),
            latency_ms=float(body.get("latency_ms", 0.0)),
        )


class Backend(Protocol):
    def generate(self, request: BackendRequest) -> BackendResponse: ...


# ---------------------------------------------------------------------------
# mock backend
# ---------------------------------------------------------------------------

def _value_noise(rng: np.random.Generator, w: int, h: int, cells: int) -> np.ndarray:
    """Bilinearly interpolated random lattice, values in [0, 1)."""
    lattice = rng.random((cells + 1, cells + 1))
    u = (np.arange(w) + 0.5) * cells / w
    v = (np.arange(h) + 0.5) * cells / h
    i0 = np.floor(v).astype(int)
    j0 = np.floor(u).astype(int)
    fv = (v - i0)[:, None]
    fu = (u - j0)[None, :]
    i0 = i0[:, None]
    j0 = j0[None, :]
    top = lattice[i0, j0] * (1 - fu) + lattice[i0, j0 + 1] * fu
    bot = lattice[i0 + 1, j0] * (1 - fu) + lattice[i0 + 1, j0 + 1] * fu
    return top * (1 - fv) + bot * fv


def mock_generate(request: BackendRequest) -> BackendResponse:
    """Deterministic procedural stand-in for a diffusion worker.

    A two-octave value-noise field is colored by a palette derived from
    the prompt text hash. When a condition image is present every pixel
    is blended 30% toward the mean RGB of its masked (product) region,
    which pulls the output palette toward the product. Finally pixels
    are darkened by the edge magnitude, x * (1 - 0.3 * m / 255), so the
    constraint visibly shapes the output.
    """
    t0 = time.monotonic()
    w, h = request.width, request.height
    rng = np.random.default_rng(request.seed)
    noise = (_value_noise(rng, w, h, 8) + 0.5 * _value_noise(rng, w, h, 16)) / 1.5

    digest = hashlib.blake2b(request.prompt.encode("utf-8"), digest_size=6).digest()
    c0 = np.array(list(digest[0:3]), dtype=np.float64)
    c1 = np.array(list(digest[3:6]), dtype=np.float64)
    img = c0 + noise[:, :, None] * (c1 - c0)

    if request.condition_image is not None:
        condition = load_image(request.condition_image).pixels[:, :, :3].astype(np.float64)
        sel = load_mask(request.mask).bits
        if sel.shape != condition.shape[:2] or not sel.any():
            sel = np.ones(condition.shape[:2], dtype=bool)
        product_mean = condition[sel].mean(axis=0)
        img = 0.7 * img + 0.3 * product_mean

    edges = load_mask_magnitude(request.edges)
    if edges.shape != (h, w):
        raise ValueError(f"edge map {edges.shape} does not match {h}x{w} request")
    img *= (1.0 - 0.3 * edges[:, :, None] / 255.0)

    out = np.empty((h, w, 4), dtype=np.uint8)
    out[:, :, :3] = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    out[:, :, 3] = 255
    png = image_png_bytes(RasterImage(out))
    return BackendResponse(
        image=png, backend_id="mock", latency_ms=(time.monotonic() - t0) * 1000.0
    )


def load_mask_magnitude(png: bytes) -> np.ndarray:
    """Decode a single-channel PNG to its raw 0..255 intensities."""
    from PIL import Image
    from io import BytesIO

    return np.asarray(Image.open(BytesIO(png)).convert("L"), dtype=np.uint8)


class MockBackend:
    backend_id = "mock"

    def generate(self, request: BackendRequest) -> BackendResponse:
        return mock_generate(request)


# ---------------------------------------------------------------------------
# remote backend
# ---------------------------------------------------------------------------

def remote_generate(
    endpoint: str,
    request: BackendRequest,
    timeout: float = 30.0,
    retries: int = 3,
    backoff_base: float = 0.5,
    session=None,
) -> BackendResponse:
    """POST the wire request to {endpoint}/generate.

    Transport errors, timeouts and 5xx answers are retried with
    exponential backoff (base 2) up to ``retries`` total attempts;
    BackendTimeout is raised after the last one. Malformed bodies and
    dimension mismatches are not retried.
    """
    http = session or requests
    url = endpoint.rstrip("/") + "/generate"
    last_error = None
    for attempt in range(retries):
        if attempt:
            time.sleep(backoff_base * 2 ** (attempt - 1))
        try:
            resp = http.post(url, json=request.to_wire(), timeout=timeout)
        except requests.RequestException as exc:
            last_error = exc
            logger.warning("backend attempt %d/%d failed: %s", attempt + 1, retries, exc)
            continue
        if resp.status_code >= 500:
            last_error = RuntimeError(f"backend returned {resp.status_code}")
            logger.warning("backend attempt %d/%d: HTTP %d", attempt + 1, retries, resp.status_code)
            continue
        if resp.status_code != 200:
            raise MalformedResponse(f"backend returned HTTP {resp.status_code}")
        try:
            backend_resp = BackendResponse.from_wire(resp.json())
            image = load_image(backend_resp.image)
        except Exception as exc:
            raise MalformedResponse(f"cannot decode backend response: {exc}") from exc
        if (image.width, image.height) != (request.width, request.height):
            raise DimensionMismatch(
                f"backend produced {image.width}x{image.height}, "
                f"requested {request.width}x{request.height}"
            )
        return backend_resp
    raise BackendTimeout(f"backend unreachable after {retries} attempts: {last_error}")


class RemoteBackend:
    """Client for a remote worker; bounds in-flight requests with a semaphore."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 3,
                 backoff_base: float = 0.5, max_inflight: int = 4):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff_base = backoff_base
        self.backend_id = f"remote:{endpoint}"
        self._session = requests.Session()
        self._inflight = threading.BoundedSemaphore(max_inflight)

    def generate(self, request: BackendRequest) -> BackendResponse:
        with self._inflight:
            return remote_generate(
                self.endpoint, request, timeout=self.timeout, retries=self.retries,
                backoff_base=self.backoff_base, session=self._session,
            )


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def build_job(
    product: RasterImage,
    mask: BitMask | None,
    prompt: Prompt,
    bucket: BucketId,
    cfg: PipelineConfig,
    seed: int,
) -> GenerationJob:
    """Prepare the canonical-dimension canvas, mask and edge map for one job."""
    if mask is None:
        mask = extract_mask(product)
    placement = PlacementSpec(
        f"bucket:{bucket.index}", bucket.canonical_width, bucket.canonical_height
    )
    canvas, canvas_mask = layout_product(product, mask, placement, cfg.layout)
    edges = compute_edges(canvas, canvas_mask, reinforce=cfg.reinforce_edges)
    return GenerationJob(
        prompt=prompt,
        bucket=bucket,
        canvas=canvas,
        canvas_mask=canvas_mask,
        edges=edges_png_bytes(edges),
        condition_on_product=cfg.condition_on_product,
        seed=seed,
    )


def render_canonical(
    product: RasterImage,
    mask: BitMask | None,
    prompt: Prompt,
    bucket: BucketId,
    cfg: PipelineConfig,
    backend: Backend,
    seed: int,
) -> RasterImage:
    """Generate and composite one creative at the bucket's canonical dims."""
    job = build_job(product, mask, prompt, bucket, cfg, seed)
    request = BackendRequest(
        prompt=prompt.text,
        width=bucket.canonical_width,
        height=bucket.canonical_height,
        seed=seed,
        edges=job.edges,
        mask=mask_png_bytes(job.canvas_mask),
        condition_image=image_png_bytes(job.canvas) if cfg.condition_on_product else None,
    )
    response = backend.generate(request)
    generated = load_image(response.image)
    if (generated.width, generated.height) != (bucket.canonical_width, bucket.canonical_height):
        raise DimensionMismatch(
            f"backend produced {generated.width}x{generated.height} for "
            f"{bucket.canonical_width}x{bucket.canonical_height}"
        )
    return composite_product(generated, job.canvas, job.canvas_mask)


def run_pipeline(
    product: RasterImage,
    mask: BitMask | None,
    prompt: Prompt,
    placement: PlacementSpec,
    cfg: PipelineConfig,
    backend: Backend,
    image_hash: str | None = None,
    seed_salt: int = 0,
) -> RasterImage:
    """Full pipeline: mask, layout, edges, generate, cut back, final resize.

    The seed derives from (image_hash, prompt, bucket); when no hash is
    supplied the re-encoded product PNG is hashed, which is stable for a
    given pixel buffer. Returns the creative at exact placement size.
    """
    bucket = aspect_bucket(placement, cfg.bucket_log_width)
    if image_hash is None:
        image_hash = hashlib.sha256(image_png_bytes(product)).hexdigest()
    seed = job_seed(image_hash, prompt.prompt_id, bucket.index, salt=seed_salt)
    canonical = render_canonical(product, mask, prompt, bucket, cfg, backend, seed)
    return resize_bilinear(canonical, placement.width, placement.height)
