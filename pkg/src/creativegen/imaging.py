"""Pure raster operations for the creative pipeline.

Masking, layout, edge extraction, cut-back compositing and aspect-ratio
bucketing. Every operation is a deterministic function of its inputs;
pixel buffers are frozen at construction so values can be shared freely
across worker threads.

Pinned semantics that golden tests rely on:

* ``round`` means round-half-away-from-zero everywhere in this module.
* Sobel gradients use replicate padding and magnitudes are divided by 4
  before rounding and clamping to 255.
* Images are resampled bilinearly, masks nearest-neighbor (masks stay
  binary, which the cut-back compositing invariant requires).
* Bucket canonical widths round to the nearest multiple of 8
  (bucket index 1 is 592 wide at the default 0.2 log2 bucket width).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage

MAX_DIM = 8192
CANONICAL_HEIGHT = 512
MIN_CANONICAL_WIDTH = 256
MAX_CANONICAL_WIDTH = 1024
DEFAULT_BUCKET_LOG_WIDTH = 0.2


class ImagingError(Exception):
    """Base class for imaging failures."""


class EmptyMask(ImagingError):
    """No product pixel could be identified; caller should serve the original."""


class DimensionMismatch(ImagingError):
    """Rasters that must agree in size do not."""


class DegenerateScale(ImagingError):
    """Layout produced a non-positive scale factor."""


def _round_half_away(x: float) -> int:
    return math.floor(x + 0.5) if x >= 0 else math.ceil(x - 0.5)


@dataclass(frozen=True)
class RasterImage:
    """8-bit RGBA pixel buffer, row-major, immutable once constructed."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 4:
            raise ValueError(f"expected (h, w, 4) RGBA array, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"expected uint8 samples, got {px.dtype}")
        h, w = px.shape[:2]
        if not (1 <= w <= MAX_DIM and 1 <= h <= MAX_DIM):
            raise ValueError(f"image dimensions {w}x{h} outside [1, {MAX_DIM}]")
        if px.flags.writeable:
            px = px.copy()
            px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class BitMask:
    """One boolean per pixel; true marks a product pixel."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.dtype != np.bool_:
            raise ValueError(f"expected 2-d bool array, got {bits.shape} {bits.dtype}")
        if bits.flags.writeable:
            bits = bits.copy()
            bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def any(self) -> bool:
        return bool(self.bits.any())


@dataclass(frozen=True)
class EdgeMap:
    """Per-pixel 8-bit edge magnitude."""

    magnitude: np.ndarray

    def __post_init__(self):
        mag = np.asarray(self.magnitude)
        if mag.ndim != 2 or mag.dtype != np.uint8:
            raise ValueError(f"expected 2-d uint8 array, got {mag.shape} {mag.dtype}")
        if mag.flags.writeable:
            mag = mag.copy()
            mag.setflags(write=False)
        object.__setattr__(self, "magnitude", mag)

    @property
    def width(self) -> int:
        return self.magnitude.shape[1]

    @property
    def height(self) -> int:
        return self.magnitude.shape[0]


@dataclass(frozen=True)
class PlacementSpec:
    """An ad slot with fixed pixel dimensions."""

    placement_id: str
    width: int
    height: int

    def __post_init__(self):
        for name, v in (("width", self.width), ("height", self.height)):
            if not (16 <= v <= 4096):
                raise ValueError(f"placement {name} {v} outside [16, 4096]")


@dataclass(frozen=True)
class LayoutConfig:
    """How a product is positioned and scaled on a placement canvas.

    The scaled product bounding box fills at most ``max_fill_fraction``
    of each canvas dimension, never upscales beyond ``max_upscale``,
    is centered horizontally at ``anchor_x`` of the canvas width, and
    its bottom edge sits at ``baseline_y`` of the canvas height.
    """

    max_fill_fraction: float = 0.6
    anchor_x: float = 0.5
    baseline_y: float = 0.7
    max_upscale: float = 2.0
    background: str = "transparent"

    def __post_init__(self):
        if not 0.0 < self.max_fill_fraction <= 1.0:
            raise ValueError("max_fill_fraction must be in (0, 1]")
        if not 0.0 <= self.anchor_x <= 1.0:
            raise ValueError("anchor_x must be in [0, 1]")
        if not 0.0 <= self.baseline_y <= 1.0:
            raise ValueError("baseline_y must be in [0, 1]")
        if self.max_upscale < 1.0:
            raise ValueError("max_upscale must be >= 1")
        if self.background not in ("transparent", "white"):
            raise ValueError("background must be 'transparent' or 'white'")


@dataclass(frozen=True)
class BucketId:
    """Aspect-ratio equivalence class sharing one generation."""

    index: int
    canonical_width: int
    canonical_height: int

    def __post_init__(self):
        if self.canonical_width % 8 or self.canonical_height % 8:
            raise ValueError("canonical dimensions must be multiples of 8")
        if self.canonical_height != CANONICAL_HEIGHT:
            raise ValueError(f"canonical height is fixed at {CANONICAL_HEIGHT}")


class Box(NamedTuple):
    x: int
    y: int
    w: int
    h: int


# ---------------------------------------------------------------------------
# PNG ingestion / emission
# ---------------------------------------------------------------------------

def load_image(source: bytes | str | Path) -> RasterImage:
    """Decode an image file or byte string into RGBA."""
    if isinstance(source, bytes):
        pil = Image.open(BytesIO(source))
    else:
        pil = Image.open(source)
    return RasterImage(np.asarray(pil.convert("RGBA"), dtype=np.uint8))


def image_png_bytes(image: RasterImage) -> bytes:
    buf = BytesIO()
    Image.fromarray(np.asarray(image.pixels), "RGBA").save(buf, format="PNG")
    return buf.getvalue()


def mask_png_bytes(mask: BitMask) -> bytes:
    """Serialize a mask as a single-channel PNG, 0 or 255 per pixel."""
    buf = BytesIO()
    arr = np.where(mask.bits, 255, 0).astype(np.uint8)
    Image.fromarray(arr, "L").save(buf, format="PNG")
    return buf.getvalue()


def load_mask(source: bytes | str | Path) -> BitMask:
    if isinstance(source, bytes):
        pil = Image.open(BytesIO(source))
    else:
        pil = Image.open(source)
    arr = np.asarray(pil.convert("L"), dtype=np.uint8)
    return BitMask(arr >= 128)


def edges_png_bytes(edges: EdgeMap) -> bytes:
    buf = BytesIO()
    Image.fromarray(np.asarray(edges.magnitude), "L").save(buf, format="PNG")
    return buf.getvalue()


def load_edges(source: bytes) -> EdgeMap:
    arr = np.asarray(Image.open(BytesIO(source)).convert("L"), dtype=np.uint8)
    return EdgeMap(arr)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def extract_mask(image: RasterImage, tolerance: int = 12) -> BitMask:
    """Heuristic product masking.

    If the alpha channel is non-trivial (any pixel below 255), the mask
    is simply ``alpha >= 128``. Otherwise background is flood-filled
    from the four corner pixels: a pixel joins a corner's background
    region when it is 4-connected to that corner and its max per-channel
    RGB distance to the corner's color is at most ``tolerance``. The
    mask is the complement of the union of the four regions.

    Raises EmptyMask when no product pixel remains, e.g. for a uniform
    image; callers serve the original image and flag for human review.
    """
    px = image.pixels
    alpha = px[:, :, 3]
    if bool((alpha < 255).any()):
        bits = alpha >= 128
        if not bits.any():
            raise EmptyMask("alpha channel marks no product pixels")
        return BitMask(bits)

    rgb = px[:, :, :3].astype(np.int16)
    h, w = rgb.shape[:2]
    background = np.zeros((h, w), dtype=bool)
    for cy, cx in ((0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)):
        seed = rgb[cy, cx]
        similar = np.abs(rgb - seed).max(axis=2) <= tolerance
        labels, _ = ndimage.label(similar)
        background |= labels == labels[cy, cx]
    bits = ~background
    if not bits.any():
        raise EmptyMask("flood fill from corners consumed the whole image")
    return BitMask(bits)


def bounding_box(mask: BitMask) -> Box:
    """Tightest rectangle containing all true bits."""
    ys, xs = np.nonzero(mask.bits)
    if ys.size == 0:
        raise EmptyMask("mask has no true bits")
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return Box(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _resize_rgba(arr: np.ndarray, w: int, h: int) -> np.ndarray:
    if arr.shape[1] == w and arr.shape[0] == h:
        return arr
    pil = Image.fromarray(np.ascontiguousarray(arr), "RGBA")
    return np.asarray(pil.resize((w, h), Image.BILINEAR), dtype=np.uint8)


def _resize_mask(bits: np.ndarray, w: int, h: int) -> np.ndarray:
    if bits.shape[1] == w and bits.shape[0] == h:
        return bits
    pil = Image.fromarray(np.where(bits, 255, 0).astype(np.uint8), "L")
    return np.asarray(pil.resize((w, h), Image.NEAREST), dtype=np.uint8) >= 128


def layout_product(
    image: RasterImage,
    mask: BitMask,
    placement: PlacementSpec,
    cfg: LayoutConfig = LayoutConfig(),
) -> tuple[RasterImage, BitMask]:
    """Position and scale the product on a placement-sized canvas.

    The mask bounding box is cropped out of the image, scaled by

        s = min(max_fill * W / bbox.w, max_fill * H / bbox.h, max_upscale)

    with aspect ratio preserved (image bilinear, mask nearest-neighbor),
    and placed so the scaled box center x is ``anchor_x * W`` and its
    bottom is ``baseline_y * H``, clamped fully inside the canvas.
    Pixels outside the scaled mask are the configured background, so any
    original background is removed.
    """
    if (mask.width, mask.height) != (image.width, image.height):
        raise DimensionMismatch(
            f"mask {mask.width}x{mask.height} vs image {image.width}x{image.height}"
        )
    bbox = bounding_box(mask)
    W, H = placement.width, placement.height
    s = min(
        cfg.max_fill_fraction * W / bbox.w,
        cfg.max_fill_fraction * H / bbox.h,
        cfg.max_upscale,
    )
    if s <= 0:
        raise DegenerateScale(f"scale {s} for bbox {bbox} on {W}x{H}")
    sw = max(1, _round_half_away(bbox.w * s))
    sh = max(1, _round_half_away(bbox.h * s))

    crop_img = image.pixels[bbox.y : bbox.y + bbox.h, bbox.x : bbox.x + bbox.w]
    crop_bits = mask.bits[bbox.y : bbox.y + bbox.h, bbox.x : bbox.x + bbox.w]
    scaled_img = _resize_rgba(crop_img, sw, sh)
    scaled_bits = _resize_mask(crop_bits, sw, sh)
    if not scaled_bits.any():
        # Can only happen for pathologically sparse masks under heavy downscale.
        raise EmptyMask("mask vanished during resampling")

    left = _round_half_away(cfg.anchor_x * W - sw / 2)
    top = _round_half_away(cfg.baseline_y * H - sh)
    left = min(max(left, 0), W - sw)
    top = min(max(top, 0), H - sh)

    if cfg.background == "white":
        canvas = np.full((H, W, 4), 255, dtype=np.uint8)
    else:
        canvas = np.zeros((H, W, 4), dtype=np.uint8)
    canvas_bits = np.zeros((H, W), dtype=bool)

    region = canvas[top : top + sh, left : left + sw]
    region[scaled_bits] = scaled_img[scaled_bits]
    canvas_bits[top : top + sh, left : left + sw] = scaled_bits
    return RasterImage(canvas), BitMask(canvas_bits)


def compute_edges(
    canvas: RasterImage,
    canvas_mask: BitMask | None = None,
    reinforce: bool = False,
) -> EdgeMap:
    """3x3 Sobel magnitude of the canvas luma, optionally mask-reinforced.

    luma = round(0.299 R + 0.587 G + 0.114 B); gradients use replicate
    padding; magnitude = min(255, round(sqrt(Gx^2 + Gy^2) / 4)). With
    ``reinforce``, every mask-boundary pixel (a true bit with a false
    4-neighbor, or on the canvas border) is forced to 255.
    """
    if canvas_mask is not None and (
        (canvas_mask.width, canvas_mask.height) != (canvas.width, canvas.height)
    ):
        raise DimensionMismatch(
            f"mask {canvas_mask.width}x{canvas_mask.height}"
            f" vs canvas {canvas.width}x{canvas.height}"
        )
    rgb = canvas.pixels[:, :, :3].astype(np.float64)
    luma = np.floor(
        0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2] + 0.5
    ).astype(np.int32)

    p = np.pad(luma, 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    gx = dx[:-2, :] + 2 * dx[1:-1, :] + dx[2:, :]
    dy = p[2:, :] - p[:-2, :]
    gy = dy[:, :-2] + 2 * dy[:, 1:-1] + dy[:, 2:]
    mag = np.sqrt(gx.astype(np.float64) ** 2 + gy.astype(np.float64) ** 2) / 4.0
    mag = np.minimum(255, np.floor(mag + 0.5)).astype(np.uint8)

    if reinforce and canvas_mask is not None:
        m = canvas_mask.bits
        padded = np.pad(m, 1, constant_values=False)
        all_neighbors_true = (
            padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
        )
        boundary = m & ~all_neighbors_true
        mag = mag.copy()
        mag[boundary] = 255
    return EdgeMap(mag)


def composite_product(
    generated: RasterImage, canvas: RasterImage, canvas_mask: BitMask
) -> RasterImage:
    """Cut the original product back onto the generated image.

    Mask-true pixels take the canvas RGB byte-for-byte with alpha forced
    to 255; mask-false pixels take the generated pixel unchanged. The
    product is never modified, so there is no feathering at the seam.
    """
    dims = (generated.width, generated.height)
    if (canvas.width, canvas.height) != dims or (canvas_mask.width, canvas_mask.height) != dims:
        raise DimensionMismatch("generated, canvas and mask must share dimensions")
    out = generated.pixels.copy()
    sel = canvas_mask.bits
    out[sel, :3] = canvas.pixels[sel, :3]
    out[sel, 3] = 255
    return RasterImage(out)


def aspect_bucket(
    placement: PlacementSpec, log_width: float = DEFAULT_BUCKET_LOG_WIDTH
) -> BucketId:
    """Group placements with similar aspect ratios into one bucket."""
    index = _round_half_away(math.log2(placement.width / placement.height) / log_width)
    return bucket_from_index(index, log_width)


def bucket_from_index(index: int, log_width: float = DEFAULT_BUCKET_LOG_WIDTH) -> BucketId:
    """Canonical generation dimensions for a bucket index.

    Width is 512 * 2^(index * log_width) rounded to the nearest multiple
    of 8 and clamped to [256, 1024]; height is fixed at 512 so diffusion
    backends always see /8-divisible dimensions.
    """
    raw = CANONICAL_HEIGHT * 2.0 ** (index * log_width)
    width = 8 * _round_half_away(raw / 8)
    width = min(MAX_CANONICAL_WIDTH, max(MIN_CANONICAL_WIDTH, width))
    return BucketId(index=index, canonical_width=width, canonical_height=CANONICAL_HEIGHT)


def resize_bilinear(image: RasterImage, width: int, height: int) -> RasterImage:
    """Bilinear resize; identity when dimensions already match."""
    return RasterImage(_resize_rgba(image.pixels, width, height))
