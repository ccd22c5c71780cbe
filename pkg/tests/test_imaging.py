import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from creativegen.imaging import (
    BitMask,
    Box,
    DegenerateScale,
    DimensionMismatch,
    EmptyMask,
    LayoutConfig,
    PlacementSpec,
    RasterImage,
    aspect_bucket,
    bounding_box,
    bucket_from_index,
    composite_product,
    compute_edges,
    edges_png_bytes,
    extract_mask,
    image_png_bytes,
    layout_product,
    load_edges,
    load_image,
    load_mask,
    mask_png_bytes,
    resize_bilinear,
)


def solid(w, h, rgba):
    return RasterImage(np.full((h, w, 4), rgba, dtype=np.uint8))


def rect_mask(w, h, box):
    bits = np.zeros((h, w), dtype=bool)
    x, y, bw, bh = box
    bits[y : y + bh, x : x + bw] = True
    return BitMask(bits)


# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------

def oracle_bbox(bits):
    """Exhaustive scan for the tightest rectangle."""
    x0 = y0 = 10**9
    x1 = y1 = -1
    for y in range(bits.shape[0]):
        for x in range(bits.shape[1]):
            if bits[y, x]:
                x0, y0 = min(x0, x), min(y0, y)
                x1, y1 = max(x1, x), max(y1, y)
    return Box(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def oracle_composite(gen, canvas, bits):
    """Per-pixel select loop."""
    out = np.empty_like(gen)
    for y in range(gen.shape[0]):
        for x in range(gen.shape[1]):
            if bits[y, x]:
                out[y, x, :3] = canvas[y, x, :3]
                out[y, x, 3] = 255
            else:
                out[y, x] = gen[y, x]
    return out


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

def test_raster_rejects_bad_shapes():
    with pytest.raises(ValueError):
        RasterImage(np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        RasterImage(np.zeros((4, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        RasterImage(np.zeros((8193, 4, 4), dtype=np.uint8))


def test_raster_is_immutable():
    arr = np.zeros((4, 4, 4), dtype=np.uint8)
    img = RasterImage(arr)
    arr[0, 0] = 9  # mutating the source must not leak in
    assert img.pixels[0, 0, 0] == 0
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 1


def test_placement_bounds():
    with pytest.raises(ValueError):
        PlacementSpec("p", 15, 100)
    with pytest.raises(ValueError):
        PlacementSpec("p", 100, 4097)
    PlacementSpec("p", 16, 4096)


# ---------------------------------------------------------------------------
# extract_mask
# ---------------------------------------------------------------------------

def test_extract_mask_uniform_image_is_empty():
    with pytest.raises(EmptyMask):
        extract_mask(solid(64, 64, (255, 255, 255, 255)))


def test_extract_mask_red_square_on_white():
    px = np.full((64, 64, 4), 255, dtype=np.uint8)
    px[10:30, 10:30, :3] = (200, 0, 0)
    mask = extract_mask(RasterImage(px))
    # oracle: brute-force pixel comparison
    expected = np.zeros((64, 64), dtype=bool)
    for y in range(64):
        for x in range(64):
            expected[y, x] = tuple(px[y, x, :3]) == (200, 0, 0)
    assert np.array_equal(mask.bits, expected)
    assert bounding_box(mask) == Box(10, 10, 20, 20)


def test_extract_mask_alpha_path():
    px = np.zeros((32, 32, 4), dtype=np.uint8)
    px[5:20, 8:25] = (10, 20, 30, 255)
    mask = extract_mask(RasterImage(px))
    assert np.array_equal(mask.bits, px[:, :, 3] >= 128)


def test_extract_mask_alpha_path_all_transparent():
    px = np.zeros((8, 8, 4), dtype=np.uint8)
    px[:, :, 3] = 100  # non-trivial alpha but nothing reaches 128
    with pytest.raises(EmptyMask):
        extract_mask(RasterImage(px))


def test_extract_mask_tolerance():
    px = np.full((16, 16, 4), 255, dtype=np.uint8)
    px[4:8, 4:8, :3] = 250  # within default tolerance 12 of white
    with pytest.raises(EmptyMask):
        extract_mask(RasterImage(px))
    mask = extract_mask(RasterImage(px), tolerance=3)
    assert mask.bits[5, 5] and not mask.bits[0, 0]


def test_extract_mask_enclosed_hole_stays_product():
    # flood fill cannot reach a background-colored hole inside the product
    px = np.full((20, 20, 4), 255, dtype=np.uint8)
    px[4:16, 4:16, :3] = (0, 0, 200)
    px[8:12, 8:12, :3] = (255, 255, 255)
    mask = extract_mask(RasterImage(px))
    assert mask.bits[9, 9]
    assert not mask.bits[0, 0]


# ---------------------------------------------------------------------------
# bounding_box
# ---------------------------------------------------------------------------

def test_bbox_single_bit():
    bits = np.zeros((8, 8), dtype=bool)
    bits[5, 3] = True
    assert bounding_box(BitMask(bits)) == Box(3, 5, 1, 1)


def test_bbox_full():
    assert bounding_box(BitMask(np.ones((8, 10), dtype=bool))) == Box(0, 0, 10, 8)


def test_bbox_two_bits():
    bits = np.zeros((8, 10), dtype=bool)
    bits[1, 1] = True
    bits[4, 6] = True
    got = bounding_box(BitMask(bits))
    assert got == Box(1, 1, 6, 4)
    assert got == oracle_bbox(bits)


def test_bbox_empty_errors():
    with pytest.raises(EmptyMask):
        bounding_box(BitMask(np.zeros((4, 4), dtype=bool)))


def test_bbox_matches_oracle_random():
    rng = np.random.default_rng(7)
    for _ in range(20):
        bits = rng.random((12, 15)) < 0.2
        if not bits.any():
            bits[3, 4] = True
        assert bounding_box(BitMask(bits)) == oracle_bbox(bits)


# ---------------------------------------------------------------------------
# layout_product
# ---------------------------------------------------------------------------

def test_layout_three_way_min_and_anchor():
    # bbox 100x50 product on 400x400, defaults: s = min(2.4, 4.8, 2.0) = 2.0
    px = np.full((80, 120, 4), 255, dtype=np.uint8)
    px[10:60, 10:110, :3] = (0, 128, 0)
    img = RasterImage(px)
    mask = rect_mask(120, 80, (10, 10, 100, 50))
    canvas, canvas_mask = layout_product(img, mask, PlacementSpec("p", 400, 400))
    got = bounding_box(canvas_mask)
    # scaled bbox 200x100, center x = 200, bottom y = 280
    assert got == Box(100, 180, 200, 100)


def test_layout_identity():
    rng = np.random.default_rng(3)
    px = rng.integers(0, 256, (100, 100, 4), dtype=np.uint8)
    px[:, :, 3] = 255
    img = RasterImage(px)
    mask = BitMask(np.ones((100, 100), dtype=bool))
    cfg = LayoutConfig(max_fill_fraction=1.0, max_upscale=1.0, anchor_x=0.5, baseline_y=1.0)
    canvas, canvas_mask = layout_product(img, mask, PlacementSpec("p", 100, 100), cfg)
    assert np.array_equal(canvas.pixels, img.pixels)
    assert canvas_mask.bits.all()


def test_layout_downscale():
    # bbox 50x100 on 200x100: s = min(2.4, 0.6, 2.0) = 0.6 -> 30x60
    px = np.full((100, 50, 4), 255, dtype=np.uint8)
    px[:, :, :3] = (10, 10, 10)
    mask = BitMask(np.ones((100, 50), dtype=bool))
    canvas, canvas_mask = layout_product(
        RasterImage(px), mask, PlacementSpec("p", 200, 100)
    )
    box = bounding_box(canvas_mask)
    assert (box.w, box.h) == (30, 60)
    # center x = 100, bottom y = 70
    assert box == Box(85, 10, 30, 60)


def test_layout_background_fill():
    px = np.full((10, 10, 4), 255, dtype=np.uint8)
    px[:, :, :3] = (5, 5, 5)
    img = RasterImage(px)
    mask = BitMask(np.ones((10, 10), dtype=bool))
    canvas_t, cm = layout_product(img, mask, PlacementSpec("p", 64, 64))
    assert tuple(canvas_t.pixels[0, 0]) == (0, 0, 0, 0)
    cfg = LayoutConfig(background="white")
    canvas_w, _ = layout_product(img, mask, PlacementSpec("p", 64, 64), cfg)
    assert tuple(canvas_w.pixels[0, 0]) == (255, 255, 255, 255)


def test_layout_mask_mismatch():
    img = solid(10, 10, (1, 2, 3, 255))
    with pytest.raises(DimensionMismatch):
        layout_product(img, BitMask(np.ones((5, 5), dtype=bool)), PlacementSpec("p", 64, 64))


@settings(max_examples=60, deadline=None)
@given(
    bw=st.integers(1, 60),
    bh=st.integers(1, 60),
    pw=st.integers(16, 300),
    ph=st.integers(16, 300),
    fill=st.floats(0.1, 1.0),
    ax=st.floats(0.0, 1.0),
    by=st.floats(0.0, 1.0),
)
def test_layout_never_crops_and_caps_scale(bw, bh, pw, ph, fill, ax, by):
    px = np.full((bh + 4, bw + 4, 4), 255, dtype=np.uint8)
    px[2 : 2 + bh, 2 : 2 + bw, :3] = (200, 30, 30)
    img = RasterImage(px)
    mask = rect_mask(bw + 4, bh + 4, (2, 2, bw, bh))
    cfg = LayoutConfig(max_fill_fraction=fill, anchor_x=ax, baseline_y=by)
    canvas, canvas_mask = layout_product(img, mask, PlacementSpec("p", pw, ph), cfg)
    box = bounding_box(canvas_mask)
    # never crops
    assert box.x >= 0 and box.y >= 0
    assert box.x + box.w <= pw and box.y + box.h <= ph
    # scale cap, up to 1-pixel rounding
    s = min(fill * pw / bw, fill * ph / bh, cfg.max_upscale)
    assert box.w <= bw * s + 1 and box.h <= bh * s + 1
    assert box.w <= fill * pw + 1 and box.h <= fill * ph + 1
    # mask/image co-transformation: realized box within 1px per edge of prediction
    sw, sh = max(1, round(bw * s)), max(1, round(bh * s))
    assert abs(box.w - sw) <= 2 and abs(box.h - sh) <= 2


def test_layout_mask_idempotent_through_alpha():
    # transparent-background canvas re-extracts to exactly the canvas mask
    rng = np.random.default_rng(11)
    px = rng.integers(0, 256, (40, 60, 4), dtype=np.uint8)
    px[:, :, 3] = 255
    img = RasterImage(px)
    mask = rect_mask(60, 40, (5, 8, 30, 20))
    canvas, canvas_mask = layout_product(img, mask, PlacementSpec("p", 128, 128))
    again = extract_mask(canvas)
    assert np.array_equal(again.bits, canvas_mask.bits)


# ---------------------------------------------------------------------------
# compute_edges
# ---------------------------------------------------------------------------

def test_edges_constant_is_zero():
    edges = compute_edges(solid(32, 24, (77, 77, 77, 255)))
    assert not edges.magnitude.any()


def test_edges_vertical_step():
    px = np.zeros((16, 64, 4), dtype=np.uint8)
    px[:, 32:, :3] = 255
    px[:, :, 3] = 255
    edges = compute_edges(RasterImage(px))
    # hand-evaluated 3x3 Sobel at the step: |Gx| = 4*255 = 1020 -> 1020/4 = 255
    assert (edges.magnitude[:, 31] == 255).all()
    assert (edges.magnitude[:, 32] == 255).all()
    assert (edges.magnitude[:, :30] == 0).all()
    assert (edges.magnitude[:, 34:] == 0).all()


def test_edges_reinforce_square_perimeter():
    canvas = solid(32, 32, (128, 128, 128, 255))
    mask = rect_mask(32, 32, (10, 10, 10, 10))
    edges = compute_edges(canvas, mask, reinforce=True)
    boundary = edges.magnitude == 255
    assert boundary.sum() == 36
    assert boundary[10, 10] and boundary[19, 19] and boundary[10, 15]
    assert not boundary[15, 15]


def test_edges_reinforce_includes_canvas_border():
    canvas = solid(8, 8, (0, 0, 0, 255))
    mask = BitMask(np.ones((8, 8), dtype=bool))
    edges = compute_edges(canvas, mask, reinforce=True)
    assert (edges.magnitude[0, :] == 255).all()
    assert edges.magnitude[4, 4] == 0


def test_edges_reinforcement_only_raises():
    rng = np.random.default_rng(5)
    px = rng.integers(0, 256, (24, 24, 4), dtype=np.uint8)
    img = RasterImage(px)
    mask = BitMask(rng.random((24, 24)) < 0.4)
    plain = compute_edges(img)
    reinforced = compute_edges(img, mask, reinforce=True)
    assert (reinforced.magnitude >= plain.magnitude).all()


def test_edges_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        compute_edges(solid(8, 8, (0, 0, 0, 255)), BitMask(np.ones((4, 4), dtype=bool)))


# ---------------------------------------------------------------------------
# composite_product
# ---------------------------------------------------------------------------

def test_composite_all_true():
    gen = solid(8, 8, (1, 2, 3, 77))
    canvas = solid(8, 8, (9, 8, 7, 10))
    out = composite_product(gen, canvas, BitMask(np.ones((8, 8), dtype=bool)))
    assert (out.pixels[:, :, :3] == (9, 8, 7)).all()
    assert (out.pixels[:, :, 3] == 255).all()


def test_composite_all_false():
    gen = solid(8, 8, (1, 2, 3, 77))
    canvas = solid(8, 8, (9, 8, 7, 10))
    out = composite_product(gen, canvas, BitMask(np.zeros((8, 8), dtype=bool)))
    assert np.array_equal(out.pixels, gen.pixels)


def test_composite_mixed_matches_oracle():
    rng = np.random.default_rng(13)
    gen = rng.integers(0, 256, (10, 12, 4), dtype=np.uint8)
    canvas = rng.integers(0, 256, (10, 12, 4), dtype=np.uint8)
    bits = rng.random((10, 12)) < 0.5
    out = composite_product(RasterImage(gen), RasterImage(canvas), BitMask(bits))
    assert np.array_equal(out.pixels, oracle_composite(gen, canvas, bits))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), w=st.integers(1, 32), h=st.integers(1, 32))
def test_composite_exactness_property(seed, w, h):
    rng = np.random.default_rng(seed)
    gen = rng.integers(0, 256, (h, w, 4), dtype=np.uint8)
    canvas = rng.integers(0, 256, (h, w, 4), dtype=np.uint8)
    bits = rng.random((h, w)) < rng.random()
    out = composite_product(RasterImage(gen), RasterImage(canvas), BitMask(bits)).pixels
    assert np.array_equal(out[bits, :3], canvas[bits, :3])
    assert (out[bits, 3] == 255).all()
    assert np.array_equal(out[~bits], gen[~bits])


def test_composite_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        composite_product(
            solid(8, 8, (0, 0, 0, 255)),
            solid(9, 8, (0, 0, 0, 255)),
            BitMask(np.ones((8, 8), dtype=bool)),
        )


# ---------------------------------------------------------------------------
# aspect_bucket
# ---------------------------------------------------------------------------

def test_bucket_groups_similar_ratios():
    b1 = aspect_bucket(PlacementSpec("a", 300, 250))
    b2 = aspect_bucket(PlacementSpec("b", 336, 280))
    assert b1.index == 1  # log2(1.2)/0.2 = 1.315 -> 1
    assert b1 == b2


def test_bucket_square():
    b = aspect_bucket(PlacementSpec("sq", 250, 250))
    assert (b.index, b.canonical_width, b.canonical_height) == (0, 512, 512)


def test_bucket_leaderboard_clamps():
    b = aspect_bucket(PlacementSpec("wide", 728, 90))
    assert b.index == 15  # round(3.016 / 0.2)
    assert b.canonical_width == 1024


def test_bucket_tall_clamp_and_negative_index():
    b = aspect_bucket(PlacementSpec("tall", 300, 600))
    assert b.index == -5
    assert b.canonical_width == 256


def test_bucket_index_one_pinned_width():
    # 512 * 2^0.2 = 588.13 -> nearest multiple of 8 is 592
    assert bucket_from_index(1).canonical_width == 592


@settings(max_examples=60, deadline=None)
@given(w=st.integers(16, 1024), h=st.integers(16, 1024), k=st.integers(1, 4))
def test_bucket_invariant_under_uniform_scale(w, h, k):
    if w * k > 4096 or h * k > 4096:
        return
    a = aspect_bucket(PlacementSpec("a", w, h))
    b = aspect_bucket(PlacementSpec("b", w * k, h * k))
    assert a == b


@settings(max_examples=60, deadline=None)
@given(w=st.integers(16, 4096), h=st.integers(16, 4096))
def test_bucket_canonical_dims_valid(w, h):
    b = aspect_bucket(PlacementSpec("p", w, h))
    assert b.canonical_width % 8 == 0
    assert 256 <= b.canonical_width <= 1024
    assert b.canonical_height == 512


# ---------------------------------------------------------------------------
# PNG round trips
# ---------------------------------------------------------------------------

def test_image_png_roundtrip():
    rng = np.random.default_rng(21)
    px = rng.integers(0, 256, (20, 30, 4), dtype=np.uint8)
    img = RasterImage(px)
    again = load_image(image_png_bytes(img))
    assert np.array_equal(again.pixels, px)


def test_mask_png_roundtrip():
    bits = np.random.default_rng(22).random((15, 9)) < 0.5
    again = load_mask(mask_png_bytes(BitMask(bits)))
    assert np.array_equal(again.bits, bits)


def test_edges_png_roundtrip():
    mag = np.random.default_rng(23).integers(0, 256, (11, 13), dtype=np.uint8)
    from creativegen.imaging import EdgeMap

    again = load_edges(edges_png_bytes(EdgeMap(mag)))
    assert np.array_equal(again.magnitude, mag)


def test_resize_bilinear_identity():
    rng = np.random.default_rng(24)
    img = RasterImage(rng.integers(0, 256, (16, 16, 4), dtype=np.uint8))
    out = resize_bilinear(img, 16, 16)
    assert np.array_equal(out.pixels, img.pixels)
    assert resize_bilinear(img, 8, 4).pixels.shape == (4, 8, 4)
