import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cama import imaging
from cama.errors import ImageFormatError, ShapeError
from cama.imaging import Image, Patch
from oracles import demosaic_loop, mosaic_loop


def test_mosaic_constant():
    x = np.full((8, 8, 3), 0.3)
    np.testing.assert_array_equal(imaging.mosaic(x), np.full((8, 8), 0.3))


def test_mosaic_pure_red():
    x = np.zeros((4, 6, 3))
    x[..., 0] = 1
    plane = imaging.mosaic(x)
    expected = np.zeros((4, 6))
    expected[::2, ::2] = 1
    np.testing.assert_array_equal(plane, expected)


def test_mosaic_ramp_site_table():
    x = np.arange(48, dtype=float).reshape(4, 4, 3) / 47
    # R G / G B, written out per pixel
    table = [
        ["R", "G", "R", "G"],
        ["G", "B", "G", "B"],
        ["R", "G", "R", "G"],
        ["G", "B", "G", "B"],
    ]
    idx = {"R": 0, "G": 1, "B": 2}
    expected = np.array([[x[i, j, idx[table[i][j]]] for j in range(4)] for i in range(4)])
    np.testing.assert_array_equal(imaging.mosaic(x), expected)
    np.testing.assert_array_equal(imaging.mosaic(x), mosaic_loop(x))


def test_demosaic_constant():
    plane = imaging.mosaic(np.full((8, 8, 3), 0.6))
    np.testing.assert_allclose(imaging.demosaic_bilinear(plane), 0.6, atol=1e-15)


def test_demosaic_pure_red_interior():
    x = np.zeros((8, 8, 3))
    x[..., 0] = 1
    out = imaging.demosaic_bilinear(imaging.mosaic(x))
    np.testing.assert_array_equal(out, demosaic_loop(imaging.mosaic(x)))
    np.testing.assert_array_equal(out[1:-1, 1:-1], x[1:-1, 1:-1])


def test_demosaic_matches_oracle(rng):
    plane = rng.random((6, 6))
    np.testing.assert_allclose(imaging.demosaic_bilinear(plane), demosaic_loop(plane), atol=1e-12)


def test_demosaic_interior_classic_rules(rng):
    plane = rng.random((8, 8))
    out = imaging.demosaic_bilinear(plane)
    # green at a red site: mean of the 4-neighbourhood
    assert out[2, 2, 1] == pytest.approx((plane[1, 2] + plane[3, 2] + plane[2, 1] + plane[2, 3]) / 4)
    # red at a green site in a red row: mean of left/right
    assert out[2, 3, 0] == pytest.approx((plane[2, 2] + plane[2, 4]) / 2)
    # red at a blue site: mean of the diagonals
    assert out[3, 3, 0] == pytest.approx((plane[2, 2] + plane[2, 4] + plane[4, 2] + plane[4, 4]) / 4)


def test_demosaic_rejects_odd():
    with pytest.raises(ShapeError):
        imaging.demosaic_bilinear(np.zeros((5, 6)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (8, 10), elements=st.floats(0, 1)))
def test_mosaic_demosaic_fixed_point(plane):
    np.testing.assert_array_equal(imaging.mosaic(imaging.demosaic_bilinear(plane)), plane)


def test_remosaic(rng):
    np.testing.assert_allclose(imaging.remosaic(np.full((8, 8, 3), 0.25)), 0.25, atol=1e-15)
    x = rng.random((8, 8, 3))
    np.testing.assert_allclose(imaging.remosaic(x), demosaic_loop(mosaic_loop(x)), atol=1e-12)
    once = imaging.remosaic(x)
    np.testing.assert_array_equal(imaging.mosaic(imaging.remosaic(once)), imaging.mosaic(once))
    np.testing.assert_allclose(imaging.remosaic(once), once, atol=1e-12)


def test_remosaic_crops_odd():
    assert imaging.remosaic(np.full((9, 11, 3), 0.5)).shape == (8, 10, 3)


def test_dih4_identity_and_order(rng):
    p = Patch(rng.random((5, 5, 3)), 1)
    np.testing.assert_array_equal(imaging.dih4_apply(p, 0).pixels, p.pixels)
    q = p
    for _ in range(4):
        q = imaging.dih4_apply(q, 1)
    np.testing.assert_array_equal(q.pixels, p.pixels)


def test_dih4_rot90_convention():
    p = np.array([[1, 2], [3, 4]])
    # brute-force index map for a counter-clockwise quarter turn: out[i, j] = p[j, n-1-i]
    n = 2
    expected = np.array([[p[j, n - 1 - i] for j in range(n)] for i in range(n)])
    np.testing.assert_array_equal(expected, [[2, 4], [1, 3]])
    np.testing.assert_array_equal(imaging.dih4(p, 1), expected)


def test_dih4_closure_table():
    generic = np.arange(16).reshape(4, 4)
    images = [imaging.dih4(generic, k).tobytes() for k in range(8)]
    assert len(set(images)) == 8
    for a in range(8):
        for b in range(8):
            assert imaging.dih4(imaging.dih4(generic, a), b).tobytes() in images


def test_dih4_rejects_bad_index():
    with pytest.raises(ValueError):
        imaging.dih4(np.zeros((2, 2)), 8)


def test_extract_patches_counts(rng):
    assert len(imaging.extract_patches(np.zeros((512, 512, 3)))) == 64
    x = Image(rng.random((64, 64, 3)), label=3)
    (only,) = imaging.extract_patches(x)
    np.testing.assert_array_equal(only.pixels, x.pixels)
    assert only.label == 3
    assert imaging.extract_patches(np.zeros((63, 100, 3))) == []


def test_extract_patches_index_arithmetic(rng):
    x = rng.random((130, 70, 3))
    patches = imaging.extract_patches(x)
    assert len(patches) == 2
    np.testing.assert_array_equal(patches[1].pixels[0, 0], x[64, 0])


def test_extract_patches_partition(rng):
    x = rng.random((200, 150, 3))
    patches = imaging.extract_patches(x, 32)
    rows, cols = 200 // 32, 150 // 32
    rebuilt = np.concatenate(
        [np.concatenate([patches[r * cols + c].pixels for c in range(cols)], axis=1) for r in range(rows)], axis=0
    )
    seen = {p.pixels.tobytes() for p in patches}
    assert len(seen) == len(patches)
    np.testing.assert_array_equal(rebuilt, x[: rows * 32, : cols * 32])


def test_psnr():
    a = np.full((8, 8, 3), 0.5)
    assert imaging.psnr(a, a) == math.inf
    b = a + 4.53 / 255
    assert imaging.psnr(a, b) == pytest.approx(20 * math.log10(255 / 4.53), abs=1e-9)
    assert imaging.psnr(a, b) == pytest.approx(35.0, abs=0.01)
    assert imaging.psnr(a, b) == imaging.psnr(b, a)
    assert imaging.psnr(a, a + 0.02) < imaging.psnr(a, a + 0.01)
    with pytest.raises(ShapeError):
        imaging.psnr(a, np.zeros((8, 9, 3)))


def test_amplified_delta(rng):
    x = rng.random((8, 8, 3)) * 0.5
    np.testing.assert_array_equal(imaging.amplified_delta(x, x, 20), 0.5)
    np.testing.assert_allclose(imaging.amplified_delta(x, x + 0.25, 1.0), 0.75)
    y = rng.random((8, 8, 3))
    expected = np.array([min(max(0.5 + 20 * (b - a), 0), 1) for a, b in zip(x.ravel(), y.ravel())]).reshape(x.shape)
    np.testing.assert_allclose(imaging.amplified_delta(x, y, 20), expected)


def test_image_invariants():
    with pytest.raises(ShapeError):
        Image(np.zeros((8, 8)))
    with pytest.raises(ShapeError):
        Image(np.zeros((4, 8, 3)))
    with pytest.raises(ShapeError):
        Image(np.full((8, 8, 3), 1.5))


def test_png_roundtrip(tmp_path, rng):
    x = imaging.quantize(rng.random((16, 12, 3)))
    imaging.write_png(tmp_path / "a.png", x)
    back = imaging.read_image(tmp_path / "a.png", label=2)
    np.testing.assert_array_equal(back.pixels, x)
    assert back.label == 2


def test_quantize_round_half_up():
    assert imaging.to_uint8(np.array([[[0.5 / 255, 1.5 / 255, 2.0]]] * 1)).tolist() == [[[1, 2, 255]]]


def test_grayscale_rejected(tmp_path):
    from PIL import Image as PILImage

    PILImage.fromarray(np.zeros((8, 8), dtype=np.uint8), mode="L").save(tmp_path / "g.png")
    with pytest.raises(ImageFormatError):
        imaging.read_image(tmp_path / "g.png")
