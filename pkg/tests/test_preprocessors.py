import numpy as np
import pytest
import pywt
from hypothesis import given, settings
from hypothesis import strategies as st

from cama import preprocessors as pp
from cama.errors import ShapeError
from cama.preprocessors import PreprocessorKind
from oracles import circular_dwt_1d, correlate_loop, third_diff_loop


def test_ww_constant_image_zero():
    x = np.full((64, 48, 3), 0.37)
    assert np.abs(pp.ww_residual(x)).max() < 1e-9


@pytest.mark.filterwarnings("ignore:Level value")
def test_ww_white_noise_large_sigma(rng):
    x = rng.normal(0.5, 0.05, size=(64, 64, 3))
    res = pp.ww_residual(x, sigma0=10.0)
    detail_energy = 0.0
    for c in range(3):
        coeffs = pywt.wavedec2(x[..., c], "db8", mode="periodization", level=4)
        detail_energy += sum(float(np.sum(d**2)) for level in coeffs[1:] for d in level)
    assert np.sum(res**2) >= 0.95 * detail_energy
    # with details suppressed the residual is the input minus its approximation band
    assert np.sum(res**2) <= 1.0001 * detail_energy


def test_single_level_dwt_matches_convolution_oracle():
    x = np.array([0.1, 0.7, 0.3, 0.9, 0.2, 0.5, 0.8, 0.4])
    w = pywt.Wavelet(pp.WW_WAVELET)
    approx, detail = pywt.dwt(x, w, mode="periodization")
    o_approx, o_detail = circular_dwt_1d(x, w.dec_lo, w.dec_hi)
    np.testing.assert_allclose(approx, o_approx, atol=1e-10)
    np.testing.assert_allclose(detail, o_detail, atol=1e-10)


def test_ww_rejects_small_and_bad_sigma(rng):
    with pytest.raises(ShapeError):
        pp.ww_residual(rng.random((16, 64, 3)))
    with pytest.raises(ValueError):
        pp.ww_residual(rng.random((32, 32, 3)), sigma0=0.0)


def test_ww_suppresses_content_keeps_noise(rng):
    yy, xx = np.mgrid[0:64, 0:64] / 64.0
    smooth = 0.3 + 0.4 * np.stack([xx, yy, xx * yy], axis=-1)
    noise = rng.normal(0, 0.02, size=smooth.shape)
    res = pp.ww_residual(smooth + noise)
    assert np.corrcoef(res.ravel(), noise.ravel())[0, 1] > 0.8


def test_hp_constant_zero_and_impulse():
    np.testing.assert_allclose(pp.hp_residual(np.full((9, 9, 3), 0.4)), 0.0, atol=1e-15)
    x = np.zeros((9, 9, 3))
    x[4, 4, :] = 1.0
    out = pp.hp_residual(x)
    # correlation of an impulse yields the flipped kernel; this kernel is symmetric
    np.testing.assert_allclose(out[2:7, 2:7, 0], pp.HP_KERNEL[::-1, ::-1], atol=1e-15)
    assert np.abs(out[:2]).max() == 0


def test_hp_matches_loop(rng):
    x = rng.random((7, 7, 3))
    out = pp.hp_residual(x)
    for c in range(3):
        np.testing.assert_allclose(out[..., c], correlate_loop(x[..., c], pp.HP_KERNEL), atol=1e-12)


def test_fd_constant_and_linear():
    np.testing.assert_allclose(pp.fd_residual(np.full((8, 8, 3), 0.2)), 0.0, atol=1e-15)
    ramp = np.tile((np.arange(10) * 0.05)[None, :, None], (6, 1, 3))
    out = pp.fd_residual(ramp)
    np.testing.assert_allclose(out[:, 1:-2], 0.0, atol=1e-12)


def test_fd_cubic_row():
    row = np.arange(10, dtype=float) ** 3
    x = np.tile(row[None, :, None], (6, 1, 3))
    out = pp.fd_residual(x)
    # horizontal third difference is 6 per unit step; the vertical one vanishes, so the mean is 3
    np.testing.assert_allclose(out[:, 1:-2], 3.0, atol=1e-9)
    for c in range(3):
        np.testing.assert_allclose(out[..., c], third_diff_loop(x[..., c]), atol=1e-9)


def test_fd_too_small():
    with pytest.raises(ShapeError):
        pp.fd_residual(np.zeros((3, 8, 3)))


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.random((8, 8, 3)), r.random((8, 8, 3))
    for fn in (pp.hp_residual, pp.fd_residual):
        np.testing.assert_allclose(fn(a * x + b * y), a * fn(x) + b * fn(y), atol=1e-10)


def test_hp_content_suppression(rng):
    from scipy import ndimage

    x = ndimage.gaussian_filter(rng.random((64, 64, 3)), sigma=(3, 3, 0))
    ratio = np.sum(pp.hp_residual(x) ** 2) / np.sum((x - x.mean()) ** 2)
    assert ratio < 1


def test_apply_preprocessor_dispatch(rng):
    x = rng.random((32, 32, 3))
    np.testing.assert_array_equal(pp.apply_preprocessor("RGB", x), x)
    np.testing.assert_array_equal(pp.apply_preprocessor("WW", x), pp.ww_residual(x, pp.WW_SIGMA0))
    np.testing.assert_array_equal(pp.apply_preprocessor("HP", x), pp.hp_residual(x))
    np.testing.assert_array_equal(pp.apply_preprocessor("CC", x), x)
    const = np.full((16, 16, 3), 0.3)
    both = pp.apply_preprocessor("RGB+FD", const)
    assert both.shape == (16, 16, 6)
    np.testing.assert_array_equal(both[..., :3], 0.3)
    np.testing.assert_allclose(both[..., 3:], 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        pp.apply_preprocessor("SRM", x)


def test_kind_channels():
    assert PreprocessorKind.RGB_FD.channels == 6
    assert all(k.channels == 3 for k in PreprocessorKind if k is not PreprocessorKind.RGB_FD)


def test_frequency_split(rng):
    x = rng.random((32, 32, 3))
    zero = pp.frequency_split(x, np.zeros_like)
    np.testing.assert_array_equal(zero.high, 0)
    np.testing.assert_array_equal(zero.low, x)
    ident = pp.frequency_split(x, lambda a: a.copy())
    np.testing.assert_array_equal(ident.low, 0)
    ww = pp.frequency_split(x, pp.ww_residual)
    assert np.all(np.abs(ww.high + ww.low - x) <= np.spacing(np.abs(x)))
    with pytest.raises(ShapeError):
        pp.frequency_split(x, lambda a: a[:8])


def test_residual_dump_roundtrip(tmp_path, rng):
    r = rng.normal(size=(5, 7, 3))
    pp.write_residual(tmp_path / "r.bin", r)
    raw = (tmp_path / "r.bin").read_bytes()
    assert np.frombuffer(raw[:12], dtype="<i4").tolist() == [5, 7, 3]
    np.testing.assert_array_equal(pp.read_residual(tmp_path / "r.bin"), r.astype(np.float32))
