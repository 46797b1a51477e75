import numpy as np
import pytest

from cama import kernels
from oracles import correlate_loop, wiener_loop

BACKEND_NAMES = sorted(kernels.BACKENDS)


@pytest.fixture(params=BACKEND_NAMES)
def impl(request):
    return kernels.BACKENDS[request.param]


def test_compiled_backend_is_built():
    # the build ships the extension; the fallback exists for environments without a compiler
    assert "compiled" in kernels.BACKENDS


def test_bilinear_fill_keeps_known_sites(impl, rng):
    values = rng.random((6, 8))
    mask = (rng.random((6, 8)) > 0.5).astype(float)
    mask[0, 0] = 1.0
    out = impl.bilinear_fill(values, mask)
    np.testing.assert_array_equal(out[mask == 1], values[mask == 1])


def test_correlate_matches_loop(impl, rng):
    plane = rng.random((7, 9))
    kernel = rng.normal(size=(5, 3))
    np.testing.assert_allclose(impl.correlate_replicate(plane, kernel), correlate_loop(plane, kernel), atol=1e-12)


def test_correlate_rejects_even_kernel(impl):
    with pytest.raises(ValueError):
        impl.correlate_replicate(np.zeros((4, 4)), np.zeros((2, 3)))


def test_wiener_matches_loop(impl, rng):
    band = rng.normal(scale=0.05, size=(10, 12))
    noise_var = 0.02**2
    np.testing.assert_allclose(
        impl.wiener_shrink(band, noise_var, (3, 5, 7, 9)), wiener_loop(band, noise_var, (3, 5, 7, 9)), atol=1e-12
    )


def test_backends_agree(rng):
    plane = rng.random((16, 16))
    mask = np.zeros((16, 16))
    mask[::2, ::2] = 1
    fb, cy = kernels.BACKENDS["python"], kernels.BACKENDS.get("compiled", kernels.BACKENDS["python"])
    np.testing.assert_allclose(fb.bilinear_fill(plane, mask), cy.bilinear_fill(plane, mask), atol=1e-12)
    np.testing.assert_allclose(
        fb.wiener_shrink(plane - 0.5, 1e-3, (3, 5)), cy.wiener_shrink(plane - 0.5, 1e-3, (3, 5)), atol=1e-12
    )
