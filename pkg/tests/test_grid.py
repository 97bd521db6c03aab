import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ringlab.grid import (DimensionError, SymmetryError, block_dct, block_dct_quantize,
                          convolve_gaussian, crop_rescale, fft2, gaussian_kernel, ifft2,
                          mirror_index, quant_table, rotate90_periodic, rotate_bilinear)


def naive_dft2(g):
    """O(N^4) direct DFT, centered like fft2."""
    h, w = g.shape
    u = np.arange(h)[:, None, None, None]
    v = np.arange(w)[None, :, None, None]
    i = np.arange(h)[None, None, :, None]
    j = np.arange(w)[None, None, None, :]
    kern = np.exp(-2j * np.pi * (u * i / h + v * j / w))
    s = (kern * g[None, None]).sum(axis=(2, 3))
    return np.fft.fftshift(s)


def test_fft_constant_is_dc_only():
    s = fft2(np.full((32, 32), 0.37))
    assert s[16, 16] == pytest.approx(1024 * 0.37, abs=1e-9)
    s[16, 16] = 0
    assert np.max(np.abs(s)) < 1e-9


def test_fft_matches_naive_dft(rng):
    for _ in range(5):
        g = rng.standard_normal((8, 8))
        assert np.max(np.abs(fft2(g) - naive_dft2(g))) <= 1e-9


def test_parseval_against_naive(rng):
    for _ in range(100):
        g = rng.standard_normal((8, 8))
        lhs = np.sum(g ** 2)
        rhs = np.sum(np.abs(naive_dft2(g)) ** 2) / 64
        assert abs(lhs - rhs) <= 1e-9 * lhs
        assert abs(lhs - np.sum(np.abs(fft2(g)) ** 2) / 64) <= 1e-9 * lhs


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (16, 16), elements=st.floats(-1e3, 1e3)))
def test_fft_round_trip(g):
    assert np.max(np.abs(ifft2(fft2(g)) - g)) <= 1e-10 * max(1.0, np.max(np.abs(g)))


def test_spectrum_round_trip_hermitian(rng):
    s = fft2(rng.standard_normal((32, 32)))
    assert np.max(np.abs(fft2(ifft2(s)) - s)) <= 1e-10 * np.max(np.abs(s))


def test_single_conjugate_pair_is_cosine():
    h = w = 16
    u, v = 3, 2
    s = np.zeros((h, w), complex)
    s[h // 2 + u, w // 2 + v] = 0.5 * h * w
    s[h // 2 - u, w // 2 - v] = 0.5 * h * w
    g = ifft2(s)
    i, j = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    assert np.allclose(g, np.cos(2 * np.pi * (u * i / h + v * j / w)), atol=1e-12)


def test_non_hermitian_rejected():
    s = np.zeros((16, 16), complex)
    s[10, 11] = 1j
    with pytest.raises(SymmetryError):
        ifft2(s)


def test_mirror_index_is_involution():
    i, j = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    mi, mj = mirror_index(8, 8, i, j)
    mmi, mmj = mirror_index(8, 8, mi, mj)
    assert np.array_equal(mmi, i) and np.array_equal(mmj, j)


def test_fft_rejects_non_power_of_two():
    with pytest.raises(DimensionError):
        fft2(np.zeros((12, 16)))


def test_blur_constant_and_impulse():
    c = np.full((32, 32), 0.42)
    assert np.allclose(convolve_gaussian(c, 4), c, atol=1e-12)
    imp = np.zeros((32, 32))
    imp[16, 16] = 1
    out = convolve_gaussian(imp, 4)
    assert out.sum() == pytest.approx(1.0, abs=1e-9)
    k = gaussian_kernel(4)
    h = len(k) // 2
    assert np.allclose(out[16 - h:16 + h + 1, 16 - h:16 + h + 1], np.outer(k, k), atol=1e-15)


def test_blur_matches_direct_convolution(rng):
    g = rng.random((32, 32))
    k2 = np.outer(gaussian_kernel(4), gaussian_kernel(4))
    h = k2.shape[0] // 2
    p = np.pad(g, h, mode="reflect")
    direct = np.zeros_like(g)
    for a in range(k2.shape[0]):
        for b in range(k2.shape[1]):
            direct += k2[a, b] * p[a:a + 32, b:b + 32]
    assert np.max(np.abs(convolve_gaussian(g, 4) - direct)) <= 1e-10


def test_blur_preserves_shape_and_batch(rng):
    g = rng.random((3, 32, 32))
    out = convolve_gaussian(g, 2)
    assert out.shape == g.shape
    assert np.allclose(out[1], convolve_gaussian(g[1], 2))


def test_rotate_identities(rng):
    g = rng.random((32, 32))
    assert np.array_equal(rotate_bilinear(g, 0), g)
    assert np.allclose(rotate_bilinear(g, 360), g, atol=1e-9)
    quarter = g
    for _ in range(4):
        quarter = rotate_bilinear(quarter, 90)
    assert np.allclose(quarter, g, atol=1e-9)
    # a quarter turn about the geometric center is a transpose-and-flip
    assert np.allclose(rotate_bilinear(g, 90), np.rot90(g, 1), atol=1e-9) or \
        np.allclose(rotate_bilinear(g, 90), np.rot90(g, -1), atol=1e-9)


def test_rotate_radial_pattern_bound():
    n = 32
    c = (n - 1) / 2
    y, x = np.meshgrid(np.arange(n) - c, np.arange(n) - c, indexing="ij")
    r = np.hypot(y, x)
    g = 0.5 + 0.5 * np.cos(r / 3.0)
    out = rotate_bilinear(g, 75)
    inside = r <= c - 1  # the mean fill only touches corners swept outside the grid
    assert np.max(np.abs(out - g)[inside]) <= 0.05 * (g.max() - g.min())


def test_rotate90_periodic_is_permutation(rng):
    g = rng.random((16, 16))
    out = rotate90_periodic(g)
    assert np.array_equal(np.sort(out.ravel()), np.sort(g.ravel()))
    assert np.array_equal(rotate90_periodic(out, 3), g)


def test_crop_identity_and_constant(rng):
    g = rng.random((32, 32))
    assert np.array_equal(crop_rescale(g, 1.0), g)
    c = np.full((32, 32), 0.3)
    for f in (0.25, 0.5, 0.75):
        assert np.allclose(crop_rescale(c, f), c, atol=1e-12)


def test_crop_ramp_slope():
    n = 32
    ramp = np.tile(np.arange(n, dtype=float), (n, 1)) / n  # slope 1/n per column
    out = crop_rescale(ramp, 0.75)
    band = 2
    core = out[:, band:n - band]
    slope = np.diff(core, axis=1).mean()
    sh = math.floor(math.sqrt(0.75) * n)
    assert slope == pytest.approx((1 / n) * sh / n, rel=1e-9)
    assert slope == pytest.approx((1 / n) * math.sqrt(0.75), rel=0.05)
    # the centre of the image stays put
    assert np.mean(out[:, n // 2 - 1:n // 2 + 1]) == pytest.approx(np.mean(ramp[:, n // 2 - 1:n // 2 + 1]),
                                                                    abs=1.5 / n)


def test_jpeg_q100_near_lossless():
    n = 32
    y, x = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    g = 0.5 + 0.3 * np.cos(2 * np.pi * x / n) * np.sin(2 * np.pi * y / n) + 0.1 * np.cos(np.pi * (x + 2 * y) / n)
    assert np.max(np.abs(block_dct_quantize(g, 100) - g)) <= 1 / 255


def test_jpeg_q100_white_noise_rms(rng):
    # unit-step rounding of 64 orthonormal coefficients: per-pixel std 1/sqrt(12) gray levels
    g = rng.random((64, 64))
    err = (block_dct_quantize(g, 100) - g) * 255
    assert np.sqrt(np.mean(err ** 2)) == pytest.approx(1 / math.sqrt(12), rel=0.1)


def test_jpeg_constant_block():
    q = quant_table(25)[0, 0]
    # DC of an 8x8 constant block on the 0..255 scale is 8 * (255 c - 128)
    c_exact = (128 + q * 3 / 8) / 255
    g = np.full((8, 8), c_exact)
    assert np.allclose(block_dct_quantize(g, 25), g, atol=1e-12)
    g2 = np.full((16, 16), 0.4)
    step = q / 8 / 255
    assert np.max(np.abs(block_dct_quantize(g2, 25) - g2)) <= step / 2 + 1e-12


def test_jpeg_energy_loss_matches_scalar_quantizer(rng):
    g = rng.random((16, 16)) * 0.5 + 0.25  # stays clear of the clamp
    q = quant_table(25)
    c = block_dct(g)
    expected = np.sum((c - q * np.round(c / q)) ** 2)
    out = block_dct_quantize(g, 25)
    assert np.all((out > 0) & (out < 1))
    loss = np.sum(((out - g) * 255) ** 2)  # orthonormal DCT: pixel loss equals coefficient loss
    assert loss == pytest.approx(expected, rel=1e-9)
    per_block = np.sum((block_dct(out) - c) ** 2, axis=(-2, -1))
    assert per_block.shape == (2, 2)


def test_jpeg_rejects_bad_input():
    with pytest.raises(DimensionError):
        block_dct_quantize(np.zeros((12, 16)), 50)
    with pytest.raises(ValueError):
        quant_table(0)
