"""Dense grid numerics: centered FFT, Gaussian blur, bilinear resampling, block DCT.

Grids are plain float64 numpy arrays whose last two axes are (H, W); any
leading axes (batch, channel) are carried through untouched.  Spectra are
complex128 arrays with the DC bin at index (H // 2, W // 2).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage


class DimensionError(ValueError):
    pass


class SymmetryError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _check_pow2(shape):
    h, w = shape[-2], shape[-1]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise DimensionError(f"grid dimensions must be powers of two, got {h}x{w}")


def fft2(g: np.ndarray) -> np.ndarray:
    """Centered, unnormalized 2-D DFT over the last two axes."""
    g = np.asarray(g, dtype=np.float64)
    _check_pow2(g.shape)
    return np.fft.fftshift(np.fft.fft2(g), axes=(-2, -1))


def ifft2(s: np.ndarray, *, tol: float = 1e-6, return_residual: bool = False):
    """Inverse of :func:`fft2`, returning the real part.

    Raises SymmetryError if the imaginary residue exceeds ``tol`` times the
    largest spectral magnitude; that only happens when a caller wrote bins
    without their Hermitian mirror.
    """
    s = np.asarray(s, dtype=np.complex128)
    _check_pow2(s.shape)
    out = np.fft.ifft2(np.fft.ifftshift(s, axes=(-2, -1)))
    residual = float(np.max(np.abs(out.imag))) if out.size else 0.0
    scale = float(np.max(np.abs(s))) if s.size else 0.0
    if residual > tol * max(scale, 1e-300):
        raise SymmetryError(
            f"inverse transform has imaginary residue {residual:.3e} "
            f"(max magnitude {scale:.3e}); spectrum is not Hermitian"
        )
    if return_residual:
        return out.real.copy(), residual
    return out.real.copy()


def centered_freq_coords(h: int, w: int):
    """Integer frequency offsets (du, dv) of every bin in a centered spectrum."""
    du = np.arange(h) - h // 2
    dv = np.arange(w) - w // 2
    return np.meshgrid(du, dv, indexing="ij")


def mirror_index(h: int, w: int, i, j):
    """Index of the Hermitian mirror of bin (i, j) in a centered spectrum."""
    return (2 * (h // 2) - np.asarray(i)) % h, (2 * (w // 2) - np.asarray(j)) % w


def gaussian_kernel(radius: float) -> np.ndarray:
    sigma = radius / 2.0
    half = int(math.ceil(3.0 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def convolve_gaussian(g: np.ndarray, radius: float) -> np.ndarray:
    """Separable Gaussian blur with sigma = radius / 2 and reflect padding."""
    if not radius > 0:
        raise ValueError("blur radius must be positive")
    g = np.asarray(g, dtype=np.float64)
    k = gaussian_kernel(radius)
    half = len(k) // 2
    pad = [(0, 0)] * (g.ndim - 2) + [(half, half), (half, half)]
    p = np.pad(g, pad, mode="reflect")
    h, w = g.shape[-2:]
    rows = sum(k[i] * p[..., i:i + h, :] for i in range(len(k)))
    return sum(k[i] * rows[..., :, i:i + w] for i in range(len(k)))


def _resample(g: np.ndarray, rr: np.ndarray, cc: np.ndarray, fill: str) -> np.ndarray:
    """Bilinear sampling of every (H, W) slice at coordinates (rr, cc)."""
    g = np.asarray(g, dtype=np.float64)
    flat = g.reshape((-1,) + g.shape[-2:])
    out = np.empty((flat.shape[0],) + rr.shape)
    for n, plane in enumerate(flat):
        if fill == "mean":
            out[n] = ndimage.map_coordinates(plane, [rr, cc], order=1, mode="constant",
                                             cval=float(plane.mean()), prefilter=False)
        else:
            out[n] = ndimage.map_coordinates(plane, [rr, cc], order=1, mode="nearest",
                                             prefilter=False)
    return out.reshape(g.shape[:-2] + rr.shape)


def rotate_bilinear(g: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the geometric grid center; uncovered samples get the plane mean."""
    g = np.asarray(g, dtype=np.float64)
    if degrees % 360 == 0:
        return g.copy()
    h, w = g.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    # snap the trig values at exact quarter turns so 90/180/270 are permutations
    c, s = round(c, 15), round(s, 15)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: source = R(-theta) @ dest
    src_y = c * yy - s * xx + cy
    src_x = s * yy + c * xx + cx
    # map_coordinates treats coordinates within 1e-12 of the border as outside
    src_y = np.where(np.abs(src_y - np.round(src_y)) < 1e-9, np.round(src_y), src_y)
    src_x = np.where(np.abs(src_x - np.round(src_x)) < 1e-9, np.round(src_x), src_x)
    return _resample(g, src_y, src_x, fill="mean")


def rotate90_periodic(g: np.ndarray, k: int = 1) -> np.ndarray:
    """Exact quarter-turn about pixel (H//2, W//2) with wraparound.

    In the centered spectrum this is a pure permutation of bins along circles,
    which is what makes ring patterns rotation invariant.
    """
    g = np.asarray(g)
    h, w = g.shape[-2:]
    if h != w:
        raise DimensionError("periodic rotation needs a square grid")
    # out[i, j] = g[j, (2c - i) mod n] with 2c = n, i.e. g[j, -i mod n]
    neg = (-np.arange(h)) % h
    out = g
    for _ in range(k % 4):
        out = np.swapaxes(out, -2, -1)[..., neg, :]
    return out.copy()


def crop_rescale(g: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Central crop covering ``keep_fraction`` of the area, bilinearly rescaled back."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    g = np.asarray(g, dtype=np.float64)
    h, w = g.shape[-2:]
    sh = int(math.floor(math.sqrt(keep_fraction) * h))
    sw = int(math.floor(math.sqrt(keep_fraction) * w))
    if sh < 4 or sw < 4:
        raise ValueError(f"crop of {sh}x{sw} px is below the 4 px minimum")
    if sh == h and sw == w:
        return g.copy()
    y0, x0 = (h - sh) // 2, (w - sw) // 2
    ys = y0 - 0.5 + (np.arange(h) + 0.5) * sh / h
    xs = x0 - 0.5 + (np.arange(w) + 0.5) * sw / w
    ys = np.clip(ys, y0, y0 + sh - 1)
    xs = np.clip(xs, x0, x0 + sw - 1)
    rr, cc = np.meshgrid(ys, xs, indexing="ij")
    return _resample(g, rr, cc, fill="edge")


JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the IJG quality law."""
    if not 1 <= int(quality) <= 100:
        raise ValueError("quality must be in 1..100")
    q = int(quality)
    scale = 5000 / q if q < 50 else 200 - 2 * q
    t = np.floor((JPEG_LUMA_TABLE * scale + 50) / 100)
    return np.clip(t, 1, 255)


def _blocks(g: np.ndarray) -> np.ndarray:
    h, w = g.shape[-2:]
    lead = g.shape[:-2]
    b = g.reshape(lead + (h // 8, 8, w // 8, 8))
    return np.moveaxis(b, -3, -2)  # (..., H/8, W/8, 8, 8)


def _unblocks(b: np.ndarray) -> np.ndarray:
    b = np.moveaxis(b, -2, -3)
    lead = b.shape[:-4]
    return b.reshape(lead + (b.shape[-4] * 8, b.shape[-2] * 8))


def block_dct(g: np.ndarray) -> np.ndarray:
    """Level-shifted orthonormal 8x8 DCT-II coefficients on the 0..255 scale."""
    g = np.asarray(g, dtype=np.float64)
    h, w = g.shape[-2:]
    if h % 8 or w % 8:
        raise DimensionError("block DCT needs dimensions that are multiples of 8")
    return sp_fft.dctn(_blocks(g * 255.0 - 128.0), axes=(-2, -1), norm="ortho")


def block_dct_quantize(g: np.ndarray, quality: int) -> np.ndarray:
    """JPEG-like lossy round trip: blockwise DCT, table quantization, inverse, clamp."""
    q = quant_table(quality)
    coef = block_dct(g)
    rec = np.round(coef / q) * q
    pix = sp_fft.idctn(rec, axes=(-2, -1), norm="ortho")
    return np.clip((_unblocks(pix) + 128.0) / 255.0, 0.0, 1.0)


def dct_basis(h: int, w: int, index_pairs) -> np.ndarray:
    """Orthonormal 2-D DCT-II basis fields for the given (u, v) frequency pairs."""
    i = np.arange(h)
    j = np.arange(w)
    out = []
    for u, v in index_pairs:
        cu = math.sqrt((1 if u == 0 else 2) / h)
        cv = math.sqrt((1 if v == 0 else 2) / w)
        out.append(np.outer(cu * np.cos(np.pi * u * (2 * i + 1) / (2 * h)),
                            cv * np.cos(np.pi * v * (2 * j + 1) / (2 * w))))
    return np.array(out)


def zigzag_pairs(count: int, skip_dc: bool = True):
    """First ``count`` (u, v) pairs ordered by u + v, then by u."""
    pairs = []
    s = 1 if skip_dc else 0
    while len(pairs) < count:
        for u in range(s + 1):
            pairs.append((u, s - u))
            if len(pairs) == count:
                break
        s += 1
    return pairs
