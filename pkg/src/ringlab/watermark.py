"""Concentric-ring watermarks in the centered spectrum.

A ring mask groups spectrum bins by radius.  Each ring carries one complex
value; writing it into a real grid means setting the ring's positive-half
bins to the value and their Hermitian mirrors to its conjugate.  The Nyquist
row and column (which are their own mirrors) are never part of a mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import GuidanceConfig
from .grid import DimensionError, centered_freq_coords, fft2, ifft2, mirror_index
from .mixture import Conditioning


@dataclass(frozen=True)
class RingMask:
    """Bins grouped into width-1 annuli: ring r holds bins with r - 1 < |f| <= r."""

    height: int
    width: int
    requested: float
    radii: tuple  # outer radius of every ring, innermost first
    pos_rows: np.ndarray = field(repr=False, compare=False)
    pos_cols: np.ndarray = field(repr=False, compare=False)
    pos_ring: np.ndarray = field(repr=False, compare=False)
    neg_rows: np.ndarray = field(repr=False, compare=False)
    neg_cols: np.ndarray = field(repr=False, compare=False)

    @property
    def n_rings(self) -> int:
        return len(self.radii)

    @property
    def ring_counts(self) -> np.ndarray:
        """Bins per ring over both halves of the spectrum."""
        return 2 * np.bincount(self.pos_ring, minlength=self.n_rings)

    @property
    def n_bins(self) -> int:
        return 2 * len(self.pos_ring)

    @property
    def coverage(self) -> float:
        return self.n_bins / (self.height * self.width)

    def boolean(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        m[self.pos_rows, self.pos_cols] = True
        m[self.neg_rows, self.neg_cols] = True
        return m

    def ring_map(self) -> np.ndarray:
        """(H, W) int array: ring id inside the mask, -1 elsewhere."""
        m = np.full((self.height, self.width), -1, dtype=np.int64)
        m[self.pos_rows, self.pos_cols] = self.pos_ring
        m[self.neg_rows, self.neg_cols] = self.pos_ring
        return m

    def to_dict(self) -> dict:
        return {"H": self.height, "W": self.width, "coverage": self.requested}


def _ring_ids(h, w):
    du, dv = centered_freq_coords(h, w)
    rid = np.ceil(np.hypot(du, dv)).astype(np.int64)
    rid[(du == -(h // 2)) | (dv == -(w // 2))] = -1  # Nyquist row/col
    rid[h // 2, w // 2] = -1  # DC
    return rid


def build_ring_mask(height: int, width: int, coverage: float, max_miss: float = 0.02) -> RingMask:
    """Smallest set of rings 1..R whose bin fraction is closest to ``coverage``.

    Rings are added outward while each addition brings the covered fraction
    nearer to the request; the result must land within ``max_miss``.
    """
    if height != width or height < 4 or height & (height - 1):
        raise DimensionError("ring masks need a square power-of-two grid")
    if not 0 < coverage < 1:
        raise ValueError("coverage must lie in (0, 1)")
    if coverage >= math.pi * (height / 2) ** 2 / (height * width):
        raise ValueError(f"coverage {coverage} exceeds the inscribed-disk capacity")
    rid = _ring_ids(height, width)
    n = height * width
    cum = np.cumsum(np.bincount(rid[rid > 0], minlength=height // 2 + 1)[1:height // 2 + 1]) / n
    outer = 1
    while outer < len(cum) and abs(cum[outer] - coverage) < abs(cum[outer - 1] - coverage):
        outer += 1
    if abs(cum[outer - 1] - coverage) > max_miss:
        raise ValueError(f"coverage {coverage} not reachable within {max_miss} "
                         f"(nearest {cum[outer - 1]:.4f})")
    inside = (rid >= 1) & (rid <= outer)
    rows, cols = np.nonzero(inside)
    mr, mc = mirror_index(height, width, rows, cols)
    # positive half: the lexicographically smaller flat index of each mirror pair
    keep = rows * width + cols < mr * width + mc
    pr, pc = rows[keep], cols[keep]
    nr, nc = mr[keep], mc[keep]
    return RingMask(height, width, float(coverage), tuple(range(1, outer + 1)),
                    pr, pc, rid[pr, pc] - 1, nr, nc)


def _check_grid(x, mask: RingMask):
    if np.shape(x)[-2:] != (mask.height, mask.width):
        raise DimensionError(f"grid {np.shape(x)[-2:]} does not match mask "
                             f"{(mask.height, mask.width)}")


@dataclass(frozen=True)
class WatermarkPattern:
    values: np.ndarray  # complex, one per ring
    mask: RingMask

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.shape != (self.mask.n_rings,):
            raise ValueError(f"expected {self.mask.n_rings} ring values, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("ring values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def random(cls, mask: RingMask, rng) -> "WatermarkPattern":
        """Per-ring complex standard normal (unit variance split over re/im)."""
        z = rng.standard_normal((mask.n_rings, 2)) / np.sqrt(2.0)
        return cls(z[:, 0] + 1j * z[:, 1], mask)

    @classmethod
    def zeros(cls, mask: RingMask) -> "WatermarkPattern":
        return cls(np.zeros(mask.n_rings, dtype=np.complex128), mask)

    def norm(self) -> float:
        return watermark_norm(self)


def write_bins(spec, values, mask: RingMask):
    """Write per-positive-bin complex values (and conjugates) into a spectrum copy."""
    out = np.array(spec, dtype=np.complex128)
    out[..., mask.pos_rows, mask.pos_cols] = values
    out[..., mask.neg_rows, mask.neg_cols] = np.conj(values)
    return out


def inject(x, pattern: WatermarkPattern):
    """Overwrite the masked bins of x with the ring values; output is real."""
    mask = pattern.mask
    _check_grid(x, mask)
    s = write_bins(fft2(x), pattern.values[mask.pos_ring], mask)
    return ifft2(s)


def extract(x, mask: RingMask) -> np.ndarray:
    """Mean of each ring's positive-half bins; shape (..., n_rings)."""
    _check_grid(x, mask)
    s = fft2(x)[..., mask.pos_rows, mask.pos_cols]
    return ring_mean(s, mask)


def ring_mean(bin_values, mask: RingMask) -> np.ndarray:
    """Average per-positive-bin values within each ring (last axis = bins)."""
    bin_values = np.asarray(bin_values)
    counts = np.bincount(mask.pos_ring, minlength=mask.n_rings)
    onehot = np.zeros((len(mask.pos_ring), mask.n_rings))
    onehot[np.arange(len(mask.pos_ring)), mask.pos_ring] = 1.0
    return (bin_values @ onehot) / counts


def ring_average(bin_values, mask: RingMask) -> WatermarkPattern:
    """Collapse per-bin optimizer state (positive-half bins) to a ring pattern."""
    bin_values = np.asarray(bin_values, dtype=np.complex128)
    if bin_values.shape == (mask.n_rings,):
        bin_values = bin_values[mask.pos_ring]
    return WatermarkPattern(ring_mean(bin_values, mask), mask)


def inject_adjoint(g, mask: RingMask) -> np.ndarray:
    """Gradient w.r.t. each positive-half bin value given dL/d(inject output) = g.

    Complex convention: dL/dRe + i dL/dIm.  The output of inject depends on
    bin b through 2 Re(w_b e^{i theta_b}) / N, which yields 2 G_b / N with
    G = fft2(g).
    """
    _check_grid(g, mask)
    n = mask.height * mask.width
    return 2.0 / n * fft2(g)[..., mask.pos_rows, mask.pos_cols]


def watermark_norm(pattern: WatermarkPattern) -> float:
    """Spectral L2 norm of the written content, sqrt(sum_r n_r |w_r|^2)."""
    return float(np.sqrt(np.sum(pattern.mask.ring_counts * np.abs(pattern.values) ** 2)))


def matched_random(pattern: WatermarkPattern, rng) -> WatermarkPattern:
    """Random ring pattern rescaled to the same watermark norm as ``pattern``."""
    r = WatermarkPattern.random(pattern.mask, rng)
    target = watermark_norm(pattern)
    return WatermarkPattern(r.values * (target / watermark_norm(r)), pattern.mask)


@dataclass(frozen=True)
class WatermarkArtifact:
    pattern: WatermarkPattern
    w_p: Conditioning | None
    t_injection: int
    guidance: GuidanceConfig
    schedule_fingerprint: str

    @property
    def mask(self) -> RingMask:
        return self.pattern.mask

    def inject(self, x):
        return inject(x, self.pattern)

    def replace(self, **kw) -> "WatermarkArtifact":
        d = {"pattern": self.pattern, "w_p": self.w_p, "t_injection": self.t_injection,
             "guidance": self.guidance, "schedule_fingerprint": self.schedule_fingerprint}
        d.update(kw)
        return WatermarkArtifact(**d)

    def to_dict(self) -> dict:
        return {
            "mask": self.mask.to_dict(),
            "rings": [[float(v.real), float(v.imag)] for v in self.pattern.values],
            "w_p": None if self.w_p is None else self.w_p.to_dict(),
            "t_injection": int(self.t_injection),
            "guidance": {"eta1": self.guidance.eta1, "eta2": self.guidance.eta2},
            "schedule_fingerprint": self.schedule_fingerprint,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkArtifact":
        m = d["mask"]
        mask = build_ring_mask(int(m["H"]), int(m["W"]), float(m["coverage"]))
        vals = np.array([complex(re, im) for re, im in d["rings"]])
        w_p = None if d["w_p"] is None else Conditioning.from_dict(d["w_p"])
        g = d["guidance"]
        return cls(WatermarkPattern(vals, mask), w_p, int(d["t_injection"]),
                   GuidanceConfig(float(g["eta1"]), float(g["eta2"])),
                   str(d["schedule_fingerprint"]))

    @classmethod
    def loads(cls, text: str) -> "WatermarkArtifact":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        return isinstance(other, WatermarkArtifact) and self.to_dict() == other.to_dict()

    __hash__ = None
