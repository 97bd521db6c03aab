"""Watermark verification, detection statistics and image quality metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from .diffusion import invert
from .imagespace import from_unit
from .watermark import RingMask, extract


class FingerprintMismatch(ValueError):
    pass


def l1_distance(w, w_prime, mask: RingMask):
    """Bin-weighted mean complex modulus |w - w'| over every masked bin.

    Either argument may carry leading batch axes; the result follows them.
    """
    w = np.asarray(w, dtype=np.complex128)
    w_prime = np.asarray(w_prime, dtype=np.complex128)
    if w.shape[-1] != mask.n_rings or w_prime.shape[-1] != mask.n_rings:
        raise ValueError(f"ring count mismatch: {w.shape[-1]} / {w_prime.shape[-1]} "
                         f"vs mask with {mask.n_rings}")
    counts = mask.ring_counts
    return np.abs(w - w_prime) @ counts / counts.sum()


def watermark_mse(w, w_prime, mask: RingMask):
    """Bin-weighted mean squared modulus |w - w'|^2."""
    w = np.asarray(w, dtype=np.complex128)
    counts = mask.ring_counts
    return np.abs(w - np.asarray(w_prime)) ** 2 @ counts / counts.sum()


def recover(images, artifact, schedule, model):
    """Invert unit-range images to the injection step and read the ring values."""
    if artifact.schedule_fingerprint != schedule.fingerprint():
        raise FingerprintMismatch("artifact was built for a different noise schedule")
    x_hat = invert(model, from_unit(images), schedule, artifact.t_injection)
    return extract(x_hat, artifact.mask)


def verify(image, artifact, schedule, model, tau: float):
    """(distance, decision) for one image or arrays of both for a batch."""
    w_rec = recover(image, artifact, schedule, model)
    d = l1_distance(artifact.pattern.values, w_rec, artifact.mask)
    return d, d <= tau


def auc(scores_pos, scores_neg) -> float:
    """P(random positive scores lower than random negative), ties count half."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs non-empty score lists")
    ranks = stats.rankdata(np.concatenate([pos, neg]))  # average ranks handle ties
    # U counts pairs where the negative outranks the positive
    u = ranks[pos.size:].sum() - neg.size * (neg.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def calibrate_threshold(clean_distances, target_fpr: float = 0.01, min_samples: int = 100) -> float:
    """Empirical target_fpr quantile of the clean-image distances."""
    d = np.sort(np.asarray(clean_distances, dtype=np.float64).ravel())
    if d.size < max(min_samples, 1):
        raise ValueError(f"need at least {min_samples} clean distances to calibrate")
    if not 0 <= target_fpr <= 1:
        raise ValueError("target_fpr must be in [0, 1]")
    return float(np.quantile(d, target_fpr, method="inverted_cdf")) if target_fpr > 0 else float(d[0])


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for unit-range images; +inf when identical.

    Leading axes are treated as a batch.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr needs equal shapes")
    mse = np.mean((a - b) ** 2, axis=(-2, -1))
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(1.0 / mse)
    return float(out) if np.ndim(out) == 0 else out


def _gauss_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over valid 11x11 Gaussian-window positions (batch over leading axes)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("ssim needs equal shapes")
    win = _gauss_window()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def filt(g):
        # valid-mode correlation with the symmetric window
        full = ndimage.correlate(g, win, mode="constant")
        h = win.shape[0] // 2
        return full[h:g.shape[0] - h, h:g.shape[1] - h]

    fa, fb = a.reshape((-1,) + a.shape[-2:]), b.reshape((-1,) + b.shape[-2:])
    out = np.empty(len(fa))
    for i, (x, y) in enumerate(zip(fa, fb)):
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        out[i] = np.mean(num / den)
    out = out.reshape(a.shape[:-2])
    return float(out) if out.ndim == 0 else out


def finite_mean(values) -> float:
    """Mean that ignores +inf entries (identical image pairs)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else math.inf


@dataclass
class DetectionReport:
    ids: list
    distances: np.ndarray
    truth: np.ndarray
    tau: float
    watermark_mse: float

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=bool)
        if np.any(self.distances < 0):
            raise ValueError("distances must be non-negative")
        if not (len(self.ids) == len(self.distances) == len(self.truth)):
            raise ValueError("per-image columns must have equal length")

    @property
    def decisions(self) -> np.ndarray:
        return self.distances <= self.tau

    @property
    def auc(self):
        """AUC over the report, or None when one class is absent."""
        if self.truth.all() or not self.truth.any():
            return None
        return auc(self.distances[self.truth], self.distances[~self.truth])

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "auc": self.auc,
            "watermark_mse": self.watermark_mse,
            "per_image": [{"id": i, "truth": bool(t), "distance": float(d), "decision": bool(c)}
                          for i, t, d, c in zip(self.ids, self.truth, self.distances, self.decisions)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "truth", "distance", "decision"])
        for i, t, d, c in zip(self.ids, self.truth, self.distances, self.decisions):
            w.writerow([i, int(t), repr(float(d)), int(c)])
        return buf.getvalue()
