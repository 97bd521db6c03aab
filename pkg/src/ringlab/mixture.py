"""Closed-form Gaussian-mixture noise predictor.

The data distribution is sum_k pi_k N(mu_k, sigma0^2 I).  Under the forward
process each component of x_t is N(sqrt(abar) mu_k, s_t^2 I) with
s_t^2 = abar sigma0^2 + 1 - abar, so the optimal noise prediction is known
exactly, along with its Jacobian.

A "prompt" is a set of component logits; the conditioning space also carries
coefficients over a few low-frequency DCT fields, which add an
x-independent bias to the prediction.  That bias is what the hiding signal
uses to steer denoising.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import dct_basis, zigzag_pairs

PROMPT_LOGIT = 20.0


@dataclass(frozen=True)
class Conditioning:
    """Component logits plus bias-field coefficients.  ``None`` stands for the null prompt."""

    logits: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=np.float64))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))
        if not (np.all(np.isfinite(self.logits)) and np.all(np.isfinite(self.bias))):
            raise ValueError("conditioning must be finite")

    def to_dict(self) -> dict:
        return {"logits": [float(v) for v in self.logits.ravel()],
                "bias_coeffs": [float(v) for v in self.bias.ravel()]}

    @classmethod
    def from_dict(cls, d: dict) -> "Conditioning":
        return cls(np.array(d["logits"], dtype=np.float64),
                   np.array(d["bias_coeffs"], dtype=np.float64))

    def __eq__(self, other):
        return (isinstance(other, Conditioning)
                and np.array_equal(self.logits, other.logits)
                and np.array_equal(self.bias, other.bias))

    __hash__ = None


class MixtureModel:
    def __init__(self, means, sigma0: float, priors, alpha_bar, bias_dim: int = 16):
        self.means = np.asarray(means, dtype=np.float64)
        if self.means.ndim != 3:
            raise ValueError("means must have shape (K, H, W)")
        self.K, self.H, self.W = self.means.shape
        if not sigma0 >= 0:
            raise ValueError("sigma0 must be non-negative")
        self.sigma0 = float(sigma0)
        self.priors = np.asarray(priors, dtype=np.float64)
        if self.priors.shape != (self.K,) or abs(self.priors.sum() - 1) > 1e-12 or np.any(self.priors <= 0):
            raise ValueError("priors must be K positive weights summing to 1")
        self.alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        self.bias_dim = int(bias_dim)
        n = self.H * self.W
        self.bias_basis = dct_basis(self.H, self.W, zigzag_pairs(self.bias_dim)) / np.sqrt(n)
        self._mu = self.means.reshape(self.K, n)
        self._mu_sq = np.einsum("kd,kd->k", self._mu, self._mu)
        self._B = self.bias_basis.reshape(self.bias_dim, n)
        self.log_priors = np.log(self.priors)

    @classmethod
    def default(cls, alpha_bar, K=4, sigma0=0.3, size=32, amplitude=1.0, bias_dim=16, priors=None):
        """Means are the first K non-constant DCT patterns, peak-normalized to ``amplitude``."""
        fields = dct_basis(size, size, zigzag_pairs(K))
        fields = amplitude * fields / np.abs(fields).max(axis=(1, 2), keepdims=True)
        if priors is None:
            priors = np.full(K, 1.0 / K)
        return cls(fields, sigma0, priors, alpha_bar, bias_dim)

    # conditioning helpers -------------------------------------------------
    def prompt(self, k) -> Conditioning:
        """One-hot prompt(s) selecting component k; k may be an int or an int array."""
        k = np.asarray(k)
        logits = np.full(k.shape + (self.K,), -PROMPT_LOGIT)
        np.put_along_axis(logits, k[..., None], PROMPT_LOGIT, axis=-1)
        return Conditioning(logits, np.zeros(k.shape + (self.bias_dim,)))

    def null_embedding(self) -> Conditioning:
        """Prior logits with zero bias; predicts exactly like the null prompt."""
        return Conditioning(self.log_priors.copy(), np.zeros(self.bias_dim))

    def bias_field(self, coeffs) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=np.float64)
        return (coeffs @ self._B).reshape(coeffs.shape[:-1] + (self.H, self.W))

    # core -----------------------------------------------------------------
    def _coeffs(self, t):
        ab = float(self.alpha_bar[t])
        a = np.sqrt(ab)
        sig = np.sqrt(1.0 - ab)
        s2 = ab * self.sigma0 ** 2 + 1.0 - ab
        return a, sig, s2

    def _responsibilities(self, xf, t, logits):
        a, _, s2 = self._coeffs(t)
        # -|x - a mu_k|^2 / 2 s^2 without the x-only term, which cancels in the softmax
        ll = (a * (xf @ self._mu.T) - 0.5 * a * a * self._mu_sq) / s2
        z = ll + (self.log_priors if logits is None else logits)
        z = z - z.max(axis=-1, keepdims=True)
        g = np.exp(z)
        return g / g.sum(axis=-1, keepdims=True)

    def _flat(self, x):
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-2]
        return x.reshape((-1, self.H * self.W)), lead

    def _logits(self, cond, batch):
        if cond is None:
            return None
        lg = cond.logits
        if lg.ndim == 1:
            return lg
        return lg.reshape(batch, self.K)

    def _bias(self, cond, batch):
        b = cond.bias
        if b.ndim == 1:
            return (b @ self._B)[None, :]
        return b.reshape(batch, self.bias_dim) @ self._B

    def predict(self, x, t, cond=None) -> np.ndarray:
        """Noise prediction eps(x_t, t, cond)."""
        xf, lead = self._flat(x)
        a, sig, s2 = self._coeffs(t)
        if sig == 0.0:
            eps = np.zeros_like(xf)
        else:
            gamma = self._responsibilities(xf, t, self._logits(cond, xf.shape[0]))
            eps = sig * (xf - a * (gamma @ self._mu)) / s2
        if cond is not None:
            eps = eps + self._bias(cond, xf.shape[0])
        return eps.reshape(lead + (self.H, self.W))

    def posterior_mean(self, x, t, cond=None) -> np.ndarray:
        xf, lead = self._flat(x)
        gamma = self._responsibilities(xf, t, self._logits(cond, xf.shape[0]))
        return (gamma @ self._mu).reshape(lead + (self.H, self.W))

    def vjp(self, x, t, cond, v):
        """Return (v^T d eps/dx, v^T d eps/dcond); the second item is None for the null prompt."""
        xf, lead = self._flat(x)
        vf = np.asarray(v, dtype=np.float64).reshape(xf.shape)
        a, sig, s2 = self._coeffs(t)
        if sig == 0.0:
            # clean state: the prediction is the bias field alone
            w = np.zeros((xf.shape[0], self.K))
            gx = np.zeros(lead + (self.H, self.W))
        else:
            gamma = self._responsibilities(xf, t, self._logits(cond, xf.shape[0]))
            m = gamma @ self._mu
            vm = vf @ self._mu.T  # (B, K): v . mu_k
            v_m = np.einsum("bd,bd->b", vf, m)
            w = gamma * (vm - v_m[:, None])
            gx = sig / s2 * (vf - (a * a / s2) * (w @ self._mu))
            gx = gx.reshape(lead + (self.H, self.W))
        if cond is None:
            return gx, None
        g_logits = -sig * a / s2 * w
        g_bias = vf @ self._B.T
        if cond.logits.ndim == 1:
            g_logits = g_logits.sum(axis=0)
        else:
            g_logits = g_logits.reshape(cond.logits.shape)
        if cond.bias.ndim == 1:
            g_bias = g_bias.sum(axis=0)
        else:
            g_bias = g_bias.reshape(cond.bias.shape)
        return gx, Conditioning(g_logits, g_bias)

    def log_density(self, x, t) -> np.ndarray:
        """Log of the marginal density of x_t (used as an independent oracle)."""
        xf, lead = self._flat(x)
        a, _, s2 = self._coeffs(t)
        d = xf.shape[1]
        sq = ((xf[:, None, :] - a * self._mu[None]) ** 2).sum(-1)
        z = self.log_priors - 0.5 * sq / s2 - 0.5 * d * np.log(2 * np.pi * s2)
        mx = z.max(axis=1, keepdims=True)
        return (mx[:, 0] + np.log(np.exp(z - mx).sum(axis=1))).reshape(lead)

    def sample_dataset(self, n: int, rng_seed):
        """Draw n clean samples; returns (images (n, H, W), component ids (n,))."""
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(rng_seed)
        comps = rng.choice(self.K, size=n, p=self.priors)
        noise = rng.standard_normal((n, self.H, self.W))
        return self.means[comps] + self.sigma0 * noise, comps
