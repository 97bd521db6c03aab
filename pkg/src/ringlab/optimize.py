"""Alternating optimization of the ring watermark w_i and the hiding signal w_p.

Each round draws a clean sample, diffuses it to a ladder timestep inside the
training window, writes the watermark, then takes one descent step on w_i
(retention + consistency - lambda * norm, followed by ring averaging) and one
on w_p (retention + consistency).
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass

import numpy as np

from .diffusion import GuidanceConfig, NoiseSchedule, cfg_combine, forward_diffuse
from .mixture import Conditioning
from .watermark import (WatermarkArtifact, WatermarkPattern, inject, inject_adjoint,
                        ring_mean, watermark_norm)


class DivergenceError(RuntimeError):
    def __init__(self, message, log):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class OptimizerConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 0.005
    lr_wi: float = 0.8
    lr_wp: float = 5e-4
    rounds: int = 1000
    dataset_size: int = 50
    t_window: tuple = (200, 300)
    method: str = "adam"  # "sgd", "momentum" or "adam"
    reduction: str = "sum"  # losses enter the objective summed ("sum") or averaged ("mean") over pixels
    momentum: float = 0.9
    update_wi: bool = True
    update_wp: bool = True

    def __post_init__(self):
        for name in ("alpha", "beta", "lam", "lr_wi", "lr_wp"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if self.rounds < 0 or self.dataset_size < 1:
            raise ValueError("rounds must be >= 0 and dataset_size >= 1")
        lo, hi = self.t_window
        if not 0 < lo <= hi:
            raise ValueError("t_window must satisfy 0 < lo <= hi")
        if self.method not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown loss reduction {self.reduction!r}")
        object.__setattr__(self, "t_window", (int(lo), int(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t_window"] = list(self.t_window)
        return d


# losses -------------------------------------------------------------------

def _guided(model, x, t, cond, w_p, g):
    eps_u = model.predict(x, t, None)
    eps_c = model.predict(x, t, cond) if cond is not None else eps_u
    eps_wp = model.predict(x, t, w_p) if w_p is not None else None
    return cfg_combine(eps_c, eps_wp, eps_u, g)


def predict_x0(model, x_t, t, cond, w_p, guidance: GuidanceConfig):
    """One-step clean estimate from x_t under three-term guidance."""
    ab = model.alpha_bar[t]
    eps = _guided(model, x_t, t, cond, w_p, guidance)
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def loss_ret(x_t_star, t, x0, model, cond, w_p, guidance: GuidanceConfig) -> float:
    """Mean squared error of the one-step x0 prediction from the watermarked state."""
    r = predict_x0(model, x_t_star, t, cond, w_p, guidance) - x0
    return float(np.mean(r * r))


def loss_cons(x_t_star, t, model, w_p) -> float:
    """Mean squared deviation of the w_p prediction from the unconditional one."""
    if w_p is None:
        return 0.0
    d = model.predict(x_t_star, t, w_p) - model.predict(x_t_star, t, None)
    return float(np.mean(d * d))


def _add(a, b):
    if a is None:
        return b
    return Conditioning(a.logits + b.logits, a.bias + b.bias)


def _scale(c, s):
    return Conditioning(c.logits * s, c.bias * s)


def loss_ret_grad(x_t_star, t, x0, model, cond, w_p, guidance: GuidanceConfig):
    """(loss, dL/dx_t*, dL/dw_p); the last is None when w_p is None."""
    ab = model.alpha_bar[t]
    a, sig = np.sqrt(ab), np.sqrt(1.0 - ab)
    r = predict_x0(model, x_t_star, t, cond, w_p, guidance) - x0
    loss = float(np.mean(r * r))
    gr = 2.0 * r / r.size  # dL/dx0_pred
    # x0_pred = (x - sig * eps)/a, so dL/deps = -sig/a * gr
    ge = -sig / a * gr
    e1 = guidance.eta1 if cond is not None else 0.0
    e2 = guidance.eta2 if w_p is not None else 0.0
    gx = gr / a
    vu, _ = model.vjp(x_t_star, t, None, ge)
    if cond is None:
        # eps_c is eps_u itself: total weight on the unconditional term is 1 - e2
        gx = gx + (1.0 - e2) * vu
    else:
        vc, _ = model.vjp(x_t_star, t, cond, ge)
        gx = gx + e1 * vc + (1.0 - e1 - e2) * vu
    g_wp = None
    if w_p is not None:
        vw, cw = model.vjp(x_t_star, t, w_p, ge)
        gx = gx + e2 * vw
        g_wp = _scale(cw, e2)
    return loss, gx, g_wp


def loss_cons_grad(x_t_star, t, model, w_p):
    """(loss, dL/dx_t*, dL/dw_p) for the consistency loss."""
    if w_p is None:
        return 0.0, np.zeros_like(np.asarray(x_t_star, dtype=np.float64)), None
    d = model.predict(x_t_star, t, w_p) - model.predict(x_t_star, t, None)
    loss = float(np.mean(d * d))
    gd = 2.0 * d / d.size
    vw, cw = model.vjp(x_t_star, t, w_p, gd)
    vu, _ = model.vjp(x_t_star, t, None, gd)
    return loss, vw - vu, cw


def norm_grad_bins(pattern: WatermarkPattern) -> np.ndarray:
    """d||w_i||/d(positive-half bin value), complex convention."""
    n = watermark_norm(pattern)
    if n == 0:
        return np.zeros(len(pattern.mask.pos_ring), dtype=np.complex128)
    return 2.0 * pattern.values[pattern.mask.pos_ring] / n


def objective_grads(x_t, t, x0, model, cond, pattern, w_p, guidance, cfg: OptimizerConfig):
    """Losses at x_t* = inject(x_t, w_i) with gradients for both parameter blocks.

    Returns (terms dict, per-ring gradient for w_i of the w_i objective,
    Conditioning gradient of the w_p objective or None).
    """
    mask = pattern.mask
    x_star = inject(x_t, pattern)
    lr_, gx_r, gw_r = loss_ret_grad(x_star, t, x0, model, cond, w_p, guidance)
    lc_, gx_c, gw_c = loss_cons_grad(x_star, t, model, w_p)
    # the loss helpers average over pixels; "sum" restores per-pixel totals
    n = x_star.shape[-1] * x_star.shape[-2] if cfg.reduction == "sum" else 1.0
    a, b = n * cfg.alpha, n * cfg.beta
    gx = a * gx_r + b * gx_c
    bins = inject_adjoint(gx, mask)
    if bins.ndim > 1:
        bins = bins.sum(axis=tuple(range(bins.ndim - 1)))
    bins = bins - cfg.lam * norm_grad_bins(pattern)
    g_wi = ring_mean(bins, mask)  # per-bin step followed by ring averaging
    g_wp = None
    if w_p is not None:
        g_wp = _add(_scale(gw_r, a), _scale(gw_c, b))
    terms = {"ret": lr_, "cons": lc_, "norm": watermark_norm(pattern)}
    return terms, g_wi, g_wp


# driver -------------------------------------------------------------------

class _Stepper:
    """Plain, heavy-ball or Adam update on a flat real vector."""

    def __init__(self, method, lr, momentum, size):
        self.method, self.lr, self.mu = method, lr, momentum
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.k = 0

    def step(self, p, g):
        if self.method == "sgd":
            return p - self.lr * g
        if self.method == "momentum":
            self.m = self.mu * self.m + g
            return p - self.lr * self.m
        self.k += 1
        b1, b2 = 0.9, 0.999
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        mh = self.m / (1 - b1 ** self.k)
        vh = self.v / (1 - b2 ** self.k)
        return p - self.lr * mh / (np.sqrt(vh) + 1e-8)


def _c2r(z):
    return np.concatenate([z.real, z.imag])


def _r2c(v):
    n = len(v) // 2
    return v[:n] + 1j * v[n:]


def window_timesteps(schedule: NoiseSchedule, window) -> np.ndarray:
    lo, hi = window
    ts = np.array([t for t in schedule.ladder if lo <= t <= hi and 0 < t < schedule.T])
    if ts.size == 0:
        raise ValueError(f"no ladder timestep inside window {window}")
    return np.sort(ts)


LOG_FIELDS = ["round", "t", "l_ret", "l_cons", "wi_norm", "bias_norm", "wall_time"]


def optimize(model, dataset, mask, config: OptimizerConfig, schedule: NoiseSchedule,
             guidance: GuidanceConfig, rng_seed, t_injection: int = 240,
             init_pattern=None, init_wp=None, prompts=None, log_timing=False):
    """Run the alternating loop; returns (artifact, log rows).

    ``dataset`` is an array (n, H, W) of clean samples; ``prompts`` the
    matching Conditioning rows (component prompts) or None for unconditional.
    Timing is left out of the log unless ``log_timing`` so logs stay
    reproducible byte for byte.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 3 or len(dataset) == 0:
        raise ValueError("dataset must be a non-empty (n, H, W) array")
    rng = np.random.default_rng(rng_seed)
    ts = window_timesteps(schedule, config.t_window)
    pattern = init_pattern if init_pattern is not None else WatermarkPattern.random(mask, rng)
    w_p = init_wp if init_wp is not None else model.null_embedding()
    nk = len(w_p.logits)
    wi_opt = _Stepper(config.method, config.lr_wi, config.momentum, 2 * mask.n_rings)
    wp_opt = _Stepper(config.method, config.lr_wp, config.momentum, nk + len(w_p.bias))

    log = []
    base = None
    bad = 0
    t_start = time.perf_counter()
    for k in range(config.rounds):
        i = int(rng.integers(len(dataset)))
        t = int(rng.choice(ts))
        noise = rng.standard_normal(dataset.shape[1:])
        x0 = dataset[i]
        cond = None if prompts is None else Conditioning(prompts.logits[i], prompts.bias[i])
        x_t = forward_diffuse(x0, t, noise, schedule)

        terms, g_wi, _ = objective_grads(x_t, t, x0, model, cond, pattern, w_p, guidance, config)
        if config.update_wi:
            v = wi_opt.step(_c2r(pattern.values), _c2r(g_wi))
            pattern = WatermarkPattern(_r2c(v), mask)
        if config.update_wp:
            _, _, g_wp = objective_grads(x_t, t, x0, model, cond, pattern, w_p, guidance, config)
            p = np.concatenate([w_p.logits, w_p.bias])
            g = np.concatenate([g_wp.logits, g_wp.bias])
            p = wp_opt.step(p, g)
            w_p = Conditioning(p[:nk], p[nk:])

        row = {"round": k, "t": t, "l_ret": terms["ret"], "l_cons": terms["cons"],
               "wi_norm": watermark_norm(pattern),
               "bias_norm": float(np.linalg.norm(w_p.bias)),
               "wall_time": round(time.perf_counter() - t_start, 3) if log_timing else 0.0}
        log.append(row)
        if not all(np.isfinite([row["l_ret"], row["l_cons"], row["wi_norm"]])):
            raise DivergenceError(f"non-finite loss at round {k}", log)
        if base is None:
            base = max(terms["ret"], 1e-300)
        bad = bad + 1 if terms["ret"] > 10.0 * base else 0
        if bad >= 50:
            raise DivergenceError(
                f"retention loss above 10x its initial value ({base:.4g}) for 50 rounds "
                f"ending at round {k}", log)

    artifact = WatermarkArtifact(pattern, w_p, int(t_injection), guidance, schedule.fingerprint())
    return artifact, log


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
