"""Noise schedule, deterministic DDIM sampling/inversion and guidance mixing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 50
    beta: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)
    ladder: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1 or self.steps < 1 or self.T % self.steps:
            raise ValueError("T must be a positive multiple of the step count")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        beta = np.linspace(self.beta_start, self.beta_end, self.T)
        # index 0 is the clean state: abar_0 = 1
        ab = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "ladder", np.arange(self.T, -1, -self.T // self.steps))

    @property
    def stride(self) -> int:
        return self.T // self.steps

    def on_ladder(self, t: int) -> bool:
        return 0 <= t <= self.T and t % self.stride == 0

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "steps": self.steps}

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class GuidanceConfig:
    eta1: float = 7.5
    eta2: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.eta1) and np.isfinite(self.eta2)):
            raise ValueError("guidance scales must be finite")
        if self.eta1 < 0 or self.eta2 < 0:
            raise ValueError("guidance scales must be non-negative")


UNIT_GUIDANCE = GuidanceConfig(1.0, 0.0)


def forward_diffuse(x0, t: int, noise, schedule: NoiseSchedule):
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside 1..{schedule.T}")
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ValueError("noise shape must match x0")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def _check_pair(t, t_prev):
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")


def ddim_step(x_t, t: int, t_prev: int, eps, alpha_bar):
    """One deterministic DDIM update; returns (x_prev, x0_pred)."""
    _check_pair(t, t_prev)
    ab, ab_prev = alpha_bar[t], alpha_bar[t_prev]
    x0_pred = (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    x_prev = np.sqrt(ab_prev) * x0_pred + np.sqrt(1.0 - ab_prev) * eps
    return x_prev, x0_pred


def ddim_invert_update(x_prev, t_prev: int, t: int, eps, alpha_bar):
    """Inverse of :func:`ddim_step` for a given noise grid."""
    _check_pair(t, t_prev)
    ab, ab_prev = alpha_bar[t], alpha_bar[t_prev]
    x0_hat = (x_prev - np.sqrt(1.0 - ab_prev) * eps) / np.sqrt(ab_prev)
    return np.sqrt(ab) * x0_hat + np.sqrt(1.0 - ab) * eps


def cfg_combine(eps_cond, eps_wp, eps_uncond, g: GuidanceConfig):
    """eta1*cond + eta2*wp + (1 - eta1 - eta2)*uncond; a missing wp term means eta2 = 0."""
    if eps_wp is None:
        return g.eta1 * eps_cond + (1.0 - g.eta1) * eps_uncond
    return g.eta1 * eps_cond + g.eta2 * eps_wp + (1.0 - g.eta1 - g.eta2) * eps_uncond


def guided_eps(model, x, t, cond, guidance: GuidanceConfig, w_p=None):
    """Guided prediction; two-term CFG without w_p, three-term with it."""
    eps_u = model.predict(x, t, None)
    if cond is None:
        eps_c = eps_u
    elif guidance.eta1 == 0:
        eps_c = 0.0
    else:
        eps_c = model.predict(x, t, cond)
    eps_wp = None
    if w_p is not None:
        eps_wp = model.predict(x, t, w_p) if guidance.eta2 != 0 else 0.0
    return cfg_combine(eps_c, eps_wp, eps_u, guidance)


def ddim_invert_step(x_prev, t_prev: int, t: int, model, cond=None,
                     guidance: GuidanceConfig = UNIT_GUIDANCE, schedule=None):
    """Lift x_{t_prev} to x_t using the noise predicted at the previous state."""
    alpha_bar = schedule.alpha_bar if schedule is not None else model.alpha_bar
    if schedule is not None and not (schedule.on_ladder(t) and schedule.on_ladder(t_prev)):
        raise ValueError(f"timesteps {t_prev}->{t} are not on the ladder")
    eps = guided_eps(model, x_prev, t_prev, cond, guidance)
    return ddim_invert_update(x_prev, t_prev, t, eps, alpha_bar)


def sample(model, x_T, cond, schedule: NoiseSchedule, guidance: GuidanceConfig,
           injection=None, record=(), start_t=None):
    """Run the DDIM ladder from ``start_t`` (default T) down to 0.

    ``injection`` is any object with ``t_injection``, ``w_p`` and an
    ``inject(x)`` method (see :class:`ringlab.watermark.WatermarkArtifact`).
    At the first ladder timestep t <= t_injection the state is watermarked
    once; from that step on the hiding signal joins the guidance mix.

    Returns (x0, trace) where trace is a list of (t, state) for every t in
    ``record`` (states recorded after any injection at that t).
    """
    x = np.array(x_T, dtype=np.float64)
    ladder = [int(t) for t in schedule.ladder]
    if start_t is not None:
        if not schedule.on_ladder(start_t):
            raise ValueError(f"start timestep {start_t} not on the ladder")
        ladder = [t for t in ladder if t <= start_t]
    t_inj = None
    if injection is not None:
        t_inj = int(injection.t_injection)
        if not (schedule.on_ladder(t_inj) and 0 < t_inj < schedule.T):
            raise ValueError(f"t_injection {t_inj} must be an interior ladder timestep")
    record = set(int(t) for t in record)
    trace = []
    injected = False
    for t, t_prev in zip(ladder[:-1], ladder[1:]):
        if t_inj is not None and not injected and t <= t_inj:
            x = injection.inject(x)
            injected = True
        if t in record:
            trace.append((t, x.copy()))
        if injected:
            eps = guided_eps(model, x, t, cond, guidance, w_p=injection.w_p)
        else:
            eps = guided_eps(model, x, t, cond, guidance)
        x, _ = ddim_step(x, t, t_prev, eps, schedule.alpha_bar)
    if 0 in record:
        trace.append((0, x.copy()))
    return x, trace


def invert(model, x0, schedule: NoiseSchedule, stop_t: int):
    """Null-prompt, unit-guidance DDIM inversion from t = 0 up to ``stop_t``."""
    if not schedule.on_ladder(stop_t):
        raise ValueError(f"stop timestep {stop_t} not on the ladder")
    x = np.array(x0, dtype=np.float64)
    ladder = [int(t) for t in schedule.ladder[::-1] if t <= stop_t]
    for t_prev, t in zip(ladder[:-1], ladder[1:]):
        eps = model.predict(x, t_prev, None)
        x = ddim_invert_update(x, t_prev, t, eps, schedule.alpha_bar)
    return x
