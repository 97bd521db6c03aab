"""Injection-point sensitivity probes.

Terms per ladder step: uncond = eps(x, t, NULL), cond = eps(x, t, prompt),
guidance = cond - uncond, full = uncond + s * guidance.  "Mean" is the mean
absolute value over the grid.
"""

from __future__ import annotations

import csv
import io

import numpy as np

from .diffusion import GuidanceConfig, NoiseSchedule, ddim_step
from .grid import ifft2

CURVE_FIELDS = ["t", "uncond", "cond", "guidance", "full"]
RESPONSE_FIELDS = ["t_perturb", "delta_uncond", "delta_guidance"]
HEADER_NOTE = "# term magnitude = mean absolute value over grid pixels, averaged over seeds"


def _terms(model, x, t, cond, scale):
    eu = model.predict(x, t, None)
    ec = model.predict(x, t, cond) if cond is not None else eu
    gd = ec - eu
    return eu, ec, gd, eu + scale * gd


def noise_term_curves(model, cond, schedule: NoiseSchedule, guidance: GuidanceConfig,
                      n_seeds: int, seed=0):
    """Rows (t, |uncond|, |cond|, |guidance|, |full|) along an unwatermarked run."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_seeds, model.H, model.W))
    ladder = [int(t) for t in schedule.ladder]
    rows = []
    for t, t_prev in zip(ladder[:-1], ladder[1:]):
        eu, ec, gd, full = _terms(model, x, t, cond, guidance.eta1)
        rows.append((t, float(np.abs(eu).mean()), float(np.abs(ec).mean()),
                     float(np.abs(gd).mean()), float(np.abs(full).mean())))
        x, _ = ddim_step(x, t, t_prev, full, schedule.alpha_bar)
    return rows


def detect_knee(ts, values, frac: float = 0.1):
    """First timestep after the steepest rise where the per-step rise drops below
    ``frac`` of that peak rise.  ``ts`` is in sampling order (decreasing t).
    Returns None when the curve never rises.
    """
    v = np.asarray(values, dtype=np.float64)
    rise = np.diff(v)  # rise[i] is the change from ts[i] to ts[i + 1]
    if rise.size == 0 or rise.max() <= 0:
        return None
    peak = int(np.argmax(rise))
    for i in range(peak + 1, rise.size):
        if rise[i] < frac * rise[peak]:
            return int(ts[i])
    return None


def ring_perturbation(mask, amplitude: float) -> np.ndarray:
    """Real field whose masked bins all hold ``amplitude`` (a fixed ring pattern)."""
    s = np.zeros((mask.height, mask.width), dtype=np.complex128)
    s[mask.pos_rows, mask.pos_cols] = amplitude
    s[mask.neg_rows, mask.neg_cols] = amplitude
    return ifft2(s)


def perturbation_response(model, schedule: NoiseSchedule, perturb_t: int, mask, amplitude: float,
                          cond=None, guidance: GuidanceConfig = GuidanceConfig(), n_seeds=4, seed=0):
    """Cumulative mean |change| of the uncond and guidance terms after an additive
    ring perturbation at ``perturb_t``, relative to the unperturbed run."""
    if not schedule.on_ladder(perturb_t):
        raise ValueError(f"perturb_t {perturb_t} not on the ladder")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_seeds, model.H, model.W))
    xp = x.copy()
    bump = ring_perturbation(mask, amplitude)
    ladder = [int(t) for t in schedule.ladder]
    du = dg = 0.0
    perturbed = False
    for t, t_prev in zip(ladder[:-1], ladder[1:]):
        if not perturbed and t <= perturb_t:
            xp = xp + bump
            perturbed = True
        eu, _, gd, full = _terms(model, x, t, cond, guidance.eta1)
        if perturbed:
            eup, _, gdp, fullp = _terms(model, xp, t, cond, guidance.eta1)
            du += float(np.abs(eup - eu).mean())
            dg += float(np.abs(gdp - gd).mean())
        else:
            fullp = full
        x, _ = ddim_step(x, t, t_prev, full, schedule.alpha_bar)
        xp, _ = ddim_step(xp, t, t_prev, fullp, schedule.alpha_bar)
    return du, dg


def response_sweep(model, schedule, mask, amplitude, cond=None, guidance=GuidanceConfig(),
                   n_seeds=4, seed=0):
    """perturbation_response at every ladder timestep (including 0)."""
    return [(int(t),) + perturbation_response(model, schedule, int(t), mask, amplitude, cond,
                                              guidance, n_seeds, seed)
            for t in schedule.ladder]


def crossover(rows):
    """Largest perturbation timestep where delta_uncond overtakes delta_guidance."""
    for t, du, dg in rows:
        if du > 0 and dg / du < 1:
            return t
    return None


def to_csv(fields, rows, note=HEADER_NOTE) -> str:
    buf = io.StringIO()
    buf.write(note + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([v if isinstance(v, (int, np.integer)) else repr(float(v)) for v in r])
    return buf.getvalue()


__all__ = ["noise_term_curves", "detect_knee", "perturbation_response", "response_sweep",
           "crossover", "ring_perturbation", "to_csv", "CURVE_FIELDS", "RESPONSE_FIELDS"]
