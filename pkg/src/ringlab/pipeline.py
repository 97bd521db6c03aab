"""End-to-end experiments: optimize, generate, benchmark, sweep, probe."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import probe as probe_mod
from .attacks import SUITE, AttackSpec, apply, apply_combinations
from .config import STREAMS, RunConfig, sub_seed
from .diffusion import sample
from .imagespace import to_unit
from .metrics import (DetectionReport, auc, calibrate_threshold, finite_mean, l1_distance, psnr,
                      recover, ssim, watermark_mse)
from .optimize import optimize
from .watermark import WatermarkPattern, build_ring_mask, matched_random

CHUNK = 50  # fixed work unit so results never depend on the worker count


def child_seed(master, stream, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), STREAMS[stream], *[int(k) for k in keys]])


@dataclass
class Lab:
    config: RunConfig
    workers: int = 1

    def __post_init__(self):
        self.schedule = self.config.build_schedule()
        self.guidance = self.config.build_guidance()
        self.model = self.config.model.build(self.schedule)
        size = self.config.model.size
        self.mask = build_ring_mask(size, size, self.config.watermark.coverage)

    @property
    def seed(self) -> int:
        return self.config.seed

    def map_chunks(self, fn, n):
        """fn(lo, hi) over fixed chunks of range(n), concatenated in order."""
        bounds = [(lo, min(lo + CHUNK, n)) for lo in range(0, n, CHUNK)]
        if self.workers > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                parts = list(ex.map(lambda b: fn(*b), bounds))
        else:
            parts = [fn(*b) for b in bounds]
        return np.concatenate(parts)


# seeds and generation -------------------------------------------------------

def draw_inputs(lab: Lab, n: int, stream="generate"):
    """Per-image seed noise and component ids; image i depends only on (seed, i)."""
    size = lab.config.model.size
    noise = np.empty((n, size, size))
    comps = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng(child_seed(lab.seed, stream, i))
        comps[i] = rng.integers(lab.model.K)
        noise[i] = rng.standard_normal((size, size))
    return noise, comps


def generate_images(lab: Lab, noise, comps, artifact=None):
    """Unit-range images; watermarked when ``artifact`` is given."""
    def run(lo, hi):
        x0, _ = sample(lab.model, noise[lo:hi], lab.model.prompt(comps[lo:hi]), lab.schedule,
                       lab.guidance, injection=artifact)
        return to_unit(x0)
    return lab.map_chunks(run, len(noise))


def recover_batch(lab: Lab, images, artifact):
    return lab.map_chunks(lambda lo, hi: recover(images[lo:hi], artifact, lab.schedule, lab.model),
                          len(images))


def distances(lab: Lab, images, artifact):
    return l1_distance(artifact.pattern.values, recover_batch(lab, images, artifact), artifact.mask)


def attack_batch(lab: Lab, images, spec: AttackSpec, set_id: int):
    """Apply ``spec`` chunk by chunk with seeds derived from (master, spec seed, set, chunk)."""
    base = 0 if spec.seed is None else spec.seed

    def run(lo, hi):
        seed = child_seed(lab.seed, "attacks", base, set_id, lo // CHUNK)
        s = AttackSpec(spec.kind, spec.params, int(seed.generate_state(1)[0]))
        return apply(images[lo:hi], s, lab.model, lab.schedule)
    return lab.map_chunks(run, len(images))


def run_optimize(lab: Lab, init_pattern=None, update_wi=None, update_wp=None):
    cfg = lab.config.optimizer
    if update_wi is not None or update_wp is not None:
        cfg = replace(cfg, update_wi=cfg.update_wi if update_wi is None else update_wi,
                      update_wp=cfg.update_wp if update_wp is None else update_wp)
    data, comps = lab.model.sample_dataset(cfg.dataset_size, sub_seed(lab.config.model.seed, "dataset"))
    return optimize(lab.model, data, lab.mask, cfg, lab.schedule, lab.guidance,
                    rng_seed=sub_seed(lab.seed, "optimize"),
                    t_injection=lab.config.watermark.t_injection,
                    init_pattern=init_pattern, prompts=lab.model.prompt(comps))


# benchmark ------------------------------------------------------------------

BENCH_FIELDS = ["attack", "k", "auc", "watermark_mse", "psnr", "ssim", "tpr"]


def _row(lab, name, k, artifact, wm_att, clean_att, clean_ref, tau):
    w_rec = recover_batch(lab, wm_att, artifact)
    d_pos = l1_distance(artifact.pattern.values, w_rec, artifact.mask)
    d_neg = distances(lab, clean_att, artifact)
    return {"attack": name, "k": k, "auc": auc(d_pos, d_neg),
            "watermark_mse": float(np.mean(watermark_mse(artifact.pattern.values, w_rec, artifact.mask))),
            "psnr": finite_mean(psnr(wm_att, clean_ref)), "ssim": float(np.mean(ssim(wm_att, clean_ref))),
            "tpr": float(np.mean(d_pos <= tau)) if tau is not None else float("nan")}


def suite_aucs(lab: Lab, artifact, wm, clean, kinds=SUITE):
    specs = {s.kind: s for s in lab.config.attacks}
    out = {}
    for kind in kinds:
        spec = specs.get(kind, AttackSpec(kind, {}, 0))
        out[kind] = auc(distances(lab, attack_batch(lab, wm, spec, 0), artifact),
                        distances(lab, attack_batch(lab, clean, spec, 1), artifact))
    return out


def benchmark(lab: Lab, artifact, n=None):
    """Per-attack detection and quality table plus combined-attack and baseline rows."""
    n = n or lab.config.metrics.images
    noise, comps = draw_inputs(lab, n)
    clean = generate_images(lab, noise, comps)
    wm = generate_images(lab, noise, comps, artifact)

    d_clean = distances(lab, clean, artifact)
    tau = calibrate_threshold(d_clean, lab.config.metrics.target_fpr, min_samples=min(100, n))
    rows = [_row(lab, "clean", 0, artifact, wm, clean, clean, tau)]
    rows.append(_row(lab, "identity", 1, artifact, attack_batch(lab, wm, AttackSpec("identity"), 0),
                     attack_batch(lab, clean, AttackSpec("identity"), 1), clean, tau))
    for spec in lab.config.attacks:
        if spec.kind == "identity":
            continue
        rows.append(_row(lab, spec.kind, 1, artifact, attack_batch(lab, wm, spec, 0),
                         attack_batch(lab, clean, spec, 1), clean, tau))

    combined = []
    for k in range(1, len(SUITE) + 1):
        per_seed = []
        for s in range(lab.config.metrics.combined_seeds):
            sw = child_seed(lab.seed, "combined", k, s, 0)
            sc = child_seed(lab.seed, "combined", k, s, 1)
            a_w = apply_combinations(wm, k, sw, lab.model, lab.schedule)
            a_c = apply_combinations(clean, k, sc, lab.model, lab.schedule)
            per_seed.append(auc(distances(lab, a_w, artifact), distances(lab, a_c, artifact)))
        combined.append({"k": k, "auc": float(np.mean(per_seed)), "per_seed": per_seed})
        rows.append({"attack": f"combined_{k}", "k": k, "auc": float(np.mean(per_seed)),
                     "watermark_mse": float("nan"), "psnr": float("nan"), "ssim": float("nan"),
                     "tpr": float("nan")})

    by_kind = {r["attack"]: r["auc"] for r in rows}
    avg6 = float(np.mean([by_kind[k] if k in by_kind else suite_aucs(lab, artifact, wm, clean, (k,))[k]
                          for k in SUITE]))
    baselines = []
    null = lab.model.null_embedding()
    for r in range(lab.config.metrics.random_baselines):
        rng = np.random.default_rng(child_seed(lab.seed, "baseline", r))
        art_r = artifact.replace(pattern=matched_random(artifact.pattern, rng), w_p=null)
        wm_r = generate_images(lab, noise, comps, art_r)
        aucs = suite_aucs(lab, art_r, wm_r, clean)
        baselines.append({"baseline": r, "avg6_auc": float(np.mean(list(aucs.values()))), **aucs})
    base_avg = float(np.mean([b["avg6_auc"] for b in baselines]))
    ks = [c["k"] for c in combined]
    rho_k = float(stats.spearmanr(ks, [c["auc"] for c in combined]).statistic)

    report = DetectionReport([f"wm_{i:04d}" for i in range(n)] + [f"clean_{i:04d}" for i in range(n)],
                             np.concatenate([distances(lab, wm, artifact), d_clean]),
                             np.r_[np.ones(n, bool), np.zeros(n, bool)], tau,
                             rows[0]["watermark_mse"])
    summary = {"images_per_class": n, "tau": tau, "clean_auc": rows[0]["auc"],
               "avg6_auc": avg6, "random_baseline_avg6_auc": base_avg, "payoff": avg6 - base_avg,
               "combined_spearman": rho_k, "artifact_sha256": hashlib.sha256(artifact.dumps().encode()).hexdigest()}
    return {"rows": rows, "combined": combined, "baselines": baselines, "summary": summary,
            "report": report}


# sweeps ---------------------------------------------------------------------

SWEEP_FIELDS = ["value", "auc", "watermark_mse", "psnr", "ssim"]


def _sweep_point(lab, artifact, noise, comps, clean):
    wm = generate_images(lab, noise, comps, artifact)
    w_rec = recover_batch(lab, wm, artifact)
    d_pos = l1_distance(artifact.pattern.values, w_rec, artifact.mask)
    d_neg = distances(lab, clean, artifact)
    return {"auc": auc(d_pos, d_neg),
            "watermark_mse": float(np.mean(watermark_mse(artifact.pattern.values, w_rec, artifact.mask))),
            "psnr": finite_mean(psnr(wm, clean)), "ssim": float(np.mean(ssim(wm, clean)))}


def sweep_injection(lab: Lab, artifact, n=None):
    n = n or lab.config.sweep.images
    steps = lab.config.sweep.injection_steps or tuple(
        int(t) for t in sorted(lab.schedule.ladder) if 0 < t < lab.schedule.T)
    noise, comps = draw_inputs(lab, n, "sweep")
    clean = generate_images(lab, noise, comps)
    rows = [{"value": int(t), **_sweep_point(lab, artifact.replace(t_injection=int(t)), noise, comps, clean)}
            for t in steps]
    rho = float(stats.spearmanr([r["value"] for r in rows], [r["watermark_mse"] for r in rows]).statistic)
    # later injection = smaller t, so "MSE falls with later injection" means rho(t, MSE) > 0
    return rows, {"axis": "injection_step", "spearman_t_vs_mse": rho}


def extend_pattern(pattern, mask, rng):
    """Carry ring values onto another mask; new rings get random phases at the
    pattern's per-bin RMS magnitude."""
    rms = np.sqrt(np.sum(pattern.mask.ring_counts * np.abs(pattern.values) ** 2) / pattern.mask.n_bins)
    vals = rms * np.exp(2j * np.pi * rng.random(mask.n_rings))
    k = min(mask.n_rings, pattern.mask.n_rings)
    vals[:k] = pattern.values[:k]
    return WatermarkPattern(vals, mask)


def sweep_coverage(lab: Lab, artifact, n=None):
    n = n or lab.config.sweep.images
    size = lab.config.model.size
    noise, comps = draw_inputs(lab, n, "sweep")
    clean = generate_images(lab, noise, comps)
    rng = np.random.default_rng(child_seed(lab.seed, "sweep", 1))
    rows = []
    for c in lab.config.sweep.coverages:
        mask = build_ring_mask(size, size, float(c))
        art_c = artifact.replace(pattern=extend_pattern(artifact.pattern, mask, rng))
        rows.append({"value": float(c), **_sweep_point(lab, art_c, noise, comps, clean)})
    rho = float(stats.spearmanr([r["value"] for r in rows], [r["psnr"] for r in rows]).statistic)
    return rows, {"axis": "coverage", "spearman_coverage_vs_psnr": rho}


# probe ----------------------------------------------------------------------

def run_probe(lab: Lab):
    n = lab.config.probe.n_seeds
    cond = lab.model.prompt(np.arange(n) % lab.model.K)
    seed = sub_seed(lab.seed, "probe")
    curves = probe_mod.noise_term_curves(lab.model, cond, lab.schedule, lab.guidance, n, seed)
    resp = probe_mod.response_sweep(lab.model, lab.schedule, lab.mask, lab.config.probe.amplitude,
                                    cond, lab.guidance, n, seed)
    knee = probe_mod.detect_knee([r[0] for r in curves], [r[3] for r in curves])
    summary = {"guidance_knee_t": knee, "crossover_t": probe_mod.crossover(resp),
               "term_aggregation": "mean absolute value over pixels, averaged over seeds"}
    return curves, resp, summary
