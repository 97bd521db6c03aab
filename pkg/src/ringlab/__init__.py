"""Frequency-ring watermarking injected mid-trajectory into a DDIM sampler.

The denoiser is the closed-form posterior of a Gaussian mixture, so every
mechanism (injection, hiding guidance, inversion, attacks, detection) runs
exactly and quickly on small grids.
"""

from .attacks import AttackSpec, apply, compose
from .config import ConfigError, RunConfig
from .diffusion import GuidanceConfig, NoiseSchedule, invert, sample
from .metrics import DetectionReport, FingerprintMismatch, auc, psnr, ssim, verify
from .mixture import Conditioning, MixtureModel
from .optimize import DivergenceError, OptimizerConfig, optimize
from .pipeline import Lab, benchmark, run_optimize
from .watermark import (RingMask, WatermarkArtifact, WatermarkPattern, build_ring_mask, extract,
                        inject)

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "apply", "compose", "ConfigError", "RunConfig", "GuidanceConfig",
    "NoiseSchedule", "invert", "sample", "DetectionReport", "FingerprintMismatch", "auc", "psnr",
    "ssim", "verify", "Conditioning", "MixtureModel", "DivergenceError", "OptimizerConfig",
    "optimize", "Lab", "benchmark", "run_optimize", "RingMask", "WatermarkArtifact",
    "WatermarkPattern", "build_ring_mask", "extract", "inject",
]
