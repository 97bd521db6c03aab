"""Run configuration: a strict JSON document that fully determines a run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attacks import SUITE, AttackSpec
from .diffusion import GuidanceConfig, NoiseSchedule
from .mixture import MixtureModel
from .optimize import OptimizerConfig
from .watermark import build_ring_mask


class ConfigError(ValueError):
    pass


# stream ids for sub-seed derivation; never renumber
STREAMS = {"dataset": 1, "optimize": 2, "generate": 3, "clean": 4, "attacks": 5,
           "baseline": 6, "combined": 7, "sweep": 8, "probe": 9, "calibrate": 10}


def sub_seed(master: int, stream: str) -> int:
    """Deterministic 64-bit child seed for a named stream of the master seed."""
    ss = np.random.SeedSequence([int(master), STREAMS[stream]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class ModelSpec:
    K: int = 4
    sigma0: float = 0.3
    size: int = 32
    amplitude: float = 1.0
    bias_dim: int = 16
    seed: int = 0  # dataset draw for optimization

    def build(self, schedule: NoiseSchedule) -> MixtureModel:
        return MixtureModel.default(schedule.alpha_bar, K=self.K, sigma0=self.sigma0,
                                    size=self.size, amplitude=self.amplitude,
                                    bias_dim=self.bias_dim)


@dataclass(frozen=True)
class WatermarkSpec:
    coverage: float = 0.7
    t_injection: int = 240


@dataclass(frozen=True)
class MetricSpec:
    images: int = 200
    target_fpr: float = 0.01
    random_baselines: int = 5
    combined_seeds: int = 3


@dataclass(frozen=True)
class SweepSpec:
    images: int = 50
    injection_steps: tuple = ()  # empty: every interior ladder step
    coverages: tuple = (0.05, 0.1, 0.2, 0.3, 0.5, 0.6, 0.7)  # each reachable on 32x32


@dataclass(frozen=True)
class ProbeSpec:
    n_seeds: int = 4
    amplitude: float = 20.0


def default_attacks():
    """The six-attack suite plus regeneration, each with a fixed seed."""
    return tuple(AttackSpec(k, {}, i) for i, k in enumerate(SUITE + ("regenerate",)))


def _schedule_default():
    return {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "steps": 50}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    schedule: dict = field(default_factory=_schedule_default)
    guidance: dict = field(default_factory=lambda: {"eta1": 7.5, "eta2": 1.0})
    watermark: WatermarkSpec = field(default_factory=WatermarkSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    attacks: tuple = field(default_factory=lambda: default_attacks())
    metrics: MetricSpec = field(default_factory=MetricSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    output_dir: str = "out"
    seed: int = 0

    def build_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(**self.schedule)

    def build_guidance(self) -> GuidanceConfig:
        return GuidanceConfig(**self.guidance)

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "schedule": dict(self.schedule),
            "guidance": dict(self.guidance),
            "watermark": asdict(self.watermark),
            "optimizer": self.optimizer.to_dict(),
            "attacks": [a.to_dict() for a in self.attacks],
            "metrics": asdict(self.metrics),
            "sweep": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.sweep).items()},
            "probe": asdict(self.probe),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _strict_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def from_dict(d: dict) -> RunConfig:
    _strict_keys(d, {f.name for f in fields(RunConfig)}, "config")
    base = RunConfig()
    kw = {}
    if "model" in d:
        kw["model"] = _strict(ModelSpec, d["model"], "model")
    if "schedule" in d:
        _strict_keys(d["schedule"], _schedule_default(), "schedule")
        kw["schedule"] = {**base.schedule, **d["schedule"]}
    if "guidance" in d:
        _strict_keys(d["guidance"], base.guidance, "guidance")
        kw["guidance"] = {**base.guidance, **d["guidance"]}
    if "watermark" in d:
        kw["watermark"] = _strict(WatermarkSpec, d["watermark"], "watermark")
    if "optimizer" in d:
        kw["optimizer"] = _strict(OptimizerConfig, d["optimizer"], "optimizer")
    if "attacks" in d:
        if not isinstance(d["attacks"], list):
            raise ConfigError("attacks must be a list")
        specs = []
        for i, a in enumerate(d["attacks"]):
            _strict_keys(a, {"kind", "params", "seed"}, f"attacks[{i}]")
            try:
                specs.append(AttackSpec.from_dict(a))
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"attacks[{i}]: {e}") from e
        kw["attacks"] = tuple(specs)
    for key, cls in (("metrics", MetricSpec), ("sweep", SweepSpec), ("probe", ProbeSpec)):
        if key in d:
            kw[key] = _strict(cls, d[key], key)
    if "output_dir" in d:
        kw["output_dir"] = str(d["output_dir"])
    if "seed" in d:
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        kw["seed"] = d["seed"]
    cfg = RunConfig(**{**{f.name: getattr(base, f.name) for f in fields(RunConfig)}, **kw})
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    try:
        sch = cfg.build_schedule()
        cfg.build_guidance()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    t = cfg.watermark.t_injection
    if not (sch.on_ladder(t) and 0 < t < sch.T):
        raise ConfigError(f"t_injection {t} must be an interior ladder timestep")
    m = cfg.model
    if m.K < 1 or m.size < 8 or m.size & (m.size - 1) or m.sigma0 < 0 or m.bias_dim < 1:
        raise ConfigError("model spec out of range")
    for c in (cfg.watermark.coverage,) + tuple(cfg.sweep.coverages):
        try:
            build_ring_mask(cfg.model.size, cfg.model.size, float(c))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"coverage {c}: {e}") from e
    if cfg.metrics.images < 1 or cfg.metrics.random_baselines < 1 or cfg.metrics.combined_seeds < 1:
        raise ConfigError("metric counts must be positive")
    if cfg.sweep.images < 1 or cfg.probe.n_seeds < 1:
        raise ConfigError("sweep/probe counts must be positive")


def loads(text: str) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}") from e
    return from_dict(d)
