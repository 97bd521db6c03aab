"""Image attack suite, applied to images in the unit [0, 1] range."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import UNIT_GUIDANCE, forward_diffuse, sample
from .grid import block_dct_quantize, convolve_gaussian, crop_rescale, rotate_bilinear
from .imagespace import from_unit, to_unit

DEFAULT_PARAMS = {
    "identity": {},
    "blur": {"radius": 4.0},
    "noise": {"sigma": 0.1},
    "jpeg": {"quality": 25},
    "brightness": {"strength": 6.0},
    "rotation": {"degrees": 75.0, "random_sign": True},
    "crop": {"keep_fraction": 0.75},
    "regenerate": {"t_r": 200},
}
STOCHASTIC = {"noise", "brightness", "rotation", "regenerate"}
SUITE = ("blur", "noise", "jpeg", "brightness", "rotation", "crop")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in DEFAULT_PARAMS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        allowed = set(DEFAULT_PARAMS[self.kind]) | ({"factor"} if self.kind == "brightness" else set())
        extra = set(self.params) - allowed
        if extra:
            raise ValueError(f"unknown parameter(s) {sorted(extra)} for {self.kind}")
        p = dict(DEFAULT_PARAMS[self.kind])
        p.update(self.params)
        _validate(self.kind, p)
        object.__setattr__(self, "params", p)
        if self.kind in STOCHASTIC and self.seed is None and not _deterministic(self.kind, p):
            raise ValueError(f"{self.kind} attack needs a seed")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(d["kind"], dict(d.get("params", {})), d.get("seed"))


def _deterministic(kind, p):
    return ((kind == "brightness" and "factor" in p)
            or (kind == "rotation" and not p["random_sign"])
            or (kind == "noise" and p["sigma"] == 0))


def _validate(kind, p):
    def need(cond, msg):
        if not cond:
            raise ValueError(f"{kind}: {msg}")
    if kind == "blur":
        need(p["radius"] > 0, "radius must be positive")
    elif kind == "noise":
        need(p["sigma"] >= 0, "sigma must be non-negative")
    elif kind == "jpeg":
        need(int(p["quality"]) == p["quality"] and 1 <= p["quality"] <= 100, "quality must be 1..100")
    elif kind == "brightness":
        need(p["strength"] >= 0, "strength must be non-negative")
        if "factor" in p:
            need(p["factor"] >= 0, "factor must be non-negative")
    elif kind == "crop":
        need(0 < p["keep_fraction"] <= 1, "keep_fraction must be in (0, 1]")
    elif kind == "regenerate":
        need(int(p["t_r"]) == p["t_r"] and p["t_r"] >= 0, "t_r must be a non-negative integer")


def _planes(x):
    x = np.asarray(x, dtype=np.float64)
    return x, x.reshape((-1,) + x.shape[-2:])


def apply(x, spec: AttackSpec, model=None, schedule=None) -> np.ndarray:
    """Attack one image or a batch (leading axes); stochastic draws are per image."""
    x, flat = _planes(x)
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    k = spec.kind
    if k == "identity":
        return x.copy()
    if k == "blur":
        return convolve_gaussian(x, p["radius"])
    if k == "noise":
        if p["sigma"] == 0:
            return x.copy()
        return x + p["sigma"] * rng.standard_normal(x.shape)
    if k == "jpeg":
        return block_dct_quantize(x, int(p["quality"]))
    if k == "brightness":
        if "factor" in p:
            f = np.full(len(flat), float(p["factor"]))
        else:
            f = rng.uniform(max(0.0, 1.0 - p["strength"]), 1.0 + p["strength"], len(flat))
        return np.clip(flat * f[:, None, None], 0.0, 1.0).reshape(x.shape)
    if k == "rotation":
        deg = p["degrees"]
        if p["random_sign"]:
            signs = rng.choice([-1.0, 1.0], len(flat))
        else:
            signs = np.ones(len(flat))
        out = np.stack([rotate_bilinear(g, s * deg) for g, s in zip(flat, signs)])
        return out.reshape(x.shape)
    if k == "crop":
        return crop_rescale(x, p["keep_fraction"])
    if k == "regenerate":
        return regenerate(x, int(p["t_r"]), rng, model, schedule)
    raise AssertionError(k)


def regenerate(x, t_r: int, rng, model, schedule) -> np.ndarray:
    """Re-noise to t_r and denoise back with the null prompt."""
    if model is None or schedule is None:
        raise ValueError("regenerate attack needs the model and schedule")
    if t_r == 0:
        return np.array(x, dtype=np.float64)
    if not schedule.on_ladder(t_r):
        raise ValueError(f"t_r {t_r} is not on the sampler ladder")
    z = from_unit(x)
    z_t = forward_diffuse(z, t_r, rng.standard_normal(z.shape), schedule)
    z0, _ = sample(model, z_t, None, schedule, UNIT_GUIDANCE, start_t=t_r)
    return to_unit(z0)


def compose(x, specs, model=None, schedule=None) -> np.ndarray:
    """Apply attacks in list order."""
    specs = list(specs)
    if not 1 <= len(specs) <= 6:
        raise ValueError("compose takes 1..6 attacks")
    out = np.asarray(x, dtype=np.float64)
    for s in specs:
        out = apply(out, s, model, schedule)
    return out


def sample_combination(k: int, rng, kinds=SUITE):
    """k distinct attack kinds in random order, each with a fresh seed."""
    if not 1 <= k <= len(kinds):
        raise ValueError(f"k must be in 1..{len(kinds)}")
    picks = rng.permutation(len(kinds))[:k]
    return [AttackSpec(kinds[i], {}, int(rng.integers(2 ** 32))) for i in picks]


def apply_combinations(x, k: int, seed, model=None, schedule=None) -> np.ndarray:
    """Per image, compose an independently drawn set of k suite attacks."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    return np.stack([compose(img, sample_combination(k, rng), model, schedule) for img in x])
