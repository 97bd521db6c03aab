"""Command-line harness: ``ringlab <command> [flags]``.

Every command is a pure function of the run configuration, the master seed and
its inputs, so repeated runs write byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import probe as probe_mod
from .attacks import AttackSpec, apply
from .config import ConfigError, RunConfig
from .gridio import FormatError, read_pnm, read_rgf1, write_pnm, write_rgf1
from .metrics import FingerprintMismatch, calibrate_threshold, l1_distance
from .optimize import DivergenceError, format_log
from .pipeline import (BENCH_FIELDS, SWEEP_FIELDS, Lab, benchmark, child_seed, distances,
                       draw_inputs, generate_images, recover_batch, run_optimize, run_probe,
                       sweep_coverage, sweep_injection)
from .watermark import WatermarkArtifact

EXIT_OK, EXIT_CONFIG, EXIT_REFUSED, EXIT_IO = 0, 2, 3, 4


# serialization helpers -------------------------------------------------------

def _clean(v):
    """JSON-safe value: numpy scalars to Python, NaN and inf to null."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def dump_csv(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_cell(r[f]) for f in fields])
    return buf.getvalue()


def _write(out: Path, name: str, text: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text, encoding="utf-8")


# setup -----------------------------------------------------------------------

def load_config(args) -> RunConfig:
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        cfg = config_mod.loads(text)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, seed=args.seed)
    if args.images is not None:
        if args.images < 1:
            raise ConfigError("--images must be positive")
        cfg = replace(cfg, metrics=replace(cfg.metrics, images=args.images),
                      sweep=replace(cfg.sweep, images=args.images))
    return cfg


def load_artifact(path, lab: Lab) -> WatermarkArtifact:
    if path is None:
        raise ConfigError("this command needs --artifact")
    text = Path(path).read_text(encoding="utf-8")
    try:
        art = WatermarkArtifact.loads(text)
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"malformed artifact {path}: {e}") from e
    if art.schedule_fingerprint != lab.schedule.fingerprint():
        raise FingerprintMismatch("artifact was built for a different noise schedule")
    return art


def _out_dir(args, cfg) -> Path:
    return Path(args.out if args.out else cfg.output_dir)


def read_grid(path: Path) -> np.ndarray:
    if path.suffix == ".rgf":
        return read_rgf1(path)
    if path.suffix in (".pgm", ".ppm"):
        return read_pnm(path)
    raise FormatError(f"unsupported grid file: {path}")


def input_grids(spec) -> list:
    """(id, grid) pairs from a grid file or every .rgf file in a directory, sorted by name."""
    if spec is None:
        raise ConfigError("this command needs --input")
    p = Path(spec)
    files = sorted(p.glob("*.rgf")) if p.is_dir() else [p]
    if not files:
        raise FormatError(f"no .rgf grids found in {p}")
    return [(f.stem, read_grid(f)) for f in files]


# commands --------------------------------------------------------------------

def cmd_optimize(args, cfg, lab):
    out = _out_dir(args, cfg)
    try:
        artifact, log = run_optimize(lab)
    except DivergenceError as e:
        _write(out, "training_log.csv", format_log(e.log))
        raise
    _write(out, "artifact.json", artifact.dumps())
    _write(out, "training_log.csv", format_log(log))
    return {"artifact": str(out / "artifact.json"), "rounds": len(log)}


def cmd_generate(args, cfg, lab):
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    artifact = load_artifact(args.artifact, lab) if args.artifact else None
    n = cfg.metrics.images
    noise, comps = draw_inputs(lab, n)
    sets = [("clean", generate_images(lab, noise, comps))]
    if artifact is not None:
        sets.append(("wm", generate_images(lab, noise, comps, artifact)))
    rows = []
    for prefix, images in sets:
        for i, g in enumerate(images):
            name = f"{prefix}_{i:04d}"
            write_rgf1(out / f"{name}.rgf", g)
            write_pnm(out / f"{name}.pgm", g)
            rows.append({"id": name, "seed_index": i, "component": int(comps[i]),
                         "watermarked": prefix == "wm"})
    _write(out, "metadata.csv", dump_csv(["id", "seed_index", "component", "watermarked"], rows))
    return {"images": len(rows)}


def cmd_attack(args, cfg, lab):
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    items = input_grids(args.input)
    rows = []
    for spec in cfg.attacks:
        for idx, (name, g) in enumerate(items):
            seed = None
            if spec.seed is not None:
                seed = int(child_seed(cfg.seed, "attacks", spec.seed, idx).generate_state(1)[0])
            attacked = apply(np.asarray(g, dtype=np.float64), AttackSpec(spec.kind, spec.params, seed),
                             lab.model, lab.schedule)
            stem = f"{name}__{spec.kind}"
            write_rgf1(out / f"{stem}.rgf", attacked)
            write_pnm(out / f"{stem}.pgm", np.clip(attacked, 0.0, 1.0))
            rows.append({"id": stem, "source": name, "attack": spec.kind})
    _write(out, "attacks.csv", dump_csv(["id", "source", "attack"], rows))
    return {"outputs": len(rows)}


def cmd_verify(args, cfg, lab):
    out = _out_dir(args, cfg)
    artifact = load_artifact(args.artifact, lab)
    items = input_grids(args.input)
    # threshold from fresh clean images on a dedicated seed stream
    n_cal = cfg.metrics.images
    noise, comps = draw_inputs(lab, n_cal, "calibrate")
    d_cal = distances(lab, generate_images(lab, noise, comps), artifact)
    tau = calibrate_threshold(d_cal, cfg.metrics.target_fpr, min_samples=min(100, n_cal))
    images = np.stack([np.asarray(g, dtype=np.float64) for _, g in items])
    d = l1_distance(artifact.pattern.values, recover_batch(lab, images, artifact), artifact.mask)
    rows = [{"id": name, "distance": float(di), "decision": bool(di <= tau)}
            for (name, _), di in zip(items, d)]
    _write(out, "verify.csv", dump_csv(["id", "distance", "decision"], rows))
    _write(out, "verify.json", dump_json({"tau": tau, "calibration_images": n_cal,
                                          "target_fpr": cfg.metrics.target_fpr, "results": rows}))
    return {"detected": sum(r["decision"] for r in rows), "images": len(rows)}


def cmd_benchmark(args, cfg, lab):
    out = _out_dir(args, cfg)
    artifact = load_artifact(args.artifact, lab)
    res = benchmark(lab, artifact)
    report = res.pop("report")
    _write(out, "benchmark.csv", dump_csv(BENCH_FIELDS, res["rows"]))
    _write(out, "benchmark.json", dump_json({**res, "config": cfg.to_dict()}))
    _write(out, "detection.csv", report.to_csv())
    _write(out, "detection.json", dump_json(report.to_dict()))
    return res["summary"]


def cmd_sweep(args, cfg, lab):
    out = _out_dir(args, cfg)
    artifact = load_artifact(args.artifact, lab)
    fn = sweep_injection if args.axis == "injection_step" else sweep_coverage
    rows, summary = fn(lab, artifact)
    _write(out, f"sweep_{args.axis}.csv", dump_csv(SWEEP_FIELDS, rows))
    _write(out, f"sweep_{args.axis}.json", dump_json({"rows": rows, "summary": summary}))
    return summary


def cmd_probe(args, cfg, lab):
    out = _out_dir(args, cfg)
    curves, resp, summary = run_probe(lab)
    _write(out, "curves.csv", probe_mod.to_csv(probe_mod.CURVE_FIELDS, curves))
    _write(out, "response.csv", probe_mod.to_csv(probe_mod.RESPONSE_FIELDS, resp))
    _write(out, "probe.json", dump_json(summary))
    return summary


COMMANDS = {"optimize": cmd_optimize, "generate": cmd_generate, "attack": cmd_attack,
            "verify": cmd_verify, "benchmark": cmd_benchmark, "sweep": cmd_sweep,
            "probe": cmd_probe}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="threads for per-image loops; results do not depend on it")
    common.add_argument("--images", type=int, help="images per class (overrides the config)")
    common.add_argument("--artifact", help="watermark artifact JSON")

    parser = argparse.ArgumentParser(prog="ringlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("optimize", parents=[common], help="optimize a watermark artifact")
    sub.add_parser("generate", parents=[common], help="generate paired clean/watermarked images")
    p = sub.add_parser("attack", parents=[common], help="apply the configured attacks to grids")
    p.add_argument("--input", help="grid file or directory of .rgf grids")
    p = sub.add_parser("verify", parents=[common], help="decide watermark presence per grid")
    p.add_argument("--input", help="grid file or directory of .rgf grids")
    sub.add_parser("benchmark", parents=[common], help="detection and quality table")
    p = sub.add_parser("sweep", parents=[common], help="injection-step or coverage ablation")
    p.add_argument("--axis", choices=["injection_step", "coverage"], required=True)
    sub.add_parser("probe", parents=[common], help="guidance sensitivity curves")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.workers < 1:
            raise ConfigError("--workers must be positive")
        lab = Lab(cfg, workers=args.workers)
        result = COMMANDS[args.command](args, cfg, lab)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"optimization diverged: {e}", file=sys.stderr)
        return EXIT_REFUSED
    except FingerprintMismatch as e:
        print(f"verification refused: {e}", file=sys.stderr)
        return EXIT_REFUSED
    except (OSError, FormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    print(dump_json({"command": args.command, **result}), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
