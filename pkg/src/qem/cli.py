"""Command-line entry point ``qem``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from .agent import TrainingError
from .cfe import SingularFitError, simulate_f_min
from .experiments import EXPERIMENTS, aggregate, cfe_fit_demo, resolve_config, run_seed

__all__ = ["CONFIG_SCHEMA", "main", "load_config", "run_config"]

OUTPUT_ENV = "QEM_OUTPUT_DIR"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}
_triple = {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}

_TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "estimator": {"enum": ["em", "qem"]},
        "qem_order": {"enum": [1, 2, 3, 4]},
        "weights": {"type": "array", "items": _triple},
        "mode": {"enum": ["control", "evaluation"]},
        "policy": {"type": ["array", "null"], "items": {"type": "array", "items": _num}},
        "exploration": {"enum": ["epsilon_greedy", "dltv"]},
        "epsilon_base": {"type": "number", "minimum": 0, "maximum": 1},
        "epsilon_period": _pos_int,
        "dltv_c": {"type": "number", "minimum": 0},
        "n_quantiles": _pos_int,
        "steps": {"type": "integer", "minimum": 0},
        "lr_schedule": {
            "type": "array", "minItems": 1,
            "items": {"type": "array", "minItems": 2, "maxItems": 2,
                      "prefixItems": [{"type": "integer", "minimum": 0},
                                      {"type": "number", "exclusiveMinimum": 0}]},
        },
        "gamma": {"type": ["number", "null"], "minimum": 0, "exclusiveMaximum": 1},
        "init_low": _num,
        "init_high": _num,
        "log_every": _pos_int,
        "episode_cap": _pos_int,
        "probes": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
    },
}

_PARAMS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "gamma": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "n_rollouts": {"type": "integer", "minimum": 1000},
        "mixture": {"type": "array", "minItems": 1, "items": _triple},
        "m": {"type": "number", "exclusiveMinimum": 1},
        "n": {"type": "integer", "minimum": 2},
        "trials": _pos_int,
        "tau": {"enum": ["even", "uniform"]},
        "dist": {"enum": ["normal", "mixture", "exponential", "gumbel"]},
        "n_points": {"type": "integer", "minimum": 3},
        "noise_sd": {"type": "number", "minimum": 0},
        "orders": {"type": "array", "minItems": 1, "items": {"enum": [1, 2, 3, 4]}},
        "sweeps": _pos_int,
        "reward_grid": _pos_int,
        "n_quantiles": {"oneOf": [_pos_int, {"type": "array", "minItems": 1, "items": _pos_int}]},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["experiment", "seeds"],
    "additionalProperties": False,
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "seeds": {"type": "array", "minItems": 1, "uniqueItems": True,
                  "items": {"type": "integer", "minimum": 0}},
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": ["integer", "null"], "minimum": 1},
        "output_dir": {"type": "string"},
        "artifact_version": {"type": "string"},
        "train": _TRAIN_SCHEMA,
        "params": _PARAMS_SCHEMA,
    },
}


class ConfigError(ValueError):
    pass


def load_config(source) -> dict:
    """Parse and validate a config (path or mapping); raises :class:`ConfigError`."""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("config does not match the schema:\n  " + "\n  ".join(lines))
    try:
        return resolve_config(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def _format(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_format(v) for v in row])


def _run_one(args):
    config, seed = args
    return seed, run_seed(config, seed)


def run_config(config: dict, workers: int | None = None) -> dict:
    """Run every seed of a resolved config and write its files.

    Returns the summary dictionary written to ``summary.json``.
    """
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = config["seeds"]
    workers = workers or config.get("workers") or min(len(seeds), os.cpu_count() or 1)
    jobs = [(config, s) for s in seeds]
    if workers <= 1 or len(seeds) == 1:
        results = [_run_one(j) for j in jobs]
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_run_one, jobs))
    per_seed = {}
    for seed, (columns, rows, summary) in sorted(results, key=lambda r: r[0]):
        _write_csv(out / f"{config['experiment']}_{seed}.csv", columns, rows)
        per_seed[str(seed)] = summary
    summary = {"experiment": config["experiment"], "seeds": per_seed,
               **aggregate(config["experiment"], per_seed)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "manifest.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return summary


def _cmd_run(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if isinstance(raw, dict):
        if args.seed is not None:
            raw["seed"] = args.seed
        out = args.output_dir or os.environ.get(OUTPUT_ENV)
        if out:
            raw["output_dir"] = out
    try:
        config = load_config(raw)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = run_config(config, args.workers)
    except (SingularFitError, TrainingError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({k: v for k, v in summary.items() if k != "seeds"}, sort_keys=True))
    return EXIT_OK


def _cmd_simulate_f(args) -> int:
    rng = np.random.default_rng(args.seed)
    f = simulate_f_min(args.n, args.m, args.trials, args.tau, rng)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("m", "n", "trials", "tau", "f_min"))
    w.writerow((args.m, args.n, args.trials, args.tau, repr(f)))
    return EXIT_OK


def _cmd_fit(args) -> int:
    rng = np.random.default_rng(args.seed)
    orders = args.model or [1, 2, 3, 4]
    try:
        fits = cfe_fit_demo(args.dist, args.n_points, args.noise_sd, orders, rng)
    except SingularFitError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", "coefficients", "r_squared", "true_mean"))
    for f in fits:
        w.writerow((f["model"], " ".join(repr(c) for c in f["coefficients"]),
                    repr(f["r_squared"]), repr(f["true_mean"])))
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qem", description="QEM distributional RL experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", help="path to a JSON config")
    r.add_argument("--seed", type=int, help="process-wide seed (overrides the config)")
    r.add_argument("--output-dir", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    r.add_argument("--workers", type=int, help="worker processes")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("simulate-f", help="minimum of the variance-comparison function f")
    s.add_argument("--n", type=int, default=32)
    s.add_argument("--m", type=float, default=2.0)
    s.add_argument("--trials", type=int, default=100_000)
    s.add_argument("--tau", choices=("even", "uniform"), default="uniform")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_simulate_f)

    f = sub.add_parser("fit", help="fit Cornish-Fisher models to noisy quantiles")
    f.add_argument("--dist", choices=("normal", "mixture", "exponential", "gumbel"), default="mixture")
    f.add_argument("--model", type=int, choices=(1, 2, 3, 4), action="append")
    f.add_argument("--n-points", type=int, default=128)
    f.add_argument("--noise-sd", type=float, default=0.5)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=_cmd_fit)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
