"""Command-line front end: ``depo {run, sweep, export-world, verify} --config FILE``.

Config files are INI with three sections::

    [world]        M, K, d, S, R_max, generator, seed
    [train]        T, beta, alpha (number or sqrtT), lambda, H, c_b, epsilon,
                   buffer_capacity, gd_steps, gd_lr, delta, ...
    [experiment]   arms, seeds, output_dir
"""
from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .driver import (ARMS, KAPPA_MODES, OBJECTIVES, WIDTH_MODES, RunConfig, check_invariants,
                     decomposition_report, read_trace_csv, run_arm, summary_json, trace_to_csv)
from .world import GENERATORS, ConfigError, WorldSpec, build_world, save_world

SEED_ENV = "DEPO_SEED_OVERRIDE"
DETERMINISM_PREFIX = 50


class ConfigErrors(ConfigError):
    """Every violated constraint found while parsing a config file."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


# key -> (target field, type, constraint check, constraint text)
_WORLD_KEYS = {
    "M": ("num_prompts", int, lambda v: v >= 1, ">= 1"),
    "K": ("pool_size", int, lambda v: v >= 2, ">= 2"),
    "d": ("feature_dim", int, lambda v: v >= 1, ">= 1"),
    "S": ("S", float, lambda v: v > 0, "> 0"),
    "R_max": ("R_max", float, lambda v: v > 0, "> 0"),
    "generator": ("generator", str, lambda v: v in GENERATORS, f"one of {GENERATORS}"),
    "seed": ("seed", int, lambda v: v >= 0, ">= 0"),
    "hidden_dim": ("hidden_dim", int, lambda v: v >= 0, ">= 0"),
    "center": ("center", "bool", None, ""),
}

_TRAIN_KEYS = {
    "T": ("T", int, lambda v: v >= 0, ">= 0"),
    "beta": ("beta", float, lambda v: v > 0, "> 0"),
    "alpha": ("alpha", "alpha", lambda v: v >= 0, ">= 0 or sqrtT"),
    "lambda": ("lam", float, lambda v: v > 0, "> 0"),
    "H": ("H", int, lambda v: v >= 1, ">= 1"),
    "c_b": ("c_b", float, lambda v: v > 0, "> 0"),
    "epsilon": ("epsilon", float, lambda v: v > 0, "> 0"),
    "buffer_capacity": ("buffer_capacity", int, lambda v: v >= 1, ">= 1"),
    "gd_steps": ("gd_steps", int, lambda v: v >= 0, ">= 0"),
    "gd_lr": ("gd_lr", float, lambda v: v > 0, "> 0"),
    "delta": ("delta", float, lambda v: 0 < v < 1, "in (0, 1)"),
    "width_mode": ("width_mode", str, lambda v: v in WIDTH_MODES, f"one of {WIDTH_MODES}"),
    "kappa_mode": ("kappa_mode", str, lambda v: v in KAPPA_MODES, f"one of {KAPPA_MODES}"),
    "objective": ("objective", str, lambda v: v in OBJECTIVES, f"one of {OBJECTIVES}"),
    "diagnostics": ("diagnostics", "bool", None, ""),
    "report_refreshed_regret": ("report_refreshed_regret", "bool", None, ""),
}

_REQUIRED = {"experiment": ("arms", "seeds")}


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    train: RunConfig = field(default_factory=RunConfig)
    arms: tuple = ("depo",)
    seeds: tuple = (0,)
    output_dir: Path = Path("runs")
    # the alpha setting as written, e.g. "sqrtT"
    alpha_spec: str = "sqrtT"

    def echo(self) -> dict:
        """Resolved values, as stored in every summary."""
        w = self.world
        train = asdict(self.train)
        train["lambda"] = train.pop("lam")
        return {
            "world": {"M": w.num_prompts, "K": w.pool_size, "d": w.feature_dim, "S": w.S,
                      "R_max": w.R_max, "generator": w.generator, "seed": w.seed,
                      "hidden_dim": w.hidden_dim, "center": w.center},
            "train": train,
            "alpha_spec": self.alpha_spec,
            "arms": list(self.arms),
            "seeds": list(self.seeds),
            "output_dir": str(self.output_dir),
        }


def _convert(raw: str, kind):
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int:
        f = float(raw)
        if f != int(f):
            raise ValueError(f"not an integer: {raw!r}")
        return int(f)
    return kind(raw.strip())


def _section(parser, name, table, errors, prefix) -> dict:
    out = {}
    if not parser.has_section(name):
        return out
    for key, raw in parser.items(name):
        if key not in table:
            errors.append(f"{prefix}.{key}: unknown key")
            continue
        target, kind, check, text = table[key]
        if kind == "alpha":
            out[target] = raw.strip()
            continue
        try:
            val = _convert(raw, kind)
        except ValueError:
            errors.append(f"{prefix}.{key}: cannot parse {raw!r}")
            continue
        if check is not None and not check(val):
            errors.append(f"{prefix}.{key}: must be {text} (got {val!r})")
            continue
        out[target] = val
    return out


def _int_list(raw: str) -> list[int]:
    return [int(tok) for tok in raw.replace(",", " ").split()]


def resolve_alpha(spec: str, T: int) -> float:
    if spec.lower() == "sqrtt":
        return float(math.ceil(math.sqrt(T)))
    return float(spec)


def parse_config(path) -> ExperimentConfig:
    """Read and validate an INI config; raises ConfigErrors listing every problem."""
    path = Path(path)
    if not path.is_file():
        raise ConfigErrors([f"config file not found: {path}"])
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (T, H, M, K)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigErrors([f"malformed config: {exc}"]) from None

    errors: list[str] = []
    for sec in parser.sections():
        if sec not in ("world", "train", "experiment"):
            errors.append(f"[{sec}]: unknown section")
    for sec, keys in _REQUIRED.items():
        for key in keys:
            if not parser.has_option(sec, key):
                errors.append(f"{sec}.{key}: missing required key")

    wvals = _section(parser, "world", _WORLD_KEYS, errors, "world")
    tvals = _section(parser, "train", _TRAIN_KEYS, errors, "train")

    alpha_spec = tvals.pop("alpha", "sqrtT")
    T = tvals.get("T", RunConfig.T)
    try:
        alpha = resolve_alpha(alpha_spec, T)
        if not (alpha >= 0 and math.isfinite(alpha)):
            errors.append(f"train.alpha: must be >= 0 or sqrtT (got {alpha_spec!r})")
    except ValueError:
        errors.append(f"train.alpha: must be a number or sqrtT (got {alpha_spec!r})")
        alpha = 0.0

    arms, seeds = ("depo",), (0,)
    output_dir = Path("runs")
    if parser.has_section("experiment"):
        for key in parser.options("experiment"):
            if key not in ("arms", "seeds", "output_dir"):
                errors.append(f"experiment.{key}: unknown key")
        if parser.has_option("experiment", "arms"):
            arms = tuple(a for a in parser.get("experiment", "arms").replace(",", " ").split())
            bad = [a for a in arms if a not in ARMS]
            if bad:
                errors.append(f"experiment.arms: unknown arm(s) {bad}; expected a subset of {ARMS}")
            if not arms:
                errors.append("experiment.arms: at least one arm required")
        if parser.has_option("experiment", "seeds"):
            try:
                seeds = tuple(_int_list(parser.get("experiment", "seeds")))
                if not seeds:
                    errors.append("experiment.seeds: at least one seed required")
                if any(s < 0 for s in seeds):
                    errors.append("experiment.seeds: must be >= 0")
            except ValueError:
                errors.append("experiment.seeds: must be a list of integers")
        if parser.has_option("experiment", "output_dir"):
            output_dir = Path(parser.get("experiment", "output_dir"))

    if errors:
        raise ConfigErrors(errors)
    world = WorldSpec(**wvals)
    train = RunConfig(alpha=alpha, **tvals)
    errors += world.validate() + train.validate()
    if world.num_prompts * world.pool_size**2 > 10**6:
        errors.append("world: M*K^2 exceeds the enumeration budget 1e6")
    if errors:
        raise ConfigErrors(errors)
    return ExperimentConfig(world=world, train=train, arms=arms, seeds=seeds,
                            output_dir=output_dir, alpha_spec=alpha_spec)


def apply_seed_override(cfg: ExperimentConfig, environ=os.environ) -> ExperimentConfig:
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigErrors([f"{SEED_ENV}: must be an integer (got {raw!r})"]) from None
    return replace(cfg, seeds=(seed,))


# -- orchestration -----------------------------------------------------------

def csv_name(arm: str, seed: int) -> str:
    return f"{arm}_seed{seed}.csv"


def _job(args) -> dict:
    world_spec, train, arm, seed, out = args
    world = build_world(world_spec)
    trace = run_arm(world, train, seed, arm)
    text = trace_to_csv(trace)
    Path(out, csv_name(arm, seed)).write_text(text, encoding="utf-8", newline="\n")
    cum = trace.cumulative()
    T = trace.T
    checkpoints = {}
    for name, k in (("T/4", T // 4), ("T/2", T // 2), ("T", T)):
        checkpoints[name] = float(cum[k - 1]) if k > 0 else 0.0
    rep = decomposition_report(trace, train.alpha)
    return {
        "arm": arm, "seed": seed, "T": T, "checkpoints": checkpoints,
        "cumulative_regret": trace.cumulative_regret,
        "potential_sum": rep["potential_sum"], "potential_bound": rep["potential_bound"],
        "quarter_bonus_sum": rep["quarter_bonus_sum"],
        "final_lambda_min": trace.final_lambda_min,
        "coverage_failures": int(sum(not r.coverage_ok for r in trace.rounds)),
        "newton_failures": trace.newton_failures,
        "invariant_failures": check_invariants(trace),
    }


def _determinism_failures(cfg: ExperimentConfig, out: Path) -> list[str]:
    """Re-run a short prefix of the first job and compare it with the CSV on disk."""
    arm, seed = cfg.arms[0], cfg.seeds[0]
    n = min(cfg.train.T, DETERMINISM_PREFIX)
    again = trace_to_csv(run_arm(build_world(cfg.world), replace(cfg.train, T=n), seed, arm))
    disk = Path(out, csv_name(arm, seed)).read_text(encoding="utf-8").split("\n")
    if again.split("\n")[: n + 1] != disk[: n + 1]:
        return [f"determinism: {arm} seed {seed} differs from a re-run within the first {n} rounds"]
    return []


def _mean_std(vals) -> dict:
    a = np.asarray(vals, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if len(a) > 1 else 0.0}


def comparison_table(per_arm: dict) -> str:
    lines = ["arm,n_seeds,T4_mean,T4_std,T2_mean,T2_std,T_mean,T_std,depo_le_arm_fraction"]
    depo = {r["seed"]: r["cumulative_regret"] for r in per_arm.get("depo", [])}
    for arm in ARMS:
        if arm not in per_arm:
            continue
        runs = per_arm[arm]
        cells = [arm, str(len(runs))]
        for cp in ("T/4", "T/2", "T"):
            ms = _mean_std([r["checkpoints"][cp] for r in runs])
            cells += [format(ms["mean"], ".6f"), format(ms["std"], ".6f")]
        paired = [depo[r["seed"]] <= r["cumulative_regret"] for r in runs if r["seed"] in depo]
        cells.append(format(float(np.mean(paired)), ".3f") if paired and arm != "depo" else "")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, stamp: bool = True) -> int:
    """Run arms x seeds, write CSVs and summaries, return the exit status."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg.world, cfg.train, arm, seed, str(out)) for arm in cfg.arms for seed in cfg.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, tasks))
    else:
        results = [_job(t) for t in tasks]

    global_fail = _determinism_failures(cfg, out) if cfg.train.T > 0 else []
    per_arm: dict = {}
    for r in results:
        per_arm.setdefault(r["arm"], []).append(r)
    failed = bool(global_fail)
    for arm, runs in per_arm.items():
        failures = [f"{arm} seed {r['seed']}: {msg}" for r in runs for msg in r["invariant_failures"]]
        failed |= bool(failures)
        summary = {
            "arm": arm,
            "config": cfg.echo(),
            "checkpoints": {cp: _mean_std([r["checkpoints"][cp] for r in runs])
                            for cp in ("T/4", "T/2", "T")},
            "runs": runs,
            "invariant_failures": failures + global_fail,
            "passed": not (failures or global_fail),
        }
        if stamp:
            # excluded from byte-comparison
            summary["metadata"] = {"created": _dt.datetime.now(_dt.timezone.utc).isoformat()}
        Path(out, f"{arm}_summary.json").write_text(summary_json(summary), encoding="utf-8",
                                                     newline="\n")
    if len(per_arm) > 1:
        Path(out, "comparison.csv").write_text(comparison_table(per_arm), encoding="utf-8",
                                               newline="\n")
    for msg in global_fail + [m for runs in per_arm.values() for r in runs
                              for m in r["invariant_failures"]]:
        print(f"INVARIANT FAILED: {msg}", file=sys.stderr)
    return 1 if failed else 0


def run_sweep(cfg: ExperimentConfig, param: str, values: list[str], jobs: int = 1) -> int:
    """Repeat ``run_experiment`` for each value of one train parameter, in subdirectories."""
    if param not in _TRAIN_KEYS:
        raise ConfigErrors([f"sweep parameter {param!r} is not a train key"])
    target, kind, check, text = _TRAIN_KEYS[param]
    status = 0
    for raw in values:
        if kind == "alpha":
            val = resolve_alpha(raw, cfg.train.T)
        else:
            val = _convert(raw, kind)
            if check is not None and not check(val):
                raise ConfigErrors([f"sweep {param}: must be {text} (got {val!r})"])
        train = replace(cfg.train, **{target: val})
        if param == "T" and cfg.alpha_spec.lower() == "sqrtt":
            train = replace(train, alpha=resolve_alpha("sqrtT", val))
        errs = train.validate()
        if errs:
            raise ConfigErrors(errs)
        sub = replace(cfg, train=train, output_dir=Path(cfg.output_dir, f"{param}={raw}"))
        status |= run_experiment(sub, jobs=jobs)
    return status


def export_fixture(cfg: ExperimentConfig, path: Optional[Path] = None) -> Path:
    path = Path(path) if path is not None else Path(cfg.output_dir, "world.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_world(build_world(cfg.world), path)
    return path


def verify_trace(cfg: ExperimentConfig, path) -> list[str]:
    """Invariant suite on a CSV produced by ``run``; D and lambda come from the config."""
    trace = read_trace_csv(path, D=2 * cfg.world.feature_dim, lam=cfg.train.lam,
                           alpha=cfg.train.alpha)
    return check_invariants(trace)


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depo", description="Elliptical-bonus preference optimization simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, type=Path, help="INI experiment config")
        sp.add_argument("--output", type=Path, help="override experiment.output_dir")
        sp.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")
        sp.add_argument("--verify-only", type=Path, metavar="TRACE.csv",
                        help="check the invariants of an existing trace and exit")
        return sp

    common(sub.add_parser("run", help="run every arm x seed in the config"))
    sw = common(sub.add_parser("sweep", help="repeat the experiment over values of one train key"))
    sw.add_argument("--param", required=True, help="train key, e.g. c_b")
    sw.add_argument("--values", required=True, help="comma-separated values")
    common(sub.add_parser("export-world", help="write the world fixture as JSON"))
    common(sub.add_parser("verify", help="run the invariant suite on a trace CSV"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = apply_seed_override(parse_config(args.config))
    except ConfigErrors as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.output is not None:
        cfg = replace(cfg, output_dir=args.output)

    if args.verify_only is not None or args.command == "verify":
        if args.verify_only is None:
            print("error: verify needs --verify-only TRACE.csv", file=sys.stderr)
            return 2
        fails = verify_trace(cfg, args.verify_only)
        for msg in fails:
            print(f"INVARIANT FAILED: {msg}", file=sys.stderr)
        print("ok" if not fails else f"{len(fails)} invariant(s) failed")
        return 1 if fails else 0
    if args.command == "export-world":
        print(export_fixture(cfg))
        return 0
    if args.command == "sweep":
        return run_sweep(cfg, args.param, [v.strip() for v in args.values.split(",") if v.strip()],
                         jobs=args.jobs)
    return run_experiment(cfg, jobs=args.jobs)


if __name__ == "__main__":
    sys.exit(main())
