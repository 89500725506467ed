"""Command-line experiment runner emitting figure-ready CSV data.

Subcommands: ``levels`` (per-level correction diagnostics), ``mlmc``
(tolerance sweep of full estimator runs), ``rates`` (fit convergence
rates from a levels file), ``sigma-sweep`` (nested-problem work with
constant sigma, normalized by the sample-std baseline).  Every command
writes space-separated CSV plus a JSON manifest; floats are serialized
with repr so reruns with one seed are byte-identical.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime
failure, 3 at least one sweep run ended with unresolved bias.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import (
    AUTO_START_CANDIDATES,
    AUTO_START_PILOT,
    PROBLEM_NAMES,
    Experiment,
    build_experiment,
    load_config,
    manifest_for,
    write_manifest,
)
from .core import (
    PHASE_DIAG,
    LevelStats,
    fit_rates,
    run_mlmc,
    sample_level,
    select_start_level,
)
from .errors import ConfigurationError

LEVELS_HEADER = "level M cost V m"
MLMC_HEADER = "tol cost estimate levels flags"
SWEEP_HEADER = "sigma worksmall workmid workbig"
SWEEP_DEFAULT_EPS = "2.5e-3,2.5e-4,2.5e-5"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for
    # runtime failures here, so route usage problems through exit 1
    def error(self, message):
        raise _UsageError(message)


def _float_list(text: str, flag: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise _UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise _UsageError(f"{flag}: empty list")
    return values


def _experiment(args) -> Experiment:
    raw = load_config(args.config) if args.config else {}
    adaptive = None if args.adaptive is None else args.adaptive == "on"
    return build_experiment(args.problem, raw, seed=args.seed, adaptive=adaptive)


def _start_level(experiment: Experiment, seed: int) -> int:
    if not experiment.auto_start:
        return experiment.engine.start_level
    return select_start_level(
        experiment.problem, experiment.params, AUTO_START_PILOT,
        AUTO_START_CANDIDATES, seed,
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: str, rows: list[tuple[str, ...]]) -> None:
    lines = [header] + [" ".join(row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_levels(args) -> int:
    if args.samples <= 0:
        raise _UsageError(f"--samples must be positive, got {args.samples}")
    if args.first < 0 or args.last < args.first:
        raise _UsageError(f"bad level range {args.first}..{args.last}")
    experiment = _experiment(args)
    ell0 = _start_level(experiment, experiment.seed)
    if args.first < ell0:
        raise _UsageError(f"--first {args.first} is below the start level {ell0}")
    rows = []
    for ell in range(args.first, args.last + 1):
        stats = sample_level(
            experiment.problem, ell, ell0, experiment.params,
            experiment.seed, args.samples, phase=PHASE_DIAG,
        )
        rows.append((
            str(ell), str(stats.count), repr(stats.cost_sum),
            repr(stats.variance), repr(stats.mean),
        ))
    out = _out_dir(args)
    _write_csv(out / "levels.csv", LEVELS_HEADER, rows)
    write_manifest(manifest_for(experiment), out / "levels-manifest.json", command={
        "name": "levels", "first": args.first, "last": args.last,
        "samples": args.samples, "start_level": ell0,
    })
    return 0


def cmd_mlmc(args) -> int:
    eps = _float_list(args.eps, "--eps")
    if any(e <= 0 for e in eps) or any(a <= b for a, b in zip(eps, eps[1:])):
        raise _UsageError(f"--eps must be positive and strictly descending, got {args.eps}")
    experiment = _experiment(args)
    rows = []
    bias_unresolved = False
    starts = []
    for index, epsilon in enumerate(eps):
        run_seed = experiment.seed + index
        ell0 = _start_level(experiment, run_seed)
        starts.append(ell0)
        engine = replace(experiment.engine, start_level=ell0)
        result = run_mlmc(experiment.problem, epsilon, engine, experiment.params, run_seed)
        bias_unresolved = bias_unresolved or result.bias_unresolved
        flags = ",".join(sorted(result.flags)) if result.flags else "-"
        rows.append((
            repr(float(epsilon)), repr(result.total_cost), repr(result.estimate),
            str(result.final_level), flags,
        ))
    out = _out_dir(args)
    _write_csv(out / "mlmc.csv", MLMC_HEADER, rows)
    write_manifest(manifest_for(experiment), out / "mlmc-manifest.json", command={
        "name": "mlmc", "eps": eps, "start_levels": starts,
    })
    return 3 if bias_unresolved else 0


def _read_levels_csv(path: str) -> list[LevelStats]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from None
    if not lines or lines[0].split() != LEVELS_HEADER.split():
        raise ConfigurationError(f"{path} line 1: expected header {LEVELS_HEADER!r}")
    stats = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ConfigurationError(f"{path} line {lineno}: expected 5 columns, got {len(parts)}")
        try:
            level, count = int(parts[0]), int(parts[1])
            cost, variance, mean = (float(p) for p in parts[2:])
        except ValueError:
            raise ConfigurationError(f"{path} line {lineno}: unparseable row {line!r}") from None
        st = LevelStats(level)
        st.count = count
        st.sum = mean * count
        st.sum_sq = variance * (count - 1) + st.sum * mean
        st.cost_sum = cost
        stats.append(st)
    return stats


def cmd_rates(args) -> int:
    stats = _read_levels_csv(args.file)
    if args.first is not None or args.last is not None:
        lo = args.first if args.first is not None else min(s.level for s in stats)
        hi = args.last if args.last is not None else max(s.level for s in stats)
        stats = [s for s in stats if lo <= s.level <= hi]
    fit = fit_rates(stats, [s.level for s in stats])
    print(f"alpha {fit.alpha_ind!r} {fit.alpha_se!r}")
    print(f"beta {fit.beta_ind!r} {fit.beta_se!r}")
    print(f"gamma {fit.gamma!r} {fit.gamma_se!r}")
    print("levels " + " ".join(str(level) for level in fit.levels))
    return 0


def cmd_sigma_sweep(args) -> int:
    if args.problem != "nested":
        raise _UsageError(f"sigma-sweep applies to the nested problem only, got {args.problem}")
    sigmas = _float_list(args.sigmas, "--sigmas")
    if any(s <= 0 for s in sigmas):
        raise _UsageError(f"--sigmas must be positive, got {args.sigmas}")
    eps = _float_list(args.eps, "--eps")
    if len(eps) != 3 or any(e <= 0 for e in eps) or any(a <= b for a, b in zip(eps, eps[1:])):
        raise _UsageError(f"--eps needs exactly 3 positive descending values, got {args.eps}")

    raw = load_config(args.config) if args.config else {}
    adaptive = None if args.adaptive is None else args.adaptive == "on"

    def total_cost(sigma_mode: str, epsilon: float, run_seed: int) -> float:
        experiment = build_experiment(
            "nested", {**raw, "sigma_mode": sigma_mode}, seed=args.seed, adaptive=adaptive,
        )
        ell0 = _start_level(experiment, run_seed)
        engine = replace(experiment.engine, start_level=ell0)
        result = run_mlmc(experiment.problem, epsilon, engine, experiment.params, run_seed)
        return result.total_cost

    baseline = build_experiment("nested", {**raw, "sigma_mode": "sample"},
                                seed=args.seed, adaptive=adaptive)
    base_costs = [total_cost("sample", e, baseline.seed + i) for i, e in enumerate(eps)]
    rows = []
    for sigma in sigmas:
        ratios = [
            total_cost(repr(sigma), e, baseline.seed + i) / base_costs[i]
            for i, e in enumerate(eps)
        ]
        rows.append((repr(float(sigma)),) + tuple(repr(float(v)) for v in ratios))
    out = _out_dir(args)
    _write_csv(out / "sigma-sweep.csv", SWEEP_HEADER, rows)
    write_manifest(manifest_for(baseline), out / "sigma-sweep-manifest.json", command={
        "name": "sigma-sweep", "sigmas": sigmas, "eps": eps,
        "baseline_costs": base_costs,
    })
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="admlmc", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="experiment seed (overrides config)")
    parser.add_argument("--out", default=".", help="output directory for CSV and manifest")
    parser.add_argument("--problem", choices=PROBLEM_NAMES, default="nested")
    parser.add_argument("--adaptive", choices=("on", "off"),
                        help="override adaptive refinement (default from config)")
    commands = parser.add_subparsers(dest="command", required=True)

    levels = commands.add_parser("levels", help="per-level correction diagnostics")
    levels.add_argument("--first", type=int, default=0, help="first level (default 0)")
    levels.add_argument("--last", type=int, default=7, help="last level (default 7)")
    levels.add_argument("--samples", type=int, default=10_000,
                        help="samples per level (default 10000)")
    levels.set_defaults(func=cmd_levels)

    mlmc = commands.add_parser("mlmc", help="tolerance sweep of full estimator runs")
    mlmc.add_argument("--eps", required=True,
                      help="comma-separated tolerances, strictly descending")
    mlmc.set_defaults(func=cmd_mlmc)

    rates = commands.add_parser("rates", help="fit convergence rates from a levels file")
    rates.add_argument("file", help="levels CSV produced by the levels command")
    rates.add_argument("--first", type=int, default=None, help="lowest level to fit")
    rates.add_argument("--last", type=int, default=None, help="highest level to fit")
    rates.set_defaults(func=cmd_rates)

    sweep = commands.add_parser("sigma-sweep",
                                help="nested-problem work with constant sigma vs sample std")
    sweep.add_argument("--sigmas", required=True, help="comma-separated sigma values")
    sweep.add_argument("--eps", default=SWEEP_DEFAULT_EPS,
                       help=f"three descending tolerances (default {SWEEP_DEFAULT_EPS})")
    sweep.set_defaults(func=cmd_sigma_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (_UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
