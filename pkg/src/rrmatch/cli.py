"""Command-line interface: generators, distance/match commands, and experiment runners.

Subcommands: gen, distance, match, flow, plateau, converge, bench.  Every
result is a self-describing JSON record (one per line when a command emits a
table).  Exit codes: 0 success, 2 usage error, 3 data error, 4 cap exceeded.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rrmatch.core import (
    CapExceededError,
    DataFormatError,
    InvalidCloudError,
    Plan,
    PointCloud,
    SizeMismatchError,
    derive_seed,
    load_point_cloud,
    normalize_unit_box,
    plan_squared_cost,
    save_point_cloud,
)
from rrmatch.diagnostics import (
    LastMileParams,
    convergence_experiment,
    plateau_decomposition,
    threshold_consistency_experiment,
)
from rrmatch.generators import FAMILIES, GeneratorSpec, gen
from rrmatch.matching import exact_w2, hungarian, merged_rrm, rrm_plan, squared_distance_matrix
from rrmatch.srrm import SrrmConfig, srrm_match

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CAP = 4

METHODS = ("rrm", "merged", "srrm", "exact")

_TAG_CLI = 7


@dataclass(frozen=True)
class FlowConfig:
    """Displacement-flow parameters: convex step, iteration budget, matcher."""

    step: float = 0.15
    iterations: int = 100
    matcher: str = "srrm"
    snapshot_every: int = 10

    def __post_init__(self) -> None:
        if not 0.0 < self.step <= 1.0:
            raise ValueError(f"step must be in (0, 1], got {self.step}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.snapshot_every < 1:
            raise ValueError("snapshot-every must be >= 1")
        if self.matcher not in METHODS:
            raise ValueError(f"unknown matcher {self.matcher!r}")


def _emit(record: dict, out_path: str | None, stream=None) -> None:
    line = json.dumps(record, sort_keys=True)
    if out_path:
        with open(out_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
    else:
        print(line, file=stream or sys.stdout)


def _write_table(records: list[dict], out_path: str | None, fmt: str) -> None:
    """Emit experiment records as JSON lines (default) or a CSV table."""
    if fmt == "jsonl":
        for record in records:
            _emit(record, out_path)
        return
    fieldnames = sorted({key for record in records for key in record})
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fieldnames)
    writer.writeheader()
    for record in records:
        writer.writerow(
            {k: json.dumps(v) if isinstance(v, (dict, list)) else v for k, v in record.items()}
        )
    if out_path:
        with open(out_path, "a", encoding="utf-8") as fh:
            fh.write(buffer.getvalue())
    else:
        sys.stdout.write(buffer.getvalue())


def _exact_cap(args: argparse.Namespace) -> int:
    return args.cap if args.cap is not None else 1024


def _screening_cap(args: argparse.Namespace) -> int:
    return args.cap if args.cap is not None else 4096


def _load_pair(file_x: str, file_y: str, fmt: str | None) -> tuple[PointCloud, PointCloud]:
    X = load_point_cloud(file_x, fmt)
    Y = load_point_cloud(file_y, fmt)
    if X.n != Y.n:
        raise SizeMismatchError(f"clouds must have equal size, got {X.n} and {Y.n}")
    if X.d != Y.d:
        raise SizeMismatchError(f"dimension mismatch: {X.d} != {Y.d}")
    return X, Y


def _maybe_normalize(X: PointCloud, Y: PointCloud, mode: str) -> tuple[PointCloud, PointCloud]:
    if mode == "none":
        return X, Y
    Xn, Yn, _ = normalize_unit_box(X, Y, mode)
    return Xn, Yn


def _srrm_config(args: argparse.Namespace) -> SrrmConfig:
    return SrrmConfig(
        rounds=args.R,
        anchors_per_point=args.anchors,
        merge_runs=args.K,
        hungarian_cap=_screening_cap(args),
        seed=args.seed,
    )


def _plan_for_method(
    method: str, X: PointCloud, Y: PointCloud, args: argparse.Namespace
) -> tuple[Plan, dict]:
    """Plan on the (already normalized) pair plus the method's parameter record."""
    if method == "rrm":
        return rrm_plan(X, Y), {}
    if method == "merged":
        return merged_rrm(X, Y, args.K, args.seed), {"K": args.K}
    if method == "srrm":
        cfg = _srrm_config(args)
        result = srrm_match(X, Y, cfg)
        return result.plan, {
            "K": cfg.merge_runs,
            "R": cfg.rounds,
            "anchors": cfg.anchors_per_point,
            "cap": cfg.hungarian_cap,
            "history": list(result.history),
        }
    if method == "exact":
        cap = _exact_cap(args)
        if X.n > cap:
            raise CapExceededError(f"exact method capped at {cap} points, got {X.n}")
        return hungarian(squared_distance_matrix(X, Y)), {"cap": cap}
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _spec_from_args(args: argparse.Namespace, seed: int | None = None) -> GeneratorSpec:
    return GeneratorSpec(
        family=args.family,
        n=args.n,
        d=args.d,
        seed=args.seed if seed is None else seed,
        t=args.t,
        sigma=args.sigma,
        frac_bads=args.frac_bads,
        good_slope=args.good_slope,
        bad_slope=args.bad_slope,
        delta=args.delta,
        alpha=args.alpha,
    )


def cmd_gen(args: argparse.Namespace) -> int:
    spec = _spec_from_args(args)
    X, Y = gen(spec)
    if Y is not None and not args.out2:
        print(f"family {spec.family!r} produces a pair; pass --out2", file=sys.stderr)
        return EXIT_USAGE
    save_point_cloud(X, args.out, args.format)
    record = {"command": "gen", "family": spec.family, "n": spec.n, "d": spec.d,
              "seed": spec.seed, "out": str(args.out)}
    if Y is not None:
        save_point_cloud(Y, args.out2, args.format)
        record["out2"] = str(args.out2)
    _emit(record, None)
    return EXIT_OK


def cmd_distance(args: argparse.Namespace) -> int:
    X0, Y0 = _load_pair(args.fileX, args.fileY, args.format)
    X, Y = _maybe_normalize(X0, Y0, args.normalize)
    t0 = time.perf_counter()
    plan, params = _plan_for_method(args.method, X, Y, args)
    wall_ms = 1000.0 * (time.perf_counter() - t0)
    record = {
        "command": "distance",
        "method": args.method,
        "value": plan.rms,
        "n": X.n,
        "d": X.d,
        "seed": args.seed,
        "normalize": args.normalize,
        "params": params,
        "wall_ms": wall_ms,
        "timestamp": time.time(),
    }
    _emit(record, args.out)
    return EXIT_OK


def cmd_match(args: argparse.Namespace) -> int:
    X0, Y0 = _load_pair(args.fileX, args.fileY, args.format)
    X, Y = _maybe_normalize(X0, Y0, args.normalize)
    t0 = time.perf_counter()
    plan, params = _plan_for_method(args.method, X, Y, args)
    wall_ms = 1000.0 * (time.perf_counter() - t0)
    # Cost is reported in the file coordinates so it can be re-derived from them.
    cost = plan_squared_cost(X0, Y0, plan.pi)
    out = Path(args.out)
    out.write_text("".join(f"{i},{int(t)}\n" for i, t in enumerate(plan.pi)), encoding="utf-8")
    sidecar = {
        "command": "match",
        "method": args.method,
        "n": plan.n,
        "d": X.d,
        "seed": args.seed,
        "normalize": args.normalize,
        "squared_cost_sum": cost,
        "rms": math.sqrt(cost / plan.n),
        "params": params,
        "wall_ms": wall_ms,
        "timestamp": time.time(),
    }
    Path(str(out) + ".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_flow(args: argparse.Namespace) -> int:
    cfg = FlowConfig(
        step=args.step,
        iterations=args.iterations,
        matcher=args.method,
        snapshot_every=args.snapshot_every,
    )
    X, Y = _load_pair(args.fileX, args.fileY, args.format)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    metrics_path = outdir / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)

    current = X.coords.copy()
    for it in range(cfg.iterations):
        cx = PointCloud(current)
        cxn, yn = _maybe_normalize(cx, Y, args.normalize)
        plan, _ = _plan_for_method(cfg.matcher, cxn, yn, args)
        value = math.sqrt(plan_squared_cost(cx, Y, plan.pi) / plan.n)
        record = {"iter": it, "value": value}
        if X.n <= _exact_cap(args):
            record["exact_w2"] = exact_w2(cx, Y, _exact_cap(args))
        _emit(record, str(metrics_path))
        if it % cfg.snapshot_every == 0:
            save_point_cloud(cx, outdir / f"snapshot_{it:05d}.pcf")
        current = (1.0 - cfg.step) * current + cfg.step * Y.coords[plan.pi]

    final = PointCloud(current)
    save_point_cloud(final, outdir / "final.pcf")
    summary = {
        "command": "flow",
        "iterations": cfg.iterations,
        "step": cfg.step,
        "matcher": cfg.matcher,
        "n": X.n,
        "d": X.d,
        "seed": args.seed,
        "outdir": str(outdir),
        "timestamp": time.time(),
    }
    _emit(summary, args.out)
    return EXIT_OK


def cmd_plateau(args: argparse.Namespace) -> int:
    if args.family not in ("line-mixture", "opening-angle"):
        print("plateau supports --family line-mixture or opening-angle", file=sys.stderr)
        return EXIT_USAGE
    grid = [float(g) for g in args.grid.split(",")]
    methods = args.methods.split(",")
    for m in methods:
        if m not in METHODS:
            print(f"unknown method {m!r}", file=sys.stderr)
            return EXIT_USAGE
    diag_depth = args.diag_depth or max(1, math.ceil(math.log2(max(args.n, 2))) - 3)
    cap = _exact_cap(args)
    records = []
    for gi, g in enumerate(grid):
        for rep in range(args.reps):
            cell_seed = derive_seed(args.seed, _TAG_CLI, gi, rep)
            overrides = {"frac_bads": g} if args.family == "line-mixture" else {"delta": g}
            spec = dataclasses.replace(_spec_from_args(args, seed=cell_seed), **overrides)
            X, Y = gen(spec)
            exact_value = exact_w2(X, Y, cap) if X.n <= cap else None
            for method in methods:
                t0 = time.perf_counter()
                plan, params = _plan_for_method(method, X, Y, args)
                wall_ms = 1000.0 * (time.perf_counter() - t0)
                report = plateau_decomposition(
                    X, Y, plan, LastMileParams(depth=diag_depth, d=X.d)
                )
                records.append(
                    {
                        "command": "plateau",
                        "family": args.family,
                        "grid_value": g,
                        "rep": rep,
                        "method": method,
                        "value": plan.rms,
                        "exact_w2": exact_value,
                        "n": X.n,
                        "d": X.d,
                        "seed": args.seed,
                        "sigma": args.sigma,
                        "bad_slope": args.bad_slope,
                        "diag_depth": diag_depth,
                        "alpha_H": report.alpha_H,
                        "gamma_bar": report.gamma_bar,
                        "nn_term": report.nn_term,
                        "lower_bound": report.lower_bound,
                        "rrm_sq": report.rrm_sq,
                        "params": params,
                        "wall_ms": wall_ms,
                        "timestamp": time.time(),
                    }
                )
    _write_table(records, args.out, args.format)
    return EXIT_OK


def cmd_converge(args: argparse.Namespace) -> int:
    n_list = [int(v) for v in args.n_list.split(",")]
    records = []
    if args.kind == "anchored":
        result = convergence_experiment(args.d, n_list, args.reps, args.seed, depth=args.depth)
        for n, mean, sd in result.rows:
            records.append({"command": "converge", "kind": "anchored", "n": n, "mean": mean,
                            "sd": sd, "d": args.d, "reps": args.reps, "seed": args.seed})
        records.append(
            {
                "command": "converge",
                "kind": "anchored-summary",
                "d": args.d,
                "slope": result.slope,
                "theory_exponent": result.theory_exponent,
                "reps": args.reps,
                "seed": args.seed,
            }
        )
    else:
        rows = threshold_consistency_experiment(args.d, args.H, n_list, args.reps, args.seed)
        for n, dev in rows:
            records.append({"command": "converge", "kind": "thresholds", "n": n,
                            "median_max_dev": dev, "d": args.d, "H": args.H,
                            "reps": args.reps, "seed": args.seed})
    _write_table(records, args.out, args.format)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    n_list = [int(v) for v in args.n_list.split(",")]
    methods = args.methods.split(",")
    for m in methods:
        if m not in METHODS:
            print(f"unknown method {m!r}", file=sys.stderr)
            return EXIT_USAGE
    records = []
    for ni, n in enumerate(n_list):
        for method in methods:
            walls = []
            histories = []
            for rep in range(args.reps):
                cell_seed = derive_seed(args.seed, _TAG_CLI, ni, rep)
                spec = dataclasses.replace(_spec_from_args(args, seed=cell_seed), n=n)
                X, Y = gen(spec)
                if Y is None:
                    second = dataclasses.replace(spec, seed=derive_seed(cell_seed, 1))
                    Y = gen(second)[0]
                t0 = time.perf_counter()
                plan, params = _plan_for_method(method, X, Y, args)
                walls.append(1000.0 * (time.perf_counter() - t0))
                if method == "srrm":
                    histories.append(params["history"])
            record = {
                "command": "bench",
                "method": method,
                "family": args.family,
                "n": n,
                "d": args.d,
                "t": args.t,
                "reps": args.reps,
                "seed": args.seed,
                "median_wall_ms": float(np.median(walls)),
                "wall_ms_all": walls,
                "timestamp": time.time(),
            }
            if histories:
                record["histories"] = histories
            records.append(record)
    _write_table(records, args.out, args.format)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(
    p: argparse.ArgumentParser, with_method: bool = True, table: bool = False
) -> None:
    p.add_argument("--seed", type=int, default=0, help="64-bit seed for all randomized steps")
    p.add_argument("--out", default=None, help="append records here instead of stdout")
    if table:
        p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl",
                       help="experiment table format")
    else:
        p.add_argument("--format", choices=("csv", "pcf"), default=None,
                       help="cloud file format (default: infer from extension)")
    if with_method:
        p.add_argument("--method", choices=METHODS, default="srrm")
    p.add_argument("--K", type=int, default=8, help="merge runs")
    p.add_argument("--R", type=int, default=10, help="screening rounds")
    p.add_argument("--anchors", type=int, default=5, help="anchors per unresolved point")
    p.add_argument("--cap", type=int, default=None,
                   help="exact-assignment size cap (default 1024 for exact, 4096 for the "
                        "screening residual)")
    p.add_argument("--normalize", choices=("joint", "per-cloud", "none"), default="joint")


def _add_generator_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("--family", choices=FAMILIES, default="uniform-box")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--frac-bads", dest="frac_bads", type=float, default=0.0)
    p.add_argument("--good-slope", dest="good_slope", type=float, default=-1.0)
    p.add_argument("--bad-slope", dest="bad_slope", type=float, default=100.0)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rrmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic cloud (or pair) to disk")
    _add_generator_params(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "pcf"), default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--out2", default=None, help="second output file for pair families")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("distance", help="distance between two stored clouds")
    p.add_argument("fileX")
    p.add_argument("fileY")
    _add_common(p)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("match", help="write the matching permutation and cost sidecar")
    p.add_argument("fileX")
    p.add_argument("fileY")
    _add_common(p)
    p.set_defaults(func=cmd_match)
    # --out is required for match: it names the permutation CSV.

    p = sub.add_parser("flow", help="iterate match-then-convex-step toward the target")
    p.add_argument("fileX")
    p.add_argument("fileY")
    _add_common(p)
    p.add_argument("--step", type=float, default=0.15)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--snapshot-every", dest="snapshot_every", type=int, default=10)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("plateau", help="bias-floor table over a generator grid")
    _add_generator_params(p)
    _add_common(p, table=True)
    p.add_argument("--grid", required=True, help="comma-separated grid values")
    p.add_argument("--methods", default="rrm,merged,srrm")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--diag-depth", dest="diag_depth", type=int, default=None)
    p.set_defaults(func=cmd_plateau)

    p = sub.add_parser("converge", help="statistical convergence experiments")
    p.add_argument("--kind", choices=("anchored", "thresholds"), default="anchored")
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--n-list", dest="n_list", default="256,512,1024")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--H", type=int, default=3, help="tree depth for the thresholds kind")
    p.add_argument("--depth", type=int, default=40, help="address depth for the anchored kind")
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("bench", help="wall-clock table over an n grid")
    _add_generator_params(p)
    _add_common(p, with_method=False, table=True)
    p.add_argument("--n-list", dest="n_list", required=True)
    p.add_argument("--methods", default="rrm,merged,srrm")
    p.add_argument("--reps", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "match" and not args.out:
        parser.error("match requires --out for the permutation file")
    try:
        return args.func(args)
    except CapExceededError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (DataFormatError, InvalidCloudError, SizeMismatchError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
