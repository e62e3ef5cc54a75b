"""Command-line entry point: ``llmsched <subcommand>``.

Exit codes: 0 success, 1 input error, 2 infeasible.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .analytic_sim import simulate
from .cost_model import GridSpec, ProfileError, load_profile, save_profile, synth_profile
from .event_sim import (SimPolicy, SimulationError, derive_latency_bounds, ft_batch_for_bound, run_event_sim,
                        run_ft_baseline, run_iterlevel_baseline)
from .optimizer import (InfeasibleBoundError, Perf, Problem, audit_search_spec, monotonicity_audit,
                        optimize_all)
from .schedule_core import InfeasibleError, file_sha256, load_schedule, save_schedule
from .seqdist import DistributionError, LengthPMF, load_distribution, load_task, percentile_length
from .specs import ClusterSpec, CostParams, SpecError, resolve_model

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2
VARIANTS = ("exegpt", "rra", "waa", "ft", "iterlevel")


class InputError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    seed: int | None
    tool_version: str = __version__
    inputs: dict = field(default_factory=dict)     # path -> sha256
    started: float = field(default_factory=time.time)
    duration_sec: float = 0.0

    def add_input(self, path: str | os.PathLike) -> None:
        self.inputs[str(path)] = file_sha256(path)

    def finish(self) -> dict:
        self.duration_sec = time.time() - self.started
        d = asdict(self)
        d.pop("started")
        return d


# -- output helpers ----------------------------------------------------------

def _write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if hasattr(o, "tolist"):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _clean(o):
    """Replace non-finite floats so the output is strict JSON."""
    if isinstance(o, float):
        return o if math.isfinite(o) else ("inf" if o > 0 else "-inf" if o < 0 else "nan")
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if hasattr(o, "tolist"):
        return _clean(o.tolist())
    return o


def _emit_json(doc: dict, out: str | None) -> None:
    text = json.dumps(_clean(doc), indent=2, default=_json_default, allow_nan=False)
    if out:
        _write_atomic(out, text + "\n")
    else:
        print(text)


def _csv_text(header: list[str], rows: list[list], manifest: dict) -> str:
    buf = io.StringIO()
    buf.write("# manifest: " + json.dumps(_clean(manifest), allow_nan=False) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def _perf_dict(p: Perf | None) -> dict | None:
    if p is None:
        return None
    return {"latency": p.latency, "throughput": p.thrput, "point": list(p.config)}


# -- argument plumbing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the input-error code, keeping 2 for infeasible."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _bound(text: str) -> float:
    if text.lower() in ("inf", "infinity", "none"):
        return math.inf
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("latency bound must be positive")
    return v


def _add_workload(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("workload")
    g.add_argument("--task", help="shipped task preset (S, T, G, C1, C2)")
    g.add_argument("--input-dist", help="input-length distribution JSON (overrides --task)")
    g.add_argument("--output-dist", help="output-length distribution JSON (overrides --task)")
    g.add_argument("--target-pct", type=float, default=99.0, help="output-length percentile for latency (default 99)")


def _add_system(p: argparse.ArgumentParser, with_profile: bool = True) -> None:
    g = p.add_argument_group("system")
    g.add_argument("--model", default="opt-13b", help="model name or model-v1 JSON path")
    if with_profile:
        g.add_argument("--profile", required=True, help="profile-v1 JSON")
    g.add_argument("--cluster", help="cluster-v1 JSON (overrides the flags below)")
    g.add_argument("--gpus", type=int, default=4)
    g.add_argument("--mem-gb", type=float, default=48.0, help="memory per GPU in GB")
    g.add_argument("--gpus-per-node", type=int, default=8)


def _add_sim(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n-queries", type=int, default=2000)
    p.add_argument("--threshold", type=float, default=0.1, help="dynamic adjustment band (fraction)")
    p.add_argument("--no-adjust", action="store_true", help="disable dynamic batch adjustment")


def _need_file(path: str, what: str) -> str:
    if not Path(path).is_file():
        raise InputError(f"{what} not found: {path}")
    return path


def _workload(args, manifest: RunManifest) -> tuple[LengthPMF, LengthPMF]:
    pe = pd = None
    if args.task:
        task = load_task(args.task)
        pe, pd = task.pe, task.pd
    if args.input_dist:
        manifest.add_input(_need_file(args.input_dist, "input distribution"))
        pe = load_distribution(args.input_dist)
    if args.output_dist:
        manifest.add_input(_need_file(args.output_dist, "output distribution"))
        pd = load_distribution(args.output_dist)
    if pe is None or pd is None:
        raise InputError("workload needs --task or both --input-dist and --output-dist")
    return pe, pd


def _model(args, manifest: RunManifest):
    if Path(args.model).suffix == ".json":
        manifest.add_input(_need_file(args.model, "model file"))
    return resolve_model(args.model)


def _cluster(args, manifest: RunManifest) -> ClusterSpec:
    if args.cluster:
        manifest.add_input(_need_file(args.cluster, "cluster file"))
        return ClusterSpec.load(args.cluster)
    return ClusterSpec(args.gpus, args.mem_gb * 1e9, args.gpus_per_node)


def _profile(args, manifest: RunManifest):
    manifest.add_input(_need_file(args.profile, "profile"))
    return load_profile(args.profile)


def _policy(args) -> SimPolicy:
    return SimPolicy(dynamic_adjust=not args.no_adjust, threshold=args.threshold)


def _problem(args, manifest: RunManifest) -> Problem:
    model = _model(args, manifest)
    cluster = _cluster(args, manifest)
    table = _profile(args, manifest)
    pe, pd = _workload(args, manifest)
    return Problem(model, cluster, table, pe, pd, args.target_pct)


# -- subcommands -------------------------------------------------------------

def cmd_synth_profile(args) -> int:
    manifest = RunManifest("synth-profile", None)
    model = _model(args, manifest)
    if args.params in ("a40", "a100"):
        params = getattr(CostParams, args.params)()
    else:
        manifest.add_input(_need_file(args.params, "cost parameter file"))
        params = CostParams.load(args.params)
    grid = GridSpec(max_batch=args.max_batch, max_context=args.max_context,
                    tp_degrees=tuple(int(x) for x in args.tp_degrees.split(",")))
    table = synth_profile(model, params, grid)
    save_profile(table, args.out)
    print(f"wrote {args.out} ({model.name}, tp {list(table.tp_degrees)})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    manifest = RunManifest("simulate", None)
    manifest.add_input(_need_file(args.schedule, "schedule"))
    config, model, cluster, _ = load_schedule(args.schedule)
    table = _profile(args, manifest)
    pe, pd = _workload(args, manifest)
    est = simulate(config, model, cluster, table, pe, pd, percentile_length(pd, args.target_pct),
                   with_timeline=args.timeline)
    _emit_json({"manifest": manifest.finish(), "schedule": config.summary(), "estimate": est.to_dict()}, args.out)
    return EXIT_OK


def cmd_event_sim(args) -> int:
    manifest = RunManifest("event-sim", args.seed)
    policy = _policy(args)
    if args.baseline:
        model = _model(args, manifest)
        cluster = _cluster(args, manifest)
        table = _profile(args, manifest)
        pe, pd = _workload(args, manifest)
        if args.batch is None:
            raise InputError("--baseline needs --batch")
        if args.baseline == "ft":
            stats = run_ft_baseline(model, cluster, table, pe, pd, args.batch, args.seed, args.n_queries)
        else:
            stats = run_iterlevel_baseline(model, cluster, table, pe, pd, args.batch, args.seed, args.n_queries,
                                           max_admit_per_iter=args.max_admit, policy=policy)
        label = {"baseline": args.baseline, "batch": args.batch}
    else:
        if not args.schedule:
            raise InputError("event-sim needs --schedule or --baseline")
        manifest.add_input(_need_file(args.schedule, "schedule"))
        config, model, cluster, _ = load_schedule(args.schedule)
        table = _profile(args, manifest)
        pe, pd = _workload(args, manifest)
        stats = run_event_sim(config, model, cluster, table, pe, pd, args.seed, args.n_queries, policy)
        label = config.summary()
    m = manifest.finish()
    if args.csv:
        rows = [[int(r[0]), int(r[1]), int(r[2]), float(r[3]), float(r[4])] for r in stats.records]
        _write_atomic(args.csv, _csv_text(["id", "input_len", "output_len", "admit", "finish"], rows, m))
    _emit_json({"manifest": m, "run": label, "stats": stats.to_dict()}, args.out)
    return EXIT_OK


def cmd_optimize(args) -> int:
    manifest = RunManifest("optimize", None)
    problem = _problem(args, manifest)
    strategies = args.strategies.split(",")
    res = optimize_all(problem, args.bound, strategies=strategies, eps_t=args.eps_t, eps_l=args.eps_l)
    m = manifest.finish()
    doc = {"manifest": m, "bound": args.bound, "best": res.summary(), "estimate": res.estimate.to_dict(),
           "runs": res.runs, "notes": res.notes}
    if args.schedule_out:
        save_schedule(args.schedule_out, res.config, problem.model, problem.cluster, provenance=m,
                      estimate=_clean(res.estimate.to_dict()))
    _emit_json(doc, args.out)
    return EXIT_OK


def cmd_audit(args) -> int:
    manifest = RunManifest("audit", None)
    problem = _problem(args, manifest)
    bound = args.bound
    if bound is None:
        bound = derive_latency_bounds(problem.model, problem.cluster, problem.table, problem.pe, problem.pd)[2]
    built = audit_search_spec(problem, args.strategy, bound, args.tp_degree, args.max_b_e)
    if built is None:
        raise InfeasibleError(f"{args.strategy}: no batch size fits in GPU memory")
    spec, fn = built
    if args.stride > 1:
        spec.grids = [g[::args.stride] if len(g) > 2 * args.stride else g for g in spec.grids]
    tols = _tolerances(args.tolerances)
    names = {"b_m": "n_micro"}
    wanted = spec.names if args.var == "all" else [names.get(args.var, args.var)]
    missing = [v for v in wanted if v not in spec.names]
    if missing:
        raise InputError(f"variable {missing[0]} is not searched for {args.strategy}"
                         + (" (tp needs --tp-degree > 1)" if missing[0] == "tp" else ""))
    rows = []
    for var in wanted:
        res = monotonicity_audit(var, spec, fn, tols, reference_latency=bound)
        rows += res.rows()
    _emit_json({"manifest": manifest.finish(), "strategy": args.strategy, "bound": bound,
                "grid": {n: [g[0], g[-1], len(g)] for n, g in zip(spec.names, spec.grids)},
                "nonmonotone": rows}, args.out)
    return EXIT_OK


def _tolerances(text: str) -> tuple[float, ...]:
    """Comma list of tolerances; values above 1 are read as percentages."""
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"bad tolerance list: {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise InputError(f"bad tolerance list: {text!r}")
    return tuple(v / 100 if v > 1 else v for v in vals)


def _compare_cell(problem: Problem, variant: str, bound: float, seed: int, n_queries: int,
                  policy: SimPolicy) -> dict:
    cell = {"variant": variant, "bound": bound}
    try:
        if variant in ("ft", "iterlevel"):
            b = ft_batch_for_bound(problem.model, problem.cluster, problem.table, problem.pe, problem.pd, bound)
            if b is None:
                raise InfeasibleError("no FT batch meets the bound")
            if variant == "ft":
                st = run_ft_baseline(problem.model, problem.cluster, problem.table, problem.pe, problem.pd, b,
                                     seed, n_queries)
            else:
                st = run_iterlevel_baseline(problem.model, problem.cluster, problem.table, problem.pe, problem.pd,
                                            b, seed, n_queries, policy=policy)
            cell.update(batch=b)
        else:
            strategies = {"exegpt": ("RRA", "WAA-C", "WAA-M"), "rra": ("RRA",), "waa": ("WAA-C", "WAA-M")}[variant]
            res = optimize_all(problem, bound, strategies=strategies)
            st = run_event_sim(res.config, problem.model, problem.cluster, problem.table, problem.pe, problem.pd,
                               seed, n_queries, policy)
            cell.update(schedule=res.config.summary(), analytic_throughput=res.perf.thrput,
                        analytic_latency=res.perf.latency)
        cell.update(throughput=st.throughput, latency_p99=st.latency_p99, status="ok")
    except InfeasibleError as exc:
        cell.update(throughput=0.0, latency_p99=math.nan, status=f"infeasible: {exc}")
    return cell


def cmd_compare(args) -> int:
    manifest = RunManifest("compare", args.seed)
    problem = _problem(args, manifest)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if not variants or bad:
        raise InputError(f"unknown variant(s) {bad}; choose from {', '.join(VARIANTS)}")
    if args.bounds == "auto":
        bounds = derive_latency_bounds(problem.model, problem.cluster, problem.table, problem.pe, problem.pd)
    else:
        bounds = [_bound(x) for x in args.bounds.split(",")]
    policy = _policy(args)
    cells = [(v, b) for b in bounds for v in variants]
    threads = max(1, int(os.environ.get("LLMSCHED_THREADS", "1") or 1))
    with ThreadPoolExecutor(max_workers=min(threads, len(cells))) as pool:
        results = list(pool.map(lambda c: _compare_cell(problem, c[0], c[1], args.seed, args.n_queries, policy),
                                cells))
    m = manifest.finish()
    table = {f"{b!r}": {c["variant"]: c["throughput"] for c in results if c["bound"] == b} for b in bounds}
    if args.csv:
        rows = [[repr(b)] + [next(c["throughput"] for c in results if c["bound"] == b and c["variant"] == v)
                             for v in variants] for b in bounds]
        _write_atomic(args.csv, _csv_text(["bound"] + variants, rows, m))
    _emit_json({"manifest": m, "bounds": bounds, "variants": variants, "throughput": table, "cells": results},
               args.out)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="llmsched", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"llmsched {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{synth-profile,simulate,event-sim,optimize,audit,compare}")
    sub.required = True

    s = sub.add_parser("synth-profile", help="build a roofline profile table from hardware rates")
    s.add_argument("--model", default="opt-13b", help="model name or model-v1 JSON path")
    s.add_argument("--params", default="a40", help="a40, a100 or a cost-params-v1 JSON path")
    s.add_argument("--max-batch", type=int, default=2048)
    s.add_argument("--max-context", type=int, default=4096)
    s.add_argument("--tp-degrees", default="1,2,4")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_profile)

    s = sub.add_parser("simulate", help="analytic throughput/latency of a schedule file")
    s.add_argument("--schedule", required=True)
    s.add_argument("--profile", required=True)
    _add_workload(s)
    s.add_argument("--timeline", action="store_true", help="include the per-stage busy intervals")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("event-sim", help="stochastic query-level simulation of a schedule or baseline")
    s.add_argument("--schedule")
    s.add_argument("--baseline", choices=("ft", "iterlevel"))
    s.add_argument("--batch", type=int, help="baseline batch size")
    s.add_argument("--max-admit", type=int, default=1, help="iteration-level admissions per iteration")
    _add_system(s)
    _add_workload(s)
    _add_sim(s)
    s.add_argument("--csv", help="per-query records")
    s.add_argument("--out")
    s.set_defaults(func=cmd_event_sim)

    s = sub.add_parser("optimize", help="best schedule under a latency bound")
    _add_system(s)
    _add_workload(s)
    s.add_argument("--bound", type=_bound, required=True, help="latency bound in seconds, or inf")
    s.add_argument("--strategies", default="RRA,WAA-C,WAA-M")
    s.add_argument("--eps-t", type=float)
    s.add_argument("--eps-l", type=float)
    s.add_argument("--schedule-out", help="write the chosen schedule-v1 file")
    s.add_argument("--out")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("audit", help="fraction of non-monotone points per control variable")
    _add_system(s)
    _add_workload(s)
    s.add_argument("--strategy", choices=("RRA", "WAA-C", "WAA-M"), default="RRA")
    s.add_argument("--bound", type=_bound, help="reference bound (default: 70th-percentile FT latency)")
    s.add_argument("--var", choices=("b_e", "n_d", "b_m", "tp", "all"), default="all",
                   help="control variable to sweep (b_m: micro-batch count; tp: TP-applied GPU count)")
    s.add_argument("--tp-degree", type=int, default=1, help="TP degree; > 1 adds the tp variable")
    s.add_argument("--max-b-e", type=int, default=64)
    s.add_argument("--stride", type=int, default=1, help="subsample long grids")
    s.add_argument("--tolerances", default="2,5,10", help="percent (or fractions <= 1)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("compare", help="throughput of variants and baselines across latency bounds")
    _add_system(s)
    _add_workload(s)
    _add_sim(s)
    s.add_argument("--variants", default="exegpt,ft", help=f"comma list from {', '.join(VARIANTS)}")
    s.add_argument("--bounds", default="auto", help="'auto' (from an FT batch sweep) or comma list of seconds")
    s.add_argument("--csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleBoundError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        print(json.dumps({"lower_corner": _clean(_perf_dict(exc.perf))}), file=sys.stderr)
        return EXIT_INFEASIBLE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InputError, SpecError, ProfileError, DistributionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SimulationError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
