"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 invalid configuration or input,
4 solver/oracle disagreement or a transition check that came out UNEQUAL.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, load_config
from .domain import ClusterState, Node, ThroughputTable, read_calibration_csv, write_calibration_csv
from .planner import (
    InstanceTooLarge,
    RewardInputs,
    brute_force_solve,
    precompute_lookup,
    solve,
)
from .simulator import POLICIES, PolicyParams, compare_policies, run_simulation
from .traces import (
    DEFAULT_MIX,
    PRESETS,
    TraceSpec,
    generate_trace,
    preset,
    read_trace,
    summarize,
    write_trace,
)
from .transition import (
    DEFAULT_DIMS,
    FailurePoint,
    IterationLayout,
    NoSurvivors,
    digest,
    failure_free_reference,
    run_iteration,
    sweep_points,
    verify,
)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_MISMATCH = 0, 2, 3, 4
SEED_ENV = "UNICRON_SEED"


class UsageError(Exception):
    pass


def _seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _write_text(path: str | os.PathLike, text: str) -> None:
    tmp = Path(f"{os.fspath(path)}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(obj, out: str | None) -> None:
    text = _dump(obj)
    if out:
        _write_text(out, text)
    else:
        sys.stdout.write(text)


def _pack(config: RunConfig, counts: dict[str, int]) -> dict[str, tuple[str, ...]]:
    """Consecutive workers per task, largest allocation first (the simulator's initial placement)."""
    pool = list(config.cluster.healthy_workers())
    out, i = {}, 0
    for tid in sorted(counts, key=lambda t: (-counts[t], t)):
        out[tid] = tuple(pool[i:i + counts[tid]])
        i += counts[tid]
    return out


def _pair(raw: str, prefix: str) -> str:
    head, sep, tail = raw.partition(":")
    if not sep or head != prefix or not tail:
        raise UsageError(f"expected {prefix}:<id>, got {raw!r}")
    return tail


# -- plan --------------------------------------------------------------------

def cmd_plan(args) -> int:
    config = load_config(args.config)
    tasks = list(config.tasks)
    ids = {t.task_id for t in tasks}
    cluster = config.cluster
    current = dict(config.current)
    if not current:
        base = RewardInputs(tuple(tasks), {}, frozenset(), cluster.capacity, config.cost)
        current = solve(base).assignment()
    cluster = cluster.with_assignment(_pack(config, current))

    faulted: set[str] = set()
    lost = 0
    for raw in args.fault or []:
        node_id = _pair(raw, "node")
        try:
            node = cluster.node(node_id)
        except KeyError:
            raise UsageError(f"--fault: unknown node {node_id}") from None
        faulted.update(cluster.tasks_on_node(node_id))
        lost += len(node.worker_ids)
    gained = 0
    known = {n.node_id for n in cluster.nodes}
    per_node = len(cluster.nodes[0].worker_ids)
    joins = []
    for raw in args.join or []:
        if raw.isdigit():
            # N brand-new nodes
            i = 0
            for _ in range(int(raw)):
                while f"j{i:02d}" in known or f"j{i:02d}" in joins:
                    i += 1
                joins.append(f"j{i:02d}")
        else:
            joins.append(_pair(raw, "node"))
    for node_id in joins:
        if node_id in known and node_id not in {_pair(f, "node") for f in args.fault or []}:
            raise UsageError(f"--join: node {node_id} is already in the cluster")
        if node_id not in known:
            fresh = Node(node_id, tuple(f"{node_id}-g{g}" for g in range(per_node)))
            cluster = ClusterState(cluster.nodes + (fresh,), cluster.assignment)
            known.add(node_id)
        gained += per_node
    for raw in args.finish or []:
        tid = _pair(raw, "task")
        if tid not in ids:
            raise UsageError(f"--finish: unknown task {tid}")
        tasks = [t for t in tasks if t.task_id != tid]
        current.pop(tid, None)
        faulted.discard(tid)

    inputs = RewardInputs(tuple(tasks), current, frozenset(faulted),
                          max(0, config.cluster.capacity - lost + gained), config.cost)
    plan = solve(inputs)
    report = {"plan": plan.to_dict(), "capacity": inputs.capacity, "faulted": sorted(faulted),
              "current": dict(sorted(current.items())), "config_sha256": config.digest, "seed": _seed(args)}
    code = EXIT_OK
    if args.oracle:
        try:
            ref = brute_force_solve(inputs)
        except InstanceTooLarge as exc:
            report["oracle"] = f"skipped: {exc}"
        else:
            agree = ref.assignment() == plan.assignment() and ref.objective == plan.objective
            report["oracle"] = "agree" if agree else {"mismatch": ref.to_dict()}
            if not agree:
                code = EXIT_MISMATCH
    if args.lookup:
        table = precompute_lookup(inputs, cluster)
        report["lookup"] = {
            ":".join(str(p) for p in key): entry.to_dict()
            for key, entry in sorted(table.entries.items(), key=lambda kv: (kv[0][0], str(kv[0][1])))
        }
    _emit(report, args.out)
    return code


# -- trace-gen ---------------------------------------------------------------

def _parse_mix(raw: str) -> dict[str, float]:
    parts = raw.split(",")
    if len(parts) != 3:
        raise UsageError("--mix takes three comma-separated probabilities: sev1,sev2,sev3")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"--mix: not a number in {raw!r}") from None
    return dict(zip(("sev1", "sev2", "sev3"), vals))


def cmd_trace_gen(args) -> int:
    seed = _seed(args)
    seed = 0 if seed is None else seed
    if args.preset and args.rate is not None:
        raise UsageError("--preset and --lambda are mutually exclusive")
    if args.preset:
        spec = preset(args.preset)
    elif args.rate is not None:
        spec = TraceSpec(args.rate, args.horizon or 7 * 86400.0, dict(DEFAULT_MIX))
    else:
        raise UsageError("give --preset or --lambda")
    changes = {}
    if args.mix:
        changes["mix"] = _parse_mix(args.mix)
    if args.horizon is not None:
        changes["horizon"] = args.horizon
    if args.repair_min is not None or args.repair_max is not None:
        lo = spec.repair_range[0] if args.repair_min is None else args.repair_min
        hi = spec.repair_range[1] if args.repair_max is None else args.repair_max
        changes["repair_range"] = (lo, hi)
    if args.repair:
        changes["repair"] = args.repair
    if args.nodes is not None:
        changes["n_nodes"] = args.nodes
    if changes:
        spec = replace(spec, **changes)
    cluster = load_config(args.config).cluster if args.config else None
    try:
        trace = generate_trace(spec, seed, cluster)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_trace(trace, args.out, {"preset": args.preset} if args.preset else None)
    sys.stdout.write(_dump(summarize(trace)))
    return EXIT_OK


# -- simulate / compare --------------------------------------------------------

def _params(config: RunConfig, args) -> PolicyParams:
    raw = dict(config.policy)
    if getattr(args, "hot_spare", False):
        raw["hot_spare"] = True
    if getattr(args, "zero_cost", False):
        raw["zero_cost"] = True
    try:
        return PolicyParams.from_mapping(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    trace = read_trace(args.trace)
    params = _params(config, args)
    seed = _seed(args)
    log = open(args.log, "w") if args.log else None
    try:
        series = run_simulation(config, trace, args.policy, params,
                                sample_every=args.sample_every or None, log=log, seed=seed)
    finally:
        if log is not None:
            log.close()
    series.write_csv(args.out)
    summary = series.summary()
    summary.update({"config_sha256": config.digest, "seed": seed if seed is not None else trace.seed,
                    "trace": os.fspath(args.trace)})
    text = _dump(summary)
    if args.summary:
        _write_text(args.summary, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    config = load_config(args.config)
    params = _params(config, args)
    policies = args.policies or list(POLICIES)
    seed = _seed(args)
    if args.trace and args.preset:
        raise UsageError("--trace and --preset are mutually exclusive")
    if args.trace:
        traces = [read_trace(args.trace)]
    elif args.preset:
        first = 0 if seed is None else seed
        traces = [generate_trace(preset(args.preset), first + i, config.cluster) for i in range(args.seeds)]
    else:
        raise UsageError("give --trace or --preset")
    totals = {p: 0.0 for p in policies}
    for tr in traces:
        rep = compare_policies(config, tr, policies, params, parallel=args.jobs, seed=seed)
        for p, v in rep["accumulated_waf"].items():
            totals[p] += v
    mean = {p: v / len(traces) for p, v in totals.items()}
    report = {"policies": policies, "traces": len(traces), "mean_accumulated_waf": mean,
              "config_sha256": config.digest, "seed": seed}
    if "unicron" in mean and mean["unicron"] > 0:
        report["ratio_to_unicron"] = {p: v / mean["unicron"] for p, v in mean.items()}
        report["unicron_over"] = {p: (mean["unicron"] / v if v else None) for p, v in mean.items()}
    _emit(report, args.out)
    return EXIT_OK


# -- verify-transition ---------------------------------------------------------

def cmd_verify_transition(args) -> int:
    if args.sweep:
        total = bad = 0
        for dp in (2, 3, 4, 8):
            for pp in (1, 2, 4):
                for b in (dp, 2 * dp, 4 * dp):
                    layout = IterationLayout.initial(dp, pp, b, args.dims, _seed(args) or 0)
                    ref = failure_free_reference(layout)
                    for point in sweep_points(layout):
                        _, resumed = verify(layout, point)
                        total += 1
                        bad += int(not (resumed == ref).all())
        verdict = "EQUAL" if bad == 0 else "UNEQUAL"
        _emit({"verdict": verdict, "points": total, "mismatches": bad}, None)
        return EXIT_OK if bad == 0 else EXIT_MISMATCH

    if args.dp < 1 or args.pp < 1:
        raise UsageError("--dp and --pp must be >= 1")
    mbs = args.microbatches if args.microbatches is not None else args.dp
    try:
        layout = IterationLayout.initial(args.dp, args.pp, mbs, args.dims, _seed(args) or 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not 0 <= args.fail_rank < args.dp:
        raise UsageError(f"--fail-rank must lie in [0, {args.dp})")
    if args.fail_after_reduced_segments is not None:
        reduced = args.fail_after_reduced_segments
        if not 0 <= reduced <= args.pp:
            raise UsageError(f"--fail-after-reduced-segments must lie in [0, {args.pp}]")
        stage = args.fail_stage if args.fail_stage is not None else min(reduced, args.pp - 1)
        point = FailurePoint(args.fail_rank, reduced_segments=reduced, failed_stage=stage)
    else:
        after = args.fail_after_mb or 0
        if not 0 <= after <= layout.k:
            raise UsageError(f"--fail-after-mb must lie in [0, {layout.k}]")
        point = FailurePoint(args.fail_rank, after_mb=after)
    try:
        _, resumed = verify(layout, point)
    except NoSurvivors as exc:
        _emit({"verdict": "CHECKPOINT_FALLBACK", "reason": str(exc)}, None)
        return EXIT_OK
    ref = failure_free_reference(layout)
    same = bool((resumed == ref).all() and (run_iteration(layout) == ref).all())
    _emit({"verdict": "EQUAL" if same else "UNEQUAL", "dp": args.dp, "pp": args.pp, "microbatches": mbs,
           "reference": digest(ref), "resumed": digest(resumed), "iteration": layout.iteration,
           "point": {"rank": point.failed_rank, "after_mb": point.after_mb,
                     "reduced_segments": point.reduced_segments, "stage": point.failed_stage}}, None)
    return EXIT_OK if same else EXIT_MISMATCH


# -- calibrate -----------------------------------------------------------------

def cmd_calibrate(args) -> int:
    if args.csv:
        try:
            rows = read_calibration_csv(args.csv)
        except ValueError as exc:
            raise ConfigError(f"{args.csv}: {exc}") from None
        tables = {tid: ThroughputTable(pts, min(pts)) for tid, pts in rows.items()}
    elif args.config:
        config = load_config(args.config)
        tables = {t.task_id: t.calibration for t in config.tasks}
    else:
        raise UsageError("give --csv or --config")
    summary = {
        tid: {"points": len(tb.entries), "min_x": min(tb.entries), "max_x": max(tb.entries),
              "peak_flops": max(p.flops for p in tb.entries.values())}
        for tid, tb in sorted(tables.items()) if tb.entries
    }
    if args.out:
        write_calibration_csv(tables, args.out)
    sys.stdout.write(_dump(summary))
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfheal", description="Self-healing training workload manager")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="solve for the optimal allocation")
    p.add_argument("--config", required=True)
    p.add_argument("--fault", action="append", metavar="node:ID")
    p.add_argument("--join", action="append", metavar="node:ID|COUNT")
    p.add_argument("--finish", action="append", metavar="task:ID")
    p.add_argument("--oracle", action="store_true", help="cross-check against exhaustive search")
    p.add_argument("--lookup", action="store_true", help="also print plans for single-event perturbations")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("trace-gen", help="generate a failure trace")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--lambda", dest="rate", type=float, help="failure events per node per second")
    p.add_argument("--horizon", type=float, help="seconds")
    p.add_argument("--mix", help="sev1,sev2,sev3 probabilities")
    p.add_argument("--repair", choices=("uniform", "exponential"))
    p.add_argument("--repair-min", type=float)
    p.add_argument("--repair-max", type=float)
    p.add_argument("--nodes", type=int)
    p.add_argument("--config", help="take the node list from this config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace_gen)

    p = sub.add_parser("simulate", help="replay a trace under one policy")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--policy", required=True, choices=POLICIES)
    p.add_argument("--out", required=True, help="metrics CSV")
    p.add_argument("--summary", help="summary JSON")
    p.add_argument("--log", help="audit log (JSON Lines)")
    p.add_argument("--sample-every", type=float, default=60.0, help="seconds between samples; 0 disables")
    p.add_argument("--hot-spare", action="store_true")
    p.add_argument("--zero-cost", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="accumulated WAF of several policies on the same traces")
    p.add_argument("--config", required=True)
    p.add_argument("--trace")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--policies", nargs="+", choices=POLICIES)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--hot-spare", action="store_true")
    p.add_argument("--zero-cost", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify-transition", help="check resumed gradients against the failure-free run")
    p.add_argument("--dp", type=int, default=2)
    p.add_argument("--pp", type=int, default=1)
    p.add_argument("--microbatches", type=int)
    p.add_argument("--fail-rank", type=int, default=0)
    p.add_argument("--fail-after-mb", type=int)
    p.add_argument("--fail-after-reduced-segments", type=int)
    p.add_argument("--fail-stage", type=int)
    p.add_argument("--dims", type=int, default=DEFAULT_DIMS)
    p.add_argument("--seed", type=int, help="iteration id fed to the gradient generator")
    p.add_argument("--sweep", action="store_true")
    p.set_defaults(func=cmd_verify_transition)

    p = sub.add_parser("calibrate", help="validate a calibration CSV or dump a config's tables")
    p.add_argument("--csv")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
