"""Command line driver: partition, rebalance, and metrics over mesh files.

Each verb loads JSON inputs, boots the simulated runtime over the requested
machine topology, runs the collective program on every rank, and writes the
resulting documents into --out.  Exit codes: 0 success, 1 usage error,
2 invalid input, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys
from typing import Any, Mapping

from .balance import derive_weights, imbalance, rebalance
from .formats import (FormatError, load_assignment, load_mesh, load_timing,
                      load_topology, load_weights, save_assignment, save_part,
                      save_report)
from .halo import exchange, schedule_for_rank
from .mesh import (MeshChunk, find_shared_nodes, local_dual_graph,
                   split_contiguous, subset_chunk)
from .metrics import (CostModel, comm_metrics, partition_loads,
                      quality_metrics, write_balance_csv, write_levels_csv)
from .partition import METHODS, HierarchicalPlan, hierarchical_partition
from .runtime import DeadlockError, EpochError, ProtocolError, Runtime
from .topology import TopologyTree

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse would sys.exit(2); route through our own exit-code scheme.
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hierpart",
                     description="Topology-aware mesh partitioning tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, assignment=False, plan=False, level=False, method=False):
        p.add_argument("--mesh", required=True, help="mesh JSON file")
        p.add_argument("--topo", required=True, help="machine topology JSON file")
        p.add_argument("--out", required=True, help="output directory")
        if assignment:
            p.add_argument("--assignment", required=True,
                           help="element-to-rank assignment JSON file")
        if plan:
            p.add_argument("--approach", type=int, choices=(1, 2), default=2,
                           help="1: split across child leaders; 2: split at the "
                                "group leader (default 2)")
            p.add_argument("--bpl", type=int, default=0, metavar="LEVEL",
                           help="bootstrap level, 0 = machine level (default 0)")
        if method:
            p.add_argument("--method", default="rcb",
                           help="rcb, graph, or a comma list, one per level "
                                "(default rcb)")
            p.add_argument("--tolerance", type=float, default=1.02,
                           help="part weight cap relative to the mean (default 1.02)")
        if level:
            p.add_argument("--level", type=int, required=True,
                           help="tree level whose groups rebalance internally")
        p.add_argument("--weights", help="element weights JSON file")
        p.add_argument("--timing", help="per-block timing JSON file "
                                        "(converted to element weights)")
        p.add_argument("--cost-intra", type=float, default=1.0 / 3.0,
                       help="relative per-byte cost of intranode traffic "
                            "(default 1/3)")
        p.add_argument("--seed", type=int, default=0,
                       help="scheduler seed; results do not depend on it")
        p.add_argument("--no-timestamp", action="store_true",
                       help="omit the timestamp from report.json")

    p = sub.add_parser("partition", help="partition a mesh over the machine tree")
    common(p, plan=True, method=True)
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("rebalance", help="rebalance an existing assignment "
                                         "inside tree groups")
    common(p, assignment=True, level=True, method=True)
    p.set_defaults(func=_cmd_rebalance)

    p = sub.add_parser("metrics", help="report quality metrics for an assignment")
    common(p, assignment=True)
    p.set_defaults(func=_cmd_metrics)
    return parser


def _parse_method(text: str):
    methods = tuple(m.strip() for m in text.split(","))
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; expected one of {METHODS}")
    return methods[0] if len(methods) == 1 else methods


def _load_weight_input(args, mesh: MeshChunk) -> dict[int, float] | None:
    if args.weights and args.timing:
        raise UsageError("--weights and --timing are mutually exclusive")
    if args.timing:
        return derive_weights(load_timing(args.timing),
                              elements=sorted(mesh.elements))
    if args.weights:
        weights = load_weights(args.weights)
        missing = sorted(set(mesh.elements) - weights.keys())
        if missing:
            raise ValueError(f"weights missing for elements {missing[:5]}"
                             + ("..." if len(missing) > 5 else ""))
        return weights
    return None


def _check_assignment(assignment: Mapping[int, int], mesh: MeshChunk,
                      nparts: int) -> None:
    if set(assignment) != set(mesh.elements):
        missing = sorted(set(mesh.elements) - set(assignment))[:5]
        extra = sorted(set(assignment) - set(mesh.elements))[:5]
        raise ValueError(f"assignment does not match mesh elements "
                         f"(missing {missing}, unknown {extra})")
    for e, p in assignment.items():
        if not (0 <= p < nparts):
            raise ValueError(f"element {e} assigned to rank {p}, "
                             f"but the topology has {nparts} ranks")


def _chunks_from_assignment(mesh: MeshChunk, assignment: Mapping[int, int],
                            nparts: int) -> list[MeshChunk]:
    by_rank: list[list[int]] = [[] for _ in range(nparts)]
    for e, p in assignment.items():
        by_rank[p].append(e)
    return [subset_chunk(mesh, ids) for ids in by_rank]


def _config_echo(command: str, args, keys) -> dict[str, Any]:
    # Paths, seed, and timestamp are deliberately not echoed: reports from
    # identical inputs must be byte-identical no matter where or when.
    cfg: dict[str, Any] = {"command": command}
    for key in keys:
        value = getattr(args, key)
        cfg[key.replace("_", "-")] = list(value) if isinstance(value, tuple) else value
    return cfg


def _finish_report(report: dict[str, Any], args) -> dict[str, Any]:
    if not args.no_timestamp:
        report["timestamp"] = datetime.datetime.now(
            datetime.timezone.utc).isoformat(timespec="seconds")
    return report


def _write_parts(out_dir: str, chunks, schedules) -> None:
    for rank, chunk in enumerate(chunks):
        save_part(os.path.join(out_dir, f"part-{rank:04d}.json"),
                  rank, chunk, schedules[rank].neighbors)


def _survey_program(tree: TopologyTree, n_nodes: int):
    """Shared tail: find shared nodes, build the schedule, run one exchange."""

    def tail(ctx, chunk):
        ctx.set_phase("shared_nodes")
        rows = find_shared_nodes(ctx, chunk, n_nodes)
        sched = schedule_for_rank(rows, tree, ctx.rank)
        ctx.set_phase("halo_exchange")
        field = {n: (xyz[0],) for n, xyz in chunk.nodes.items()}
        exchange(ctx, sched, field, "replicate_owner")
        return sched

    return tail


def _cmd_partition(args) -> int:
    tree = load_topology(args.topo)
    mesh = load_mesh(args.mesh)
    weights = _load_weight_input(args, mesh)
    nparts = tree.total_ranks
    if mesh.n_elements < nparts:
        raise ValueError(f"mesh has {mesh.n_elements} elements; "
                         f"need at least one per rank ({nparts})")
    args.method = _parse_method(args.method)
    plan = HierarchicalPlan(bootstrap_level=args.bpl, method=args.method,
                            approach=args.approach, tolerance=args.tolerance)
    if not (0 <= args.bpl < tree.n_levels):
        raise ValueError(f"--bpl {args.bpl} outside 0..{tree.n_levels - 1}")
    n_nodes = max(mesh.nodes) + 1
    initial = split_contiguous(mesh, nparts)
    runtime = Runtime(tree, seed=args.seed)
    tail = _survey_program(tree, n_nodes)

    def program(ctx):
        chunk = initial[ctx.rank]
        local_w = None if weights is None else \
            {e: weights[e] for e in chunk.elements}
        chunk, local_w = hierarchical_partition(ctx, tree, chunk, plan, local_w)
        return chunk, tail(ctx, chunk)

    results = runtime.run(program)
    chunks = [chunk for chunk, _ in results]
    schedules = {rank: sched for rank, (_, sched) in enumerate(results)}
    assignment = {e: rank for rank, chunk in enumerate(chunks)
                  for e in chunk.elements}
    if len(assignment) != mesh.n_elements:
        raise ProtocolError("partition lost or duplicated elements")

    model = CostModel(intranode=args.cost_intra)
    adjacency = local_dual_graph(mesh)
    report = {
        "config": _config_echo("partition", args,
                               ("method", "approach", "bpl", "tolerance",
                                "cost_intra")),
        "quality": quality_metrics(adjacency, assignment, nparts, weights),
        "comm": comm_metrics(schedules, model),
        "traffic": runtime.ledger.export(),
    }
    os.makedirs(args.out, exist_ok=True)
    save_assignment(os.path.join(args.out, "assignment.json"), assignment)
    save_report(os.path.join(args.out, "report.json"),
                _finish_report(report, args))
    write_levels_csv(os.path.join(args.out, "levels.csv"),
                     runtime.ledger.phase_totals(), model)
    _write_parts(args.out, chunks, schedules)

    q = report["quality"]
    print(f"partitioned {q['elements']} elements into {nparts} parts: "
          f"edge cut {q['edge_cut']}, imbalance {q['element_imbalance']:.3f}")
    print(f"wrote assignment.json, report.json, levels.csv and "
          f"{nparts} part files to {args.out}")
    return EXIT_OK


def _cmd_rebalance(args) -> int:
    tree = load_topology(args.topo)
    mesh = load_mesh(args.mesh)
    assignment = load_assignment(args.assignment)
    weights = _load_weight_input(args, mesh)
    nparts = tree.total_ranks
    _check_assignment(assignment, mesh, nparts)
    if not (0 <= args.level < tree.n_levels):
        raise ValueError(f"--level {args.level} outside 0..{tree.n_levels - 1}")
    args.method = method = _parse_method(args.method)
    if not isinstance(method, str):
        raise UsageError("rebalance takes a single --method")

    pre_imb = imbalance(assignment, weights, nparts)
    pre_loads = partition_loads(assignment, nparts, weights)
    initial = _chunks_from_assignment(mesh, assignment, nparts)
    runtime = Runtime(tree, seed=args.seed)

    def program(ctx):
        chunk = initial[ctx.rank]
        local_w = None if weights is None else \
            {e: weights[e] for e in chunk.elements}
        chunk, _ = rebalance(ctx, tree, chunk, args.level, method, local_w,
                             args.tolerance)
        return chunk

    chunks = runtime.run(program)
    new_assignment = {e: rank for rank, chunk in enumerate(chunks)
                      for e in chunk.elements}
    if len(new_assignment) != mesh.n_elements:
        raise ProtocolError("rebalance lost or duplicated elements")
    post_imb = imbalance(new_assignment, weights, nparts)
    post_loads = partition_loads(new_assignment, nparts, weights)
    moved = sum(1 for e, p in new_assignment.items() if assignment[e] != p)

    model = CostModel(intranode=args.cost_intra)
    report = {
        "config": _config_echo("rebalance", args,
                               ("level", "method", "tolerance", "cost_intra")),
        "rebalance": {
            "imbalance_before": pre_imb,
            "imbalance_after": post_imb,
            "moved_elements": moved,
            "elements": mesh.n_elements,
        },
        "traffic": runtime.ledger.export(),
    }
    os.makedirs(args.out, exist_ok=True)
    save_assignment(os.path.join(args.out, "assignment.json"), new_assignment)
    save_report(os.path.join(args.out, "report.json"),
                _finish_report(report, args))
    write_levels_csv(os.path.join(args.out, "levels.csv"),
                     runtime.ledger.phase_totals(), model)
    write_balance_csv(os.path.join(args.out, "balance.csv"),
                      pre_loads, post_loads)

    print(f"rebalanced level {args.level}: imbalance {pre_imb:.3f} -> "
          f"{post_imb:.3f}, moved {moved}/{mesh.n_elements} elements")
    print(f"wrote assignment.json, report.json, levels.csv and balance.csv "
          f"to {args.out}")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    tree = load_topology(args.topo)
    mesh = load_mesh(args.mesh)
    assignment = load_assignment(args.assignment)
    weights = _load_weight_input(args, mesh)
    nparts = tree.total_ranks
    _check_assignment(assignment, mesh, nparts)

    n_nodes = max(mesh.nodes) + 1
    initial = _chunks_from_assignment(mesh, assignment, nparts)
    runtime = Runtime(tree, seed=args.seed)
    tail = _survey_program(tree, n_nodes)
    schedules = dict(enumerate(
        runtime.run(lambda ctx: tail(ctx, initial[ctx.rank]))))

    model = CostModel(intranode=args.cost_intra)
    adjacency = local_dual_graph(mesh)
    report = {
        "config": _config_echo("metrics", args, ("cost_intra",)),
        "quality": quality_metrics(adjacency, assignment, nparts, weights),
        "comm": comm_metrics(schedules, model),
        "traffic": runtime.ledger.export(),
    }
    os.makedirs(args.out, exist_ok=True)
    save_report(os.path.join(args.out, "report.json"),
                _finish_report(report, args))
    write_levels_csv(os.path.join(args.out, "levels.csv"),
                     runtime.ledger.phase_totals(), model)

    q = report["quality"]
    print(f"metrics for {q['elements']} elements in {nparts} parts: "
          f"edge cut {q['edge_cut']}, imbalance {q['element_imbalance']:.3f}, "
          f"comm imbalance {report['comm']['imbalance']:.3f}")
    print(f"wrote report.json and levels.csv to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ValueError, OSError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (DeadlockError, EpochError, ProtocolError, AssertionError) as err:
        print(f"internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
