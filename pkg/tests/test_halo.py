"""Halo schedules and the owner/sum exchange against a sequential oracle."""

from __future__ import annotations

import random

import numpy as np
import pytest

from hierpart.halo import (HaloSchedule, build_schedules, exchange,
                           schedule_for_rank)
from hierpart.mesh import find_shared_nodes, split_contiguous
from hierpart.meshgen import triangle_grid
from hierpart.runtime import Runtime
from hierpart.topology import build_topology


def sequential_halo(fields: list[dict[int, np.ndarray]], mode: str
                    ) -> list[dict[int, np.ndarray]]:
    """Oracle: resolve every shared node globally, no messages involved.

    ``fields[r]`` is rank r's node -> vector map.  A node held by several
    ranks becomes, on all of them, either the lowest holder's value or the
    sum over holders in ascending rank order (the order fixes the bitwise
    result for floating point).
    """
    holders: dict[int, list[int]] = {}
    for r, f in enumerate(fields):
        for n in f:
            holders.setdefault(n, []).append(r)
    out = [{n: v.copy() for n, v in f.items()} for f in fields]
    for n, rs in holders.items():
        rs = sorted(rs)
        if len(rs) == 1:
            continue
        if mode == "replicate_owner":
            resolved = fields[rs[0]][n].copy()
        else:
            resolved = np.zeros_like(fields[rs[0]][n])
            for r in rs:
                resolved = resolved + fields[r][n]
        for r in rs:
            out[r][n] = resolved
    return out


def make_fields(chunks, rng, arity=1):
    fields = []
    for ch in chunks:
        nodes = sorted({n for conn in ch.elements.values() for n in conn})
        fields.append({
            n: np.array([rng.uniform(-10, 10) for _ in range(arity)])
            for n in nodes
        })
    return fields


def run_exchange(tree, chunks, fields, mode, n_nodes, seed=0):
    def prog(ctx):
        rows = find_shared_nodes(ctx, chunks[ctx.rank], n_nodes)
        sched = schedule_for_rank(rows, tree, ctx.rank)
        return exchange(ctx, sched, fields[ctx.rank], mode)

    rt = Runtime(tree, seed=seed)
    return rt.run(prog), rt


# -- schedules ---------------------------------------------------------------------


def test_schedule_channels_follow_topology():
    tree = build_topology([("node", 2), ("core", 2)])
    rows = {1: [5, 3], 2: [7]}
    sched = schedule_for_rank(rows, tree, 0)
    assert sched.neighbors == ((1, (3, 5), "intranode"), (2, (7,), "internode"))


def test_schedule_drops_empty_neighbor_rows():
    tree = build_topology([("node", 2)])
    sched = schedule_for_rank({1: []}, tree, 0)
    assert sched.neighbors == ()


def test_sharers_of_includes_self_sorted():
    sched = HaloSchedule(rank=2, neighbors=((0, (9,), "internode"),
                                            (3, (9, 11), "internode")))
    assert sched.sharers_of(9) == [0, 2, 3]
    assert sched.sharers_of(11) == [2, 3]
    assert sched.shared_nodes() == [9, 11]


def test_build_schedules_validates_symmetry():
    tree = build_topology([("node", 2)])
    with pytest.raises(ValueError, match="asymmetric"):
        build_schedules({(0, 1): [4], (1, 0): [4, 5]}, tree)
    with pytest.raises(ValueError, match="paired with itself"):
        build_schedules({(0, 0): [4]}, tree)


def test_build_schedules_round_trip():
    tree = build_topology([("node", 2)])
    scheds = build_schedules({(0, 1): [4, 5], (1, 0): [5, 4]}, tree)
    assert scheds[0].neighbors == ((1, (4, 5), "internode"),)
    assert scheds[1].neighbors == ((0, (4, 5), "internode"),)


# -- exchange ---------------------------------------------------------------------


def test_exchange_two_rank_hand_case():
    tree = build_topology([("node", 2)])
    mesh = triangle_grid(2, 1)
    chunks = split_contiguous(mesh, 2)
    fields = [
        {n: np.array([float(10 + n)]) for ch in [chunks[0]]
         for n in {m for c in ch.elements.values() for m in c}},
        {n: np.array([float(100 + n)]) for ch in [chunks[1]]
         for n in {m for c in ch.elements.values() for m in c}},
    ]
    expect = sequential_halo(fields, "replicate_owner")
    res, _ = run_exchange(tree, chunks, fields, "replicate_owner",
                          1 + max(mesh.nodes))
    for r in range(2):
        assert set(res[r]) == set(expect[r])
        for n in res[r]:
            assert res[r][n] == pytest.approx(expect[r][n])


@pytest.mark.parametrize("mode", ["replicate_owner", "accumulate_sum"])
def test_exchange_matches_oracle_bitwise(mode):
    tree = build_topology([("node", 2), ("core", 2)])
    mesh = triangle_grid(6, 6)
    chunks = split_contiguous(mesh, 4)
    n_nodes = 1 + max(mesh.nodes)
    rng = random.Random(13)
    for trial in range(8):
        fields = make_fields(chunks, rng)
        expect = sequential_halo(fields, mode)
        res, _ = run_exchange(tree, chunks, fields, mode, n_nodes, seed=trial)
        for r in range(4):
            for n, v in res[r].items():
                # Bitwise equality, not approx: summation order is pinned.
                assert v.tobytes() == expect[r][n].tobytes(), (r, n)


def test_exchange_replicas_identical_across_ranks():
    tree = build_topology([("node", 2), ("core", 2)])
    mesh = triangle_grid(6, 6)
    chunks = split_contiguous(mesh, 4)
    rng = random.Random(4)
    fields = make_fields(chunks, rng, arity=3)
    res, _ = run_exchange(tree, chunks, fields, "accumulate_sum",
                          1 + max(mesh.nodes))
    seen: dict[int, bytes] = {}
    for r in range(4):
        for n, v in res[r].items():
            if n in seen:
                assert v.tobytes() == seen[n]
            else:
                seen[n] = v.tobytes()


def test_exchange_intranode_neighbors_use_copy_channel():
    tree = build_topology([("node", 1), ("core", 2)])  # both ranks on one node
    mesh = triangle_grid(4, 2)
    chunks = split_contiguous(mesh, 2)
    fields = make_fields(chunks, random.Random(0))
    _, rt = run_exchange(tree, chunks, fields, "replicate_owner",
                         1 + max(mesh.nodes))
    halo_msg = 0
    for row in rt.ledger.phase_totals():
        halo_msg += row["copy_bytes"]
    assert halo_msg > 0
    # The only point-to-point traffic is the shared-node discovery, which
    # rides the directory; the halo payloads themselves moved by copy.


def test_exchange_rejects_bad_input():
    tree = build_topology([("node", 2)])
    sched = HaloSchedule(rank=0, neighbors=((1, (7,), "internode"),))

    def prog_missing(ctx):
        if ctx.rank == 0:
            exchange(ctx, sched, {3: np.array([1.0])}, "replicate_owner")

    with pytest.raises(ValueError, match="no field value for shared node 7"):
        Runtime(tree, seed=0).run(prog_missing)

    def prog_mode(ctx):
        exchange(ctx, HaloSchedule(rank=ctx.rank, neighbors=()), {},
                 "average")

    with pytest.raises(ValueError, match="unknown exchange mode"):
        Runtime(tree, seed=0).run(prog_mode)

    def prog_arity(ctx):
        exchange(ctx, HaloSchedule(rank=ctx.rank, neighbors=()),
                 {0: np.array([1.0]), 1: np.array([1.0, 2.0])},
                 "replicate_owner")

    with pytest.raises(ValueError, match="arity mismatch"):
        Runtime(tree, seed=0).run(prog_arity)
