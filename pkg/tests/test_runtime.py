"""Runtime scheduler, messaging, fences, and traffic accounting."""

from __future__ import annotations

import random

import pytest

from hierpart.runtime import (ACC_BYTES, ANY_SOURCE, ANY_TAG, DeadlockError,
                              EpochError, ProtocolError, Runtime)
from hierpart.topology import build_topology

TREE4 = build_topology([("node", 2), ("socket", 2)])
TREE2 = build_topology([("node", 2)])


def column_sums(matrix: list[list[int]]) -> list[int]:
    """Oracle for blind_count: receive counts are the transpose's row sums."""
    n = len(matrix)
    return [sum(matrix[i][j] for i in range(n)) for j in range(n)]


def random_send_matrix(rng: random.Random, n: int) -> list[list[int]]:
    # Multiple sends to one target are allowed; diagonal stays empty since a
    # rank never messages itself.
    return [[rng.randint(0, 3) if i != j else 0 for j in range(n)]
            for i in range(n)]


def tree_of(p: int):
    return build_topology([("node", p)])


# -- messaging basics -----------------------------------------------------------


def test_send_recv_roundtrip():
    def prog(ctx):
        if ctx.rank == 0:
            ctx.send(1, b"ping", tag=7)
            source, tag, data = ctx.recv(source=1, tag=9)
            return (source, tag, data)
        ctx.send(0, b"pong", tag=9)
        return ctx.recv(source=0, tag=7)

    res = Runtime(TREE2, seed=1).run(prog)
    assert res[0] == (1, 9, b"pong")
    assert res[1] == (0, 7, b"ping")


def test_recv_fifo_per_source_and_tag():
    def prog(ctx):
        if ctx.rank == 0:
            for i in range(5):
                ctx.send(1, bytes([i]), tag=3)
            return None
        return [ctx.recv(source=0, tag=3)[2] for _ in range(5)]

    res = Runtime(TREE2, seed=0).run(prog)
    assert res[1] == [bytes([i]) for i in range(5)]


def test_recv_any_source_and_probe():
    def prog(ctx):
        if ctx.rank == 3:
            got = []
            for _ in range(3):
                source, tag, nbytes = ctx.probe(source=ANY_SOURCE, tag=5)
                assert nbytes == 1
                src2, _, data = ctx.recv(source=source, tag=5)
                assert src2 == source
                got.append((source, data))
            return sorted(got)
        ctx.send(3, bytes([ctx.rank]), tag=5)
        return None

    res = Runtime(TREE4, seed=2).run(prog)
    assert res[3] == [(0, b"\x00"), (1, b"\x01"), (2, b"\x02")]


def test_recv_wildcard_tag():
    def prog(ctx):
        if ctx.rank == 0:
            ctx.send(1, b"x", tag=42)
            return None
        source, tag, data = ctx.recv(source=0, tag=ANY_TAG)
        return tag

    assert Runtime(TREE2, seed=0).run(prog)[1] == 42


def test_unconsumed_message_is_a_protocol_error():
    def prog(ctx):
        if ctx.rank == 0:
            ctx.send(1, b"orphan")
        return None

    with pytest.raises(ProtocolError, match="unconsumed"):
        Runtime(TREE2, seed=0).run(prog)


def test_runtime_is_one_shot():
    rt = Runtime(TREE2, seed=0)
    rt.run(lambda ctx: None)
    with pytest.raises(ProtocolError, match="one-shot"):
        rt.run(lambda ctx: None)


def test_rank_exception_propagates():
    def prog(ctx):
        if ctx.rank == 1:
            raise RuntimeError("boom on rank 1")
        ctx.barrier()

    with pytest.raises(RuntimeError, match="boom on rank 1"):
        Runtime(TREE2, seed=0).run(prog)


# -- copy channel ----------------------------------------------------------------


def test_copy_channel_same_node_only():
    # TREE4 puts ranks {0,1} on node 0 and {2,3} on node 1.
    def prog(ctx):
        if ctx.rank == 0:
            ctx.copy_to(1, b"handoff")
        elif ctx.rank == 1:
            return ctx.copy_from(0)
        return None

    rt = Runtime(TREE4, seed=0)
    assert rt.run(prog)[1] == b"handoff"
    assert rt.ledger.bytes_total(kinds=("copy",)) == 7
    assert rt.ledger.bytes_total(kinds=("msg",)) == 0


def test_copy_across_nodes_rejected():
    def prog(ctx):
        if ctx.rank == 0:
            ctx.copy_to(2, b"nope")

    with pytest.raises(ProtocolError, match="share no node"):
        Runtime(TREE4, seed=0).run(prog)


# -- deadlock and epoch reporting ---------------------------------------------------


def test_deadlock_report_names_blocked_ranks():
    def prog(ctx):
        if ctx.rank == 0:
            ctx.recv(source=1, tag=99)

    with pytest.raises(DeadlockError) as err:
        Runtime(TREE2, seed=0).run(prog)
    text = str(err.value)
    assert "rank 0" in text and "tag=99" in text


def test_mismatched_fence_counts_raise_epoch_error():
    def prog(ctx):
        win = ctx.window()
        ctx.fence(win)
        if ctx.rank == 0:
            ctx.fence(win)  # partner already finished

    with pytest.raises(EpochError, match="fence"):
        Runtime(TREE2, seed=0).run(prog)


def test_accumulate_outside_epoch_rejected():
    def prog(ctx):
        win = ctx.window()
        ctx.accumulate(win, 0, 1)

    with pytest.raises(EpochError):
        Runtime(TREE2, seed=0).run(prog)


def test_barrier_releases_all_ranks():
    order = []

    def prog(ctx):
        ctx.barrier()
        order.append(ctx.rank)
        ctx.barrier()
        return len(order)

    res = Runtime(TREE4, seed=5).run(prog)
    # Everyone passed barrier 1 before anyone passed barrier 2.
    assert all(n == 4 for n in res)


# -- blind count ------------------------------------------------------------------


def test_blind_count_matches_column_sums_small():
    rng = random.Random(20)
    for p in (2, 4, 8):
        matrix = random_send_matrix(rng, p)
        expect = column_sums(matrix)

        def prog(ctx):
            targets = [j for j in range(p)
                       for _ in range(matrix[ctx.rank][j])]
            return ctx.blind_count(targets)

        assert Runtime(tree_of(p), seed=1).run(prog) == expect


def test_blind_count_independent_of_scheduler_seed():
    matrix = random_send_matrix(random.Random(4), 4)
    expect = column_sums(matrix)

    def prog(ctx):
        targets = [j for j in range(4) for _ in range(matrix[ctx.rank][j])]
        return ctx.blind_count(targets)

    for seed in range(10):
        assert Runtime(TREE4, seed=seed).run(prog) == expect


def test_blind_count_self_target_allowed():
    def prog(ctx):
        return ctx.blind_count([ctx.rank])

    assert Runtime(TREE4, seed=0).run(prog) == [1, 1, 1, 1]


def test_blind_count_reusable_back_to_back():
    def prog(ctx):
        first = ctx.blind_count([0])
        second = ctx.blind_count([1])
        return (first, second)

    res = Runtime(TREE4, seed=3).run(prog)
    assert [r[0] for r in res] == [4, 0, 0, 0]
    assert [r[1] for r in res] == [0, 4, 0, 0]


def test_blind_count_team_scoped():
    def prog(ctx):
        team = (0, 1) if ctx.rank < 2 else (2, 3)
        peer = {0: 1, 1: 0, 2: 3, 3: 2}[ctx.rank]
        return ctx.blind_count([peer], team=team)

    assert Runtime(TREE4, seed=0).run(prog) == [1, 1, 1, 1]


def test_blind_count_target_outside_window_rejected():
    def prog(ctx):
        ctx.blind_count([3], team=(0, 1))

    with pytest.raises(ProtocolError, match="outside window"):
        Runtime(TREE2, seed=0).run(prog)


# -- ledger accounting ---------------------------------------------------------------


def test_ledger_counts_messages_and_bytes_by_phase():
    def prog(ctx):
        ctx.set_phase("alpha")
        if ctx.rank == 0:
            ctx.send(1, b"12345")
        elif ctx.rank == 1:
            ctx.recv(source=0)
        ctx.barrier()
        ctx.set_phase("beta")
        if ctx.rank == 2:
            ctx.send(3, b"123")
        elif ctx.rank == 3:
            ctx.recv(source=2)

    rt = Runtime(TREE4, seed=0)
    rt.run(prog)
    assert rt.ledger.bytes_total(kinds=("msg",), phase="alpha") == 5
    assert rt.ledger.bytes_total(kinds=("msg",), phase="beta") == 3
    assert rt.ledger.message_count(phase="alpha") == 1
    assert rt.ledger.phases() == ["alpha", "beta"]


def test_accumulate_ledger_four_bytes_each_and_self_free():
    def prog(ctx):
        win = ctx.window()
        ctx.fence(win)
        ctx.accumulate(win, (ctx.rank + 1) % 4, 1)
        ctx.accumulate(win, ctx.rank, 1)  # self: no traffic
        ctx.fence(win)
        n = ctx.read_cell(win)
        ctx.reset_cell(win)
        return n

    rt = Runtime(TREE4, seed=1)
    assert rt.run(prog) == [2, 2, 2, 2]
    assert rt.ledger.bytes_total(kinds=("acc",)) == 4 * ACC_BYTES
    assert rt.ledger.message_count(kinds=("acc",)) == 4


def test_ledger_locality_split():
    def prog(ctx):
        if ctx.rank == 0:
            ctx.send(1, b"aa")   # intranode on TREE4
            ctx.send(2, b"bbb")  # internode
        elif ctx.rank in (1, 2):
            ctx.recv(source=0)

    rt = Runtime(TREE4, seed=0)
    rt.run(prog)
    assert rt.ledger.bytes_total(kinds=("msg",), locality="intranode") == 2
    assert rt.ledger.bytes_total(kinds=("msg",), locality="internode") == 3


def test_results_ordered_by_rank():
    res = Runtime(TREE4, seed=9).run(lambda ctx: ctx.rank * 10)
    assert res == [0, 10, 20, 30]
