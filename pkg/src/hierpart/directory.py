"""One-sided distributed dictionary over integer keys.

Keys from a dense space [0, key_space) are spread over the participating
ranks in closed-form contiguous blocks, so any rank can compute a key's
owner without communication.  Inserts and lookups ride on a rendezvous
protocol built from ``blind_count`` plus point-to-point messages: no rank
ever needs an all-to-all exchange to learn who talks to it.

The dictionary is a multimap: inserting the same key from several ranks
keeps every value, ordered by source rank (then insertion order within a
source), which keeps results independent of message arrival order.
"""

from __future__ import annotations

from typing import Sequence

from . import _codec
from .runtime import ANY_SOURCE, RankContext, _normalize_team


def block_size(key_space: int, nranks: int) -> int:
    """Keys per owner block: ceil(key_space / nranks)."""
    if key_space <= 0 or nranks <= 0:
        raise ValueError("key_space and nranks must be positive")
    return -(-key_space // nranks)


def owner(key: int, key_space: int, nranks: int) -> int:
    """Owner index of ``key``; the last rank absorbs the remainder block."""
    if not (0 <= key < key_space):
        raise KeyError(f"key {key} outside key space [0, {key_space})")
    return min(key // block_size(key_space, nranks), nranks - 1)


def owner_interval(index: int, key_space: int, nranks: int) -> tuple[int, int]:
    """Half-open key interval [lo, hi) held by owner ``index``."""
    b = block_size(key_space, nranks)
    lo = index * b
    hi = key_space if index == nranks - 1 else min((index + 1) * b, key_space)
    return lo, max(lo, hi)


# One fixed tag per protocol step.  Blind drains are safe with a fixed tag
# because every exchange instance is bracketed by blind_count fences: nobody
# can inject data for the next instance before everyone drained the current
# one.  The explicitly addressed replies ride on per-pair FIFO order.
_TAG_DATA = 21
_TAG_QUERY_REQ = 22
_TAG_QUERY_REP = 23
_TAG_RANGE_REQ = 24
_TAG_RANGE_REP = 25


def blind_exchange(ctx: RankContext, outgoing: dict[int, bytes],
                   team: Sequence[int] | None = None) -> list[tuple[int, bytes]]:
    """Deliver one payload per destination; collect whatever arrives here.

    Collective over the team.  No rank knows in advance who will contact it:
    each first learns its incoming message count from ``blind_count``, then
    drains exactly that many messages by probing for any source.  Payloads
    destined to the caller itself never touch the network.

    Returns (source, payload) pairs sorted by source rank.
    """
    team_t = _normalize_team(team, ctx.size)
    if ctx.rank not in team_t:
        raise ValueError(f"rank {ctx.rank} not in team {team_t}")
    tag = _TAG_DATA
    local = None
    remote = {}
    for dest, payload in outgoing.items():
        if dest == ctx.rank:
            local = bytes(payload)
        else:
            if dest not in team_t:
                raise ValueError(f"destination {dest} not in team {team_t}")
            remote[dest] = payload
    n_incoming = ctx.blind_count(sorted(remote), team=team_t)
    for dest in sorted(remote):
        ctx.send(dest, remote[dest], tag)
    received = []
    for _ in range(n_incoming):
        source, _, _ = ctx.probe(source=ANY_SOURCE, tag=tag)
        source, _, data = ctx.recv(source=source, tag=tag)
        received.append((source, data))
    if local is not None:
        received.append((ctx.rank, local))
    received.sort(key=lambda sv: sv[0])
    return received


class Directory:
    """Distributed multimap handle returned by :meth:`Directory.build`.

    The handle is per rank: it holds this rank's shard plus the parameters
    needed to route queries.  All operations are collective over the team
    the directory was built on.
    """

    def __init__(self, ctx: RankContext, key_space: int, team: tuple[int, ...],
                 shard: dict[int, list[bytes]]):
        self._ctx = ctx
        self.key_space = key_space
        self.team = team
        self._shard = shard

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, ctx: RankContext, pairs: Sequence[tuple[int, bytes]],
              key_space: int, team: Sequence[int] | None = None) -> "Directory":
        """Insert local (key, value) pairs; collective over the team.

        Values for one key end up on its owner, ordered by source rank and,
        within a source, by the order the source listed them.
        """
        team_t = _normalize_team(team, ctx.size)
        P = len(team_t)
        rank_pos = {r: i for i, r in enumerate(team_t)}
        if ctx.rank not in rank_pos:
            raise ValueError(f"rank {ctx.rank} not in directory team {team_t}")
        by_owner: dict[int, list[tuple[int, bytes]]] = {}
        for key, value in pairs:
            o = owner(int(key), key_space, P)
            by_owner.setdefault(team_t[o], []).append((int(key), bytes(value)))
        outgoing = {dest: _codec.pack_kv(kvs) for dest, kvs in by_owner.items()}
        received = blind_exchange(ctx, outgoing, team=team_t)
        shard: dict[int, list[bytes]] = {}
        for _, blob in received:  # sources already sorted ascending
            for key, value in _codec.unpack_kv(blob):
                shard.setdefault(key, []).append(value)
        return cls(ctx, key_space, team_t, shard)

    # -- lookups ------------------------------------------------------------

    def query(self, keys: Sequence[int]) -> dict[int, list[bytes]]:
        """Fetch value lists for the given keys; collective over the team.

        Missing keys map to empty lists.  Each rank contacts only the owners
        of the keys it asks about; owners learn the number of requesters
        blindly and reply directly.
        """
        ctx = self._ctx
        team_t = self.team
        P = len(team_t)
        req_tag, rep_tag = _TAG_QUERY_REQ, _TAG_QUERY_REP
        wanted = sorted({int(k) for k in keys})
        by_owner: dict[int, list[int]] = {}
        for key in wanted:
            by_owner.setdefault(team_t[owner(key, self.key_space, P)], []).append(key)

        result: dict[int, list[bytes]] = {}
        own = by_owner.pop(ctx.rank, None)
        if own is not None:
            for key in own:
                result[key] = list(self._shard.get(key, []))

        n_requests = ctx.blind_count(sorted(by_owner), team=team_t)
        for dest in sorted(by_owner):
            ctx.send(dest, _codec.pack_i64(by_owner[dest]), req_tag)

        # Serve requesters: reply with the value lists in the asker's key order.
        for _ in range(n_requests):
            source, _, _ = ctx.probe(source=ANY_SOURCE, tag=req_tag)
            source, _, data = ctx.recv(source=source, tag=req_tag)
            asked = _codec.unpack_i64(data)
            reply = _codec.pack_blocks([
                _codec.pack_blocks(self._shard.get(int(k), [])) for k in asked
            ])
            ctx.send(source, reply, rep_tag)

        for src in sorted(by_owner):
            _, _, data = ctx.recv(source=src, tag=rep_tag)
            for key, block in zip(by_owner[src], _codec.unpack_blocks(data)):
                result[key] = _codec.unpack_blocks(block)
        return result

    def range_query(self, lo: int, hi: int) -> dict[int, list[bytes]]:
        """All pairs with lo <= key < hi, available on every team rank.

        Only owners whose intervals intersect the range are contacted; an
        empty range exchanges no messages at all.
        """
        ctx = self._ctx
        team_t = self.team
        P = len(team_t)
        if not (0 <= lo <= hi <= self.key_space):
            raise KeyError(f"range [{lo}, {hi}) outside key space "
                           f"[0, {self.key_space})")
        if lo == hi:
            return {}
        req_tag, rep_tag = _TAG_RANGE_REQ, _TAG_RANGE_REP
        first = owner(lo, self.key_space, P)
        last = owner(hi - 1, self.key_space, P)
        targets = [team_t[i] for i in range(first, last + 1)]

        result: dict[int, list[bytes]] = {}
        remote = []
        for dest in targets:
            if dest == ctx.rank:
                for key in sorted(self._shard):
                    if lo <= key < hi:
                        result[key] = list(self._shard[key])
            else:
                remote.append(dest)

        n_requests = ctx.blind_count(remote, team=team_t)
        for dest in remote:
            ctx.send(dest, _codec.pack_i64([lo, hi]), req_tag)

        for _ in range(n_requests):
            source, _, _ = ctx.probe(source=ANY_SOURCE, tag=req_tag)
            source, _, data = ctx.recv(source=source, tag=req_tag)
            qlo, qhi = (int(v) for v in _codec.unpack_i64(data))
            hits = [(k, self._shard[k]) for k in sorted(self._shard)
                    if qlo <= k < qhi]
            reply = _codec.pack_kv([
                (k, _codec.pack_blocks(vs)) for k, vs in hits
            ])
            ctx.send(source, reply, rep_tag)

        for src in remote:
            _, _, data = ctx.recv(source=src, tag=rep_tag)
            for key, block in _codec.unpack_kv(data):
                result[key] = _codec.unpack_blocks(block)
        return dict(sorted(result.items()))

    # -- local introspection (tests, diagnostics) ------------------------------

    def local_items(self) -> list[tuple[int, list[bytes]]]:
        return [(k, list(vs)) for k, vs in sorted(self._shard.items())]
