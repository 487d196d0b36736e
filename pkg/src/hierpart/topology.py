"""Hardware topology trees and the group collectives defined over them.

A topology is an ordered list of levels, root first, e.g.
``[("node", 2), ("socket", 2), ("core", 4)]``.  Leaves are numbered
depth-first, so the leaf number is the rank id and every group of ranks
below a tree vertex is a contiguous rank range.  The lowest rank of a group
acts as its leader.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

from .runtime import RankContext


@dataclass(frozen=True)
class TopologyTree:
    """Uniform-arity hardware hierarchy; total_ranks = product of arities."""

    levels: tuple[tuple[str, int], ...]

    @property
    def total_ranks(self) -> int:
        return math.prod(a for _, a in self.levels)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def arity(self, level: int) -> int:
        return self.levels[level][1]

    def level_name(self, level: int) -> str:
        return self.levels[level][0]

    def group_size(self, level: int) -> int:
        """Number of leaf ranks below one level-``level`` vertex."""
        return math.prod(a for _, a in self.levels[level + 1:])

    def group_count(self, level: int) -> int:
        return math.prod(a for _, a in self.levels[:level + 1])

    def group_index(self, rank: int, level: int) -> int:
        return rank // self.group_size(level)

    def group_members(self, level: int, index: int) -> range:
        size = self.group_size(level)
        return range(index * size, (index + 1) * size)

    def same_node(self, a: int, b: int) -> bool:
        """True when both ranks sit under the same level-0 vertex."""
        return self.group_index(a, 0) == self.group_index(b, 0)

    def to_doc(self) -> dict[str, Any]:
        return {"levels": [{"name": n, "arity": a} for n, a in self.levels]}


def build_topology(spec: Any) -> TopologyTree:
    """Build a TopologyTree from ``{"levels": [{"name", "arity"}...]}``
    or a plain sequence of (name, arity) pairs.

    Rejects empty trees and non-positive arities, naming the offending level.
    """
    if isinstance(spec, TopologyTree):
        return spec
    if isinstance(spec, dict):
        raw = spec.get("levels")
        if not isinstance(raw, list):
            raise ValueError("topology spec must contain a 'levels' list")
        pairs = []
        for i, entry in enumerate(raw):
            if not isinstance(entry, dict) or "name" not in entry or "arity" not in entry:
                raise ValueError(f"topology level {i} must have 'name' and 'arity'")
            pairs.append((entry["name"], entry["arity"]))
    else:
        pairs = [(n, a) for n, a in spec]
    if not pairs:
        raise ValueError("topology must have at least one level")
    levels = []
    for i, (name, arity) in enumerate(pairs):
        if not isinstance(name, str) or not name:
            raise ValueError(f"topology level {i}: name must be a non-empty string")
        if not isinstance(arity, int) or isinstance(arity, bool) or arity < 1:
            raise ValueError(f"topology level {i} ({name!r}): arity must be a "
                             f"positive integer, got {arity!r}")
        levels.append((name, arity))
    return TopologyTree(tuple(levels))


@dataclass(frozen=True)
class LevelGroup:
    """All rank groups at one tree level."""

    level: int
    groups: tuple[tuple[int, ...], ...]

    @property
    def leaders(self) -> tuple[int, ...]:
        return tuple(g[0] for g in self.groups)

    def group_of(self, rank: int) -> tuple[int, ...]:
        for g in self.groups:
            if g[0] <= rank <= g[-1]:
                return g
        raise ValueError(f"rank {rank} not in any group")


def level_groups(tree: TopologyTree, level: int) -> LevelGroup:
    """Contiguous rank groups at ``level``; leader is each group's lowest rank."""
    if not (0 <= level < tree.n_levels):
        raise ValueError(f"level {level} outside 0..{tree.n_levels - 1}")
    groups = tuple(
        tuple(tree.group_members(level, i)) for i in range(tree.group_count(level))
    )
    return LevelGroup(level, groups)


def child_leaders(tree: TopologyTree, level: int, group_index: int) -> tuple[int, ...]:
    """Leaders of the level+1 groups under the given level-``level`` group."""
    arity = tree.arity(level + 1)
    first_child = group_index * arity
    return tuple(tree.group_members(level + 1, first_child + j)[0]
                 for j in range(arity))


@dataclass(frozen=True)
class Payload:
    """A byte payload attributed to the member rank that contributed it."""

    owner: int
    data: bytes


# Messages between a fixed rank pair with a fixed tag arrive in send order,
# so each collective kind can reuse one tag without cross-talk.
_TAG_AGGREGATE = 11
_TAG_CASCADE = 12


def aggregate(ctx: RankContext, members: Sequence[int], data: bytes,
              ) -> list[Payload] | None:
    """Move every member's payload to the group leader.

    Collective over ``members``.  The leader returns payloads in member rank
    order; everyone else returns None.  A missing member leaves the leader
    blocked and is named by the deadlock report.
    """
    members = sorted(members)
    leader = members[0]
    tag = _TAG_AGGREGATE
    if ctx.rank == leader:
        out = []
        for m in members:
            if m == ctx.rank:
                out.append(Payload(m, bytes(data)))
            else:
                _, _, got = ctx.recv(source=m, tag=tag)
                out.append(Payload(m, got))
        return out
    ctx.send(leader, data, tag)
    return None


def cascade(ctx: RankContext, members: Sequence[int],
            payloads: Sequence[bytes] | None) -> bytes:
    """Inverse of aggregate: the leader hands payload i to member i.

    Collective over ``members``; only the leader supplies ``payloads``.
    """
    members = sorted(members)
    leader = members[0]
    tag = _TAG_CASCADE
    if ctx.rank == leader:
        if payloads is None or len(payloads) != len(members):
            got = "none" if payloads is None else len(payloads)
            raise ValueError(f"cascade needs {len(members)} payloads, got {got}")
        own = None
        for m, p in zip(members, payloads):
            if m == ctx.rank:
                own = bytes(p)
            else:
                ctx.send(m, p, tag)
        assert own is not None
        return own
    if payloads is not None:
        raise ValueError("only the group leader supplies cascade payloads")
    _, _, got = ctx.recv(source=leader, tag=tag)
    return got
