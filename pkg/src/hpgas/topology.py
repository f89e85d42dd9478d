"""Units, teams and locality domains.

Locality is decided by the launcher's ``units_per_node`` parameter: unit ``u``
lives on virtual node ``u // units_per_node``.  Everything here is pure; the
collective parts of team creation live in :mod:`hpgas.runtime`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import NotAMemberError

DEFAULT_POOL_BYTES = 4 * 1024 * 1024

ENV_UNIT = "HPGAS_UNIT"
ENV_WORLD_SIZE = "HPGAS_WORLD_SIZE"
ENV_UNITS_PER_NODE = "HPGAS_UNITS_PER_NODE"
ENV_RUN_ID = "HPGAS_RUN_ID"
ENV_ENDPOINT_FILE = "HPGAS_ENDPOINT_FILE"
ENV_POOL_BYTES = "HPGAS_POOL_BYTES"
ENV_LISTEN_FD = "HPGAS_LISTEN_FD"


@dataclass(frozen=True)
class RunConfig:
    unit: int
    world_size: int
    units_per_node: int
    run_id: str
    endpoint_file: str
    pool_bytes: int = DEFAULT_POOL_BYTES
    listen_fd: int | None = None

    def __post_init__(self):
        if self.world_size < 1:
            raise ValueError(f"world size must be >= 1, got {self.world_size}")
        if not 0 <= self.unit < self.world_size:
            raise ValueError(f"unit {self.unit} outside [0, {self.world_size})")
        if not 1 <= self.units_per_node:
            raise ValueError("units_per_node must be >= 1")
        if self.pool_bytes <= 0:
            raise ValueError("pool_bytes must be positive")

    @property
    def node_id(self) -> int:
        return node_of(self.unit, self.units_per_node)

    @property
    def num_nodes(self) -> int:
        return -(-self.world_size // self.units_per_node)

    @classmethod
    def from_env(cls, environ=None) -> "RunConfig":
        env = os.environ if environ is None else environ
        missing = [k for k in (ENV_UNIT, ENV_WORLD_SIZE, ENV_UNITS_PER_NODE,
                               ENV_RUN_ID, ENV_ENDPOINT_FILE) if k not in env]
        if missing:
            raise KeyError(f"launcher environment incomplete, missing {missing}")
        fd = env.get(ENV_LISTEN_FD)
        return cls(
            unit=int(env[ENV_UNIT]),
            world_size=int(env[ENV_WORLD_SIZE]),
            units_per_node=int(env[ENV_UNITS_PER_NODE]),
            run_id=env[ENV_RUN_ID],
            endpoint_file=env[ENV_ENDPOINT_FILE],
            pool_bytes=int(env.get(ENV_POOL_BYTES, DEFAULT_POOL_BYTES)),
            listen_fd=int(fd) if fd else None,
        )


def node_of(unit: int, units_per_node: int) -> int:
    return unit // units_per_node


def same_node(a: int, b: int, units_per_node: int) -> bool:
    return a == b or node_of(a, units_per_node) == node_of(b, units_per_node)


def locality_split(members: Iterable[int], units_per_node: int) -> tuple[tuple[int, ...], ...]:
    """Group ``members`` by node.

    Groups are ordered by their lowest absolute id and each group lists its
    units in ascending order, so every caller derives the same partition.
    """
    groups: dict[int, list[int]] = {}
    for u in members:
        groups.setdefault(node_of(u, units_per_node), []).append(u)
    ordered = sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])
    return tuple(tuple(g) for g in ordered)


@dataclass(frozen=True)
class Team:
    """An ordered set of units, as seen from unit ``me``.

    ``teamlist_index`` doubles as the team id and as the slot of the team's
    window registry.  Indices are never reused within a run.
    """

    teamlist_index: int
    members: tuple[int, ...]
    units_per_node: int
    me: int
    locality_groups: tuple[tuple[int, ...], ...] = field(init=False)
    my_group: tuple[int, ...] = field(init=False)
    _rel: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.members:
            raise ValueError("a team needs at least one member")
        if len(set(self.members)) != len(self.members):
            raise ValueError(f"duplicate members in {self.members}")
        if self.me not in self.members:
            raise NotAMemberError(f"unit {self.me} is not in team {self.members}")
        groups = locality_split(self.members, self.units_per_node)
        object.__setattr__(self, "locality_groups", groups)
        object.__setattr__(self, "my_group",
                           next(g for g in groups if self.me in g))
        object.__setattr__(self, "_rel", {u: i for i, u in enumerate(self.members)})

    @property
    def team_id(self) -> int:
        return self.teamlist_index

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def my_rel(self) -> int:
        return self._rel[self.me]

    def __contains__(self, unit: int) -> bool:
        return unit in self._rel

    def group_of(self, unit: int) -> tuple[int, ...]:
        node = node_of(unit, self.units_per_node)
        for g in self.locality_groups:
            if node_of(g[0], self.units_per_node) == node:
                return g
        raise NotAMemberError(f"unit {unit} is not in team {self.teamlist_index}")


def unit_abs_to_rel(team: Team, unit: int) -> int:
    try:
        return team._rel[unit]
    except KeyError:
        raise NotAMemberError(
            f"unit {unit} is not a member of team {team.teamlist_index}") from None


def unit_rel_to_abs(team: Team, rel: int) -> int:
    if not 0 <= rel < team.size:
        raise NotAMemberError(f"relative id {rel} outside team of size {team.size}")
    return team.members[rel]


def check_subset(parent: Team, subset: Sequence[int]) -> tuple[int, ...]:
    """Validate relative ids for team creation and map them to absolute ids."""
    subset = tuple(int(r) for r in subset)
    if not subset:
        raise ValueError("team subset must not be empty")
    if len(set(subset)) != len(subset):
        raise ValueError(f"duplicate ids in subset {subset}")
    return tuple(unit_rel_to_abs(parent, r) for r in subset)
