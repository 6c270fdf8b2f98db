"""Agent task state and coordination-group formation.

An agent's task is a route (sequence of area ids) plus its current mode, the
index of the route area it is in. Agents whose look-ahead windows share an
area must coordinate; the transitive closure of that pairing partitions the
fleet into flocks, each solved by one joint controller.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .geom import Point2, point_in_polygon
from .worldmodel import RouteError, SemanticMap


@dataclass(frozen=True)
class AgentShape:
    hard_radius: float = 0.40
    soft_radius: float = 0.45

    def __post_init__(self):
        if not 0 < self.hard_radius < self.soft_radius:
            raise ValueError(
                f"need 0 < hard radius < soft radius, got {self.hard_radius}, {self.soft_radius}")


@dataclass(frozen=True)
class DynamicLimits:
    v_min: float = 0.0
    v_max: float = 1.0
    a_min: float = -0.5
    a_max: float = 0.5
    omega_min: float = -0.5
    omega_max: float = 0.5


@dataclass(frozen=True)
class AgentTask:
    agent_id: str
    route: tuple[str, ...]
    mode: int = 0
    shape: AgentShape = field(default_factory=AgentShape)
    limits: DynamicLimits = field(default_factory=DynamicLimits)

    def __post_init__(self):
        object.__setattr__(self, "route", tuple(self.route))
        if not self.route:
            raise ValueError(f"agent '{self.agent_id}': empty route")
        if not 0 <= self.mode < len(self.route):
            raise ValueError(f"agent '{self.agent_id}': mode {self.mode} outside route")

    @property
    def completed(self) -> bool:
        return self.mode == len(self.route) - 1

    def advanced(self) -> "AgentTask":
        return replace(self, mode=self.mode + 1)


def validate_task(smap: SemanticMap, task: AgentTask) -> None:
    """Check that consecutive route areas are joined by an interface."""
    for a, b in zip(task.route, task.route[1:]):
        if smap.interface_between(a, b) is None:
            raise RouteError(
                f"agent '{task.agent_id}': route areas '{a}' and '{b}' share no interface")


def semantic_horizon(task: AgentTask, n: int) -> list[str]:
    """Route slice [mode, mode + n], truncated at the route end. Never empty."""
    return list(task.route[task.mode:min(task.mode + n, len(task.route) - 1) + 1])


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def form_flocks(tasks: list[AgentTask], n_ha: int) -> list[tuple[str, ...]]:
    """Partition agents into coordination groups.

    Two agents pair when their ``n_ha``-horizons share an area; pairs are
    expanded to a fixed point, which is the connected components of the
    pairwise-overlap graph. Agents without any overlap form singletons.
    Output is a partition, ordered by each flock's smallest agent id.
    """
    ids = sorted(t.agent_id for t in tasks)
    if len(ids) != len(set(ids)):
        raise ValueError("agent ids must be unique")
    by_id = {t.agent_id: t for t in tasks}
    horizons = {aid: set(semantic_horizon(by_id[aid], n_ha)) for aid in ids}
    uf = _UnionFind(len(ids))
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if horizons[ids[i]] & horizons[ids[j]]:
                uf.union(i, j)
    groups: dict[int, list[str]] = {}
    for i, aid in enumerate(ids):
        groups.setdefault(uf.find(i), []).append(aid)
    return sorted((tuple(sorted(g)) for g in groups.values()), key=lambda g: g[0])


def check_event(task: AgentTask, position: Point2, smap: SemanticMap) -> int | None:
    """Mode transition test: returns ``mode + 1`` when the agent's position is
    contained in the next route area, else None. Containment in the next area
    wins over the current one, so a pose inside both advances the mode."""
    if task.completed:
        return None
    next_area = smap.nodes[task.route[task.mode + 1]]
    if point_in_polygon(position, next_area.polygon):
        return task.mode + 1
    return None
