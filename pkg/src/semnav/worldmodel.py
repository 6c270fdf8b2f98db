"""Semantic world model: a property graph of drivable areas, the interfaces
that join them and the boundaries that wall them in, plus the queries that
turn a route through that graph into the wall/objective/event sets a motion
controller consumes.

Maps are plain JSON documents (see ``save_map``/``load_map``); the bundled
benchmark environment is produced by ``generate_grid_map``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import ConvexPolygon, GeometryError, Point2, Segment2, signed_distance_to_line


class MapValidationError(ValueError):
    """Map invariant violation; carries the offending node id and rule name."""

    def __init__(self, node_id: str, rule: str, detail: str = ""):
        self.node_id = node_id
        self.rule = rule
        msg = f"[{node_id}] violates '{rule}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class RouteError(ValueError):
    """Route inconsistent with the map (unconnected areas, bad mode index)."""


class NodeKind(enum.Enum):
    AREA = "area"
    INTERFACE = "interface"
    BOUNDARY = "boundary"


@dataclass(frozen=True)
class MapNode:
    id: str
    kind: NodeKind
    polygon: ConvexPolygon | None = None        # area, boundary
    segment: Segment2 | None = None             # interface
    objective: Segment2 | None = None           # interface only
    objective_forward: str | None = None        # area id the objective points into
    event: Segment2 | None = None               # interface only


@dataclass(frozen=True)
class WallElement:
    """A no-go element handed to the constraint builder: a boundary polygon
    or an inactive interface acting as a virtual wall (2 vertices)."""

    id: str
    vertices: np.ndarray  # (n, 2)


@dataclass(frozen=True)
class ObjectiveGate:
    """Oriented progress line: signed distance is positive while the agent is
    on the approach side and negative once it has crossed into the next area."""

    interface_id: str
    segment: Segment2
    sign: float  # +1 keeps the raw left-positive convention, -1 flips it

    def signed_distance(self, p: Point2) -> float:
        return self.sign * signed_distance_to_line(p, self.segment)

    def line_coefficients(self) -> tuple[float, float, float]:
        """(nx, ny, c) with signed_distance(p) = nx*p.x + ny*p.y - c."""
        dx = self.segment.b.x - self.segment.a.x
        dy = self.segment.b.y - self.segment.a.y
        norm = math.hypot(dx, dy)
        nx, ny = -dy / norm * self.sign, dx / norm * self.sign
        c = nx * self.segment.a.x + ny * self.segment.a.y
        return nx, ny, c


@dataclass(frozen=True)
class RelevantElements:
    """Per-agent result of the element-retrieval query over the horizon."""

    walls: tuple[WallElement, ...]
    active_interfaces: tuple[str, ...]
    objectives: tuple[ObjectiveGate, ...]
    events: tuple[Segment2, ...]
    horizon_areas: tuple[str, ...]  # area ids of the objective slots, in route order


class SemanticMap:
    """Immutable graph of areas/interfaces/boundaries with 2-D geometry."""

    def __init__(self, nodes: list[MapNode], edges: list[tuple[str, str]]):
        self.nodes: dict[str, MapNode] = {n.id: n for n in nodes}
        self.edges: frozenset[frozenset[str]] = frozenset(
            frozenset(e) for e in edges
        )
        self._adj: dict[str, set[str]] = {n.id: set() for n in nodes}
        for e in edges:
            a, b = e
            if a in self._adj and b in self._adj:
                self._adj[a].add(b)
                self._adj[b].add(a)
        self._validate(nodes, edges)
        # interface id -> pair of incident area ids, for route lookups
        self._iface_areas: dict[str, tuple[str, ...]] = {
            n.id: tuple(sorted(self._adj[n.id]))
            for n in nodes
            if n.kind is NodeKind.INTERFACE
        }

    # -- queries ----------------------------------------------------------

    def node(self, node_id: str) -> MapNode:
        return self.nodes[node_id]

    def neighbors(self, node_id: str) -> list[str]:
        return sorted(self._adj[node_id])

    def area_interfaces(self, area_id: str) -> list[str]:
        return [i for i in self.neighbors(area_id)
                if self.nodes[i].kind is NodeKind.INTERFACE]

    def area_boundaries(self, area_id: str) -> list[str]:
        return [i for i in self.neighbors(area_id)
                if self.nodes[i].kind is NodeKind.BOUNDARY]

    def interface_between(self, area_a: str, area_b: str) -> str | None:
        for iface in self.area_interfaces(area_a):
            if area_b in self._iface_areas[iface]:
                return iface
        return None

    def areas(self) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if n.kind is NodeKind.AREA)

    def boundary_nodes(self) -> list[MapNode]:
        return [self.nodes[i] for i in sorted(self.nodes)
                if self.nodes[i].kind is NodeKind.BOUNDARY]

    def bounding_box(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) over every node's geometry."""
        xs, ys = [], []
        for n in self.nodes.values():
            arr = n.polygon.as_array() if n.polygon else n.segment.as_array()
            xs.extend(arr[:, 0])
            ys.extend(arr[:, 1])
        return min(xs), min(ys), max(xs), max(ys)

    # -- validation -------------------------------------------------------

    def _validate(self, nodes: list[MapNode], edges: list[tuple[str, str]]):
        if not nodes:
            raise MapValidationError("<map>", "nonempty", "node list is empty")
        seen = set()
        for n in nodes:
            if n.id in seen:
                raise MapValidationError(n.id, "unique-id", "duplicate node id")
            seen.add(n.id)
        for n in nodes:
            if n.kind in (NodeKind.AREA, NodeKind.BOUNDARY):
                if n.polygon is None:
                    raise MapValidationError(n.id, "geometry", f"{n.kind.value} needs a polygon")
            else:
                if n.segment is None:
                    raise MapValidationError(n.id, "geometry", "interface needs a segment")
                if n.objective is None or n.objective_forward is None:
                    raise MapValidationError(n.id, "interface-props", "missing objective")
                if n.event is None:
                    raise MapValidationError(n.id, "interface-props", "missing event")
        for a, b in edges:
            for end in (a, b):
                if end not in self.nodes:
                    raise MapValidationError(end, "edge-endpoints", f"edge ({a}, {b}) references unknown node")
            ka, kb = self.nodes[a].kind, self.nodes[b].kind
            kinds = {ka, kb}
            if kinds not in ({NodeKind.AREA, NodeKind.INTERFACE},
                            {NodeKind.AREA, NodeKind.BOUNDARY}):
                raise MapValidationError(
                    a, "edge-kind",
                    f"edge ({a}:{ka.value}, {b}:{kb.value}) must join an area to an interface or boundary")
        for n in nodes:
            incident_areas = [i for i in self._adj[n.id]
                              if self.nodes[i].kind is NodeKind.AREA]
            if n.kind is NodeKind.INTERFACE:
                if not 1 <= len(incident_areas) <= 2:
                    raise MapValidationError(
                        n.id, "interface-degree",
                        f"interface has {len(incident_areas)} incident areas, needs 1 or 2")
                if n.objective_forward not in incident_areas:
                    raise MapValidationError(
                        n.id, "interface-props",
                        f"objective forward area '{n.objective_forward}' is not incident")
            elif n.kind is NodeKind.BOUNDARY:
                if len(incident_areas) < 1:
                    raise MapValidationError(n.id, "boundary-degree", "boundary attached to no area")


# -- serialization ---------------------------------------------------------


def _points(coords) -> list[Point2]:
    return [Point2(float(x), float(y)) for x, y in coords]


def _segment(coords) -> Segment2:
    (a, b) = _points(coords)
    return Segment2(a, b)


def load_map(data: bytes | str) -> SemanticMap:
    """Parse and validate a map JSON document."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise MapValidationError("<map>", "parse", str(exc)) from exc
    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise MapValidationError("<map>", "parse", "top level must have 'nodes' and 'edges'")
    nodes = []
    for raw in doc["nodes"]:
        node_id = str(raw.get("id", "<missing-id>"))
        try:
            kind = NodeKind(raw["kind"])
        except (KeyError, ValueError) as exc:
            raise MapValidationError(node_id, "kind", f"bad node kind {raw.get('kind')!r}") from exc
        try:
            polygon = ConvexPolygon(tuple(_points(raw["polygon"]))) if "polygon" in raw else None
            segment = _segment(raw["segment"]) if "segment" in raw else None
            objective = objective_forward = event = None
            if "objective" in raw:
                objective = _segment(raw["objective"]["segment"])
                objective_forward = str(raw["objective"]["forward_area"])
            if "event" in raw:
                event = _segment(raw["event"]["segment"])
        except (GeometryError, KeyError, TypeError, ValueError) as exc:
            raise MapValidationError(node_id, "geometry", str(exc)) from exc
        nodes.append(MapNode(node_id, kind, polygon, segment, objective,
                             objective_forward, event))
    edges = []
    for raw_edge in doc["edges"]:
        if not (isinstance(raw_edge, (list, tuple)) and len(raw_edge) == 2):
            raise MapValidationError("<map>", "edge-endpoints", f"malformed edge {raw_edge!r}")
        edges.append((str(raw_edge[0]), str(raw_edge[1])))
    return SemanticMap(nodes, edges)


def map_document(smap: SemanticMap) -> dict:
    """Plain-dict form of a map, with nodes and edges in canonical order."""
    nodes = []
    for node_id in sorted(smap.nodes):
        n = smap.nodes[node_id]
        raw: dict = {"id": n.id, "kind": n.kind.value}
        if n.polygon is not None:
            raw["polygon"] = [[p.x, p.y] for p in n.polygon.vertices]
        if n.segment is not None:
            raw["segment"] = n.segment.as_array().tolist()
        if n.objective is not None:
            raw["objective"] = {"segment": n.objective.as_array().tolist(),
                                "forward_area": n.objective_forward}
        if n.event is not None:
            raw["event"] = {"segment": n.event.as_array().tolist()}
        nodes.append(raw)
    edges = sorted(sorted(e) for e in smap.edges)
    return {"nodes": nodes, "edges": edges}


def save_map(smap: SemanticMap) -> str:
    return json.dumps(map_document(smap), indent=1)


# -- benchmark environment generation ---------------------------------------

WALL_THICKNESS = 0.2


def _rect(x0, y0, x1, y1) -> ConvexPolygon:
    return ConvexPolygon((Point2(x0, y0), Point2(x1, y0), Point2(x1, y1), Point2(x0, y1)))


class _MapBuilder:
    def __init__(self):
        self.nodes: list[MapNode] = []
        self.edges: list[tuple[str, str]] = []

    def area(self, node_id, poly):
        self.nodes.append(MapNode(node_id, NodeKind.AREA, polygon=poly))

    def wall(self, node_id, poly, *areas):
        self.nodes.append(MapNode(node_id, NodeKind.BOUNDARY, polygon=poly))
        for a in areas:
            self.edges.append((a, node_id))

    def interface(self, node_id, seg, *areas, forward=None):
        fwd = forward if forward is not None else sorted(areas)[-1]
        self.nodes.append(MapNode(node_id, NodeKind.INTERFACE, segment=seg,
                                  objective=seg, objective_forward=fwd, event=seg))
        for a in areas:
            self.edges.append((a, node_id))

    def build(self) -> SemanticMap:
        return SemanticMap(self.nodes, self.edges)


def generate_grid_map(cols: int = 4, rows: int = 5, corridor_width: float = 2.0,
                      block: float = 6.0, block_y: float | None = 5.25) -> SemanticMap:
    """Grid benchmark environment: cols x rows intersection areas joined by
    corridor areas, with boundary walls lining every drivable edge.

    ``block`` is the pitch between intersection centers along x, ``block_y``
    along y (defaults to ``block``). The defaults give a 20 x 23 m workspace
    with 2.0 m corridors.
    """
    if cols < 2 or rows < 2:
        raise ValueError(f"grid needs cols, rows >= 2, got {cols} x {rows}")
    if corridor_width <= 0:
        raise ValueError("corridor_width must be positive")
    by = block if block_y is None else block_y
    w = corridor_width
    if block <= w or by <= w:
        raise ValueError("block pitch must exceed corridor width")
    t = WALL_THICKNESS
    b = _MapBuilder()

    def xid(i, j):
        return f"X{i}_{j}"

    # intersection squares
    for i in range(cols):
        for j in range(rows):
            x0, y0 = i * block, j * by
            b.area(xid(i, j), _rect(x0, y0, x0 + w, y0 + w))
    # horizontal corridors + their walls and interfaces
    for i in range(cols - 1):
        for j in range(rows):
            cid = f"H{i}_{j}"
            x0, y0 = i * block + w, j * by
            x1 = (i + 1) * block
            b.area(cid, _rect(x0, y0, x1, y0 + w))
            b.wall(f"W:{cid}:s", _rect(x0, y0 - t, x1, y0), cid)
            b.wall(f"W:{cid}:n", _rect(x0, y0 + w, x1, y0 + w + t), cid)
            seg_w = Segment2(Point2(x0, y0), Point2(x0, y0 + w))
            seg_e = Segment2(Point2(x1, y0), Point2(x1, y0 + w))
            b.interface(f"I:{xid(i, j)}:{cid}", seg_w, xid(i, j), cid)
            b.interface(f"I:{cid}:{xid(i + 1, j)}", seg_e, cid, xid(i + 1, j))
    # vertical corridors
    for i in range(cols):
        for j in range(rows - 1):
            cid = f"V{i}_{j}"
            x0, y0 = i * block, j * by + w
            y1 = (j + 1) * by
            b.area(cid, _rect(x0, y0, x0 + w, y1))
            b.wall(f"W:{cid}:w", _rect(x0 - t, y0, x0, y1), cid)
            b.wall(f"W:{cid}:e", _rect(x0 + w, y0, x0 + w + t, y1), cid)
            seg_s = Segment2(Point2(x0, y0), Point2(x0 + w, y0))
            seg_n = Segment2(Point2(x0, y1), Point2(x0 + w, y1))
            b.interface(f"I:{xid(i, j)}:{cid}", seg_s, xid(i, j), cid)
            b.interface(f"I:{cid}:{xid(i, j + 1)}", seg_n, cid, xid(i, j + 1))
    # close off intersection edges that have no corridor behind them
    for i in range(cols):
        for j in range(rows):
            x0, y0 = i * block, j * by
            if i == 0:
                b.wall(f"W:{xid(i, j)}:w", _rect(x0 - t, y0, x0, y0 + w), xid(i, j))
            if i == cols - 1:
                b.wall(f"W:{xid(i, j)}:e", _rect(x0 + w, y0, x0 + w + t, y0 + w), xid(i, j))
            if j == 0:
                b.wall(f"W:{xid(i, j)}:s", _rect(x0, y0 - t, x0 + w, y0), xid(i, j))
            if j == rows - 1:
                b.wall(f"W:{xid(i, j)}:n", _rect(x0, y0 + w, x0 + w + t, y0 + w + t), xid(i, j))
    return b.build()


def corner_map() -> SemanticMap:
    """Three-area corner environment bundled as the minimal worked example:
    a vertical corridor S0, a corner S1 and a horizontal corridor S2, with
    border interfaces I0/I3 acting as permanent virtual walls."""
    b = _MapBuilder()
    b.area("S0", _rect(-3.5, -2.0, -2.5, 2.0))
    b.area("S1", _rect(-3.5, 2.0, -2.5, 3.0))
    b.area("S2", _rect(-2.5, 2.0, 0.5, 3.0))
    b.wall("W0", _rect(-3.75, -2.0, -3.55, 3.25), "S0", "S1")
    b.wall("W1", _rect(-2.45, -2.0, -2.25, 1.95), "S0")
    b.wall("W2", _rect(-3.55, 3.05, 0.5, 3.25), "S1", "S2")
    b.wall("W3", _rect(-2.45, 1.75, 0.5, 1.95), "S2")
    b.interface("I0", Segment2(Point2(-3.5, -2.0), Point2(-2.5, -2.0)), "S0", forward="S0")
    b.interface("I1", Segment2(Point2(-3.5, 2.0), Point2(-2.5, 2.0)), "S0", "S1")
    b.interface("I2", Segment2(Point2(-2.5, 2.0), Point2(-2.5, 3.0)), "S1", "S2")
    b.interface("I3", Segment2(Point2(0.5, 2.0), Point2(0.5, 3.0)), "S2", forward="S2")
    return b.build()


# -- element retrieval -------------------------------------------------------


def _wall_element(node: MapNode) -> WallElement:
    if node.polygon is not None:
        return WallElement(node.id, node.polygon.as_array())
    return WallElement(node.id, node.segment.as_array())


def _oriented_gate(smap: SemanticMap, iface: MapNode, next_area: str) -> ObjectiveGate:
    """Orient the interface objective so crossing into next_area drives the
    signed distance negative."""
    centroid = smap.nodes[iface.objective_forward].polygon.centroid()
    side = signed_distance_to_line(centroid, iface.objective)
    sign = -math.copysign(1.0, side)
    if next_area != iface.objective_forward:
        sign = -sign
    return ObjectiveGate(iface.id, iface.objective, sign)


def relevant_elements(smap: SemanticMap, route: list[str], mode: int, n_h: int) -> RelevantElements:
    """Gather the walls, active interfaces, objectives and events an agent at
    route index ``mode`` is subject to, over a look-ahead of ``n_h`` areas.

    Walls extend one area past the objective window so the area the last
    objective pulls into is always enclosed. Inactive interfaces of every
    covered area are included as virtual walls; the interfaces leading to the
    previous and next route areas are exempt.
    """
    if not 0 <= mode < len(route):
        raise RouteError(f"mode {mode} out of range for route of length {len(route)}")
    for area_id in route:
        node = smap.nodes.get(area_id)
        if node is None or node.kind is not NodeKind.AREA:
            raise RouteError(f"route area '{area_id}' not an area of the map")

    last = len(route) - 1
    goal_slot = min(mode + n_h, last)          # objective window end
    wall_slot = min(mode + n_h + 1, last)      # wall window end

    walls: dict[str, WallElement] = {}
    active: list[str] = []
    objectives: list[ObjectiveGate] = []
    events: list[Segment2] = []

    for j in range(mode, wall_slot + 1):
        area = route[j]
        for wid in smap.area_boundaries(area):
            walls.setdefault(wid, _wall_element(smap.nodes[wid]))
        neighbors_in_route = {route[j - 1] if j > 0 else None,
                              route[j + 1] if j < last else None}
        for iid in smap.area_interfaces(area):
            linked = set(smap._iface_areas[iid]) - {area}
            if linked & neighbors_in_route:
                continue
            walls.setdefault(iid, _wall_element(smap.nodes[iid]))

    for j in range(mode, goal_slot + 1):
        if j == last:
            break
        iface_id = smap.interface_between(route[j], route[j + 1])
        if iface_id is None:
            raise RouteError(f"route areas '{route[j]}' and '{route[j + 1]}' share no interface")
        iface = smap.nodes[iface_id]
        active.append(iface_id)
        objectives.append(_oriented_gate(smap, iface, route[j + 1]))
        events.append(iface.event)

    return RelevantElements(
        walls=tuple(walls[k] for k in sorted(walls)),
        active_interfaces=tuple(active),
        objectives=tuple(objectives),
        events=tuple(events),
        horizon_areas=tuple(route[mode:goal_slot + 1]),
    )
