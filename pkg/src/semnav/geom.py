"""Planar geometry kernel: points, segments, convex polygons and the
distance/containment predicates used by the world model, the constraint
builder and the simulator's ground-truth collision checks.

All quantities are meters, all predicates use a fixed 1e-9 tolerance.
Everything here is pure and reentrant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TOL = 1e-9


class GeometryError(ValueError):
    """Raised when a geometric primitive violates its invariants."""


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Segment2:
    a: Point2
    b: Point2

    def __post_init__(self):
        if self.length() <= 1e-9:
            raise GeometryError("degenerate segment (length <= 1e-9 m)")

    def length(self) -> float:
        return math.hypot(self.b.x - self.a.x, self.b.y - self.a.y)

    def reversed(self) -> "Segment2":
        return Segment2(self.b, self.a)

    def as_array(self) -> np.ndarray:
        return np.array([[self.a.x, self.a.y], [self.b.x, self.b.y]])

    def midpoint(self) -> Point2:
        return Point2(0.5 * (self.a.x + self.b.x), 0.5 * (self.a.y + self.b.y))


@dataclass(frozen=True)
class ConvexPolygon:
    """Strictly convex polygon, vertices in counter-clockwise order."""

    vertices: tuple[Point2, ...]

    def __post_init__(self):
        verts = tuple(self.vertices)
        object.__setattr__(self, "vertices", verts)
        n = len(verts)
        if n < 3:
            raise GeometryError(f"polygon needs >= 3 vertices, got {n}")
        for i in range(n):
            p0, p1, p2 = verts[i], verts[(i + 1) % n], verts[(i + 2) % n]
            cross = (p1.x - p0.x) * (p2.y - p1.y) - (p1.y - p0.y) * (p2.x - p1.x)
            if cross <= TOL:
                raise GeometryError(
                    f"vertices not strictly convex/counter-clockwise at index {i}"
                )

    def as_array(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.vertices])

    def centroid(self) -> Point2:
        arr = self.as_array()
        return Point2(float(arr[:, 0].mean()), float(arr[:, 1].mean()))


def signed_distance_to_line(p: Point2, s: Segment2) -> float:
    """Perpendicular distance from p to the infinite line through s.

    Positive on the left of the direction a->b, negative on the right.
    """
    dx = s.b.x - s.a.x
    dy = s.b.y - s.a.y
    return (dx * (p.y - s.a.y) - dy * (p.x - s.a.x)) / math.hypot(dx, dy)


def point_in_polygon(p: Point2, poly: ConvexPolygon) -> bool:
    """True iff p lies inside poly or on its boundary (tolerance 1e-9)."""
    verts = poly.vertices
    n = len(verts)
    for i in range(n):
        a, b = verts[i], verts[(i + 1) % n]
        cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
        if cross < -TOL:
            return False
    return True


def _point_segment_distance(px, py, ax, ay, bx, by) -> float:
    vx, vy = bx - ax, by - ay
    t = ((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy)
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * vx), py - (ay + t * vy))


def point_polygon_distance(p: Point2, poly: ConvexPolygon) -> float:
    """Euclidean distance from p to poly; 0 if p is inside or on it."""
    if point_in_polygon(p, poly):
        return 0.0
    verts = poly.vertices
    n = len(verts)
    return min(
        _point_segment_distance(
            p.x, p.y, verts[i].x, verts[i].y, verts[(i + 1) % n].x, verts[(i + 1) % n].y
        )
        for i in range(n)
    )


def point_to_segments_distance(p: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray) -> np.ndarray:
    """Distances from one point to many segments at once.

    seg_a, seg_b: (n, 2) arrays of segment endpoints. Used by the simulator's
    collision check, where one agent position is tested against every wall
    edge of the map in a single call.
    """
    v = seg_b - seg_a
    w = p[None, :] - seg_a
    denom = np.einsum("ij,ij->i", v, v)
    t = np.clip(np.einsum("ij,ij->i", w, v) / denom, 0.0, 1.0)
    closest = seg_a + t[:, None] * v
    return np.hypot(p[0] - closest[:, 0], p[1] - closest[:, 1])
