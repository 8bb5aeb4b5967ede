"""Plane geometry helpers: smallest enclosing circle of a point set.

Randomized incremental construction (expected linear time) with a deterministic
internal shuffle so repeat calls on the same input give identical output.
"""

from __future__ import annotations

import random
from typing import NamedTuple, Sequence

_EPS = 1e-12


class Circle(NamedTuple):
    cx: float
    cy: float
    r: float

    def contains(self, p: Sequence[float], tol: float = 1e-9) -> bool:
        dx = p[0] - self.cx
        dy = p[1] - self.cy
        return dx * dx + dy * dy <= (self.r + tol) * (self.r + tol)


def _covers(circ: Circle, p) -> bool:
    # Relative slack: r is produced by a sqrt, so re-squaring can land one ulp
    # below the true squared distance of a defining point.  Without this a
    # support point can test "outside" its own circle and derail the
    # incremental construction.
    dx = p[0] - circ.cx
    dy = p[1] - circ.cy
    return dx * dx + dy * dy <= circ.r * circ.r * (1.0 + 1e-13)


def _circle_2(a, b) -> Circle:
    cx = (a[0] + b[0]) / 2.0
    cy = (a[1] + b[1]) / 2.0
    r = max(((a[0] - cx) ** 2 + (a[1] - cy) ** 2) ** 0.5,
            ((b[0] - cx) ** 2 + (b[1] - cy) ** 2) ** 0.5)
    return Circle(cx, cy, r)


def _circumcircle(a, b, c) -> Circle | None:
    # Offset toward a for numerical stability.
    ox, oy = a
    bx, by = b[0] - ox, b[1] - oy
    cx, cy = c[0] - ox, c[1] - oy
    d = 2.0 * (bx * cy - by * cx)
    if abs(d) < _EPS:
        return None  # collinear
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (cy * b2 - by * c2) / d
    uy = (bx * c2 - cx * b2) / d
    r = max((ux * ux + uy * uy) ** 0.5,
            ((ux - bx) ** 2 + (uy - by) ** 2) ** 0.5,
            ((ux - cx) ** 2 + (uy - cy) ** 2) ** 0.5)
    return Circle(ux + ox, uy + oy, r)


def _circle_from_two(points, a, b) -> Circle:
    circ = _circle_2(a, b)
    left = None
    right = None
    # Among circles through a and b, pick the smallest also covering the rest.
    for p in points:
        if _covers(circ, p):
            continue
        cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        c = _circumcircle(a, b, p)
        if c is None:
            continue
        cc = (b[0] - a[0]) * (c.cy - a[1]) - (b[1] - a[1]) * (c.cx - a[0])
        if cross > 0.0:
            if left is None or cc > (b[0] - a[0]) * (left.cy - a[1]) - (b[1] - a[1]) * (left.cx - a[0]):
                left = c
        elif cross < 0.0:
            if right is None or cc < (b[0] - a[0]) * (right.cy - a[1]) - (b[1] - a[1]) * (right.cx - a[0]):
                right = c
    if left is None and right is None:
        return circ
    if left is None:
        return right  # type: ignore[return-value]
    if right is None:
        return left
    return left if left.r <= right.r else right


def _circle_from_one(points, a) -> Circle:
    circ = Circle(a[0], a[1], 0.0)
    for i, p in enumerate(points):
        if not _covers(circ, p):
            if circ.r == 0.0:
                circ = _circle_2(a, p)
            else:
                circ = _circle_from_two(points[: i + 1], a, p)
    return circ


def smallest_enclosing_circle(points: Sequence[Sequence[float]]) -> Circle:
    """Smallest circle containing every point.  Requires >= 1 point.

    The result is unique; the internal processing order is a fixed pseudo-random
    permutation of the input, so output is deterministic for a given input.
    """
    pts = [(float(p[0]), float(p[1])) for p in points]
    if not pts:
        raise ValueError("smallest_enclosing_circle needs at least one point")
    shuffled = list(pts)
    random.Random(0x5EC).shuffle(shuffled)
    circ: Circle | None = None
    for i, p in enumerate(shuffled):
        if circ is None or not _covers(circ, p):
            circ = _circle_from_one(shuffled[: i + 1], p)
    return circ  # type: ignore[return-value]
