"""Exact minimum-deviation QP in two variables.

    min |u - nominal|^2   s.t.  lower <= u <= upper,  a_k . u <= b_k

The minimiser is the Euclidean projection of ``nominal`` onto a convex
polygon, so it is one of: the nominal itself, the foot of the perpendicular on
one constraint line, or the intersection of two constraint lines (box edges
included). ``solve`` enumerates those candidates in objective order and returns
the first feasible one. When no candidate is feasible the polygon is empty and
a single shared slack is minimised instead.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import InvalidArgument, LinearConstraint, Vec2

_REL_TOL = 1e-12


class QpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    RELAXED_FEASIBLE = "relaxed"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class QpProblem:
    nominal: Vec2
    lower: Vec2
    upper: Vec2
    constraints: tuple[LinearConstraint, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "nominal", Vec2.of(self.nominal))
        object.__setattr__(self, "lower", Vec2.of(self.lower))
        object.__setattr__(self, "upper", Vec2.of(self.upper))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.lower.x > self.upper.x or self.lower.y > self.upper.y:
            raise InvalidArgument(f"box lower {self.lower} exceeds upper {self.upper}")

    def objective(self, u: Vec2) -> float:
        return (u - self.nominal).norm_sq()

    def box_constraints(self) -> list[LinearConstraint]:
        return [
            LinearConstraint(Vec2(1.0, 0.0), self.upper.x, "box:x<="),
            LinearConstraint(Vec2(-1.0, 0.0), -self.lower.x, "box:x>="),
            LinearConstraint(Vec2(0.0, 1.0), self.upper.y, "box:y<="),
            LinearConstraint(Vec2(0.0, -1.0), -self.lower.y, "box:y>="),
        ]


@dataclass(frozen=True)
class QpSolution:
    u: Vec2
    status: QpStatus
    slack_used: float = 0.0
    active_set: tuple = field(default=())
    objective: float = 0.0


# Constraints are handled as plain (ax, ay, b, tag) tuples in the inner loops.
_Row = tuple[float, float, float, object]


def _rows(constraints: Sequence[LinearConstraint], shift: float = 0.0) -> list[_Row]:
    return [(c.a.x, c.a.y, c.b + shift, c.tag) for c in constraints]


def _tol(ax: float, ay: float, b: float, x: float, y: float) -> float:
    return _REL_TOL * max(1.0, abs(b), abs(ax * x) + abs(ay * y))


def _feasible(x: float, y: float, rows: list[_Row], box: tuple[float, float, float, float]) -> bool:
    lx, ly, ux, uy = box
    tx = _REL_TOL * max(1.0, abs(x))
    ty = _REL_TOL * max(1.0, abs(y))
    if x < lx - tx or x > ux + tx or y < ly - ty or y > uy + ty:
        return False
    for ax, ay, b, _ in rows:
        if ax * x + ay * y - b > _tol(ax, ay, b, x, y):
            return False
    return True


def _candidates(nx: float, ny: float, lines: list[_Row]) -> list[tuple[float, float]]:
    out = [(nx, ny)]
    for ax, ay, b, _ in lines:
        nn = ax * ax + ay * ay
        if nn == 0.0:
            continue
        t = (ax * nx + ay * ny - b) / nn
        out.append((nx - t * ax, ny - t * ay))
    for (a1x, a1y, b1, _), (a2x, a2y, b2, _) in itertools.combinations(lines, 2):
        det = a1x * a2y - a1y * a2x
        if abs(det) <= 1e-14 * math.hypot(a1x, a1y) * math.hypot(a2x, a2y) or det == 0.0:
            continue
        out.append(((b1 * a2y - a1y * b2) / det, (a1x * b2 - b1 * a2x) / det))
    return out


def _polish(x: float, y: float, rows: list[_Row], box: tuple[float, float, float, float]) -> tuple[float, float]:
    # push rounding-level violations back inside; moves are O(1e-15) relative
    lx, ly, ux, uy = box
    x = min(max(x, lx), ux)
    y = min(max(y, ly), uy)
    for _ in range(3):
        moved = False
        for ax, ay, b, _ in rows:
            r = ax * x + ay * y - b
            if r > 0.0:
                nn = ax * ax + ay * ay
                if nn == 0.0:
                    continue
                s = (r + 4e-16 * max(abs(b), 1.0)) / nn
                x, y = x - s * ax, y - s * ay
                moved = True
        x = min(max(x, lx), ux)
        y = min(max(y, ly), uy)
        if not moved:
            break
    return x, y


def _project(nominal: Vec2, rows: list[_Row], box: tuple[float, float, float, float]) -> tuple[float, float] | None:
    lx, ly, ux, uy = box
    nx, ny = nominal.x, nominal.y
    lines = rows + [(1.0, 0.0, ux, None), (-1.0, 0.0, -lx, None), (0.0, 1.0, uy, None), (0.0, -1.0, -ly, None)]
    cands = []
    for x, y in _candidates(nx, ny, lines):
        if not (math.isfinite(x) and math.isfinite(y)):
            continue
        dx, dy = x - nx, y - ny
        cands.append((dx * dx + dy * dy, x, y))
    cands.sort()
    for _, x, y in cands:
        if _feasible(x, y, rows, box):
            return _polish(x, y, rows, box)
    return None


def _min_shared_slack(rows: list[_Row], box: tuple[float, float, float, float]) -> tuple[float, float, float]:
    """Minimise ``max_k (a_k . u - b_k)`` over the box; returns ``(s, x, y)``.

    A vertex of the epigraph LP has three independent active constraints
    drawn from the four box edges and the graph pieces, which gives the three
    candidate families enumerated below.
    """
    lx, ly, ux, uy = box

    def worst(x: float, y: float) -> float:
        return max(ax * x + ay * y - b for ax, ay, b, _ in rows)

    pts = [(lx, ly), (lx, uy), (ux, ly), (ux, uy)]
    for (a1x, a1y, b1, _), (a2x, a2y, b2, _) in itertools.combinations(rows, 2):
        dx, dy, db = a1x - a2x, a1y - a2y, b1 - b2
        if dy != 0.0:
            for xe in (lx, ux):
                y = (db - dx * xe) / dy
                if ly <= y <= uy:
                    pts.append((xe, y))
        if dx != 0.0:
            for ye in (ly, uy):
                x = (db - dy * ye) / dx
                if lx <= x <= ux:
                    pts.append((x, ye))
    for r1, r2, r3 in itertools.combinations(rows, 3):
        p1x, p1y, q1 = r1[0] - r2[0], r1[1] - r2[1], r1[2] - r2[2]
        p2x, p2y, q2 = r1[0] - r3[0], r1[1] - r3[1], r1[2] - r3[2]
        det = p1x * p2y - p1y * p2x
        if det == 0.0:
            continue
        x = (q1 * p2y - p1y * q2) / det
        y = (p1x * q2 - q1 * p2x) / det
        if lx <= x <= ux and ly <= y <= uy:
            pts.append((x, y))
    return min((worst(x, y), x, y) for x, y in pts)


def _active(x: float, y: float, rows: list[_Row], box: tuple[float, float, float, float]) -> tuple:
    lx, ly, ux, uy = box
    tags = [tag for ax, ay, b, tag in rows if abs(ax * x + ay * y - b) <= 1e3 * _tol(ax, ay, b, x, y)]
    tags += [t for t, hit in (("box:x<=", x == ux), ("box:x>=", x == lx),
                              ("box:y<=", y == uy), ("box:y>=", y == ly)) if hit]
    return tuple(tags)


def solve(problem: QpProblem) -> QpSolution:
    """Project the nominal onto the feasible polygon, relaxing if it is empty."""
    box = (problem.lower.x, problem.lower.y, problem.upper.x, problem.upper.y)
    rows = _rows(problem.constraints)
    hit = _project(problem.nominal, rows, box)
    if hit is not None:
        u = Vec2(*hit)
        return QpSolution(u, QpStatus.OPTIMAL, 0.0, _active(hit[0], hit[1], rows, box), problem.objective(u))

    slack, _, _ = _min_shared_slack(rows, box)
    slack = max(slack, 0.0)
    margin = 1e-9 * max(1.0, slack, max(abs(r[2]) for r in rows))
    relaxed = _rows(problem.constraints, slack + margin)
    hit = _project(problem.nominal, relaxed, box)
    if hit is None:
        u = Vec2(min(max(problem.nominal.x, box[0]), box[2]), min(max(problem.nominal.y, box[1]), box[3]))
        return QpSolution(u, QpStatus.INFEASIBLE, slack, (), problem.objective(u))
    u = Vec2(*hit)
    return QpSolution(u, QpStatus.RELAXED_FEASIBLE, slack, _active(hit[0], hit[1], _rows(problem.constraints, slack), box),
                      problem.objective(u))


def brute_force_solve(problem: QpProblem, resolution: int = 1000) -> QpSolution:
    """Exhaustive grid scan over the box; a test oracle for :func:`solve`.

    Returns the feasible grid point of least objective (first in x-major order
    on ties), or ``INFEASIBLE`` when no grid point satisfies every constraint.
    """
    if resolution < 100:
        raise InvalidArgument(f"resolution must be >= 100, got {resolution}")
    lo, hi = problem.lower, problem.upper
    xs = np.linspace(lo.x, hi.x, resolution)
    ys = np.linspace(lo.y, hi.y, resolution)
    xmag = max(abs(lo.x), abs(hi.x))
    ymag = max(abs(lo.y), abs(hi.y))
    obj = ((xs - problem.nominal.x) ** 2)[:, None] + ((ys - problem.nominal.y) ** 2)[None, :]
    for c in problem.constraints:
        tol = _REL_TOL * max(1.0, abs(c.b), abs(c.a.x) * xmag + abs(c.a.y) * ymag)
        bad = (c.a.x * xs)[:, None] + (c.a.y * ys - c.b - tol)[None, :] > 0.0
        obj[bad] = np.inf
    k = int(np.argmin(obj))
    if not np.isfinite(obj.flat[k]):
        return QpSolution(problem.nominal, QpStatus.INFEASIBLE)
    ix, iy = divmod(k, resolution)
    u = Vec2(float(xs[ix]), float(ys[iy]))
    return QpSolution(u, QpStatus.OPTIMAL, 0.0, (), float(obj.flat[k]))


def grid_spacing(problem: QpProblem, resolution: int) -> float:
    return max(problem.upper.x - problem.lower.x, problem.upper.y - problem.lower.y) / (resolution - 1)
