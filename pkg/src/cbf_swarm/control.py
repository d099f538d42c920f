"""Safety constraints and the three controller strategies.

Each agent solves its own 2-D minimum-deviation QP against one half-space per
neighbour. For a pair ``(i, j)`` with ``d = x_i - x_j`` the joint CBF condition

    -2 d . (u_i - u_j) <= b_raw = gamma * h_ij + 2 * sigma

is split into ``-2 d . u_i <= w_i * b_raw`` for agent ``i`` and
``2 d . u_j <= w_j * b_raw`` for agent ``j``. Since ``w_i + w_j = 1`` the two
halves add back up to the joint condition, which is what
:func:`pair_constraint_residuals` checks at run time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linprog

from .allocation import pairwise_weights, smooth_weight
from .core import AgentState, InvalidArgument, LinearConstraint, Scene, Vec2, pair_gamma
from .qp import QpProblem, QpStatus, solve
from .risk import RiskReport, evaluate_scene_risk, safety_value
from .uncertainty import CvarConvention, noise_budget_term

RISK_AWARE = "risk-aware"
FIXED_SHARE = "fixed"
CENTRALIZED = "centralized"


@dataclass(frozen=True)
class ControllerKind:
    kind: str = RISK_AWARE
    share: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in (RISK_AWARE, FIXED_SHARE, CENTRALIZED):
            raise InvalidArgument(f"unknown controller kind {self.kind!r}")
        if self.kind == FIXED_SHARE and not 0.0 < self.share < 1.0:
            raise InvalidArgument(f"fixed share must lie in (0, 1), got {self.share}")

    @classmethod
    def parse(cls, text: str) -> ControllerKind:
        """Parse ``risk-aware``, ``fixed:<w>`` or ``centralized``."""
        text = text.strip().lower()
        if text.startswith("fixed"):
            _, _, share = text.partition(":")
            try:
                return cls(FIXED_SHARE, float(share) if share else 0.5)
            except ValueError:
                raise InvalidArgument(f"bad fixed share in {text!r}") from None
        return cls(text)

    @property
    def decentralized(self) -> bool:
        return self.kind != CENTRALIZED

    def __str__(self) -> str:
        return f"fixed:{self.share:g}" if self.kind == FIXED_SHARE else self.kind


@dataclass(frozen=True)
class Bounds:
    """Componentwise box on a 2-D control."""

    lower: Vec2
    upper: Vec2

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower", Vec2.of(self.lower))
        object.__setattr__(self, "upper", Vec2.of(self.upper))
        if self.lower.x > self.upper.x or self.lower.y > self.upper.y:
            raise InvalidArgument(f"bounds lower {self.lower} exceeds upper {self.upper}")

    @classmethod
    def symmetric(cls, limit: float) -> Bounds:
        return cls(Vec2(-limit, -limit), Vec2(limit, limit))

    @property
    def max_abs(self) -> float:
        return max(abs(self.lower.x), abs(self.lower.y), abs(self.upper.x), abs(self.upper.y))

    def clip(self, v: Vec2) -> Vec2:
        return Vec2(min(max(v.x, self.lower.x), self.upper.x), min(max(v.y, self.lower.y), self.upper.y))

    def limit(self, v: Vec2) -> Vec2:
        """Shrink ``v`` towards the origin until it fits, keeping its heading.

        Falls back to a componentwise clip when the box excludes the origin.
        """
        if not (self.lower.x <= 0 <= self.upper.x and self.lower.y <= 0 <= self.upper.y):
            return self.clip(v)
        t = 1.0
        for comp, lo, hi in ((v.x, self.lower.x, self.upper.x), (v.y, self.lower.y, self.upper.y)):
            if comp > hi:
                t = min(t, hi / comp)
            elif comp < lo:
                t = min(t, lo / comp)
        return self.clip(v * t)


@dataclass(frozen=True)
class ControlDecision:
    agent_id: int
    u_applied: Vec2
    u_nominal: Vec2
    deviation: float
    qp_status: QpStatus
    weights_used: tuple[tuple[int, float], ...] = ()
    slack_used: float = 0.0


def pair_budget(i: AgentState, j: AgentState, alpha: float,
                convention: CvarConvention) -> tuple[Vec2, float]:
    """Joint constraint data ``(a, b_raw)`` with ``a = -2 (x_i - x_j)``."""
    d = i.position - j.position
    h = safety_value(i, j)
    sigma = noise_budget_term(d, i.noise, j.noise, alpha, convention)
    return d * -2.0, pair_gamma(i, j) * h + 2.0 * sigma


def build_pair_constraint(i: AgentState, j: AgentState, w_i: float, alpha: float,
                          convention: CvarConvention = CvarConvention.CONSERVATIVE) -> LinearConstraint:
    """Agent ``i``'s share of the pair constraint: ``a . u_i <= w_i * b_raw``."""
    if not 0.0 <= w_i <= 1.0:
        raise InvalidArgument(f"responsibility weight must lie in [0, 1], got {w_i}")
    a, b_raw = pair_budget(i, j, alpha, convention)
    return LinearConstraint(a, w_i * b_raw, (i.id, j.id))


def _per_agent(bounds: Bounds | Sequence[Bounds], n: int) -> list[Bounds]:
    if isinstance(bounds, Bounds):
        return [bounds] * n
    bounds = list(bounds)
    if len(bounds) != n:
        raise InvalidArgument(f"expected {n} bounds, got {len(bounds)}")
    return bounds


def _check_nominals(scene: Scene, nominals: Sequence[Vec2]) -> list[Vec2]:
    if len(nominals) != len(scene.agents):
        raise InvalidArgument(f"expected {len(scene.agents)} nominal controls, got {len(nominals)}")
    return [Vec2.of(u) for u in nominals]


def responsibility_weights(report: RiskReport, kind: ControllerKind,
                           previous: Mapping[tuple[int, int], float] | None = None,
                           smoothing: float = 0.0) -> dict[tuple[int, int], float]:
    """Weight ``w[(i, j)]`` agent ``i`` takes against ``j``, keyed by agent id."""
    ids = report.ids or tuple(range(report.n))
    out: dict[tuple[int, int], float] = {}
    for a in range(report.n):
        for b in range(report.n):
            if a == b:
                continue
            if kind.kind == FIXED_SHARE:
                w = kind.share
            else:
                w, _ = pairwise_weights(report.agent_risk[a], report.agent_risk[b])
            key = (ids[a], ids[b])
            out[key] = smooth_weight(None if previous is None else previous.get(key), w, smoothing)
    return out


def decentralized_step(scene: Scene, nominals: Sequence[Vec2], bounds: Bounds | Sequence[Bounds],
                       kind: ControllerKind = ControllerKind(),
                       convention: CvarConvention = CvarConvention.CONSERVATIVE,
                       alpha: float | None = None,
                       report: RiskReport | None = None,
                       weights: Mapping[tuple[int, int], float] | None = None) -> list[ControlDecision]:
    """One pass of the per-agent loop: risk, weights, stacked constraints, QP.

    Agents share nothing but the observed scene (and the risk report derived
    from it); each QP is solved independently. ``report`` and ``weights`` may
    be supplied when the caller has already computed them for logging.
    """
    if not kind.decentralized:
        raise InvalidArgument("decentralized_step does not handle the centralized controller")
    nominals = _check_nominals(scene, nominals)
    agents = scene.agents
    box = _per_agent(bounds, len(agents))
    alpha = scene.alpha if alpha is None else alpha
    if weights is None:
        if report is None:
            report = evaluate_scene_risk(scene, convention)
        weights = responsibility_weights(report, kind)

    decisions = []
    for a, me in enumerate(agents):
        rows = []
        used = []
        for other in agents:
            if other.id == me.id:
                continue
            w = weights[(me.id, other.id)]
            rows.append(build_pair_constraint(me, other, w, alpha, convention))
            used.append((other.id, w))
        sol = solve(QpProblem(nominals[a], box[a].lower, box[a].upper, tuple(rows)))
        decisions.append(ControlDecision(me.id, sol.u, nominals[a], (sol.u - nominals[a]).norm(),
                                         sol.status, tuple(used), sol.slack_used))
    return decisions


def pair_constraint_residuals(scene: Scene, controls: Mapping[int, Vec2],
                              convention: CvarConvention = CvarConvention.CONSERVATIVE,
                              alpha: float | None = None) -> list[tuple[int, int, float]]:
    """``a . (u_i - u_j) - b_raw`` for every unordered pair; <= 0 means satisfied."""
    alpha = scene.alpha if alpha is None else alpha
    agents = scene.agents
    out = []
    for p in range(len(agents)):
        for q in range(p + 1, len(agents)):
            i, j = agents[p], agents[q]
            a, b_raw = pair_budget(i, j, alpha, convention)
            out.append((i.id, j.id, a.dot(controls[i.id] - controls[j.id]) - b_raw))
    return out


# --- centralized baseline -------------------------------------------------------

DYKSTRA_TOL = 1e-8
DYKSTRA_MAX_ITER = 10_000


def _dykstra(z0: list[float], halfspaces: list[tuple[int, int, float, float, float]],
             lo: list[float], hi: list[float], tol: float, max_iter: int) -> tuple[list[float], bool, int]:
    """Project ``z0`` onto box ∩ half-spaces by cyclic Dykstra projections.

    Each half-space is ``(p, q, ax, ay, b)`` meaning
    ``ax*(z[2p]-z[2q]) + ay*(z[2p+1]-z[2q+1]) <= b``.
    """
    z = list(z0)
    n = len(z)
    inc_box = [0.0] * n
    inc = [[0.0, 0.0, 0.0, 0.0] for _ in halfspaces]
    for it in range(1, max_iter + 1):
        change = 0.0
        for k, (p, q, ax, ay, b) in enumerate(halfspaces):
            e = inc[k]
            y0 = z[2 * p] + e[0]
            y1 = z[2 * p + 1] + e[1]
            y2 = z[2 * q] + e[2]
            y3 = z[2 * q + 1] + e[3]
            r = ax * (y0 - y2) + ay * (y1 - y3) - b
            if r > 0.0:
                s = r / (2.0 * (ax * ax + ay * ay))
                n0, n1, n2, n3 = y0 - s * ax, y1 - s * ay, y2 + s * ax, y3 + s * ay
            else:
                n0, n1, n2, n3 = y0, y1, y2, y3
            change = max(change, abs(n0 - z[2 * p]), abs(n1 - z[2 * p + 1]),
                         abs(n2 - z[2 * q]), abs(n3 - z[2 * q + 1]))
            e[0], e[1], e[2], e[3] = y0 - n0, y1 - n1, y2 - n2, y3 - n3
            z[2 * p], z[2 * p + 1], z[2 * q], z[2 * q + 1] = n0, n1, n2, n3
        for m in range(n):
            y = z[m] + inc_box[m]
            v = min(max(y, lo[m]), hi[m])
            change = max(change, abs(v - z[m]))
            inc_box[m] = y - v
            z[m] = v
        if change <= tol:
            worst = max((ax * (z[2 * p] - z[2 * q]) + ay * (z[2 * p + 1] - z[2 * q + 1]) - b
                         for p, q, ax, ay, b in halfspaces), default=0.0)
            if worst <= tol:
                return z, True, it
    return z, False, max_iter


def _joint_min_slack(halfspaces, lo, hi) -> float:
    n = len(lo)
    A = np.zeros((len(halfspaces), n + 1))
    ub = np.zeros(len(halfspaces))
    for k, (p, q, ax, ay, b) in enumerate(halfspaces):
        A[k, 2 * p], A[k, 2 * p + 1], A[k, 2 * q], A[k, 2 * q + 1] = ax, ay, -ax, -ay
        A[k, n] = -1.0
        ub[k] = b
    cost = np.zeros(n + 1)
    cost[n] = 1.0
    res = linprog(cost, A_ub=A, b_ub=ub, bounds=list(zip(lo, hi)) + [(0.0, None)], method="highs")
    return float(res.x[n]) if res.success else math.inf


def centralized_step(scene: Scene, nominals: Sequence[Vec2], bounds: Bounds | Sequence[Bounds],
                     convention: CvarConvention = CvarConvention.CONSERVATIVE,
                     alpha: float | None = None, tol: float = DYKSTRA_TOL,
                     max_iter: int = DYKSTRA_MAX_ITER) -> list[ControlDecision]:
    """Joint QP over all agents: min sum |u_i - nominal_i|^2 under every pair constraint.

    Solved by Dykstra's alternating projections to ``tol``. If the iteration
    cap is reached without a feasible point, the minimal shared slack over all
    pair constraints is found by linear programming and the projection is
    repeated on the relaxed set.
    """
    nominals = _check_nominals(scene, nominals)
    agents = scene.agents
    box = _per_agent(bounds, len(agents))
    alpha = scene.alpha if alpha is None else alpha
    halfspaces = []
    for p in range(len(agents)):
        for q in range(p + 1, len(agents)):
            a, b_raw = pair_budget(agents[p], agents[q], alpha, convention)
            if a.norm_sq() == 0.0:
                continue
            halfspaces.append((p, q, a.x, a.y, b_raw))
    z0 = [c for u in nominals for c in (u.x, u.y)]
    lo = [c for bx in box for c in (bx.lower.x, bx.lower.y)]
    hi = [c for bx in box for c in (bx.upper.x, bx.upper.y)]

    z, ok, _ = _dykstra(z0, halfspaces, lo, hi, tol, max_iter)
    status, slack = QpStatus.OPTIMAL, 0.0
    if not ok:
        slack = _joint_min_slack(halfspaces, lo, hi)
        if slack <= tol:
            # feasible but slow to converge: keep the best iterate
            status = QpStatus.OPTIMAL
        elif math.isfinite(slack):
            relaxed = [(p, q, ax, ay, b + slack * (1 + 1e-9)) for p, q, ax, ay, b in halfspaces]
            z, ok, _ = _dykstra(z0, relaxed, lo, hi, tol, max_iter)
            status = QpStatus.RELAXED_FEASIBLE if ok else QpStatus.INFEASIBLE
        else:
            status = QpStatus.INFEASIBLE
    out = []
    for a, me in enumerate(agents):
        u = Vec2(z[2 * a], z[2 * a + 1])
        out.append(ControlDecision(me.id, u, nominals[a], (u - nominals[a]).norm(), status, (), slack))
    return out


# --- nominal planning -----------------------------------------------------------

def move_to_goal_nominal(state: AgentState, target: Vec2, k: float = 1.0) -> Vec2:
    """Proportional move-to-goal command ``-k (x - x_target)``."""
    if k <= 0:
        raise InvalidArgument(f"gain k must be > 0, got {k}")
    return (state.position - Vec2.of(target)) * -k


def right_hand_deadlock_adjust(state: AgentState, nominal: Vec2, deadlock_detected: bool,
                               rotation: float = -math.pi / 4) -> Vec2:
    """Rotate the nominal to the agent's right while a deadlock is flagged.

    Negative ``rotation`` turns clockwise.
    """
    if not deadlock_detected:
        return nominal
    return nominal.rotated(rotation)


@dataclass
class DeadlockDetector:
    """Flags an agent that is slow while still far from its goal.

    Trips after ``hold_steps`` consecutive steps with speed below ``v_eps`` and
    distance to goal above ``d_eps``. Each further ``hold_steps`` without
    recovery raises ``level`` by one (up to ``max_level``); callers rotate the
    nominal by ``level`` times the base angle. Clears once speed exceeds
    ``recover_factor * v_eps`` or the agent gets within ``d_eps`` of its goal.
    """

    v_eps: float
    d_eps: float
    hold_steps: int = 25
    recover_factor: float = 4.0
    max_level: int = 3
    count: int = 0
    level: int = 0

    @classmethod
    def for_agent(cls, u_max: float, safety_radius: float, hold_steps: int = 25) -> DeadlockDetector:
        return cls(0.05 * u_max, 2.0 * safety_radius, hold_steps)

    @property
    def active(self) -> bool:
        return self.level > 0

    def update(self, speed: float, dist_to_goal: float) -> bool:
        if dist_to_goal <= self.d_eps:
            self.count, self.level = 0, 0
            return False
        if self.active and speed > self.recover_factor * self.v_eps:
            self.count, self.level = 0, 0
            return False
        self.count = self.count + 1 if speed < self.v_eps else 0
        if self.count >= self.hold_steps:
            self.count = 0
            self.level = min(self.level + 1, self.max_level)
        return self.active


def track_velocity(velocity: Vec2, u_cmd: Vec2, k_v: float, acc_bounds: Bounds) -> Vec2:
    """Acceleration ``k_v (u_cmd - v)`` that steers a double integrator to ``u_cmd``."""
    return acc_bounds.clip((u_cmd - velocity) * k_v)
