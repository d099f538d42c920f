"""Domain types shared by every module.

Vectors and matrices are tiny (2-D), so they are plain frozen dataclasses over
Python floats rather than numpy arrays; the per-step controller loop touches
thousands of them and numpy's per-call overhead dominates at this size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class CbfSwarmError(Exception):
    """Base class for errors raised by this package."""


class InvalidArgument(CbfSwarmError, ValueError):
    """A value violates a documented precondition or type invariant."""


def _finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise InvalidArgument(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True, slots=True)
class Vec2:
    x: float
    y: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", _finite("Vec2.x", self.x))
        object.__setattr__(self, "y", _finite("Vec2.y", self.y))

    @classmethod
    def of(cls, value: Vec2 | Sequence[float]) -> Vec2:
        if isinstance(value, Vec2):
            return value
        x, y = value
        return cls(x, y)

    def __add__(self, other: Vec2) -> Vec2:
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: Vec2) -> Vec2:
        return Vec2(self.x - other.x, self.y - other.y)

    def __neg__(self) -> Vec2:
        return Vec2(-self.x, -self.y)

    def __mul__(self, s: float) -> Vec2:
        return Vec2(self.x * s, self.y * s)

    __rmul__ = __mul__

    def dot(self, other: Vec2) -> float:
        return self.x * other.x + self.y * other.y

    def norm_sq(self) -> float:
        return self.x * self.x + self.y * self.y

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def rotated(self, angle: float) -> Vec2:
        """Rotate counter-clockwise by ``angle`` radians (negative is clockwise)."""
        c, s = math.cos(angle), math.sin(angle)
        return Vec2(c * self.x - s * self.y, s * self.x + c * self.y)

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


ZERO = Vec2(0.0, 0.0)


@dataclass(frozen=True, slots=True)
class Mat2:
    """Row-major 2x2 matrix ``[[a, b], [c, d]]``."""

    a: float
    b: float
    c: float
    d: float

    def __post_init__(self) -> None:
        for name in ("a", "b", "c", "d"):
            object.__setattr__(self, name, _finite(f"Mat2.{name}", getattr(self, name)))

    @classmethod
    def of(cls, value: Mat2 | Sequence[Sequence[float]]) -> Mat2:
        if isinstance(value, Mat2):
            return value
        (a, b), (c, d) = value
        return cls(a, b, c, d)

    @classmethod
    def diag(cls, sx: float, sy: float | None = None) -> Mat2:
        return cls(sx, 0.0, 0.0, sx if sy is None else sy)

    def __add__(self, other: Mat2) -> Mat2:
        return Mat2(self.a + other.a, self.b + other.b, self.c + other.c, self.d + other.d)

    def quad(self, v: Vec2) -> float:
        """Quadratic form ``v^T M v``."""
        return (
            v.x * (self.a * v.x + self.b * v.y)
            + v.y * (self.c * v.x + self.d * v.y)
        )

    def eigvals_sym(self) -> tuple[float, float]:
        mid = 0.5 * (self.a + self.d)
        off = 0.5 * (self.b + self.c)
        rad = math.hypot(0.5 * (self.a - self.d), off)
        return (mid - rad, mid + rad)

    def is_zero(self) -> bool:
        return self.a == 0.0 and self.b == 0.0 and self.c == 0.0 and self.d == 0.0

    def as_lists(self) -> list[list[float]]:
        return [[self.a, self.b], [self.c, self.d]]


def check_covariance(m: Mat2) -> Mat2:
    if abs(m.b - m.c) > 1e-12:
        raise InvalidArgument(f"covariance must be symmetric, got off-diagonals {m.b}, {m.c}")
    lo, _ = m.eigvals_sym()
    if lo < -1e-12:
        raise InvalidArgument(f"covariance must be positive semidefinite, min eigenvalue {lo}")
    return m


@dataclass(frozen=True, slots=True)
class NoiseModel:
    """Gaussian motion disturbance ``N(mean, covariance)`` (m/s, m^2/s^2)."""

    mean: Vec2 = ZERO
    covariance: Mat2 = Mat2(0.0, 0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", Vec2.of(self.mean))
        object.__setattr__(self, "covariance", check_covariance(Mat2.of(self.covariance)))

    @classmethod
    def isotropic(cls, sigma: float, mean: Vec2 = ZERO) -> NoiseModel:
        return cls(mean, Mat2.diag(sigma * sigma))

    def is_zero(self) -> bool:
        return self.mean == ZERO and self.covariance.is_zero()


NO_NOISE = NoiseModel()


@dataclass(frozen=True, slots=True)
class AgentState:
    id: int
    position: Vec2
    velocity: Vec2 = ZERO
    safety_radius: float = 0.0
    gamma: float = 1.0
    noise: NoiseModel = NO_NOISE

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", Vec2.of(self.position))
        object.__setattr__(self, "velocity", Vec2.of(self.velocity))
        r = _finite("safety_radius", self.safety_radius)
        g = _finite("gamma", self.gamma)
        if r < 0:
            raise InvalidArgument(f"safety_radius must be >= 0, got {r}")
        if g <= 0:
            raise InvalidArgument(f"gamma must be > 0, got {g}")
        object.__setattr__(self, "safety_radius", r)
        object.__setattr__(self, "gamma", g)

    def moved(self, position: Vec2, velocity: Vec2) -> AgentState:
        return AgentState(self.id, position, velocity, self.safety_radius, self.gamma, self.noise)


def pair_safety_radius(i: AgentState, j: AgentState) -> float:
    """Effective safety margin of a pair: the larger of the two radii."""
    return max(i.safety_radius, j.safety_radius)


def pair_gamma(i: AgentState, j: AgentState) -> float:
    """The more conservative (smaller) CBF rate governs the pair."""
    return min(i.gamma, j.gamma)


def default_loss_offset(agents: Iterable[AgentState], extra_points: Iterable[Vec2] = ()) -> float:
    """Offset ``c = 4 * gamma_max * D^2`` keeping pairwise losses positive.

    ``D`` is the diagonal of the bounding box of all agent positions and any
    ``extra_points`` (targets, map bounds). A floor of 1 m keeps ``c > 0`` for
    degenerate boxes.
    """
    agents = list(agents)
    pts = [a.position for a in agents] + [Vec2.of(p) for p in extra_points]
    xs = [p.x for p in pts]
    ys = [p.y for p in pts]
    diag = max(math.hypot(max(xs) - min(xs), max(ys) - min(ys)), 1.0)
    gamma_max = max(a.gamma for a in agents)
    return 4.0 * gamma_max * diag * diag


@dataclass(frozen=True)
class Scene:
    agents: tuple[AgentState, ...]
    alpha: float = 0.95
    loss_offset_c: float = field(default=0.0)

    def __post_init__(self) -> None:
        agents = tuple(self.agents)
        object.__setattr__(self, "agents", agents)
        if len(agents) < 2:
            raise InvalidArgument(f"a scene needs at least 2 agents, got {len(agents)}")
        ids = [a.id for a in agents]
        if len(set(ids)) != len(ids):
            raise InvalidArgument(f"agent ids must be unique, got {ids}")
        alpha = _finite("alpha", self.alpha)
        if not 0.0 < alpha < 1.0:
            raise InvalidArgument(f"alpha must lie strictly in (0, 1), got {alpha}")
        object.__setattr__(self, "alpha", alpha)
        c = _finite("loss_offset_c", self.loss_offset_c)
        if c == 0.0:
            c = default_loss_offset(agents)
        if c <= 0:
            raise InvalidArgument(f"loss_offset_c must be > 0, got {c}")
        object.__setattr__(self, "loss_offset_c", c)

    def __len__(self) -> int:
        return len(self.agents)

    def with_agents(self, agents: Sequence[AgentState]) -> Scene:
        return Scene(tuple(agents), self.alpha, self.loss_offset_c)


@dataclass(frozen=True, slots=True)
class LinearConstraint:
    """Half-space ``a . u <= b`` over one agent's 2-D control."""

    a: Vec2
    b: float
    tag: tuple[int, int] | str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "a", Vec2.of(self.a))
        object.__setattr__(self, "b", _finite("LinearConstraint.b", self.b))

    def residual(self, u: Vec2) -> float:
        """Positive when ``u`` violates the constraint."""
        return self.a.x * u.x + self.a.y * u.y - self.b
