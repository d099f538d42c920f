"""Seeded simulation of a scene under one of the controllers.

Every step runs: nominal planning, risk evaluation, responsibility weights,
per-agent (or joint) QP, then forward-Euler dynamics with freshly drawn
Gaussian noise. Noise comes from one PCG64 stream per agent id, derived from
the run seed, so adding or removing an agent never shifts another agent's
draws, and the draw order (step-major, id-minor) is independent of how the
QPs are scheduled.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from typing import IO, Callable, Sequence

import numpy as np

from .control import (CENTRALIZED, Bounds, ControlDecision, ControllerKind, DeadlockDetector,
                      centralized_step, decentralized_step, move_to_goal_nominal,
                      pair_constraint_residuals, responsibility_weights,
                      right_hand_deadlock_adjust, track_velocity)
from .core import AgentState, InvalidArgument, NoiseModel, Scene, Vec2, default_loss_offset, pair_safety_radius
from .qp import QpStatus
from .risk import RiskReport, evaluate_scene_risk, safety_value
from .uncertainty import CvarConvention

PROOF_TOL = 1e-9
DEVIATION_THRESHOLD = 1e-6


class Dynamics(str, enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"


@dataclass(frozen=True)
class LanePlan:
    """Speed plan of one vehicle in the ramp-merge scene.

    Speed ramps from ``v0`` at rate ``accel`` and saturates at ``v_des``.
    """

    route: str  # "main" or "ramp"
    v0: float
    v_des: float
    accel: float


@dataclass(frozen=True)
class RampGeometry:
    lane_length: float = 120.0
    merge_x: float = 80.0
    ramp_angle_deg: float = 15.0
    k_lateral: float = 1.0

    @property
    def ramp_dir(self) -> Vec2:
        t = math.radians(self.ramp_angle_deg)
        return Vec2(math.cos(t), math.sin(t))

    def ramp_point(self, s: float) -> Vec2:
        """Point ``s`` metres upstream of the merge point along the ramp."""
        return Vec2(self.merge_x, 0.0) - self.ramp_dir * s


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.02
    horizon_steps: int = 10_000
    dynamics: Dynamics = Dynamics.SINGLE
    u_min: Vec2 = Vec2(-2.0, -2.0)
    u_max: Vec2 = Vec2(2.0, 2.0)
    alpha: float = 0.95
    convention: CvarConvention = CvarConvention.CONSERVATIVE
    controller: ControllerKind = ControllerKind()
    seed: int = 0
    goal_tolerance: float = 0.2
    # nominal planner: "goal" (move-to-goal) or "lane" (ramp merge)
    planner: str = "goal"
    k_goal: float = 1.0
    # cap on the nominal speed; keeps diagonal movers from outrunning axis movers in a box
    nominal_speed: float = math.inf
    deadlock: bool = False
    deadlock_hold_steps: int = 25
    deadlock_rotation_deg: float = 45.0
    # double-integrator velocity tracking layer
    k_v: float = 5.0
    a_min: Vec2 = Vec2(-8.0, -8.0)
    a_max: Vec2 = Vec2(8.0, 8.0)
    noise_channel: str = "position"
    weight_smoothing: float = 0.0
    risk_cutoff: float = math.inf
    ramp: RampGeometry | None = None
    lane_plans: tuple[LanePlan, ...] = ()

    def __post_init__(self) -> None:
        for name in ("u_min", "u_max", "a_min", "a_max"):
            object.__setattr__(self, name, Vec2.of(getattr(self, name)))
        object.__setattr__(self, "dynamics", Dynamics(self.dynamics))
        object.__setattr__(self, "convention", CvarConvention(self.convention))
        if isinstance(self.controller, str):
            object.__setattr__(self, "controller", ControllerKind.parse(self.controller))
        if not self.dt > 0:
            raise InvalidArgument(f"dt must be > 0, got {self.dt}")
        if self.horizon_steps < 1:
            raise InvalidArgument(f"horizon_steps must be >= 1, got {self.horizon_steps}")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidArgument(f"alpha must lie strictly in (0, 1), got {self.alpha}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise InvalidArgument(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.planner not in ("goal", "lane"):
            raise InvalidArgument(f"unknown planner {self.planner!r}")
        if self.noise_channel not in ("position", "velocity"):
            raise InvalidArgument(f"noise_channel must be 'position' or 'velocity', got {self.noise_channel!r}")
        Bounds(self.u_min, self.u_max)
        Bounds(self.a_min, self.a_max)

    @property
    def bounds(self) -> Bounds:
        return Bounds(self.u_min, self.u_max)

    def replace(self, **changes) -> SimConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _plain(self)


def _plain(obj):
    if isinstance(obj, Vec2):
        return [obj.x, obj.y]
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, ControllerKind):
        return str(obj)
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# --- dynamics -------------------------------------------------------------------

def step_dynamics(state: AgentState, u: Vec2, noise_sample: Vec2, dt: float,
                  dynamics: Dynamics = Dynamics.SINGLE, noise_channel: str = "position") -> AgentState:
    """One forward-Euler step.

    Single integrator: ``x += (u + eps) dt`` and the velocity becomes ``u + eps``.
    Double integrator: ``x += (v + eps) dt``, ``v += u dt`` with ``u`` an
    acceleration; ``noise_channel="velocity"`` moves ``eps`` to ``v += (u + eps) dt``.
    """
    if dynamics is Dynamics.SINGLE:
        v = u + noise_sample
        return state.moved(state.position + v * dt, v)
    if noise_channel == "velocity":
        return state.moved(state.position + state.velocity * dt, state.velocity + (u + noise_sample) * dt)
    return state.moved(state.position + (state.velocity + noise_sample) * dt, state.velocity + u * dt)


class NoiseSource:
    """Per-agent Gaussian streams keyed by ``(seed, agent id)``."""

    def __init__(self, seed: int, agents: Sequence[AgentState]):
        self._streams = {}
        self._chol = {}
        for a in agents:
            ss = np.random.SeedSequence(seed, spawn_key=(a.id,))
            self._streams[a.id] = np.random.Generator(np.random.PCG64(ss))
            self._chol[a.id] = _chol2(a.noise)

    def draw(self, agent: AgentState) -> Vec2:
        z0, z1 = self._streams[agent.id].standard_normal(2)
        l11, l21, l22 = self._chol[agent.id]
        m = agent.noise.mean
        return Vec2(m.x + l11 * z0, m.y + l21 * z0 + l22 * z1)


def _chol2(noise: NoiseModel) -> tuple[float, float, float]:
    cov = noise.covariance
    l11 = math.sqrt(max(cov.a, 0.0))
    l21 = cov.c / l11 if l11 > 0 else 0.0
    l22 = math.sqrt(max(cov.d - l21 * l21, 0.0))
    return l11, l21, l22


# --- nominal planners -----------------------------------------------------------

Planner = Callable[[int, float, Sequence[AgentState]], list]


def goal_planner(targets: Sequence[Vec2], k: float, max_speed: float = math.inf) -> Planner:
    """Move-to-goal commands, scaled down to ``max_speed`` keeping their heading."""
    def plan(step: int, t: float, agents: Sequence[AgentState]) -> list[Vec2]:
        out = []
        for n, a in enumerate(agents):
            u = move_to_goal_nominal(a, targets[n], k)
            speed = u.norm()
            out.append(u * (max_speed / speed) if speed > max_speed else u)
        return out
    return plan


def lane_planner(geometry: RampGeometry, plans: Sequence[LanePlan]) -> Planner:
    """Velocity commands that follow the ramp, then the main lane, at the planned speed."""
    ramp_dir = geometry.ramp_dir
    ramp_normal = Vec2(-ramp_dir.y, ramp_dir.x)
    merge = Vec2(geometry.merge_x, 0.0)

    def plan(step: int, t: float, agents: Sequence[AgentState]) -> list[Vec2]:
        out = []
        for a, lp in zip(agents, plans):
            lo, hi = sorted((lp.v0, lp.v_des))
            speed = min(max(lp.v0 + lp.accel * t, lo), hi)
            p = a.position
            if lp.route == "ramp" and p.x < geometry.merge_x:
                offset = (p - merge).dot(ramp_normal)
                out.append(ramp_dir * speed - ramp_normal * (geometry.k_lateral * offset))
            else:
                out.append(Vec2(speed, -geometry.k_lateral * p.y))
        return out
    return plan


def make_planner(config: SimConfig, targets: Sequence[Vec2]) -> Planner:
    if config.planner == "lane":
        if config.ramp is None or not config.lane_plans:
            raise InvalidArgument("lane planner needs ramp geometry and one lane plan per agent")
        return lane_planner(config.ramp, config.lane_plans)
    return goal_planner(targets, config.k_goal, config.nominal_speed)


# --- logging --------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    step: int
    time: float
    agents: tuple[AgentState, ...]
    decisions: tuple[ControlDecision, ...]
    report: RiskReport
    weights: dict
    proof_residual: float  # worst a.(u_i-u_j) - b_raw over pairs with both QPs optimal

    @property
    def statuses(self) -> tuple[QpStatus, ...]:
        return tuple(d.qp_status for d in self.decisions)


@dataclass
class Metrics:
    min_pairwise_distance: float
    collision_occurred: bool
    completion_time: float | None
    total_deviation_integral: float
    max_individual_deviation: float
    deviation_active_duration: float
    relaxed_step_count: int
    proof_violations: int = 0
    steps: int = 0
    simulated_time: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrajectoryLog:
    scene: Scene
    config: SimConfig
    targets: tuple[Vec2, ...]
    records: list[StepRecord] = field(default_factory=list)
    final_agents: tuple[AgentState, ...] = ()
    metrics: Metrics | None = None
    label: str = ""

    def write_trajectory_csv(self, fp: IO[str]) -> None:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["step", "time", "agent", "px", "py", "vx", "vy", "ux_applied", "uy_applied",
                    "deviation", "qp_status"])
        for rec in self.records:
            for a, d in zip(rec.agents, rec.decisions):
                w.writerow([rec.step, repr(rec.time), a.id, repr(a.position.x), repr(a.position.y),
                            repr(a.velocity.x), repr(a.velocity.y), repr(d.u_applied.x), repr(d.u_applied.y),
                            repr(d.deviation), d.qp_status.value])

    def write_pairs_csv(self, fp: IO[str]) -> None:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["step", "i", "j", "distance", "h_ij", "L_ij", "w_i"])
        for rec in self.records:
            ag = rec.agents
            for p, ai in enumerate(ag):
                for q, aj in enumerate(ag):
                    if p == q:
                        continue
                    dist = (ai.position - aj.position).norm()
                    wi = rec.weights.get((ai.id, aj.id), "")
                    w.writerow([rec.step, ai.id, aj.id, repr(dist), repr(safety_value(ai, aj)),
                                repr(rec.report.pair_loss[p][q]), repr(wi) if wi != "" else ""])

    def metrics_line(self) -> str:
        doc = {
            "label": self.label,
            "controller": str(self.config.controller),
            "convention": self.config.convention.value,
            "seed": self.config.seed,
            "alpha": self.config.alpha,
            "loss_offset_c": self.scene.loss_offset_c,
            "n_agents": len(self.scene.agents),
            **(self.metrics.to_dict() if self.metrics else {}),
        }
        return json.dumps(doc, sort_keys=True)

    def pair_distance_traces(self) -> dict[tuple[int, int], list[float]]:
        """Distance over time for every unordered pair, final state included."""
        frames = [rec.agents for rec in self.records] + ([self.final_agents] if self.final_agents else [])
        ids = [a.id for a in self.scene.agents]
        out = {(ids[p], ids[q]): [] for p in range(len(ids)) for q in range(p + 1, len(ids))}
        for ag in frames:
            for p in range(len(ag)):
                for q in range(p + 1, len(ag)):
                    out[(ag[p].id, ag[q].id)].append((ag[p].position - ag[q].position).norm())
        return out


def compute_metrics(log: TrajectoryLog, threshold: float = DEVIATION_THRESHOLD,
                    completion_time: float | None = None) -> Metrics:
    dt = log.config.dt
    frames = [rec.agents for rec in log.records] + ([log.final_agents] if log.final_agents else [])
    min_dist = math.inf
    collision = False
    for ag in frames:
        for p in range(len(ag)):
            for q in range(p + 1, len(ag)):
                dist = (ag[p].position - ag[q].position).norm()
                min_dist = min(min_dist, dist)
                if dist < pair_safety_radius(ag[p], ag[q]):
                    collision = True
    total = 0.0
    worst = 0.0
    active = 0
    relaxed = 0
    violations = 0
    for rec in log.records:
        devs = [d.deviation for d in rec.decisions]
        total += math.fsum(devs) * dt
        worst = max(worst, max(devs))
        active += any(v > threshold for v in devs)
        relaxed += any(s is not QpStatus.OPTIMAL for s in rec.statuses)
        # the split-constraint invariant only exists for the decentralized controllers
        violations += log.config.controller.decentralized and rec.proof_residual > PROOF_TOL
    return Metrics(min_dist, collision, completion_time, total, worst, active * dt, relaxed,
                   violations, len(log.records), len(log.records) * dt)


# --- main loop ------------------------------------------------------------------

def _all_at_goal(agents: Sequence[AgentState], targets: Sequence[Vec2], tol: float) -> bool:
    return all((a.position - t).norm() <= tol for a, t in zip(agents, targets))


def run(initial: Scene, config: SimConfig, targets: Sequence[Vec2] | None = None,
        planner: Planner | None = None, label: str = "") -> TrajectoryLog:
    """Simulate ``initial`` under ``config`` until every agent is at its target or the horizon ends.

    A single-agent "scene" is not representable (scenes need two agents); see
    :func:`run_single` for the unconstrained case.
    """
    agents = list(initial.agents)
    n = len(agents)
    if targets is None:
        targets = [a.position for a in agents]
    targets = [Vec2.of(t) for t in targets]
    if len(targets) != n:
        raise InvalidArgument(f"expected {n} targets, got {len(targets)}")
    if config.planner == "lane" and len(config.lane_plans) != n:
        raise InvalidArgument(f"expected {n} lane plans, got {len(config.lane_plans)}")
    if config.alpha != initial.alpha:
        initial = Scene(initial.agents, config.alpha, initial.loss_offset_c)
    planner = planner or make_planner(config, targets)
    bounds = config.bounds
    acc_bounds = Bounds(config.a_min, config.a_max)
    noise = NoiseSource(config.seed, agents)
    kind = config.controller
    rotation = -math.radians(config.deadlock_rotation_deg)
    detectors = [DeadlockDetector.for_agent(bounds.max_abs, a.safety_radius, config.deadlock_hold_steps)
                 for a in agents]
    log = TrajectoryLog(initial, config, tuple(targets), label=label or str(kind))
    prev_weights = None
    completion = None

    for step in range(config.horizon_steps):
        t = step * config.dt
        if _all_at_goal(agents, targets, config.goal_tolerance):
            completion = t
            break
        scene = Scene(tuple(agents), initial.alpha, initial.loss_offset_c)
        raw = planner(step, t, agents)
        nominals = []
        for a, det, u in zip(agents, detectors, raw):
            if config.deadlock:
                u = right_hand_deadlock_adjust(a, u, det.active, rotation * max(det.level, 1))
            nominals.append(bounds.limit(u))

        report = evaluate_scene_risk(scene, config.convention, step, config.risk_cutoff)
        if kind.kind == CENTRALIZED:
            weights = {}
            decisions = centralized_step(scene, nominals, bounds, config.convention)
        else:
            weights = responsibility_weights(report, kind, prev_weights, config.weight_smoothing)
            prev_weights = weights
            decisions = decentralized_step(scene, nominals, bounds, kind, config.convention,
                                           report=report, weights=weights)

        controls = {d.agent_id: d.u_applied for d in decisions}
        optimal = {d.agent_id for d in decisions if d.qp_status is QpStatus.OPTIMAL}
        residual = max((r for i, j, r in pair_constraint_residuals(scene, controls, config.convention)
                        if i in optimal and j in optimal), default=-math.inf)
        log.records.append(StepRecord(step, t, tuple(agents), tuple(decisions), report, weights, residual))

        new_agents = []
        for a, d, target, det in zip(agents, decisions, targets, detectors):
            eps = noise.draw(a)
            if config.dynamics is Dynamics.DOUBLE:
                acc = track_velocity(a.velocity, d.u_applied, config.k_v, acc_bounds)
                nxt = step_dynamics(a, acc, eps, config.dt, Dynamics.DOUBLE, config.noise_channel)
            else:
                nxt = step_dynamics(a, d.u_applied, eps, config.dt, Dynamics.SINGLE)
            # commanded speed: the measured one carries the injected noise
            speed = d.u_applied.norm() if config.dynamics is Dynamics.SINGLE else nxt.velocity.norm()
            det.update(speed, (nxt.position - target).norm())
            new_agents.append(nxt)
        agents = new_agents
    else:
        if _all_at_goal(agents, targets, config.goal_tolerance):
            completion = config.horizon_steps * config.dt

    log.final_agents = tuple(agents)
    log.metrics = compute_metrics(log, completion_time=completion)
    return log


def run_single(agent: AgentState, config: SimConfig, target: Vec2) -> list[AgentState]:
    """Trajectory of a lone agent: no neighbours, so it tracks its nominal exactly."""
    planner = make_planner(config, [target])
    noise = NoiseSource(config.seed, [agent])
    out = [agent]
    for step in range(config.horizon_steps):
        if (agent.position - target).norm() <= config.goal_tolerance:
            break
        u = config.bounds.limit(planner(step, step * config.dt, [agent])[0])
        agent = step_dynamics(agent, u, noise.draw(agent), config.dt, config.dynamics, config.noise_channel)
        out.append(agent)
    return out


# --- scenarios ------------------------------------------------------------------

SWAP_RADIUS = 20.0
SWAP_SAFETY_RADIUS = 2.0
SWAP_NOISE_SIGMA = 0.05
SWAP_SEED = 7


def scenario_swap(n: int = 6, radius: float = SWAP_RADIUS, safety_radius: float = SWAP_SAFETY_RADIUS,
                  gamma: float = 1.0, sigma: float = SWAP_NOISE_SIGMA,
                  seed: int = SWAP_SEED) -> tuple[Scene, SimConfig, list[Vec2]]:
    """``n`` agents evenly spaced on a circle, each heading for the antipode."""
    if n < 2:
        raise InvalidArgument(f"swap needs at least 2 agents, got {n}")
    noise = NoiseModel.isotropic(sigma)
    agents = []
    targets = []
    for k in range(n):
        th = 2.0 * math.pi * k / n
        p = Vec2(radius * math.cos(th), radius * math.sin(th))
        agents.append(AgentState(k, p, Vec2(0.0, 0.0), safety_radius, gamma, noise))
        targets.append(-p)
    c = default_loss_offset(agents, targets)
    scene = Scene(tuple(agents), 0.95, c)
    config = SimConfig(dt=0.02, horizon_steps=10_000, dynamics=Dynamics.SINGLE,
                       u_min=Vec2(-2.0, -2.0), u_max=Vec2(2.0, 2.0), alpha=0.95, seed=seed,
                       goal_tolerance=0.2, planner="goal", k_goal=1.0, nominal_speed=2.0,
                       deadlock=True)
    return scene, config, targets


RAMP_SAFETY_RADIUS = 5.0
RAMP_GAMMA = 1.0
RAMP_NOISE_SIGMA = 0.1
RAMP_ALPHA = 0.999
RAMP_HORIZON = 600

# Uniform ranges of the randomized ramp-merge trials. Ramp distances are
# measured upstream of the merge point along the ramp; main-lane positions
# are x coordinates.
RAMP_RANGES = {
    "v1_ramp_distance": (24.0, 30.0),
    "v2_main_x": (34.0, 40.0),
    "v3_ramp_distance": (50.0, 58.0),
    "speed": (11.0, 13.0),
    "desired_speed": (14.0, 18.0),
    "acceleration": (0.0, 2.0),
}


def _ramp_scene(geometry: RampGeometry, s1: float, s3: float, x2: float,
                v0: Sequence[float], v_des: Sequence[float], acc: Sequence[float],
                seed: int) -> tuple[Scene, SimConfig, list[Vec2]]:
    noise = NoiseModel.isotropic(RAMP_NOISE_SIGMA)
    d = geometry.ramp_dir
    p1, p3 = geometry.ramp_point(s1), geometry.ramp_point(s3)
    p2 = Vec2(x2, 0.0)
    agents = (
        AgentState(1, p1, d * v0[0], RAMP_SAFETY_RADIUS, RAMP_GAMMA, noise),
        AgentState(2, p2, Vec2(v0[1], 0.0), RAMP_SAFETY_RADIUS, RAMP_GAMMA, noise),
        AgentState(3, p3, d * v0[2], RAMP_SAFETY_RADIUS, RAMP_GAMMA, noise),
    )
    targets = [Vec2(geometry.lane_length + 60.0, 0.0)] * 3
    plans = (LanePlan("ramp", v0[0], v_des[0], acc[0]),
             LanePlan("main", v0[1], v_des[1], acc[1]),
             LanePlan("ramp", v0[2], v_des[2], acc[2]))
    c = default_loss_offset(agents, [geometry.ramp_point(80.0), targets[0]])
    scene = Scene(agents, RAMP_ALPHA, c)
    config = SimConfig(dt=0.02, horizon_steps=RAMP_HORIZON, dynamics=Dynamics.DOUBLE,
                       u_min=Vec2(-5.0, -8.0), u_max=Vec2(40.0, 8.0), alpha=RAMP_ALPHA, seed=seed,
                       goal_tolerance=0.5, planner="lane", deadlock=False, ramp=geometry,
                       lane_plans=plans)
    return scene, config, targets


def scenario_ramp_merge(seed: int = 0) -> tuple[Scene, SimConfig, list[Vec2]]:
    """Three vehicles: V1 and V3 on the ramp, V2 on the main lane, mid-range start."""
    mid = {k: 0.5 * (lo + hi) for k, (lo, hi) in RAMP_RANGES.items()}
    return _ramp_scene(RampGeometry(), mid["v1_ramp_distance"], mid["v3_ramp_distance"], mid["v2_main_x"],
                       [mid["speed"]] * 3, [mid["desired_speed"]] * 3, [mid["acceleration"]] * 3, seed)


def randomized_ramp_merge(seed: int) -> tuple[Scene, SimConfig, list[Vec2]]:
    """Ramp merge with start positions, speeds and accelerations drawn from ``RAMP_RANGES``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0xA11,))))

    def u(key: str, size: int | None = None):
        lo, hi = RAMP_RANGES[key]
        return rng.uniform(lo, hi, size)

    s1, s3, x2 = float(u("v1_ramp_distance")), float(u("v3_ramp_distance")), float(u("v2_main_x"))
    v0 = [float(v) for v in u("speed", 3)]
    v_des = [float(v) for v in u("desired_speed", 3)]
    acc = [float(v) for v in u("acceleration", 3)]
    return _ramp_scene(RampGeometry(), s1, s3, x2, v0, v_des, acc, seed)
