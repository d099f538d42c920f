import io
import math

import numpy as np
import pytest

from cbf_swarm.control import ControllerKind
from cbf_swarm.core import AgentState, InvalidArgument, NoiseModel, Scene, Vec2
from cbf_swarm.qp import QpStatus
from cbf_swarm.risk import safety_value
from cbf_swarm.sim import (RAMP_RANGES, Dynamics, NoiseSource, SimConfig, randomized_ramp_merge, run, run_single,
                           scenario_ramp_merge, scenario_swap, step_dynamics)


def A(i, x, y, vx=0.0, vy=0.0, r=1.0, noise=NoiseModel()):
    return AgentState(i, Vec2(x, y), Vec2(vx, vy), r, 1.0, noise)


def test_step_single():
    a = A(0, 0, 0)
    assert step_dynamics(a, Vec2(0, 0), Vec2(0, 0), 0.1).position == Vec2(0, 0)
    nxt = step_dynamics(a, Vec2(1, 0), Vec2(0, 0), 0.1)
    assert nxt.position == Vec2(0.1, 0.0) and nxt.velocity == Vec2(1, 0)


def test_step_double():
    nxt = step_dynamics(A(0, 0, 0, 2, 0), Vec2(1, 0), Vec2(0, 0), 0.1, Dynamics.DOUBLE)
    assert nxt.position.x == pytest.approx(0.2) and nxt.velocity.x == pytest.approx(2.1)


def test_step_double_noise_channels():
    a = A(0, 0, 0, 2, 0)
    pos = step_dynamics(a, Vec2(0, 0), Vec2(1, 0), 0.1, Dynamics.DOUBLE, "position")
    vel = step_dynamics(a, Vec2(0, 0), Vec2(1, 0), 0.1, Dynamics.DOUBLE, "velocity")
    assert pos.position.x == pytest.approx(0.3) and pos.velocity.x == 2.0
    assert vel.position.x == pytest.approx(0.2) and vel.velocity.x == pytest.approx(2.1)


def test_config_validation():
    for bad in ({"dt": 0.0}, {"horizon_steps": 0}, {"alpha": 1.0}, {"seed": -1}, {"planner": "x"},
                {"noise_channel": "z"}, {"u_min": Vec2(3, 3)}):
        with pytest.raises(InvalidArgument):
            SimConfig(**bad)


def test_noise_streams_independent_of_other_agents():
    n = NoiseModel.isotropic(0.3)
    a, b, c = A(0, 0, 0, noise=n), A(5, 1, 1, noise=n), A(9, 2, 2, noise=n)
    two = NoiseSource(42, [a, b])
    three = NoiseSource(42, [a, b, c])
    for _ in range(10):
        assert two.draw(a) == three.draw(a)
        assert two.draw(b) == three.draw(b)
        three.draw(c)


def test_noise_statistics():
    n = NoiseModel(Vec2(0.5, -0.2), [[0.09, 0.03], [0.03, 0.04]])
    src = NoiseSource(1, [A(0, 0, 0, noise=n)])
    agent = A(0, 0, 0, noise=n)
    xs = np.array([src.draw(agent).as_tuple() for _ in range(20000)])
    assert np.allclose(xs.mean(axis=0), [0.5, -0.2], atol=0.01)
    assert np.allclose(np.cov(xs.T), [[0.09, 0.03], [0.03, 0.04]], atol=0.005)


def test_single_agent_follows_nominal():
    cfg = SimConfig(u_min=Vec2(-1, -1), u_max=Vec2(1, 1), horizon_steps=2000)
    traj = run_single(A(0, 0, 0), cfg, Vec2(3, 4))
    # noise-free, so each step is exactly the clipped move-to-goal command
    for prev, nxt in zip(traj, traj[1:]):
        u = cfg.bounds.limit((Vec2(3, 4) - prev.position) * 1.0)
        assert nxt.position == prev.position + u * cfg.dt
    assert (traj[-1].position - Vec2(3, 4)).norm() <= cfg.goal_tolerance


def test_run_argument_errors():
    s = Scene((A(0, 0, 0), A(1, 5, 0)))
    with pytest.raises(InvalidArgument):
        run(s, SimConfig(horizon_steps=5), [Vec2(0, 0)])
    with pytest.raises(InvalidArgument):
        run(s, SimConfig(horizon_steps=5, planner="lane"), [Vec2(0, 0)] * 2)


def _csv(log):
    a, b = io.StringIO(), io.StringIO()
    log.write_trajectory_csv(a)
    log.write_pairs_csv(b)
    return a.getvalue(), b.getvalue(), log.metrics_line()


def test_determinism():
    scene, cfg, targets = scenario_swap(4, radius=8.0, seed=3)
    cfg = cfg.replace(horizon_steps=300)
    assert _csv(run(scene, cfg, targets)) == _csv(run(scene, cfg, targets))
    other = _csv(run(scene, cfg.replace(seed=4), targets))
    assert other != _csv(run(scene, cfg, targets))


def test_swap_scenario_shape():
    scene, cfg, targets = scenario_swap()
    assert len(scene.agents) == 6
    pos = sorted(a.position.as_tuple() for a in scene.agents)
    tg = sorted(t.as_tuple() for t in targets)
    assert np.allclose(pos, tg, atol=1e-12)
    assert cfg.deadlock and cfg.dynamics is Dynamics.SINGLE and cfg.k_goal == 1.0


def test_swap_initial_weights_are_half():
    scene, cfg, targets = scenario_swap()
    log = run(scene, cfg.replace(horizon_steps=1), targets)
    ws = log.records[0].weights.values()
    assert all(abs(w - 0.5) < 1e-12 for w in ws)


def test_swap_pair_completes():
    scene, cfg, targets = scenario_swap(2, radius=8.0)
    log = run(scene, cfg, targets)
    m = log.metrics
    assert m.completion_time is not None and not m.collision_occurred
    assert m.proof_violations == 0


def test_ramp_scenario():
    scene, cfg, targets = scenario_ramp_merge()
    assert len(scene.agents) == 3 and cfg.alpha == 0.999 and scene.alpha == 0.999
    assert cfg.dynamics is Dynamics.DOUBLE
    ag = scene.agents
    assert all((ag[p].position - ag[q].position).norm() > 5.0 for p in range(3) for q in range(p + 1, 3))


def test_randomized_ramp_respects_ranges():
    for seed in range(20):
        scene, cfg, _ = randomized_ramp_merge(seed)
        for plan in cfg.lane_plans:
            assert RAMP_RANGES["speed"][0] <= plan.v0 <= RAMP_RANGES["speed"][1]
            assert RAMP_RANGES["desired_speed"][0] <= plan.v_des <= RAMP_RANGES["desired_speed"][1]
            assert RAMP_RANGES["acceleration"][0] <= plan.accel <= RAMP_RANGES["acceleration"][1]
        ag = scene.agents
        assert min((ag[p].position - ag[q].position).norm() for p in range(3) for q in range(p + 1, 3)) > 5.0
    assert randomized_ramp_merge(3)[0] == randomized_ramp_merge(3)[0]
    assert randomized_ramp_merge(3)[0] != randomized_ramp_merge(4)[0]


@pytest.mark.parametrize("kind", ["risk-aware", "fixed:0.5", "centralized"])
def test_zero_noise_h_stays_positive(kind):
    s = Scene((A(0, -6, 0.3, r=2.0), A(1, 6, -0.3, r=2.0)), 0.95)
    cfg = SimConfig(horizon_steps=1500, controller=ControllerKind.parse(kind), u_min=Vec2(-2, -2),
                    u_max=Vec2(2, 2), deadlock=True)
    log = run(s, cfg, [Vec2(6, 0.3), Vec2(-6, -0.3)])
    frames = [r.agents for r in log.records] + [log.final_agents]
    assert min(safety_value(*f) for f in frames) >= 0.0


def test_metrics_consistency():
    scene, cfg, targets = scenario_swap(3, radius=8.0)
    log = run(scene, cfg, targets)
    m = log.metrics
    assert m.deviation_active_duration <= m.simulated_time + 1e-12
    assert m.steps == len(log.records)
    if m.completion_time is not None:
        assert all((a.position - t).norm() <= cfg.goal_tolerance for a, t in zip(log.final_agents, targets))
    assert m.collision_occurred == (m.min_pairwise_distance < 2.0)
    assert m.relaxed_step_count == sum(any(s is not QpStatus.OPTIMAL for s in r.statuses) for r in log.records)


def test_horizon_cap_reports_no_completion():
    scene, cfg, targets = scenario_swap(2, radius=8.0)
    log = run(scene, cfg.replace(horizon_steps=10), targets)
    assert log.metrics.completion_time is None and log.metrics.steps == 10


def test_pairs_csv_columns():
    scene, cfg, targets = scenario_swap(3, radius=8.0)
    log = run(scene, cfg.replace(horizon_steps=2), targets)
    buf = io.StringIO()
    log.write_pairs_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,i,j,distance,h_ij,L_ij,w_i"
    assert len(lines) == 1 + 2 * 6
    row = lines[1].split(",")
    assert math.isclose(float(row[3]) ** 2 - 4.0, float(row[4]), rel_tol=1e-12)


def test_trajectory_csv_columns():
    scene, cfg, targets = scenario_swap(2, radius=8.0)
    log = run(scene, cfg.replace(horizon_steps=2), targets)
    buf = io.StringIO()
    log.write_trajectory_csv(buf)
    assert buf.getvalue().splitlines()[0] == ("step,time,agent,px,py,vx,vy,ux_applied,uy_applied,"
                                              "deviation,qp_status")
