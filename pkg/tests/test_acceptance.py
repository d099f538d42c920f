"""Acceptance run: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed even under
capture) or directly with ``python tests/test_acceptance.py``.
"""

import csv
import math
import os
import sys
import tempfile
import time

import numpy as np
import pytest
from scipy.stats import norm

sys.path.insert(0, os.path.dirname(__file__))

from _problems import random_feasible, random_infeasible  # noqa: E402

from cbf_swarm.allocation import pairwise_weights  # noqa: E402
from cbf_swarm.cli import cmd_compare, cmd_run  # noqa: E402
from cbf_swarm.control import ControllerKind  # noqa: E402
from cbf_swarm.core import AgentState, NoiseModel, Scene, Vec2  # noqa: E402
from cbf_swarm.qp import QpStatus, brute_force_solve, grid_spacing, solve  # noqa: E402
from cbf_swarm.riskmap import Rect, compute_grid, grid_loss_offset, risk_field  # noqa: E402
from cbf_swarm.risk import safety_value  # noqa: E402
from cbf_swarm.sim import (SimConfig, randomized_ramp_merge, run, scenario_ramp_merge,  # noqa: E402
                           scenario_swap)
from cbf_swarm.uncertainty import CvarConvention, empirical_cvar, gaussian_cvar  # noqa: E402


def report(n, ok, detail, capsys=None):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)
    return ok


# 1 -----------------------------------------------------------------------------

def criterion_1():
    rng = np.random.default_rng(1)
    pairs = rng.uniform(0.0, 1e6, size=(100_000, 2))
    pairs[:1000, 1] = pairs[:1000, 0]  # ties
    t0 = time.perf_counter()
    out = [pairwise_weights(a, b) for a, b in pairs.tolist()]
    elapsed = time.perf_counter() - t0
    w = np.array(out)
    err = float(np.max(np.abs(w.sum(axis=1) - 1.0)))
    hi_i = pairs[:, 0] > pairs[:, 1]
    hi_j = pairs[:, 1] > pairs[:, 0]
    order = bool(np.all(w[hi_i, 0] < w[hi_i, 1]) and np.all(w[hi_j, 1] < w[hi_j, 0]))
    ok = err <= 1e-12 and order and elapsed < 1.0
    return ok, f"pairs=100000 max|w_i+w_j-1|={err:.1e} ordering={order} runtime={elapsed:.3f}s"


# 2 -----------------------------------------------------------------------------

def _oracle_b_raw(i: AgentState, j: AgentState, alpha: float) -> tuple[np.ndarray, float]:
    # conservative budget rebuilt from scipy's normal: gamma*h - 2*CVaR(-d.(eps_i - eps_j))
    d = np.array([i.position.x - j.position.x, i.position.y - j.position.y])
    r = max(i.safety_radius, j.safety_radius)
    h = d @ d - r * r
    mean = -d @ (np.array(i.noise.mean.as_tuple()) - np.array(j.noise.mean.as_tuple()))
    cov = np.array(i.noise.covariance.as_lists()) + np.array(j.noise.covariance.as_lists())
    sd = math.sqrt(max(d @ cov @ d, 0.0))
    cvar = mean + sd * norm.pdf(norm.ppf(alpha)) / (1.0 - alpha)
    return -2.0 * d, min(i.gamma, j.gamma) * h - 2.0 * cvar


def criterion_2():
    worst, checked, violations = -math.inf, 0, 0
    for name, (scene, cfg, targets) in (("swap", scenario_swap()), ("ramp", scenario_ramp_merge())):
        cfg = cfg.replace(controller=ControllerKind.parse("risk-aware"), convention=CvarConvention.CONSERVATIVE)
        log = run(scene, cfg, targets)
        for rec in log.records:
            u = {d.agent_id: np.array(d.u_applied.as_tuple()) for d in rec.decisions}
            ok_ids = {d.agent_id for d in rec.decisions if d.qp_status is QpStatus.OPTIMAL}
            ag = rec.agents
            for p in range(len(ag)):
                for q in range(p + 1, len(ag)):
                    if ag[p].id in ok_ids and ag[q].id in ok_ids:
                        a, b_raw = _oracle_b_raw(ag[p], ag[q], cfg.alpha)
                        res = float(a @ (u[ag[p].id] - u[ag[q].id]) - b_raw)
                        # the oracle's own rounding is relative to |b_raw|
                        tol = 1e-9 + 1e-12 * abs(b_raw)
                        violations += res > tol
                        worst = max(worst, res)
                        checked += 1
    return violations == 0, f"pair-steps checked={checked} violations={violations} max residual={worst:.2e}"


# 3 -----------------------------------------------------------------------------

def criterion_3():
    t0 = time.perf_counter()
    traces, worst, collisions = 0, math.inf, 0
    for seed in range(50):
        scene, cfg, targets = randomized_ramp_merge(seed)
        cfg = cfg.replace(alpha=0.999, convention=CvarConvention.CONSERVATIVE,
                          controller=ControllerKind.parse("risk-aware"))
        log = run(scene, cfg, targets)
        for tr in log.pair_distance_traces().values():
            traces += 1
            worst = min(worst, min(tr))
        collisions += log.metrics.collision_occurred
    elapsed = time.perf_counter() - t0
    ok = traces == 150 and worst >= 5.0 and collisions == 0 and elapsed < 30.0
    return ok, f"trials=50 traces={traces} min distance={worst:.3f} m collisions={collisions} runtime={elapsed:.1f}s"


# 4 -----------------------------------------------------------------------------

def criterion_4():
    closed = gaussian_cvar(0.0, 1.0, 0.95)
    samples = np.random.default_rng(4).standard_normal(1_000_000)
    emp = empirical_cvar(samples, 0.95)
    rng = np.random.default_rng(40)
    base = rng.standard_normal(2000)
    trans_err = hom_err = 0.0
    for _ in range(10_000):
        mu, var = rng.uniform(-50, 50), rng.uniform(0, 100)
        alpha, shift, lam = rng.uniform(0.01, 0.999), rng.uniform(-100, 100), rng.uniform(0, 100)
        ref = gaussian_cvar(mu, var, alpha)
        trans_err = max(trans_err, abs(gaussian_cvar(mu + shift, var, alpha) - (ref + shift)))
        hom_err = max(hom_err, abs(gaussian_cvar(lam * mu, lam * lam * var, alpha) - lam * ref))
    # the same two properties on the sample estimator, which has no closed form to lean on
    for _ in range(200):
        alpha, shift, lam = rng.uniform(0.5, 0.99), rng.uniform(-10, 10), rng.uniform(0.1, 10)
        e = empirical_cvar(base, alpha)
        trans_err = max(trans_err, abs(empirical_cvar(base + shift, alpha) - (e + shift)))
        hom_err = max(hom_err, abs(empirical_cvar(lam * base, alpha) - lam * e))
    ok = abs(closed - emp) <= 1e-2 and trans_err <= 1e-10 and hom_err <= 1e-10
    return ok, (f"closed={closed:.6f} empirical(1e6)={emp:.6f} |diff|={abs(closed - emp):.1e} "
                f"translation err={trans_err:.1e} homogeneity err={hom_err:.1e} (10000 cases each)")


# 5 -----------------------------------------------------------------------------

def criterion_5():
    rng = np.random.default_rng(5)
    ctrl_bad = obj_bad = beaten = 0
    worst_ctrl = worst_obj = 0.0
    for _ in range(1000):
        p = random_feasible(rng)
        s, g = solve(p), brute_force_solve(p, 1000)
        spacing = grid_spacing(p, 1000)
        dist = (s.u - g.u).norm() / spacing
        dobj = abs(s.objective - g.objective)
        worst_ctrl, worst_obj = max(worst_ctrl, dist), max(worst_obj, dobj)
        ctrl_bad += dist > 2.0
        obj_bad += dobj > 1e-3
        beaten += g.objective < s.objective - 1e-12
    verdicts = 0
    for _ in range(100):
        p = random_infeasible(rng)
        verdicts += solve(p).status is not QpStatus.OPTIMAL and brute_force_solve(p, 1000).status is QpStatus.INFEASIBLE
    ok = ctrl_bad == 0 and obj_bad == 0 and verdicts == 100
    return ok, (f"control>2 spacings: {ctrl_bad}/1000 (max {worst_ctrl:.1f}); objective>1e-3: {obj_bad}/1000 "
                f"(max {worst_obj:.1e}); grid beat solver: {beaten}/1000; infeasible verdicts agree {verdicts}/100")


# 6 -----------------------------------------------------------------------------

def criterion_6():
    gamma, dt, u_max = 1.0, 0.02, 2.0
    agents = (AgentState(0, Vec2(-8, 0.2), Vec2(0, 0), 2.0, gamma, NoiseModel()),
              AgentState(1, Vec2(8, -0.2), Vec2(0, 0), 2.0, gamma, NoiseModel()))
    cfg = SimConfig(dt=dt, horizon_steps=3000, u_min=Vec2(-u_max, -u_max), u_max=Vec2(u_max, u_max),
                    controller=ControllerKind.parse("risk-aware"), deadlock=True)
    log = run(Scene(agents, 0.95), cfg, [Vec2(8, 0.2), Vec2(-8, -0.2)])
    frames = [r.agents for r in log.records] + [log.final_agents]
    hs = [safety_value(*f) for f in frames]
    slack = min(hs[t + 1] - ((1 - gamma * dt) * hs[t] - 10 * u_max ** 2 * dt ** 2) for t in range(len(hs) - 1))
    return slack >= 0.0, f"steps={len(hs) - 1} min h={min(hs):.4f} min margin over bound={slack:.3e}"


# 7 -----------------------------------------------------------------------------

def criterion_7():
    t0 = time.perf_counter()
    bounds = (-10.0, -10.0, 10.0, 10.0)

    def A(i, x, y, vx=0.0, vy=0.0, g=1.0, s=0.0):
        return AgentState(i, Vec2(x, y), Vec2(vx, vy), 1.0, g, NoiseModel.isotropic(s))

    # monotone decay along 64 rays from a lone agent
    lone = [A(0, 0.37, -0.21, s=0.2)]
    th = np.linspace(0, 2 * np.pi, 64, endpoint=False)[:, None]
    r = np.linspace(0.05, 9.0, 400)[None, :]
    vals = risk_field(lone, 0.37 + r * np.cos(th), -0.21 + r * np.sin(th))
    decay = bool(np.all(np.diff(vals, axis=1) < 0))

    # velocity lobe: heading ray beats perpendicular ray at equal distance on the grid
    mover = [A(0, 0.0, 0.0, vx=3.0), A(1, 0.0, -40.0)]
    g = compute_grid(mover, bounds, 200).values
    ahead, side = g[100, 110:], g[90::-1, 100][:90]
    lobe = bool(ahead.max() > side.max() and np.all(ahead > side))

    # smaller gamma: more cells above a common iso level
    c = 500.0
    weak = compute_grid([A(0, 0, 0, g=0.5)], bounds, 200, c=c).values
    strong = compute_grid([A(0, 0, 0, g=1.0)], bounds, 200, c=c).values
    level = 450.0
    area_weak, area_strong = int((weak > level).sum()), int((strong > level).sum())
    iso = area_weak > area_strong

    # adding an agent raises every cell
    base = [A(0, -4.1, 0.3, vx=1), A(1, 4.3, -0.2), A(2, 0.2, 5.1, s=0.3)]
    extra = A(3, 0.1, -3.3, vy=1.5)
    c = grid_loss_offset(base + [extra], Rect.of(bounds))
    before = compute_grid(base, bounds, 200, c=c).values
    after = compute_grid(base + [extra], bounds, 200, c=c).values
    raises = bool(np.all(after > before))

    elapsed = time.perf_counter() - t0
    ok = decay and lobe and iso and raises and elapsed < 5.0
    return ok, (f"ray decay={decay} lobe={lobe} iso cells gamma0.5/1.0={area_weak}/{area_strong} "
                f"adding agent raises all 40000 cells={raises} runtime={elapsed:.2f}s")


# 8 -----------------------------------------------------------------------------

def criterion_8():
    with tempfile.TemporaryDirectory() as tmp:
        a, b = os.path.join(tmp, "a"), os.path.join(tmp, "b")
        codes = cmd_run("swap", a), cmd_run("swap", b)
        same = {}
        for name in ("trajectory.csv", "pairs.csv", "metrics.jsonl"):
            with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
                same[name] = fa.read() == fb.read()
    ok = codes == (0, 0) and all(same.values())
    return ok, f"exit codes={codes} identical={same}"


# 9 -----------------------------------------------------------------------------

def criterion_9():
    with tempfile.TemporaryDirectory() as tmp:
        code = cmd_compare("swap", ["risk-aware", "fixed:0.5"], tmp)
        with open(os.path.join(tmp, "compare.csv")) as fp:
            rows = {(r["record"], r["label"]): r for r in csv.DictReader(fp)}
    ra, fx = rows[("metrics", "risk-aware")], rows[("metrics", "fixed:0.5")]
    completes = ra["completion_time"] != ""
    dev_ra, dev_fx = float(ra["max_individual_deviation"]), float(fx["max_individual_deviation"])
    ok = code == 0 and completes and dev_ra <= dev_fx
    return ok, (f"seed 7: risk-aware completion_time={ra['completion_time'] or 'none'} "
                f"max_individual_deviation risk-aware={dev_ra:.6f} fixed-share={dev_fx:.6f} "
                f"({100 * (dev_ra - dev_fx) / dev_fx:+.4f}%)")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8,
            criterion_9]


@pytest.mark.parametrize("n", range(1, 10))
def test_criterion(n, capsys):
    ok, detail = CRITERIA[n - 1]()
    assert report(n, ok, detail, capsys), detail


if __name__ == "__main__":
    results = [report(n, *fn()) for n, fn in enumerate(CRITERIA, 1)]
    sys.exit(0 if all(results) else 1)
