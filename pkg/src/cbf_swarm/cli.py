"""Command-line front end.

    cbf-swarm run      --scenario swap --controller risk-aware --seed 7 --out runs/swap
    cbf-swarm trials   --scenario ramp -n 50 --seed0 0 --out runs/trials
    cbf-swarm riskmap  --scenario swap --bounds -25,-25,25,25 --resolution 200 --out runs/map
    cbf-swarm compare  --scenario swap --controllers risk-aware,fixed:0.5 --out runs/cmp

Scenarios are YAML documents (see ``configs/``); ``--scenario swap`` and
``--scenario ramp`` use the built-in defaults, ``--scenario file:<path>`` loads
one. Any field can be overridden with ``--set sim.dt=0.01``. Every command
writes ``config.resolved.yaml``, a self-contained document that reproduces
the run through ``--scenario file:``.

Exit codes: 0 success, 1 usage or configuration error, 2 safety violation.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import dataclasses
import logging
import os
import sys
from typing import Sequence

import yaml

from .control import ControllerKind
from .core import AgentState, CbfSwarmError, Mat2, NoiseModel, Scene, Vec2, default_loss_offset
from .metrics_report import compare
from .riskmap import Rect, compute_grid, export_all, grid_loss_offset
from .sim import (LanePlan, RampGeometry, SimConfig, TrajectoryLog, randomized_ramp_merge, run,
                  scenario_ramp_merge, scenario_swap)

log = logging.getLogger("cbf_swarm")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SAFETY = 2

BUILTIN = {
    "swap": {"scenario": "swap", "swap": {"n": 6, "radius": 20.0, "safety_radius": 2.0, "gamma": 1.0,
                                          "sigma": 0.05}},
    "ramp": {"scenario": "ramp", "ramp": {"randomize": False}},
}
_TOP_KEYS = {"scenario", "source", "swap", "ramp", "sim", "alpha", "loss_offset_c", "agents", "targets"}


class ConfigError(CbfSwarmError):
    pass


# --- documents ------------------------------------------------------------------

def load_document(spec: str) -> dict:
    """``swap``, ``ramp``, ``file:<path>`` or a bare path -> scenario document."""
    if spec in BUILTIN:
        return copy.deepcopy(BUILTIN[spec])
    path = spec[5:] if spec.startswith("file:") else spec
    try:
        with open(path) as fp:
            doc = yaml.safe_load(fp)
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "?"
        raise ConfigError(f"{path}: {where}: {getattr(e, 'problem', None) or e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    name = doc.get("scenario")
    if name in BUILTIN:
        base = copy.deepcopy(BUILTIN[name])
        _merge(base, doc)
        doc = base
    return doc


def _merge(base: dict, extra: dict) -> None:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def apply_override(doc: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as YAML (``1e-3``, ``[1, 2]``, ``.inf``)."""
    path, sep, raw = assignment.partition("=")
    if not sep or not path:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        raise ConfigError(f"override {assignment!r}: value is not valid YAML") from None
    keys = path.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {path}: {k} is not a mapping")
    node[keys[-1]] = value


def _vec(path: str, v) -> Vec2:
    try:
        return Vec2.of(v)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: expected [x, y], got {v!r} ({e})") from None


_INT_FIELDS = {"horizon_steps", "seed", "deadlock_hold_steps"}
_VEC_FIELDS = {"u_min", "u_max", "a_min", "a_max"}


def sim_config(base: SimConfig, overrides: dict) -> SimConfig:
    names = {f.name for f in dataclasses.fields(SimConfig)}
    changes = {}
    for k, v in overrides.items():
        path = f"sim.{k}"
        if k not in names:
            raise ConfigError(f"{path}: unknown field")
        try:
            if k in _VEC_FIELDS:
                v = _vec(path, v)
            elif k in _INT_FIELDS:
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{path}: expected an integer, got {v!r}")
            elif k == "ramp":
                v = None if v is None else RampGeometry(**v)
            elif k == "lane_plans":
                v = tuple(LanePlan(**p) for p in v)
            elif k == "controller":
                v = ControllerKind.parse(str(v))
            elif k == "deadlock":
                if not isinstance(v, bool):
                    raise ConfigError(f"{path}: expected true/false, got {v!r}")
            elif k not in ("dynamics", "convention", "planner", "noise_channel"):
                v = float(v)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}") from None
        changes[k] = v
    try:
        return base.replace(**changes)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"sim: {e}") from None


def _agent(n: int, entry: dict) -> AgentState:
    path = f"agents[{n}]"
    if not isinstance(entry, dict):
        raise ConfigError(f"{path}: expected a mapping")
    unknown = set(entry) - {"id", "position", "velocity", "safety_radius", "gamma", "noise", "noise_sigma"}
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {sorted(unknown)}")
    try:
        if "noise_sigma" in entry:
            noise = NoiseModel.isotropic(float(entry["noise_sigma"]))
        else:
            nz = entry.get("noise") or {}
            noise = NoiseModel(_vec(f"{path}.noise.mean", nz.get("mean", [0.0, 0.0])),
                               Mat2.of(nz.get("covariance", [[0.0, 0.0], [0.0, 0.0]])))
        return AgentState(int(entry.get("id", n)), _vec(f"{path}.position", entry["position"]),
                          _vec(f"{path}.velocity", entry.get("velocity", [0.0, 0.0])),
                          float(entry.get("safety_radius", 0.0)), float(entry.get("gamma", 1.0)), noise)
    except KeyError as e:
        raise ConfigError(f"{path}: missing field {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def build(doc: dict) -> tuple[Scene, SimConfig, list[Vec2]]:
    """Turn a scenario document into ``(scene, config, targets)``."""
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {sorted(unknown)}")
    name = doc.get("scenario")
    sim = doc.get("sim") or {}
    if not isinstance(sim, dict):
        raise ConfigError("sim: expected a mapping")
    seed = sim.get("seed")
    try:
        if name == "swap":
            params = dict(doc.get("swap") or {})
            if seed is not None:
                params["seed"] = seed
            scene, config, targets = scenario_swap(**params)
        elif name == "ramp":
            params = doc.get("ramp") or {}
            s = 0 if seed is None else seed
            scene, config, targets = randomized_ramp_merge(s) if params.get("randomize") else scenario_ramp_merge(s)
        elif name == "custom":
            agents = [_agent(n, a) for n, a in enumerate(doc.get("agents") or [])]
            targets = [_vec(f"targets[{n}]", t) for n, t in enumerate(doc.get("targets") or [])]
            if len(targets) != len(agents):
                raise ConfigError(f"targets: expected {len(agents)} entries, got {len(targets)}")
            scene = Scene(tuple(agents), float(doc.get("alpha", 0.95)), default_loss_offset(agents, targets))
            config = SimConfig(alpha=scene.alpha)
        else:
            raise ConfigError(f"scenario: expected swap, ramp or custom, got {name!r}")
    except TypeError as e:
        raise ConfigError(f"{name}: {e}") from None
    except ValueError as e:
        raise ConfigError(str(e)) from None

    config = sim_config(config, sim)
    c = doc.get("loss_offset_c")
    try:
        scene = Scene(scene.agents, config.alpha, float(c) if c is not None else scene.loss_offset_c)
    except ValueError as e:
        raise ConfigError(f"loss_offset_c: {e}") from None
    return scene, config, targets


def resolved_document(scene: Scene, config: SimConfig, targets: Sequence[Vec2], source: str) -> dict:
    """Self-contained ``custom`` document with every default written out."""
    agents = [{
        "id": a.id,
        "position": list(a.position.as_tuple()),
        "velocity": list(a.velocity.as_tuple()),
        "safety_radius": a.safety_radius,
        "gamma": a.gamma,
        "noise": {"mean": list(a.noise.mean.as_tuple()), "covariance": a.noise.covariance.as_lists()},
    } for a in scene.agents]
    return {
        "scenario": "custom",
        "source": source,
        "alpha": scene.alpha,
        "loss_offset_c": scene.loss_offset_c,
        "agents": agents,
        "targets": [list(t.as_tuple()) for t in targets],
        "sim": config.to_dict(),
    }


def write_yaml(doc: dict, path: str) -> None:
    with open(path, "w") as fp:
        yaml.safe_dump(doc, fp, sort_keys=False, default_flow_style=None)


def _prepare(scenario: str, overrides: Sequence[str]) -> dict:
    doc = load_document(scenario)
    for o in overrides:
        apply_override(doc, o)
    return doc


def _outdir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {path}: {e.strerror}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def write_run(trajectory: TrajectoryLog, out_dir: str) -> None:
    with open(os.path.join(out_dir, "trajectory.csv"), "w", newline="") as fp:
        trajectory.write_trajectory_csv(fp)
    with open(os.path.join(out_dir, "pairs.csv"), "w", newline="") as fp:
        trajectory.write_pairs_csv(fp)
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fp:
        fp.write(trajectory.metrics_line() + "\n")


# --- commands -------------------------------------------------------------------

def cmd_run(scenario: str, out_dir: str, overrides: Sequence[str] = ()) -> int:
    doc = _prepare(scenario, overrides)
    scene, config, targets = build(doc)
    out_dir = _outdir(out_dir)
    write_yaml(resolved_document(scene, config, targets, scenario), os.path.join(out_dir, "config.resolved.yaml"))
    trajectory = run(scene, config, targets)
    write_run(trajectory, out_dir)
    print(trajectory.metrics_line())
    return EXIT_SAFETY if trajectory.metrics.collision_occurred else EXIT_OK


def _trial(doc: dict, seed: int) -> dict:
    doc = copy.deepcopy(doc)
    doc.setdefault("sim", {})["seed"] = seed
    if doc.get("scenario") == "ramp":
        doc.setdefault("ramp", {})["randomize"] = True
    scene, config, targets = build(doc)
    m = run(scene, config, targets).metrics
    return {"seed": seed, "min_pairwise_distance": m.min_pairwise_distance, "collision": m.collision_occurred,
            "relaxed_step_count": m.relaxed_step_count, "proof_violations": m.proof_violations,
            "completion_time": m.completion_time}


def cmd_trials(scenario: str, n: int, seed0: int, out_dir: str, overrides: Sequence[str] = (),
               jobs: int = 1) -> int:
    """Run ``n`` seeded instances (randomised starts for the ramp) and tabulate the closest approach."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    doc = _prepare(scenario, overrides)
    scene, config, targets = build(doc)
    out_dir = _outdir(out_dir)
    write_yaml(doc, os.path.join(out_dir, "config.trials.yaml"))
    write_yaml(resolved_document(scene, config, targets, scenario), os.path.join(out_dir, "config.resolved.yaml"))
    seeds = [seed0 + k for k in range(n)]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_trial, [doc] * n, seeds))
    else:
        rows = [_trial(doc, s) for s in seeds]
    fields = ["trial", "seed", "min_pairwise_distance", "collision", "relaxed_step_count", "proof_violations",
              "completion_time"]
    with open(os.path.join(out_dir, "trials.csv"), "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(fields)
        for k, r in enumerate(rows):
            ct = r["completion_time"]
            w.writerow([k, r["seed"], repr(r["min_pairwise_distance"]), int(r["collision"]),
                        r["relaxed_step_count"], r["proof_violations"], "" if ct is None else repr(ct)])
    worst = min(r["min_pairwise_distance"] for r in rows)
    collisions = sum(r["collision"] for r in rows)
    print(f"trials={n} min_pairwise_distance={worst!r} collisions={collisions}")
    return EXIT_SAFETY if collisions else EXIT_OK


def parse_agent(text: str, agent_id: int, like: AgentState | None = None) -> AgentState:
    """``x,y[,vx,vy[,radius[,gamma[,sigma]]]]``; missing fields copy ``like``."""
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--add-agent {text!r}: expected comma-separated numbers") from None
    if len(vals) not in (2, 4, 5, 6, 7):
        raise ConfigError(f"--add-agent {text!r}: expected x,y[,vx,vy[,radius[,gamma[,sigma]]]]")
    vel = Vec2(vals[2], vals[3]) if len(vals) >= 4 else Vec2(0.0, 0.0)
    radius = vals[4] if len(vals) >= 5 else (like.safety_radius if like else 0.0)
    gamma = vals[5] if len(vals) >= 6 else (like.gamma if like else 1.0)
    noise = NoiseModel.isotropic(vals[6]) if len(vals) >= 7 else (like.noise if like else NoiseModel())
    return AgentState(agent_id, Vec2(vals[0], vals[1]), vel, radius, gamma, noise)


def cmd_riskmap(scenario: str, bounds: Sequence[float], resolution: int, out_dir: str,
                overrides: Sequence[str] = (), add_agents: Sequence[str] = (), stages: bool = False,
                probe_radius: float = 0.0) -> int:
    """Render the scene's risk map; ``stages`` writes one map per agent prefix (1, 2, ... N agents)."""
    doc = _prepare(scenario, overrides)
    scene, config, targets = build(doc)
    agents = list(scene.agents)
    for text in add_agents:
        agents.append(parse_agent(text, max(a.id for a in agents) + 1, agents[-1]))
    try:
        rect = Rect.of(bounds)
    except ValueError as e:
        raise ConfigError(f"--bounds: {e}") from None
    full = Scene(tuple(agents), config.alpha, scene.loss_offset_c)
    c = grid_loss_offset(full, rect)
    out_dir = _outdir(out_dir)
    write_yaml(resolved_document(full, config, list(targets) + [a.position for a in agents[len(targets):]],
                                 scenario), os.path.join(out_dir, "config.resolved.yaml"))
    panels = [(f"riskmap_{k}", agents[:k]) for k in range(1, len(agents) + 1)] if stages else [("riskmap", agents)]
    for stem, group in panels:
        grid = compute_grid(group, rect, resolution, config.alpha, probe_radius, config.convention, c)
        meta = export_all(group, grid, rect, out_dir, stem)
        print(f"{stem}: {grid.width}x{grid.height} min={meta['min']!r} max={meta['max']!r}")
    return EXIT_OK


def cmd_compare(scenario: str, controllers: Sequence[str], out_dir: str, overrides: Sequence[str] = ()) -> int:
    doc = _prepare(scenario, overrides)
    out_dir = _outdir(out_dir)
    logs = []
    for text in controllers:
        d = copy.deepcopy(doc)
        d.setdefault("sim", {})["controller"] = text
        scene, config, targets = build(d)
        label = str(config.controller)
        sub = _outdir(os.path.join(out_dir, label.replace(":", "_")))
        write_yaml(resolved_document(scene, config, targets, scenario), os.path.join(sub, "config.resolved.yaml"))
        trajectory = run(scene, config, targets, label=label)
        write_run(trajectory, sub)
        logs.append(trajectory)
    table = compare(logs)
    with open(os.path.join(out_dir, "compare.csv"), "w", newline="") as fp:
        table.to_csv(fp)
    print(table.format())
    return EXIT_SAFETY if any(t.metrics.collision_occurred for t in logs) else EXIT_OK


# --- argument parsing -----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {text}")
    return v


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--scenario", default="swap", help="swap, ramp or file:<path.yaml>")
    p.add_argument("--controller", help="risk-aware, fixed:<w> or centralized")
    if seed:
        p.add_argument("--seed", type=_u64)
    p.add_argument("--alpha", type=float)
    p.add_argument("--convention", choices=["conservative", "paper-literal"])
    p.add_argument("--dt", type=float)
    p.add_argument("--out", default="out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. sim.horizon_steps=2000")


def _overrides(args: argparse.Namespace) -> list[str]:
    out = []
    for flag, key in (("controller", "sim.controller"), ("seed", "sim.seed"), ("alpha", "sim.alpha"),
                      ("convention", "sim.convention"), ("dt", "sim.dt")):
        v = getattr(args, flag, None)
        if v is not None:
            out.append(f"{key}={v}")
    return out + list(args.set)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cbf-swarm", description="Risk-aware decentralized CBF safety filter simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="simulate one scenario")
    _common(p)

    p = sub.add_parser("trials", help="batch of seeded randomized runs")
    _common(p, seed=False)
    p.add_argument("-n", type=int, default=50)
    p.add_argument("--seed0", type=_u64, default=0)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("riskmap", help="render a risk map")
    _common(p)
    p.add_argument("--bounds", type=_floats, required=True, help="xmin,ymin,xmax,ymax")
    p.add_argument("--resolution", type=int, default=200)
    p.add_argument("--add-agent", action="append", default=[], metavar="X,Y[,VX,VY[,R[,GAMMA[,SIGMA]]]]")
    p.add_argument("--stages", action="store_true", help="one map per agent prefix")
    p.add_argument("--probe-radius", type=float, default=0.0)

    p = sub.add_parser("compare", help="run several controllers on one seed and tabulate")
    _common(p)
    p.add_argument("--controllers", default="risk-aware,fixed:0.5")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("CBF_SWARM_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _glue_values(argv: Sequence[str]) -> list[str]:
    # argparse reads "-5,-5,5,5" as an option; glue such values onto their flag
    out = []
    it = iter(argv)
    for tok in it:
        if tok in ("--bounds", "--add-agent"):
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = make_parser()
    args = parser.parse_args(_glue_values(sys.argv[1:] if argv is None else argv))
    try:
        if args.command == "run":
            return cmd_run(args.scenario, args.out, _overrides(args))
        if args.command == "trials":
            return cmd_trials(args.scenario, args.n, args.seed0, args.out, _overrides(args), args.jobs)
        if args.command == "riskmap":
            if len(args.bounds) != 4:
                raise ConfigError("--bounds needs four numbers xmin,ymin,xmax,ymax")
            if args.resolution < 2:
                raise ConfigError(f"--resolution must be >= 2, got {args.resolution}")
            return cmd_riskmap(args.scenario, args.bounds, args.resolution, args.out, _overrides(args),
                               args.add_agent, args.stages, args.probe_radius)
        if args.command == "compare":
            return cmd_compare(args.scenario, [c for c in args.controllers.split(",") if c], args.out,
                               _overrides(args))
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
