"""Agent-to-point risk over a grid.

A query point ``p`` is treated as a static, noise-free virtual agent; its risk
is the sum of its safety losses against every real agent. The grid path is a
vectorised copy of :func:`point_risk` and is tested against it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .core import AgentState, InvalidArgument, Scene, Vec2, default_loss_offset
from .risk import safety_loss
from .uncertainty import CvarConvention, tail_factor

COINCIDENT_TOL = 1e-9
_PROBE_ID = -1


@dataclass(frozen=True)
class Rect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self) -> None:
        vals = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgument(f"bounds must be finite, got {vals}")
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise InvalidArgument(f"degenerate bounds {vals}")

    @classmethod
    def of(cls, value: Rect | Sequence[float]) -> Rect:
        if isinstance(value, Rect):
            return value
        xmin, ymin, xmax, ymax = (float(v) for v in value)
        return cls(xmin, ymin, xmax, ymax)

    def corners(self) -> list[Vec2]:
        return [Vec2(self.xmin, self.ymin), Vec2(self.xmax, self.ymax)]


@dataclass(frozen=True)
class RiskGrid:
    """Risk sampled at cell centres.

    ``values[row, col]`` with row 0 at the top (``ymax``) so the array prints
    like the raster. ``origin`` is the lower-left corner of the bounds.
    """

    origin: Vec2
    cell_size: tuple[float, float]
    width: int
    height: int
    values: np.ndarray
    loss_offset_c: float = 0.0

    def __post_init__(self) -> None:
        if self.values.shape != (self.height, self.width):
            raise InvalidArgument(f"values shape {self.values.shape} != ({self.height}, {self.width})")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("risk grid contains non-finite values")

    def cell_center(self, row: int, col: int) -> Vec2:
        dx, dy = self.cell_size
        top = self.origin.y + self.height * dy
        return Vec2(self.origin.x + (col + 0.5) * dx, top - (row + 0.5) * dy)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        dx, dy = self.cell_size
        xs = self.origin.x + (np.arange(self.width) + 0.5) * dx
        ys = self.origin.y + self.height * dy - (np.arange(self.height) + 0.5) * dy
        return xs, ys


Agents = Scene | Sequence[AgentState]


def _unpack(scene: Agents, alpha: float | None, c: float | None) -> tuple[tuple[AgentState, ...], float, float]:
    # a risk map is meaningful for a lone agent, which a Scene cannot hold
    if isinstance(scene, Scene):
        agents, a0, c0 = scene.agents, scene.alpha, scene.loss_offset_c
    else:
        agents = tuple(scene)
        if not agents:
            raise InvalidArgument("a risk map needs at least one agent")
        a0, c0 = 0.95, default_loss_offset(agents)
    return agents, a0 if alpha is None else alpha, c0 if c is None else c


def _probe(agents: Sequence[AgentState], p: Vec2, probe_radius: float) -> AgentState:
    gamma = max(a.gamma for a in agents)
    pid = min(min(a.id for a in agents) - 1, _PROBE_ID)
    return AgentState(pid, p, Vec2(0.0, 0.0), probe_radius, gamma)


def point_risk(scene: Agents, p: Vec2 | Sequence[float], probe_radius: float = 0.0, alpha: float | None = None,
               convention: CvarConvention = CvarConvention.PAPER_LITERAL, c: float | None = None) -> float:
    """Sum of the probe's safety losses against every agent in ``scene``.

    The probe sits still, carries no noise and takes the largest agent gamma,
    so each pair uses the real agent's own gamma. A point within 1e-9 of an
    agent returns ``inf``; :func:`compute_grid` swaps that for the grid max.
    """
    p = Vec2.of(p)
    agents, alpha, c = _unpack(scene, alpha, c)
    if any((a.position - p).norm() <= COINCIDENT_TOL for a in agents):
        return math.inf
    probe = _probe(agents, p, probe_radius)
    return math.fsum(safety_loss(probe, a, alpha, c, convention) for a in agents)


def grid_loss_offset(scene: Agents, bounds: Rect) -> float:
    """An offset at least as large as the scene's that keeps losses positive over ``bounds``."""
    agents, _, c = _unpack(scene, None, None)
    return max(c, default_loss_offset(agents, bounds.corners()))


def risk_field(scene: Agents, xs: np.ndarray, ys: np.ndarray, probe_radius: float = 0.0,
               alpha: float | None = None, convention: CvarConvention = CvarConvention.PAPER_LITERAL,
               c: float | None = None) -> np.ndarray:
    """Vectorised :func:`point_risk` at points ``(xs, ys)`` (any matching shapes)."""
    agents, alpha, c = _unpack(scene, alpha, c)
    k = tail_factor(alpha)
    sign = 1.0 if convention is CvarConvention.PAPER_LITERAL else -1.0
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    total = np.zeros(np.broadcast(xs, ys).shape)
    hit = np.zeros(total.shape, dtype=bool)
    for a in agents:
        dx = xs - a.position.x
        dy = ys - a.position.y
        r = max(probe_radius, a.safety_radius)
        h = dx * dx + dy * dy - r * r
        # probe velocity is zero, so d.(u_probe - u_a) = -d.v_a
        approach = -(dx * a.velocity.x + dy * a.velocity.y)
        cov = a.noise.covariance
        var = np.maximum(cov.a * dx * dx + (cov.b + cov.c) * dx * dy + cov.d * dy * dy, 0.0)
        # CVaR of d.(0 - eps_a) under either orientation
        mean = -(dx * a.noise.mean.x + dy * a.noise.mean.y)
        sigma = mean + sign * np.sqrt(var) * k
        total += -2.0 * approach - 2.0 * sigma - a.gamma * h + c
        hit |= np.hypot(dx, dy) <= COINCIDENT_TOL
    total[hit] = np.inf
    return total


def compute_grid(scene: Agents, bounds: Rect | Sequence[float], resolution: int, alpha: float | None = None,
                 probe_radius: float = 0.0, convention: CvarConvention = CvarConvention.PAPER_LITERAL,
                 c: float | None = None) -> RiskGrid:
    """Evaluate the risk at the centre of each of ``resolution x resolution`` cells.

    ``c`` defaults to :func:`grid_loss_offset` so every pair loss on the grid
    stays positive. Cells on top of an agent get the largest finite value.
    """
    bounds = Rect.of(bounds)
    if resolution < 2:
        raise InvalidArgument(f"resolution must be >= 2, got {resolution}")
    c = grid_loss_offset(scene, bounds) if c is None else c
    dx = (bounds.xmax - bounds.xmin) / resolution
    dy = (bounds.ymax - bounds.ymin) / resolution
    xs = bounds.xmin + (np.arange(resolution) + 0.5) * dx
    ys = bounds.ymax - (np.arange(resolution) + 0.5) * dy
    values = risk_field(scene, xs[None, :], ys[:, None], probe_radius, alpha, convention, c)
    finite = np.isfinite(values)
    if not finite.all():
        if not finite.any():
            raise InvalidArgument("every grid cell coincides with an agent")
        values[~finite] = values[finite].max()
    return RiskGrid(Vec2(bounds.xmin, bounds.ymin), (dx, dy), resolution, resolution, values, c)


# --- export ---------------------------------------------------------------------

def normalize(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max scale to ``0..255``; a constant grid maps to all zeros."""
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint8), lo, hi
    scaled = np.rint((values - lo) / (hi - lo) * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8), lo, hi


def _sidecar(path: str) -> str:
    root, _ = os.path.splitext(path)
    return root + ".range.txt"


def export_raster(grid: RiskGrid, path: str) -> tuple[float, float]:
    """Write a binary P5 graymap plus ``<stem>.range.txt`` holding the min/max used."""
    pixels, lo, hi = normalize(grid.values)
    try:
        with open(path, "wb") as fp:
            fp.write(f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii"))
            fp.write(pixels.tobytes())
        with open(_sidecar(path), "w") as fp:
            fp.write(f"min {lo!r}\nmax {hi!r}\n")
    except OSError as e:
        raise OSError(e.errno, f"cannot write raster {path}: {e.strerror}") from e
    return lo, hi


def read_pgm(path: str) -> np.ndarray:
    """Minimal P5 reader for the files written by :func:`export_raster`."""
    with open(path, "rb") as fp:
        data = fp.read()
    head = data.split(b"\n", 3)
    if head[0] != b"P5":
        raise InvalidArgument(f"{path}: not a binary graymap")
    w, h = (int(v) for v in head[1].split())
    return np.frombuffer(head[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_grid_csv(grid: RiskGrid, fp: IO[str]) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["row", "col", "x", "y", "risk"])
    xs, ys = grid.centers()
    for r in range(grid.height):
        for col in range(grid.width):
            w.writerow([r, col, repr(float(xs[col])), repr(float(ys[r])), repr(float(grid.values[r, col]))])


def scene_hash(scene: Agents) -> str:
    agents, alpha, c = _unpack(scene, None, None)
    doc = {
        "alpha": alpha,
        "c": c,
        "agents": [[a.id, a.position.as_tuple(), a.velocity.as_tuple(), a.safety_radius, a.gamma,
                    a.noise.mean.as_tuple(), a.noise.covariance.as_lists()] for a in agents],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def export_all(scene: Agents, grid: RiskGrid, bounds: Rect, out_dir: str, stem: str = "riskmap") -> dict:
    """Write ``<stem>.csv``, ``<stem>.pgm`` and a one-line ``<stem>.meta.jsonl``."""
    with open(os.path.join(out_dir, stem + ".csv"), "w", newline="") as fp:
        write_grid_csv(grid, fp)
    lo, hi = export_raster(grid, os.path.join(out_dir, stem + ".pgm"))
    meta = {
        "bounds": [bounds.xmin, bounds.ymin, bounds.xmax, bounds.ymax],
        "resolution": grid.width,
        "min": lo,
        "max": hi,
        "loss_offset_c": grid.loss_offset_c,
        "scene_hash": scene_hash(scene),
    }
    with open(os.path.join(out_dir, stem + ".meta.jsonl"), "w") as fp:
        fp.write(json.dumps(meta, sort_keys=True) + "\n")
    return meta
