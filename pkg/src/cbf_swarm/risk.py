"""Pairwise safety values, CVaR-augmented safety losses and aggregated risk."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import IO

from .core import AgentState, InvalidArgument, Scene, pair_gamma, pair_safety_radius
from .uncertainty import CvarConvention, noise_budget_term

log = logging.getLogger(__name__)


def safety_value(i: AgentState, j: AgentState) -> float:
    """Barrier ``h_ij = |x_i - x_j|^2 - R_safe^2``; positive iff strictly safe."""
    if i.id == j.id:
        raise InvalidArgument(f"safety_value needs two distinct agents, got id {i.id} twice")
    r = pair_safety_radius(i, j)
    return (i.position - j.position).norm_sq() - r * r


def safety_loss(i: AgentState, j: AgentState, alpha: float, c: float,
                convention: CvarConvention = CvarConvention.PAPER_LITERAL) -> float:
    """Loss ``L_ij = -2 d.(u_i - u_j) - 2 sigma - gamma h_ij + c`` with ``d = x_i - x_j``.

    ``u`` is each agent's currently observed velocity. ``sigma`` is the noise
    term under ``convention``; with the default the expression matches the
    printed loss term for term. Equivalently ``L_ij = c - (b_raw - a.(u_i - u_j))``
    where ``a, b_raw`` are the pair's CBF constraint data.
    """
    h = safety_value(i, j)
    d = i.position - j.position
    approach = d.dot(i.velocity - j.velocity)
    sigma = noise_budget_term(d, i.noise, j.noise, alpha, convention)
    return -2.0 * approach - 2.0 * sigma - pair_gamma(i, j) * h + c


@dataclass(frozen=True)
class RiskReport:
    pair_loss: tuple[tuple[float, ...], ...]
    agent_risk: tuple[float, ...]
    timestamp: int = 0
    ids: tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return len(self.agent_risk)

    def to_csv(self, fp: IO[str], header: bool = True) -> None:
        """One ``pair`` row per ordered pair, then one ``agent`` row per agent."""
        w = csv.writer(fp, lineterminator="\n")
        if header:
            w.writerow(["record", "step", "i", "j", "value"])
        ids = self.ids or tuple(range(self.n))
        for a in range(self.n):
            for b in range(self.n):
                if a != b:
                    w.writerow(["pair", self.timestamp, ids[a], ids[b], repr(self.pair_loss[a][b])])
        for a in range(self.n):
            w.writerow(["agent", self.timestamp, ids[a], "", repr(self.agent_risk[a])])


def evaluate_scene_risk(scene: Scene, convention: CvarConvention = CvarConvention.PAPER_LITERAL,
                        step: int = 0, cutoff: float = math.inf) -> RiskReport:
    """Fill the loss matrix for every ordered pair and sum each row.

    ``cutoff`` drops pairs farther apart than the given distance; the default
    keeps the full all-pairs sum. Anything finite is an approximation.
    """
    agents = scene.agents
    n = len(agents)
    c = scene.loss_offset_c
    loss = [[0.0] * n for _ in range(n)]
    cutoff_sq = cutoff * cutoff if math.isfinite(cutoff) else math.inf
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            if cutoff_sq < math.inf and (agents[a].position - agents[b].position).norm_sq() > cutoff_sq:
                continue
            loss[a][b] = safety_loss(agents[a], agents[b], scene.alpha, c, convention)
    # fsum is exactly rounded, so the row sums do not depend on agent order
    risk = tuple(math.fsum(row) for row in loss)
    nonpos = [(agents[a].id, agents[b].id) for a in range(n) for b in range(n)
              if a != b and loss[a][b] <= 0.0 and cutoff_sq == math.inf]
    if nonpos:
        log.warning("step %d: non-positive pair loss for %s; raise loss_offset_c", step, nonpos[:4])
    return RiskReport(tuple(tuple(r) for r in loss), risk, step, tuple(a.id for a in agents))
