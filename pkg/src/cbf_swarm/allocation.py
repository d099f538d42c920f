"""Risk-based pairwise responsibility weights."""

from __future__ import annotations

from .core import InvalidArgument


def pairwise_weights(risk_i: float, risk_j: float) -> tuple[float, float]:
    """Split a pair's CBF budget: ``w_i = R_j / (R_i + R_j)``.

    The agent facing more risk gets the smaller share and hence the tighter
    constraint. Both risks zero gives an equal split.
    """
    if risk_i < 0 or risk_j < 0:
        raise InvalidArgument(f"risks must be non-negative, got {risk_i}, {risk_j}")
    total = risk_i + risk_j
    if total == 0.0:
        return 0.5, 0.5
    w_i = risk_j / total
    # derive w_j from w_i so the pair sums to 1 with a single rounding
    return w_i, 1.0 - w_i


def smooth_weight(previous: float | None, current: float, beta: float) -> float:
    """Exponential smoothing ``beta * previous + (1 - beta) * current``.

    ``beta = 0`` (the default everywhere) returns ``current`` unchanged. Only
    safe to use when both agents of a pair smooth with the same ``beta`` and the
    same history, otherwise the shares no longer sum to one.
    """
    if not 0.0 <= beta < 1.0:
        raise InvalidArgument(f"beta must lie in [0, 1), got {beta}")
    if previous is None or beta == 0.0:
        return current
    return beta * previous + (1.0 - beta) * current
