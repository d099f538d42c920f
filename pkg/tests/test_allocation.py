import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cbf_swarm.allocation import pairwise_weights, smooth_weight
from cbf_swarm.core import InvalidArgument

risks = st.floats(0.0, 1e12)
positive = st.floats(1e-6, 1e12)


@pytest.mark.parametrize("ri, rj, expected", [(7, 7, (0.5, 0.5)), (3, 1, (0.25, 0.75)), (0, 0, (0.5, 0.5))])
def test_examples(ri, rj, expected):
    assert pairwise_weights(ri, rj) == expected


def test_negative_rejected():
    with pytest.raises(InvalidArgument):
        pairwise_weights(-1.0, 2.0)


@given(risks, risks)
def test_partition_and_range(ri, rj):
    wi, wj = pairwise_weights(ri, rj)
    assert abs(wi + wj - 1.0) <= 1e-12
    assert 0.0 <= wi <= 1.0 and 0.0 <= wj <= 1.0


@given(positive, positive)
def test_higher_risk_gets_smaller_share(ri, rj):
    wi, wj = pairwise_weights(ri, rj)
    if ri > rj:
        assert wi <= wj
    elif rj > ri:
        assert wj <= wi


@given(positive, positive, st.floats(1e-3, 1e3))
def test_scale_invariance(ri, rj, s):
    assert pairwise_weights(s * ri, s * rj)[0] == pytest.approx(pairwise_weights(ri, rj)[0], rel=1e-12, abs=1e-15)


@given(st.floats(1.0, 1e6), st.floats(1.0, 1e6), st.floats(1e-3, 1e3))
def test_anti_monotone(ri, rj, bump):
    assert pairwise_weights(ri + bump, rj)[0] < pairwise_weights(ri, rj)[0]


def test_bulk_speed():
    rng = np.random.default_rng(0)
    pairs = rng.uniform(0, 1e6, size=(100_000, 2))
    t0 = time.perf_counter()
    out = [pairwise_weights(a, b) for a, b in pairs.tolist()]
    assert time.perf_counter() - t0 < 1.0
    assert max(abs(a + b - 1.0) for a, b in out) <= 1e-12


def test_smoothing():
    assert smooth_weight(None, 0.3, 0.9) == 0.3
    assert smooth_weight(0.5, 0.3, 0.0) == 0.3
    assert smooth_weight(0.5, 0.3, 0.5) == pytest.approx(0.4)
    with pytest.raises(InvalidArgument):
        smooth_weight(0.5, 0.3, 1.0)
