import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crossloc.embed.loss import loss_from_distances, triplet_loss


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def test_equal_distances_give_ln2():
    p = unit([1, 0, 0])
    q = unit([0, 1, 0])
    r = unit([0, 0, 1])
    assert abs(triplet_loss(p, q, r, 5.0) - math.log(2)) <= 1e-9


def test_anchor_value_alpha5():
    # d_pos = 0, d_neg = 1
    assert abs(float(loss_from_distances(0.0, 1.0, 5.0)) - math.log1p(math.exp(-5))) <= 1e-9


def test_large_margin_does_not_overflow():
    val = float(loss_from_distances(200.0, 0.0, 5.0))
    assert math.isfinite(val) and val == pytest.approx(1000.0)


@given(st.floats(0, 2), st.floats(0, 2), st.floats(1e-3, 1.0))
def test_loss_positive_and_monotone(dp, dn, eps):
    base = float(loss_from_distances(dp, dn, 5.0))
    assert base > 0
    assert float(loss_from_distances(dp + eps, dn, 5.0)) > base
    assert float(loss_from_distances(dp, dn + eps, 5.0)) < base
