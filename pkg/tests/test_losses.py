import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pnnet import losses
from pnnet.errors import DataError, NonFiniteError

import oracles

dist = st.floats(0.0, 20.0, allow_nan=False)


def test_softpn_reference_value():
    # soft negative is min(3, 2) = 2; both terms equal 1 / (1 + e)^2
    expected = 2.0 / (1.0 + math.e) ** 2
    assert losses.softpn_loss(1.0, 3.0, 2.0) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.144659, abs=1e-6)


def test_symmetric_case_is_half():
    assert losses.softpn_loss(1.5, 1.5, 4.0) == pytest.approx(0.5, abs=1e-12)


def test_large_margin_drives_loss_to_zero():
    assert losses.softpn_loss(0.0, 50.0, 60.0) < 1e-40
    assert losses.softpn_loss(50.0, 0.0, 0.0) == pytest.approx(2.0)


@settings(max_examples=300, deadline=None)
@given(dist, dist, dist)
def test_terms_equal_and_range(d_pos, d1, d2):
    d_star, _ = losses.soft_negative(d1, d2)
    t1, t2 = losses.ratio_terms(d_pos, d_star)
    assert abs(t1 - t2) < 1e-12
    value = losses.softpn_loss(d_pos, d1, d2)
    assert 0.0 <= value < 2.0


@settings(max_examples=200, deadline=None)
@given(dist, dist, dist)
def test_negative_swap_symmetry(d_pos, d1, d2):
    assert losses.softpn_loss(d_pos, d1, d2) == losses.softpn_loss(d_pos, d2, d1)


@settings(max_examples=200, deadline=None)
@given(dist, dist, dist)
def test_agrees_with_softmax_ratio_when_first_negative_is_smaller(d_pos, d1, d2):
    d1, d2 = min(d1, d2), max(d1, d2)
    assert losses.softpn_loss(d_pos, d1, d2) == losses.softmax_ratio_loss(d_pos, d1, d2)


def test_softpn_is_never_above_softmax_ratio():
    rng = np.random.default_rng(3)
    d = rng.uniform(0, 4, size=(3, 1000))
    assert np.all(losses.softpn_loss(*d) >= losses.softmax_ratio_loss(*d) - 1e-15)


def test_softpn_backward_routes_to_selected_negative():
    g_pos, g1, g2 = losses.softpn_backward(np.array([1.0, 1.0]), np.array([2.0, 3.0]),
                                           np.array([3.0, 2.0]))
    assert g1[0] != 0 and g2[0] == 0
    assert g1[1] == 0 and g2[1] != 0
    np.testing.assert_allclose(g_pos, [-g1[0], -g2[1]])
    assert np.all(g_pos > 0)


def test_softpn_tie_routes_to_first_negative():
    _, g1, g2 = losses.softpn_backward(1.0, 2.0, 2.0)
    assert g1 != 0 and g2 == 0


def test_softmax_ratio_ignores_second_negative():
    a = losses.softmax_ratio_loss(1.0, 2.0, 0.1)
    b = losses.softmax_ratio_loss(1.0, 2.0, 9.0)
    assert a == b
    _, _, g2 = losses.softmax_ratio_backward(1.0, 2.0, 0.1)
    assert g2 == 0


def test_hinge_values():
    d = np.array([0.5, 0.5, 2.5, 2.0])
    lab = np.array([1, -1, -1, -1])
    np.testing.assert_allclose(losses.hinge_embedding_loss(d, lab), [0.5, 1.5, 0.0, 0.0])
    np.testing.assert_allclose(losses.hinge_embedding_backward(d, lab), [1.0, -1.0, 0.0, 0.0])
    assert losses.hinge_embedding_loss(1.0, -1, margin=3.0) == 2.0


def test_hinge_rejects_bad_input():
    with pytest.raises(DataError):
        losses.hinge_embedding_loss(1.0, 0)
    with pytest.raises(ValueError):
        losses.hinge_embedding_loss(1.0, 1, margin=0.0)


@pytest.mark.parametrize("fn", [losses.softpn_loss, losses.softpn_backward,
                                losses.softmax_ratio_loss])
def test_nonfinite_distance_raises(fn):
    with pytest.raises(NonFiniteError):
        fn(np.nan, 1.0, 2.0)


def test_batch_loss_is_mean():
    assert losses.batch_loss([1.0, 2.0, 6.0]) == 3.0
    with pytest.raises(ValueError):
        losses.batch_loss([])


@pytest.mark.parametrize("name", sorted(oracles.LOSS_CASES))
def test_loss_gradients(name):
    rng = np.random.default_rng(11)
    assert max(oracles.LOSS_CASES[name](rng) for _ in range(50)) < oracles.TOL


def test_loss_registry():
    assert set(losses.LOSS_NAMES) == {"softpn", "softmax-ratio", "hinge"}
