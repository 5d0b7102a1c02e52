import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convexmenu import autodiff as ad
from convexmenu.problems import (
    MechanismProblem,
    designer_utility,
    designer_value,
    player_utility,
    sample_types,
)
from conftest import fd_grad


@pytest.mark.parametrize("sid", ["U_1_2", "B_1_10", "C_3_10", "U_3_10_cp1", "B_3_10_cd0.5",
                                 "C_3_10_cp1_cd0.5", "U_3_10_revI", "U_3_10_revD"])
def test_setting_id_round_trip(sid):
    assert MechanismProblem.from_setting_id(sid).setting_id == sid


@pytest.mark.parametrize("sid", ["X_1_2", "U_1", "U_1_2_revQ", "", "U_0_2"])
def test_bad_setting_ids_rejected(sid):
    with pytest.raises(ValueError):
        MechanismProblem.from_setting_id(sid)


def test_invalid_fields_listed_together():
    with pytest.raises(ValueError) as exc:
        MechanismProblem(n=0, dist="weird", c_dup=-1)
    msg = str(exc.value)
    assert "n and m" in msg and "dist" in msg and "nonnegative" in msg


def test_bernoulli_types_are_binary():
    t = sample_types(MechanismProblem(3, 4, "bernoulli"), 1000, 0)
    assert set(np.unique(t)) <= {0.0, 1.0}


def test_correlated_types_share_a_center():
    t = sample_types(MechanismProblem(3, 5, "correlated"), 5000, 1)
    spread = t.max(axis=1) - t.min(axis=1)
    assert spread.max() <= 0.5
    assert t.min() >= 0 and t.max() <= 1


def test_uniform_mean_within_clt_band():
    t = sample_types(MechanismProblem(1, 2), 2**18, 2)
    np.testing.assert_allclose(t.mean(axis=(0, 1)), 0.5, atol=0.005)


def test_reverse_types_live_in_negative_box():
    t = sample_types(MechanismProblem.from_setting_id("U_3_10_revI"), 100, 3)
    assert t.min() >= -1 and t.max() <= 0


def test_sampling_is_reproducible():
    p = MechanismProblem(3, 2, "correlated")
    assert np.array_equal(sample_types(p, 64, 7), sample_types(p, 64, 7))


def test_player_utility_examples():
    p = MechanismProblem(1, 2)
    assert player_utility(p, np.array([[1.0, 0.0]]), 0.5, np.array([0.7, 0.2])).value[0] == pytest.approx(0.2)
    assert player_utility(p, np.zeros((1, 2)), 0.0, np.array([0.7, 0.2])).value[0] == 0.0
    rev = MechanismProblem(1, 3, reverse="indivisible")
    u = player_utility(rev, np.ones((1, 3)), -3.0, -np.ones(3)).value[0]
    assert u == pytest.approx(0.0)


def test_player_cost_enters_utility():
    p = MechanismProblem(1, 2, player_cost=lambda x: ad.scale(ad.sum(x, axis=-1), -0.1))
    u = player_utility(p, np.array([[1.0, 1.0]]), 0.5, np.array([0.5, 0.5])).value[0]
    assert u == pytest.approx(1.0 - 0.2 - 0.5)


def test_monopolist_designer_utility_is_revenue():
    p = MechanismProblem(1, 2)
    x = np.array([[[1.0, 0.3]]])
    assert designer_utility(p, x, np.array([[0.8]])).value[0] == pytest.approx(0.8)


def test_single_production_event_per_good():
    p = MechanismProblem(3, 1, c_prod=1.0)
    assert designer_value(p, np.ones((1, 3, 1))).value[0] == pytest.approx(-1.0)


def test_duplication_cost_per_unit():
    p = MechanismProblem(3, 2, c_dup=0.5)
    assert designer_value(p, np.ones((1, 3, 2))).value[0] == pytest.approx(-3.0)


def test_reverse_divisible_closed_form():
    p = MechanismProblem(2, 1, reverse="divisible")
    x = np.array([[[0.4], [0.6]]])
    u = designer_utility(p, x, np.array([[-0.25, -0.25]])).value[0]
    assert u == pytest.approx((1 - math.exp(-1)) - 0.5, abs=1e-12)
    assert u == pytest.approx(0.1321, abs=1e-4)


def test_reverse_indivisible_caps_each_good_at_one():
    p = MechanismProblem(3, 2, reverse="indivisible")
    x = np.array([[[1.0, 0.2], [1.0, 0.3], [0.0, 0.1]]])
    assert designer_value(p, x).value[0] == pytest.approx(1.0 + 0.6)


def test_designer_value_rejects_bad_shape():
    with pytest.raises(ValueError):
        designer_value(MechanismProblem(3, 2), np.zeros((4, 2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["U_3_2", "U_3_2_cp1_cd0.5", "U_3_2_revI", "U_3_2_revD"]), st.integers(0, 1000))
def test_designer_utility_has_unit_payment_slope(sid, seed):
    p = MechanismProblem.from_setting_id(sid)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (4, 3, 2))
    pay = rng.standard_normal((4, 3))
    base = designer_utility(p, x, pay).value
    for i in range(3):
        bumped = pay.copy()
        bumped[:, i] += 0.37
        np.testing.assert_allclose(designer_utility(p, x, bumped).value - base, 0.37, atol=1e-12)


@pytest.mark.parametrize("sid", ["U_3_2_cp1_cd0.5", "U_3_2_revD"])
def test_designer_value_gradient_matches_finite_differences(rng, sid):
    p = MechanismProblem.from_setting_id(sid)
    # distinct entries keep the production-cost max away from ties
    x = rng.permutation(np.linspace(0.05, 0.95, 12)).reshape(2, 3, 2)
    leaf = ad.Tensor(x, requires_grad=True)
    ad.backward(ad.sum(designer_value(p, leaf)))
    num = fd_grad(lambda v: designer_value(p, v).value.sum(), x)
    assert ad.relative_error(leaf.grad, num) < 1e-5
