import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convexmenu.mechanism import PricingRule
from convexmenu.networks import PartialGroupMaxNet, PgmnSpec
from convexmenu.oracles import (
    GridOracle,
    fenchel_menu_from_direct,
    grid_gibbs,
    posted_price_mechanism,
    tabulate_direct,
    truncated_exponential_cdf,
    truncated_exponential_moments,
    unit_grid,
)
from convexmenu.problems import MechanismProblem


def test_zero_temperature_is_uniform():
    res = GridOracle(1, 2001).gibbs(lambda x: np.sin(7 * x[:, 0]), 0.0)
    np.testing.assert_allclose(res.weights, 1 / 2001, rtol=1e-12)


def test_high_temperature_concentrates_at_argmax():
    oracle = GridOracle(1, 2001)
    res = oracle.gibbs(lambda x: -50 * (x[:, 0] - 0.3) ** 2, 1e6)
    near = np.abs(res.points[:, 0] - 0.3) <= 1.0 / 2001
    assert res.weights[near].sum() >= 0.99


@pytest.mark.parametrize("t, beta", [(0.8, 8.0), (0.3, 2.0), (-0.5, 10.0)])
def test_linear_utility_mean_matches_closed_form(t, beta):
    res = GridOracle(1, 2001).gibbs(lambda x: t * x[:, 0], beta)
    mean, var = truncated_exponential_moments(beta * t)
    c = beta * t
    assert mean == pytest.approx((np.exp(c) * (c - 1) + 1) / (c * np.expm1(c)), rel=1e-12)
    assert abs(res.mean[0] - mean) <= 1e-6
    assert abs(res.var[0] - var) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.floats(-20, 20), st.floats(0, 50))
def test_weights_are_normalised(t, beta):
    res = GridOracle(2, 101).gibbs(lambda x: t * x[:, 0] - x[:, 1] ** 2, beta)
    assert abs(res.weights.sum() - 1.0) <= 1e-12
    assert np.all(res.weights >= 0)


def test_truncated_exponential_cdf_endpoints():
    np.testing.assert_allclose(truncated_exponential_cdf([0.0, 1.0], 3.0), [0.0, 1.0])
    np.testing.assert_allclose(truncated_exponential_cdf(0.25, 0.0), 0.25)


def test_exact_samples_follow_weights():
    oracle = GridOracle(1, 11)
    res = oracle.gibbs(lambda x: x[:, 0], 3.0)
    draws = oracle.sample(res, 200_000, np.random.default_rng(0))
    freq = np.array([(np.abs(draws[:, 0] - p) < 1e-12).mean() for p in res.points[:, 0]])
    np.testing.assert_allclose(freq, res.weights, atol=0.005)


def test_grid_size_limit():
    with pytest.raises(ValueError):
        GridOracle(3)
    with pytest.raises(ValueError):
        unit_grid(4000, 2)


def test_menu_gibbs_designer_expectation():
    net = PartialGroupMaxNet(PgmnSpec.default(1, 1), seed=0)
    rule = PricingRule(net)
    res = grid_gibbs(GridOracle(1, 501), rule, MechanismProblem(1, 1), [0.6], 4.0)
    assert res.eu == pytest.approx(np.sum(res.weights * rule.value(res.points)), rel=1e-12)


def _zero_mechanism(types):
    return np.zeros_like(types), np.zeros(len(types))


def test_zero_mechanism_reconstructs_linear_price(rng):
    types, util = tabulate_direct(_zero_mechanism, 2, 21)
    x = rng.uniform(0, 1, (200, 2))
    np.testing.assert_allclose(fenchel_menu_from_direct(types, util, x), x.sum(axis=1), atol=1e-12)


def test_posted_price_round_trip(rng):
    prices = np.array([0.37, 0.61])
    types, util = tabulate_direct(posted_price_mechanism(prices), 2, 51)
    x = rng.uniform(0, 1, (1000, 2))
    err = np.abs(fenchel_menu_from_direct(types, util, x) - x @ prices)
    assert err.max() <= 0.02


def test_reconstruction_is_a_convex_menu(rng):
    types, util = tabulate_direct(posted_price_mechanism([0.2, 0.8]), 2, 41)
    assert fenchel_menu_from_direct(types, util, np.zeros(2))[0] == pytest.approx(0.0, abs=1e-12)
    a, b = rng.uniform(0, 1, (2, 1000, 2))
    lam = rng.uniform(0, 1, (1000, 1))
    p = lambda x: fenchel_menu_from_direct(types, util, x)
    assert np.all(p(lam * a + (1 - lam) * b) <= lam[:, 0] * p(a) + (1 - lam[:, 0]) * p(b) + 1e-12)


def test_player_cost_is_added(rng):
    types, util = tabulate_direct(_zero_mechanism, 1, 11)
    x = rng.uniform(0, 1, (10, 1))
    out = fenchel_menu_from_direct(types, util, x, cost=lambda x: -0.5 * x[:, 0])
    np.testing.assert_allclose(out, 0.5 * x[:, 0], atol=1e-12)
