"""Brute-force references: grid-exact Gibbs expectations and Fenchel menu reconstruction."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .mechanism import PricingRule
from .problems import MechanismProblem, designer_value

MAX_GRID_POINTS = 10_000_000


def compensated_sum(values: np.ndarray) -> float:
    return math.fsum(np.asarray(values, dtype=np.float64).ravel())


def unit_grid(N: int, m: int) -> np.ndarray:
    """Cell midpoints ``(k + 0.5) / N`` of ``[0, 1]^m``, shape ``(N^m, m)``."""
    if N ** m > MAX_GRID_POINTS:
        raise ValueError(f"grid of {N}^{m} points exceeds {MAX_GRID_POINTS}")
    axis = (np.arange(N) + 0.5) / N
    return np.stack(np.meshgrid(*([axis] * m), indexing="ij"), axis=-1).reshape(-1, m)


@dataclass
class GibbsResult:
    points: np.ndarray  # (K, m) grid outcomes
    weights: np.ndarray  # (K,) normalised Gibbs weights
    log_z: float  # log of the grid partition sum (cell volume included)
    mean: np.ndarray  # (m,)
    var: np.ndarray  # (m,)
    eu: float  # E[u0] under the weights


class GridOracle:
    """Exact Gibbs distribution ``q(x) ~ exp(beta * u(x))`` on a midpoint grid (one player).

    ``utility`` maps ``(K, m)`` outcomes to ``(K,)`` player utilities and
    ``designer`` (optional) to designer utilities; both are plain numpy.
    """

    def __init__(self, m: int, N: int = 2001):
        if m > 2:
            raise ValueError("grid oracle supports at most two goods")
        self.m, self.N = m, N
        self.points = unit_grid(N, m)

    def gibbs(self, utility: Callable[[np.ndarray], np.ndarray], beta: float,
              designer: Callable[[np.ndarray], np.ndarray] | None = None) -> GibbsResult:
        u = np.asarray(utility(self.points), dtype=np.float64)
        if not np.all(np.isfinite(u)):
            raise FloatingPointError("non-finite utility on the grid")
        a = beta * u
        shift = a.max()
        e = np.exp(a - shift)
        z = compensated_sum(e)
        w = e / z
        log_z = shift + math.log(z) - self.m * math.log(self.N)
        mean = np.array([compensated_sum(w * self.points[:, j]) for j in range(self.m)])
        var = np.array([compensated_sum(w * (self.points[:, j] - mean[j]) ** 2) for j in range(self.m)])
        eu = compensated_sum(w * designer(self.points)) if designer is not None else float("nan")
        return GibbsResult(self.points, w, log_z, mean, var, eu)

    def sample(self, result: GibbsResult, size: int, rng: np.random.Generator) -> np.ndarray:
        """Exact draws from the discrete Gibbs distribution on the grid points."""
        cdf = np.cumsum(result.weights)
        idx = np.searchsorted(cdf, rng.uniform(0.0, cdf[-1], size), side="right")
        return self.points[np.minimum(idx, len(cdf) - 1)]


def menu_utilities(rule: PricingRule, problem: MechanismProblem, t_i: np.ndarray):
    """Player and designer utility callables for a single-player menu at type ``t_i``."""
    t_i = np.asarray(t_i, dtype=np.float64)

    def player(x):
        return x @ t_i - rule.value(x)

    def designer(x):
        p = rule.value(x)
        return designer_value(problem, x[:, None, :]).value + p

    return player, designer


def grid_gibbs(oracle: GridOracle, rule: PricingRule, problem: MechanismProblem, t_i, beta: float
               ) -> GibbsResult:
    player, designer = menu_utilities(rule, problem, t_i)
    return oracle.gibbs(player, beta, designer)


def exact_objective_grad(oracle: GridOracle, rule: PricingRule, problem: MechanismProblem, t_i,
                         beta: float, h: float = 1e-5) -> np.ndarray:
    """``d E_q[u0] / d theta`` by central differences of the grid expectation."""
    return ad.numerical_grad(lambda: grid_gibbs(oracle, rule, problem, t_i, beta).eu, rule.net.params, h=h)


def truncated_exponential_moments(c: float) -> tuple[float, float]:
    """Mean and variance of the density ``exp(c a)`` on ``[0, 1]``."""
    if abs(c) < 1e-8:
        return 0.5, 1.0 / 12.0
    ec = math.expm1(c)
    mean = (math.exp(c) * (c - 1.0) + 1.0) / (c * ec)
    second = (math.exp(c) * (c * c - 2 * c + 2) - 2) / (c * c * ec)
    return mean, second - mean * mean


def truncated_exponential_cdf(a, c: float):
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    if abs(c) < 1e-8:
        return a
    return np.expm1(c * a) / math.expm1(c)


# -- Fenchel reconstruction ------------------------------------------------------------


def tabulate_direct(mechanism: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]], m: int, N: int,
                    lo: float = 0.0, hi: float = 1.0):
    """Evaluate a single-player direct mechanism on a ``N^m`` type grid (endpoints included).

    Returns ``(types, truthful utilities)``; ``mechanism`` maps ``(K, m)``
    types to ``(x (K, m), p (K,))``.
    """
    if N ** m > MAX_GRID_POINTS:
        raise ValueError(f"type grid of {N}^{m} points exceeds {MAX_GRID_POINTS}")
    axis = np.linspace(lo, hi, N)
    types = np.stack(np.meshgrid(*([axis] * m), indexing="ij"), axis=-1).reshape(-1, m)
    x, p = mechanism(types)
    util = np.sum(types * x, axis=1) - p
    return types, util


def fenchel_menu_from_direct(types: np.ndarray, truthful_utility: np.ndarray, x,
                             cost: Callable[[np.ndarray], np.ndarray] | None = None,
                             chunk: int = 256) -> np.ndarray:
    """``p(x) = c(x) + max_t [<t, x> - u(t)]`` over the tabulated types."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty(x.shape[0])
    for s in range(0, len(x), chunk):
        block = x[s:s + chunk]
        out[s:s + chunk] = np.max(block @ types.T - truthful_utility[None, :], axis=1)
    if cost is not None:
        out += cost(x)
    return out


def posted_price_mechanism(prices):
    """Direct mechanism of per-good posted prices (buy when the value covers the price)."""
    prices = np.asarray(prices, dtype=np.float64)

    def mech(types):
        x = (types >= prices).astype(np.float64)
        return x, x @ prices

    return mech
