"""Analytic baselines: VCG with designer boost, best bundle price, per-good optimal mechanism."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .problems import MechanismProblem, designer_utility, sample_types


# -- per-good welfare maximisation -------------------------------------------------


def max_welfare(problem: MechanismProblem, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Maximise ``v0_j(x) + sum_i a_i x_i`` over ``x in [0, 1]^n`` for one good.

    ``a`` has shape ``(B, n)``: per-player marginal values (types, or virtual
    values). Returns the maximiser ``(B, n)`` and the maximum ``(B,)``. Ties
    favour allocating; among equal sellers the lowest index wins.
    """
    a = np.asarray(a, dtype=np.float64)
    B, n = a.shape
    if problem.reverse == "none":
        net = a - problem.c_dup
        x = (net >= 0).astype(np.float64)
        gain = np.sum(np.maximum(net, 0.0), axis=1) - problem.c_prod
        produce = gain >= 0
        x[~produce] = 0.0
        return x, np.where(produce, gain, 0.0)
    v = problem.buyer_value
    x = np.zeros_like(a)
    if problem.reverse == "indivisible":
        best = np.argmax(a, axis=1)
        top = a[np.arange(B), best]
        buy = v + top >= 0
        x[np.arange(B)[buy], best[buy]] = 1.0
        return x, np.where(buy, v + top, 0.0)
    # divisible: fill from the cheapest seller while the marginal value exp(-s/v) covers -a_i
    order = np.argsort(-a, axis=1, kind="stable")
    s = np.zeros(B)
    for k in range(n):
        idx = order[:, k]
        ai = a[np.arange(B), idx]
        with np.errstate(divide="ignore"):
            target = np.where(ai < 0, -v * np.log(np.maximum(-ai, 1e-300)), np.inf)
        take = np.clip(target - s, 0.0, 1.0)
        x[np.arange(B), idx] = take
        s += take
    value = v * (1.0 - np.exp(-s / v)) + np.sum(a * x, axis=1)
    return x, value


def _goods(problem: MechanismProblem, t: np.ndarray):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 2:
        t = t[None]
    if t.shape[1:] != (problem.n, problem.m):
        raise ValueError(f"expected profiles of shape (B, {problem.n}, {problem.m}), got {t.shape}")
    return t


# -- VCG ---------------------------------------------------------------------------


def vcg(problem: MechanismProblem, t) -> tuple[np.ndarray, np.ndarray]:
    """Welfare-maximising allocation (designer value included) with Clarke payments.

    ``p_i = max_x SW_-i(x) - (SW(x*) - v_i(x*_i))`` where ``SW_-i`` prices
    player ``i`` at the worst type in its box.
    """
    t = _goods(problem, t)
    B, n, m = t.shape
    lo, _ = problem.type_box
    x = np.zeros_like(t)
    p = np.zeros((B, n))
    for j in range(m):
        a = t[:, :, j]
        xj, sw = max_welfare(problem, a)
        x[:, :, j] = xj
        for i in range(n):
            worst = a.copy()
            worst[:, i] = lo
            _, h = max_welfare(problem, worst)
            p[:, i] += h - (sw - a[:, i] * xj[:, i])
    return x, p


def vcg_expected_utility(problem: MechanismProblem, n_samples: int, seed: int) -> tuple[float, float]:
    t = sample_types(problem, n_samples, seed)
    x, p = vcg(problem, t)
    u0 = designer_utility(problem, x, p).value
    return float(u0.mean()), float(u0.std(ddof=1) / math.sqrt(len(u0))) if len(u0) > 1 else 0.0


# -- Bundle-OPT --------------------------------------------------------------------


@dataclass
class BundleResult:
    reserve: float
    eu: float
    n_samples: int
    seed: int


def bundle_opt(problem: MechanismProblem, n_samples: int = 2**18, seed: int = 0,
               grid: np.ndarray | None = None) -> BundleResult:
    """Best single bundle price, found by grid search on sampled profiles.

    Buyers: every player is offered all goods for ``r`` and accepts when its
    bundle value covers the price (ties accept). Indivisible reverse auctions:
    the cheapest seller sells its whole bundle if its cost is at most the
    reserve ``r`` and is paid ``min(r, second-lowest cost)``.
    """
    lo, hi = problem.type_box
    m, n = problem.m, problem.n
    if problem.reverse == "divisible":
        raise ValueError("bundle pricing is not defined for divisible reverse auctions")
    if grid is None:
        grid = np.linspace(0.0, m * max(abs(lo), abs(hi)), 4001)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty price grid")
    t = sample_types(problem, n_samples, seed)
    s = t.sum(axis=2)  # (N, n) bundle values
    N = len(s)
    if problem.reverse == "none":
        # k-th largest bundle value per profile decides whether at least k players accept
        kth = -np.sort(-s, axis=1)
        cols = [np.sort(kth[:, k]) for k in range(n)]

        def eu_at(r):
            at_least = [(N - np.searchsorted(c, r - 1e-12, side="left")) / N for c in cols]
            gains = [_bundle_gain(problem, r, k) for k in range(n + 1)]
            return sum((gains[k] - gains[k - 1]) * at_least[k - 1] for k in range(1, n + 1))
    else:
        cost = np.sort(-s, axis=1)
        c1 = cost[:, 0]
        c2 = cost[:, 1] if n > 1 else np.full(N, np.inf)
        value = m * problem.buyer_value

        def eu_at(r):
            win = c1 <= r + 1e-12
            return float(np.sum(np.where(win, value - np.minimum(r, c2), 0.0)) / N)

    best_r, best = float(grid[0]), -math.inf
    for r in grid:
        eu = eu_at(float(r))
        if eu > best + 1e-15:
            best_r, best = float(r), eu
    return BundleResult(best_r, float(best), N, seed)


def _bundle_gain(problem: MechanismProblem, r: float, k: int) -> float:
    """Designer utility when ``k`` buyers accept the bundle at price ``r``."""
    m = problem.m
    return (r - m * problem.c_dup) * k - (m * problem.c_prod if k else 0.0)


# -- Separable-OPT -----------------------------------------------------------------


@dataclass
class SeparableResult:
    prices: np.ndarray | None  # posted price per good (single player only)
    eu: float


def _survival(problem: MechanismProblem, p: float) -> float:
    """``P(t_ij >= p)`` for one coordinate."""
    lo, hi = problem.type_box
    u = (p - lo) / (hi - lo)
    if problem.dist == "uniform":
        return float(np.clip(1.0 - u, 0.0, 1.0))
    if problem.dist == "bernoulli":
        return 1.0 if u <= 0 else (0.5 if u <= 1 else 0.0)
    # shared centre U[.25,.75] plus U[-.25,.25]: triangular on [0, 1]
    if u <= 0:
        return 1.0
    if u >= 1:
        return 0.0
    return 1.0 - 2 * u * u if u <= 0.5 else 2 * (1 - u) ** 2


def _virtual_values(problem: MechanismProblem):
    """Support points, probabilities and virtual values of one coordinate (independent case)."""
    lo, hi = problem.type_box
    if problem.dist == "bernoulli":
        # two-point distribution: phi(hi) = hi, phi(lo) = lo - (hi - lo) * P(hi) / P(lo)
        return np.array([lo, hi]), np.array([0.5, 0.5]), np.array([lo - (hi - lo), hi])
    if problem.dist == "uniform":
        return None, None, lambda t: 2.0 * t - hi
    raise ValueError("virtual values need independent uniform or Bernoulli types")


def separable_opt(problem: MechanismProblem, grid: int = 256) -> SeparableResult:
    """Optimal mechanism run good by good, with its exact expected designer utility.

    One player: the optimal posted price per good. Several independent players:
    Myerson's rule per good (serve players with nonnegative virtual surplus when
    it covers the production cost), integrated on a product midpoint grid of
    ``grid`` points per player (exact sums for Bernoulli types).
    """
    n, m = problem.n, problem.m
    if n == 1 and problem.reverse == "none":
        c = problem.c_dup + problem.c_prod
        price, eu = _best_posted_price(problem, c)
        return SeparableResult(np.full(m, price), m * eu)
    if problem.dist == "correlated":
        raise ValueError("per-good optimal mechanism is undefined for types correlated across players")
    pts, probs, phi = _virtual_values(problem)
    if problem.reverse == "none" and problem.c_prod == 0:
        # without a production cost every player is served independently
        if pts is None:
            lo, hi = problem.type_box
            fine = 1_000_000
            pts = lo + (hi - lo) * (np.arange(fine) + 0.5) / fine
            probs = np.full(fine, 1.0 / fine)
            phi = phi(pts)
        per_player = math.fsum(probs * np.maximum(phi - problem.c_dup, 0.0))
        return SeparableResult(None, n * m * per_player)
    if pts is None:
        lo, hi = problem.type_box
        pts = lo + (hi - lo) * (np.arange(grid) + 0.5) / grid
        probs = np.full(grid, 1.0 / grid)
        vals = phi(pts)
    else:
        vals = phi
    if len(pts) ** n > 1e9:
        raise ValueError(f"product grid of {len(pts)}^{n} points is too large")
    if n == 1:
        rest, w_rest = np.zeros((1, 0)), np.ones(1)
    else:
        rest = np.stack(np.meshgrid(*([vals] * (n - 1)), indexing="ij"), axis=-1).reshape(-1, n - 1)
        w_rest = np.prod(np.stack(np.meshgrid(*([probs] * (n - 1)), indexing="ij"), axis=-1)
                         .reshape(-1, n - 1), axis=1)
    parts = []
    for v0, w0 in zip(vals, probs):  # one slab per value of the first player
        mesh = np.column_stack([np.full(len(rest), v0), rest])
        _, best = max_welfare(problem, mesh)
        parts.append(math.fsum(w0 * w_rest * best))
    return SeparableResult(None, m * math.fsum(parts))


def _best_posted_price(problem: MechanismProblem, cost: float) -> tuple[float, float]:
    lo, hi = problem.type_box
    if problem.dist == "uniform":
        p = (hi + cost) / 2.0 if cost < hi else hi
    elif problem.dist == "bernoulli":
        p = hi
    else:
        res = optimize.minimize_scalar(lambda q: -(q - cost) * _survival(problem, q),
                                       bounds=(max(lo, cost), hi), method="bounded",
                                       options={"xatol": 1e-12})
        p = float(res.x)
    eu = max(0.0, (p - cost) * _survival(problem, p))
    return float(p), eu


BASELINES = {
    "vcg": vcg_expected_utility,
    "bundle_opt": bundle_opt,
    "separable_opt": separable_opt,
}


def run_baseline(name: str, problem: MechanismProblem, n_samples: int = 2**18, seed: int = 0) -> dict:
    """Uniform report for the CLI and experiment runner."""
    if name == "vcg":
        eu, se = vcg_expected_utility(problem, n_samples, seed)
        return {"name": name, "eu": eu, "std_err": se, "n_samples": n_samples, "seed": seed}
    if name == "bundle_opt":
        r = bundle_opt(problem, n_samples, seed)
        return {"name": name, "eu": r.eu, "reserve": r.reserve, "n_samples": n_samples, "seed": seed}
    if name == "separable_opt":
        r = separable_opt(problem)
        prices = None if r.prices is None else r.prices.tolist()
        return {"name": name, "eu": r.eu, "prices": prices, "n_samples": None, "seed": None}
    raise ValueError(f"unknown baseline {name!r}; choose from {sorted(BASELINES)}")
