"""Menu mechanisms: prices, best responses, expected utility and regret."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .networks import PartialGroupMaxNet
from .problems import MechanismProblem, designer_utility, player_cost, sample_types

_PACK_BUDGET = 8_000_000  # doubles per pack chunk (64 MB)


@dataclass(frozen=True)
class SolverConfig:
    """Projected momentum ascent used to compute best responses."""

    iters: int = 5000
    lr0: float = 0.2
    lr1: float = 3e-4
    momentum: float = 0.9
    start: float = 0.5

    def __post_init__(self):
        if self.iters < 1 or self.lr0 <= 0 or self.lr1 <= 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid solver settings: {self}")
        if not 0.0 <= self.start <= 1.0:
            raise ValueError("warm start must lie in [0, 1]")


class PricingRule:
    """``p(x; t_-i) = f(x, t_-i) - f(0, t_-i) + c(x)`` for a convex network ``f``.

    ``soft_beta`` is the group-max temperature used when the rule is
    evaluated; the default is the exact (hard) max.
    """

    def __init__(self, net: PartialGroupMaxNet, cost: Callable[[Tensor], Tensor] | None = None,
                 soft_beta: float = math.inf):
        self.net = net
        self.cost = cost
        self.soft_beta = soft_beta

    @property
    def m(self) -> int:
        return self.net.spec.d_x

    def _cost(self, x: Tensor) -> Tensor:
        return Tensor(np.zeros(x.shape[0])) if self.cost is None else self.cost(x)

    def price(self, x_i, t_minus_i=None) -> Tensor:
        x = ad.as_tensor(np.atleast_2d(x_i) if not isinstance(x_i, Tensor) else x_i)
        maps = self.net.affine_maps(t_minus_i) if self.net.spec.d_y else None
        f = self.net.forward(x, t_minus_i, self.soft_beta, maps)
        f0 = self.net.forward(np.zeros(x.shape), t_minus_i, self.soft_beta, maps)
        return f - f0 + self._cost(x)

    def _chunks(self, B: int, t_minus_i):
        if self.net.spec.d_y == 0:
            yield slice(0, B), self.net.pack()
            return
        P = kernels.pack_size(*self.net.layout)
        step = max(1, _PACK_BUDGET // P)
        for s in range(0, B, step):
            sl = slice(s, min(B, s + step))
            yield sl, self.net.pack(t_minus_i[sl])

    def value(self, x, t_minus_i=None) -> np.ndarray:
        """``f(x) - f(0)`` per row, without the cost term."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(x.shape[0])
        for sl, pack in self._chunks(x.shape[0], t_minus_i):
            f, _ = kernels.value_and_xgrad(pack, self.net.layout, x[sl], self.soft_beta)
            f0, _ = kernels.value_and_xgrad(pack, self.net.layout, np.zeros_like(x[sl]), self.soft_beta)
            out[sl] = f - f0
        return out

    def solve(self, t_i, t_minus_i, solver: SolverConfig) -> tuple[np.ndarray, np.ndarray]:
        """Best-response allocations and ``f(x) - f(0)`` for each row of ``t_i``."""
        t_i = np.atleast_2d(np.asarray(t_i, dtype=np.float64))
        B = t_i.shape[0]
        x = np.full_like(t_i, solver.start)
        val = np.empty(B)
        for sl, pack in self._chunks(B, t_minus_i):
            if not np.all(np.isfinite(pack)):
                raise FloatingPointError("pricing network produced non-finite weights")
            x[sl] = kernels.best_response(pack, self.net.layout, t_i[sl], x[sl], solver.iters,
                                          solver.lr0, solver.lr1, solver.momentum, self.soft_beta)
            f, _ = kernels.value_and_xgrad(pack, self.net.layout, x[sl], self.soft_beta)
            f0, _ = kernels.value_and_xgrad(pack, self.net.layout, np.zeros_like(x[sl]), self.soft_beta)
            val[sl] = f - f0
        return x, val


class FunctionPricing(PricingRule):
    """Pricing from an arbitrary convex ``f(x, t_-i)`` built from autodiff ops."""

    def __init__(self, fn: Callable[[Tensor, np.ndarray | None], Tensor], m: int,
                 cost: Callable[[Tensor], Tensor] | None = None):
        self.fn = fn
        self._m = m
        self.cost = cost
        self.soft_beta = math.inf

    @property
    def m(self) -> int:
        return self._m

    def price(self, x_i, t_minus_i=None) -> Tensor:
        x = ad.as_tensor(np.atleast_2d(x_i) if not isinstance(x_i, Tensor) else x_i)
        return self.fn(x, t_minus_i) - self.fn(Tensor(np.zeros(x.shape)), t_minus_i) + self._cost(x)

    def _fgrad(self, x, cond):
        xt = Tensor(x, requires_grad=True)
        f = self.fn(xt, cond)
        ad.backward(ad.sum(f))
        return f.value, xt.grad

    def value(self, x, t_minus_i=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.fn(Tensor(x), t_minus_i).value - self.fn(Tensor(np.zeros_like(x)), t_minus_i).value

    def solve(self, t_i, t_minus_i, solver: SolverConfig):
        t_i = np.atleast_2d(np.asarray(t_i, dtype=np.float64))

        def fgrad(x, rows):
            cond = None if t_minus_i is None else np.asarray(t_minus_i)[rows]
            return self._fgrad(x, cond)

        x = kernels.ascend(fgrad, t_i, np.full_like(t_i, solver.start),
                           solver.iters, solver.lr0, solver.lr1, solver.momentum)
        return x, self.value(x, t_minus_i)


def price(rule: PricingRule, x_i, t_minus_i=None) -> Tensor:
    return rule.price(x_i, t_minus_i)


def _cost_value(rule: PricingRule, x: np.ndarray) -> np.ndarray:
    return rule._cost(Tensor(x)).value


def best_response(rule: PricingRule, t_i, t_minus_i=None, solver: SolverConfig | None = None):
    """Optimal local outcome for each row of ``t_i``: ``(x*, p*, u*)``."""
    solver = solver or SolverConfig()
    t_i = np.atleast_2d(np.asarray(t_i, dtype=np.float64))
    if t_i.shape[1] != rule.m:
        raise ValueError(f"expected types of width {rule.m}, got {t_i.shape[1]}")
    x, val = rule.solve(t_i, t_minus_i, solver)
    c = _cost_value(rule, x)
    p = val + c
    u = np.sum(t_i * x, axis=1) + c - p
    bad = ~(np.isfinite(u) & np.isfinite(p))
    if bad.any():
        rows = np.flatnonzero(bad)[:5].tolist()
        raise FloatingPointError(f"non-finite utility in best response for rows {rows}")
    return x, p, u


@dataclass
class MenuOutcome:
    x: np.ndarray  # (B, n, m)
    p: np.ndarray  # (B, n)
    u: np.ndarray  # (B, n) achieved player utilities


def _rule_list(rules, n: int) -> list[PricingRule]:
    if isinstance(rules, PricingRule):
        return [rules] * n
    rules = list(rules)
    if len(rules) != n:
        raise ValueError(f"need one pricing rule per player ({n}), got {len(rules)}")
    return rules


def conditioning(t: np.ndarray, i: int) -> np.ndarray | None:
    """Other players' types, in player order, flattened to ``(B, (n-1) m)``."""
    if t.shape[1] == 1:
        return None
    return np.delete(t, i, axis=1).reshape(t.shape[0], -1)


def run_menu_mechanism(rules, t, solver: SolverConfig | None = None) -> MenuOutcome:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 2:
        t = t[None]
    B, n, m = t.shape
    rl = _rule_list(rules, n)
    x = np.empty_like(t)
    p = np.empty((B, n))
    u = np.empty((B, n))
    for i in range(n):
        x[:, i], p[:, i], u[:, i] = best_response(rl[i], t[:, i], conditioning(t, i), solver)
    return MenuOutcome(x, p, u)


def designer_utilities(rules, problem: MechanismProblem, t, solver=None) -> tuple[np.ndarray, MenuOutcome]:
    out = run_menu_mechanism(rules, t, solver)
    return designer_utility(problem, out.x, out.p, t).value, out


def expected_utility(rules, problem: MechanismProblem, n_samples: int, seed: int,
                     solver: SolverConfig | None = None, types: np.ndarray | None = None
                     ) -> tuple[float, float]:
    """Monte-Carlo designer utility ``(mean, standard error)`` on fresh samples."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    t = sample_types(problem, n_samples, seed) if types is None else types
    u0, _ = designer_utilities(rules, problem, t, solver)
    se = float(u0.std(ddof=1) / math.sqrt(len(u0))) if len(u0) > 1 else 0.0
    return float(u0.mean()), se


# -- truthfulness -------------------------------------------------------------


class DirectMechanism:
    """Maps reported profiles ``(B, n, m)`` to ``(x, p)``."""

    def __init__(self, problem: MechanismProblem):
        self.problem = problem

    def __call__(self, reports):
        raise NotImplementedError

    def player_outcome(self, i: int, reports) -> tuple[np.ndarray, np.ndarray]:
        x, p = self(reports)
        return x[:, i], p[:, i]


class MenuMechanism(DirectMechanism):
    """The direct mechanism induced by a menu: every player best-responds to its report."""

    def __init__(self, rules, problem: MechanismProblem, solver: SolverConfig | None = None):
        super().__init__(problem)
        self.rules = _rule_list(rules, problem.n)
        self.solver = solver or SolverConfig()

    def __call__(self, reports):
        out = run_menu_mechanism(self.rules, reports, self.solver)
        return out.x, out.p

    def player_outcome(self, i, reports):
        reports = np.asarray(reports, dtype=np.float64)
        x, p, _ = best_response(self.rules[i], reports[:, i], conditioning(reports, i), self.solver)
        return x, p

    def with_solver(self, solver: SolverConfig) -> "MenuMechanism":
        return MenuMechanism(self.rules, self.problem, solver)


class SurplusExtraction(DirectMechanism):
    """Allocates everything and charges the reported value: not truthful."""

    def __call__(self, reports):
        reports = np.asarray(reports, dtype=np.float64)
        return np.ones_like(reports), reports.sum(axis=2)


@dataclass
class RegretReport:
    max: float
    mean: float
    per_player_max: list[float]
    n_samples: int
    n_restarts: int
    seed: int


def _own_utility(problem, t_i, x, p):
    return np.sum(t_i * x, axis=1) + player_cost(problem, x).value - p


def estimate_regret(mechanism, problem: MechanismProblem, n_samples: int = 1000,
                    n_restarts: int = 8, seed: int = 0, steps: int = 12, delta: float = 0.02,
                    step0: float = 0.15, step1: float = 0.01, players: Sequence[int] | None = None,
                    misreport_solver: SolverConfig | None = None) -> RegretReport:
    """Lower bound on ex-post regret from a multi-restart misreport search.

    For each sampled profile and player, ``n_restarts`` misreports start at
    uniform points of the type box and climb the player's true utility with
    central finite-difference gradients and projection onto the box; the best
    misreport seen is kept. ``mechanism`` may be a :class:`DirectMechanism` or
    pricing rules (wrapped in a :class:`MenuMechanism`).
    """
    if not isinstance(mechanism, DirectMechanism):
        mechanism = MenuMechanism(mechanism, problem)
    truth_mech = mechanism
    if isinstance(mechanism, MenuMechanism) and misreport_solver is not None:
        mechanism = mechanism.with_solver(misreport_solver)
    lo, hi = problem.type_box
    rng = np.random.default_rng([seed, 7])
    t = sample_types(problem, n_samples, rng)
    N, n, m = t.shape
    R = n_restarts
    players = range(n) if players is None else players
    gains = np.zeros((N, n))
    decay = (step1 / step0) ** (1.0 / max(steps - 1, 1))
    for i in players:
        x0, p0 = truth_mech.player_outcome(i, t)
        u_truth = _own_utility(problem, t[:, i], x0, p0)
        base = np.repeat(t, R, axis=0)  # (N R, n, m)
        own = np.repeat(t[:, i], R, axis=0)
        cur = rng.uniform(lo, hi, (N * R, m))

        def utility_at(reports_i):
            k = reports_i.shape[0] // (N * R)
            prof = np.tile(base, (k, 1, 1))
            prof[:, i] = reports_i
            x, p = mechanism.player_outcome(i, prof)
            return _own_utility(problem, np.tile(own, (k, 1)), x, p).reshape(k, N * R)

        best = utility_at(cur)[0]
        step = step0
        for _ in range(steps):
            probes = [cur]
            for j in range(m):
                for sgn in (1.0, -1.0):
                    q = cur.copy()
                    q[:, j] = np.clip(q[:, j] + sgn * delta, lo, hi)
                    probes.append(q)
            vals = utility_at(np.concatenate(probes))
            best = np.maximum(best, vals.max(axis=0))
            grad = np.empty_like(cur)
            for j in range(m):
                grad[:, j] = (vals[1 + 2 * j] - vals[2 + 2 * j]) / (2 * delta)
            norm = np.linalg.norm(grad, axis=1, keepdims=True)
            cur = np.clip(cur + step * grad / np.maximum(norm, 1e-12), lo, hi)
            step *= decay
        best = np.maximum(best, utility_at(cur)[0])
        gains[:, i] = np.maximum(0.0, best.reshape(N, R).max(axis=1) - u_truth)
    per_player = gains.max(axis=0)
    return RegretReport(
        max=float(gains.max()),
        mean=float(gains[:, list(players)].mean()),
        per_player_max=[float(v) for v in per_player],
        n_samples=N,
        n_restarts=R,
        seed=seed,
    )


def ir_violations(outcome: MenuOutcome, tol: float = 1e-6) -> int:
    return int(np.sum(outcome.u < -tol))


__all__ = [
    "DirectMechanism",
    "FunctionPricing",
    "MenuMechanism",
    "MenuOutcome",
    "PricingRule",
    "RegretReport",
    "SolverConfig",
    "SurplusExtraction",
    "best_response",
    "conditioning",
    "designer_utilities",
    "estimate_regret",
    "expected_utility",
    "ir_violations",
    "price",
    "run_menu_mechanism",
]
