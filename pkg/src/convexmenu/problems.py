"""Mechanism-design problem instances: type distributions and utilities."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DISTS = ("uniform", "bernoulli", "correlated")
REVERSE_MODES = ("none", "indivisible", "divisible")
_DIST_LETTER = {"uniform": "U", "bernoulli": "B", "correlated": "C"}
_SETTING_RE = re.compile(
    r"^(?P<dist>[UBC])_(?P<n>\d+)_(?P<m>\d+)"
    r"(?:_cp(?P<cp>\d+(?:\.\d+)?))?(?:_cd(?P<cd>\d+(?:\.\d+)?))?"
    r"(?:_rev(?P<rev>[ID]))?$"
)


@dataclass(frozen=True)
class MechanismProblem:
    """``n`` players, ``m`` goods, a type distribution and the designer's utility.

    ``player_cost`` maps a batch of local outcomes (``(B, m)`` tensor) to a
    ``(B,)`` tensor and must vanish at the zero outcome. It has to be built
    from :mod:`convexmenu.autodiff` ops so that prices stay differentiable.
    """

    n: int = 1
    m: int = 2
    dist: str = "uniform"
    c_prod: float = 0.0
    c_dup: float = 0.0
    reverse: str = "none"
    buyer_value: float = 1.0
    player_cost: Callable[[Tensor], Tensor] | None = field(default=None, compare=False)

    def __post_init__(self):
        errors = []
        if self.n < 1 or self.m < 1:
            errors.append(f"n and m must be positive (n={self.n}, m={self.m})")
        if self.dist not in DISTS:
            errors.append(f"dist must be one of {DISTS}, got {self.dist!r}")
        if self.reverse not in REVERSE_MODES:
            errors.append(f"reverse must be one of {REVERSE_MODES}, got {self.reverse!r}")
        if self.c_prod < 0 or self.c_dup < 0:
            errors.append("production and duplication costs must be nonnegative")
        if self.buyer_value <= 0:
            errors.append("buyer_value must be positive")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def type_box(self) -> tuple[float, float]:
        return (-1.0, 0.0) if self.reverse != "none" else (0.0, 1.0)

    @property
    def setting_id(self) -> str:
        s = f"{_DIST_LETTER[self.dist]}_{self.n}_{self.m}"
        if self.c_prod:
            s += f"_cp{self.c_prod:g}"
        if self.c_dup:
            s += f"_cd{self.c_dup:g}"
        if self.reverse != "none":
            s += "_rev" + self.reverse[0].upper()
        return s

    @classmethod
    def from_setting_id(cls, sid: str, **kw) -> "MechanismProblem":
        """Parse ids such as ``U_1_2``, ``B_3_10_cp1``, ``C_3_10_cd0.5``, ``U_3_10_revI``."""
        mt = _SETTING_RE.match(sid.strip())
        if mt is None:
            raise ValueError(f"unrecognised setting id {sid!r}")
        letter = {v: k for k, v in _DIST_LETTER.items()}
        rev = {"I": "indivisible", "D": "divisible", None: "none"}[mt["rev"]]
        return cls(
            n=int(mt["n"]),
            m=int(mt["m"]),
            dist=letter[mt["dist"]],
            c_prod=float(mt["cp"] or 0.0),
            c_dup=float(mt["cd"] or 0.0),
            reverse=rev,
            **kw,
        )

    def describe(self) -> dict:
        return {
            "setting": self.setting_id,
            "n": self.n,
            "m": self.m,
            "dist": self.dist,
            "c_prod": self.c_prod,
            "c_dup": self.c_dup,
            "reverse": self.reverse,
            "buyer_value": self.buyer_value,
        }


def sample_types(problem: MechanismProblem, count: int, seed: int | np.random.Generator) -> np.ndarray:
    """Draw ``count`` type profiles, shape ``(count, n, m)``.

    Draws are made on ``[0, 1]`` and mapped affinely onto ``problem.type_box``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n, m = problem.n, problem.m
    if problem.dist == "uniform":
        u = rng.uniform(0.0, 1.0, (count, n, m))
    elif problem.dist == "bernoulli":
        u = (rng.uniform(0.0, 1.0, (count, n, m)) < 0.5).astype(np.float64)
    else:
        center = rng.uniform(0.25, 0.75, (count, 1, m))
        u = center + rng.uniform(-0.25, 0.25, (count, n, m))
    lo, hi = problem.type_box
    return lo + (hi - lo) * u


def player_cost(problem: MechanismProblem, x_i) -> Tensor:
    x_i = ad.as_tensor(x_i)
    if problem.player_cost is None:
        return Tensor(np.zeros(x_i.shape[:-1]))
    return problem.player_cost(x_i)


def player_utility(problem: MechanismProblem, x_i, p_i, t_i) -> Tensor:
    """``<x_i, t_i> + c_i(x_i) - p_i`` for a batch of local outcomes."""
    x_i = ad.as_tensor(x_i)
    return ad.inner(x_i, t_i) + player_cost(problem, x_i) - p_i


def designer_value(problem: MechanismProblem, x) -> Tensor:
    """Payment-free part of the designer's utility; ``x`` has shape ``(B, n, m)``."""
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1:] != (problem.n, problem.m):
        raise ValueError(f"expected outcomes of shape (B, {problem.n}, {problem.m}), got {x.shape}")
    total = ad.sum(x, axis=1)
    if problem.reverse == "none":
        cost = ad.scale(ad.sum(total, axis=1), problem.c_dup)
        if problem.c_prod:
            cost = cost + ad.scale(ad.sum(ad.max_reduce(x, axis=1), axis=1), problem.c_prod)
        return -cost
    v = problem.buyer_value
    if problem.reverse == "indivisible":
        return ad.scale(ad.sum(ad.clamp(total, hi=1.0), axis=1), v)
    if problem.reverse == "divisible":
        gain = 1.0 - ad.exp(ad.scale(total, -1.0 / v))
        return ad.scale(ad.sum(gain, axis=1), v)
    raise ValueError(f"unknown setting {problem.reverse!r}")


def designer_utility(problem: MechanismProblem, x, p, t=None) -> Tensor:
    """Designer utility per profile: ``designer_value(x) + sum_i p_i``.

    Every in-scope setting is quasi-linear in payments, so ``t`` does not
    enter; it is accepted for interface symmetry.
    """
    return designer_value(problem, x) + ad.sum(ad.as_tensor(p), axis=1)
