"""Self-checks shared by the ``oracle`` / ``gradcheck`` subcommands and the acceptance tests.

Every check returns a :class:`CheckResult` with the measured quantities, the
tolerance it was held to, and a one-line summary.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from . import kernels
from .mechanism import PricingRule
from .networks import PartialGroupMaxNet, PgmnSpec
from .oracles import (
    GridOracle,
    exact_objective_grad,
    grid_gibbs,
    fenchel_menu_from_direct,
    posted_price_mechanism,
    tabulate_direct,
    truncated_exponential_moments,
)
from .autodiff import Tensor
from .problems import MechanismProblem, designer_value, sample_types
from .training import affine_social_welfare, covariance_trick_loss, player_terms

GRAD_TOL = 1e-5
CONVEXITY_SLACK = 1e-7


@dataclass
class CheckResult:
    name: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.summary} ({self.seconds:.1f}s)"


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


# -- gradients -------------------------------------------------------------------


def _const(v):
    return ad.Tensor(np.asarray(v, dtype=np.float64))


def _small_spec(n: int, m: int, soft_beta: float) -> PgmnSpec:
    return PgmnSpec(d_x=m, d_y=(n - 1) * m, K=1 if n == 1 else 2, G=3, E=4, soft_beta=soft_beta,
                    pan_hidden=6)


def _grad_cases(seed: int):
    """``(label, store, scalar function)`` triples exercising every differentiable path."""
    rng = np.random.default_rng(seed)
    cases = []
    for soft in (math.inf, 64.0):
        tag = "hard" if math.isinf(soft) else f"soft{soft:g}"
        for n, m in ((1, 2), (3, 2)):
            net = PartialGroupMaxNet(_small_spec(n, m, soft), seed=[seed, n, m])
            problem = MechanismProblem(n=n, m=m)
            x = rng.uniform(0, 1, (5, m))
            y = rng.uniform(0, 1, (5, (n - 1) * m)) if n > 1 else None
            probe = rng.standard_normal(5)
            cases.append((f"pgmn n={n} {tag}", net.params,
                          lambda net=net, x=x, y=y, probe=probe: ad.inner(net.forward(x, y), _const(probe))))
            t = sample_types(problem, 4, rng)
            ys = rng.uniform(0, 1, t.shape)
            zs = rng.uniform(0, 1, t.shape)
            # the stop-gradient factor is held at its current value in the numeric reference
            diff = _u0_gap(net, problem, t, ys, zs)
            cases.append((f"loss n={n} {tag}", net.params,
                          lambda net=net, p=problem, t=t, ys=ys, zs=zs:
                          covariance_trick_loss(net, p, t, ys, zs, beta=8.0),
                          lambda net=net, p=problem, t=t, ys=ys, zs=zs, diff=diff:
                          _loss_frozen(net, p, t, ys, zs, 8.0, diff)))
            cases.append((f"asw n={n} {tag}", net.params,
                          lambda net=net, p=problem, t=t, ys=ys:
                          ad.sum(affine_social_welfare(net, p, ys, t, beta=8.0))))
            if n > 1:
                pan = net.pan_x[1]
                wprobe = rng.standard_normal((5,) + (pan.spec.d_out, pan.spec.d_in))
                bprobe = rng.standard_normal((5, pan.spec.d_out))

                def pan_out(pan=pan, y=y, wprobe=wprobe, bprobe=bprobe):
                    W, b = pan(y)
                    return ad.sum(W * _const(wprobe)) + ad.sum(b * _const(bprobe))

                cases.append((f"pan positive {tag}", net.params, pan_out))
    return [c if len(c) == 4 else c + (c[2],) for c in cases]


def _u0_gap(net, problem, t, y, z) -> np.ndarray:
    (py, _), (pz, _) = player_terms(net, problem, t, [y, z])
    return (designer_value(problem, y) + py - designer_value(problem, z) - pz).value


def _loss_frozen(net, problem, t, y, z, beta, diff) -> Tensor:
    """Covariance-trick surrogate with the stop-gradient factor replaced by a constant."""
    (py, uy), (pz, uz) = player_terms(net, problem, t, [y, z])
    u0y = designer_value(problem, y) + py
    u0z = designer_value(problem, z) + pz
    return ad.mean(ad.scale(u0y + u0z + _const(diff) * ad.scale(uy - uz, beta), 0.5))


@_timed
def check_gradients(seed: int = 0, tol: float = GRAD_TOL) -> CheckResult:
    """Tape gradients against central differences for networks, PANs, loss and welfare."""
    worst, per_case = 0.0, {}
    for label, store, fn, reference in _grad_cases(seed):
        store.zero_grad()
        ad.backward(fn())
        analytic = store.flat_grad()
        numeric = ad.numerical_grad(lambda: reference().value, store, h=1e-5)
        err = ad.relative_error(analytic, numeric)
        per_case[label] = err
        worst = max(worst, err)
    # input gradients used by the inference and sampling kernels
    rng = np.random.default_rng(seed)
    for soft in (math.inf, 64.0):
        net = PartialGroupMaxNet(PgmnSpec.default(1, 2, soft_beta=soft), seed=seed)
        x = rng.uniform(0.05, 0.95, (16, 2))
        _, g = kernels.value_and_xgrad(net.pack(), net.layout, x, soft)
        num = np.empty_like(g)
        for j in range(2):
            e = np.zeros(2)
            e[j] = 1e-6
            fp, _ = kernels.value_and_xgrad(net.pack(), net.layout, x + e, soft)
            fm, _ = kernels.value_and_xgrad(net.pack(), net.layout, x - e, soft)
            num[:, j] = (fp - fm) / 2e-6
        err = ad.relative_error(g, num)
        per_case[f"kernel xgrad {'hard' if math.isinf(soft) else 'soft'}"] = err
        worst = max(worst, err)
    return CheckResult("gradcheck", worst < tol, f"max relative error {worst:.2e} (tol {tol:g})",
                       {"per_case": per_case, "max_rel_err": worst, "tol": tol})


# -- convexity -------------------------------------------------------------------


@_timed
def check_convexity(nets: list[PartialGroupMaxNet] | None = None, triples: int = 1000, seed: int = 0,
                    slack: float = CONVEXITY_SLACK) -> CheckResult:
    """``f(l x + (1-l) x') <= l f(x) + (1-l) f(x') + slack`` on random triples, hard and soft max."""
    rng = np.random.default_rng(seed)
    if nets is None:
        nets = [PartialGroupMaxNet(PgmnSpec.default(1, 2), seed=seed),
                PartialGroupMaxNet(PgmnSpec.default(3, 2), seed=seed + 1)]
    worst = -math.inf
    for net in nets:
        m, dy = net.spec.d_x, net.spec.d_y
        a = rng.uniform(0, 1, (triples, m))
        b = rng.uniform(0, 1, (triples, m))
        lam = rng.uniform(0, 1, (triples, 1))
        y = rng.uniform(0, 1, (triples, dy)) if dy else None
        for soft in (math.inf, 4096.0):
            fa = net.value(a, y, soft)
            fb = net.value(b, y, soft)
            fc = net.value(lam * a + (1 - lam) * b, y, soft)
            gap = fc - (lam[:, 0] * fa + (1 - lam[:, 0]) * fb)
            worst = max(worst, float(gap.max()))
    return CheckResult("convexity", worst <= slack,
                       f"max Jensen gap {worst:.2e} over {len(nets)} nets x {triples} triples (slack {slack:g})",
                       {"max_gap": worst, "slack": slack, "triples": triples, "nets": len(nets)})


# -- covariance trick --------------------------------------------------------------


def covtrick_network() -> PartialGroupMaxNet:
    """One good, one group of three pieces with kinks at 0.3 and 0.7: nine parameters.

    Hand-set so that every piece carries Gibbs mass; randomly initialised
    nets of this size usually leave a piece inactive, which makes its
    gradient identically zero and the check vacuous.
    """
    net = PartialGroupMaxNet(PgmnSpec(d_x=1, K=1, G=1, E=3, soft_beta=4096.0), seed=0)
    net.load_params({"x0.W": [0.0, 0.6, 1.4], "x0.b": [0.0, -0.18, -0.74],
                     "x1.W": [math.log(math.e - 1.0)], "x1.b": [0.0], "r1.W": [0.1]})
    return net


@_timed
def check_covariance_trick(pairs: int = 200_000, chunks: int = 200, N: int = 2001, beta: float = 16.0,
                           t: float = 0.9, seed: int = 0, zero_tol: float = 1e-9) -> CheckResult:
    """Mean of the covariance-trick gradient over exact Gibbs pairs vs the grid-exact gradient.

    Coordinates whose exact gradient vanishes (the output bias cancels in
    every price) must have a vanishing estimate instead.
    """
    net = covtrick_network()
    problem = MechanismProblem(n=1, m=1)
    rule = PricingRule(net, soft_beta=net.spec.soft_beta)
    oracle = GridOracle(1, N)
    exact = exact_objective_grad(oracle, rule, problem, [t], beta)
    gibbs = grid_gibbs(oracle, rule, problem, [t], beta)
    rng = np.random.default_rng(seed)
    per = pairs // chunks
    ests = np.empty((chunks, exact.size))
    types = np.full((per, 1, 1), t)
    for c in range(chunks):
        y = oracle.sample(gibbs, per, rng)[:, None, :]
        z = oracle.sample(gibbs, per, rng)[:, None, :]
        net.params.zero_grad()
        L = covariance_trick_loss(net, problem, types, y, z, beta)
        ad.backward(L)
        ests[c] = net.params.flat_grad()
    mean = ests.mean(axis=0)
    se = ests.std(axis=0, ddof=1) / math.sqrt(chunks)
    live = np.abs(exact) > zero_tol
    z_scores = np.abs(mean - exact)[live] / np.maximum(se[live], 1e-300)
    rel = np.abs(mean - exact)[live] / np.abs(exact[live])
    passed = bool(np.all(z_scores <= 3.0) and np.all(rel <= 0.02) and np.all(np.abs(mean[~live]) <= zero_tol))
    return CheckResult("covtrick", passed,
                       f"max |z| {z_scores.max():.2f} (<= 3), max rel err {rel.max():.4f} (<= 0.02) "
                       f"over {int(live.sum())} of {exact.size} params, {chunks * per} pairs",
                       {"exact": exact.tolist(), "estimate": mean.tolist(), "std_err": se.tolist(),
                        "max_z": float(z_scores.max()), "max_rel": float(rel.max()), "pairs": chunks * per,
                        "beta": beta, "t": t, "N": N})


# -- Langevin stationarity ---------------------------------------------------------


@_timed
def check_langevin(t: float = 0.8, beta: float = 8.0, eta: float = 0.01, chains: int = 2000,
                   burn_in: int = 1000, steps: int = 10_000, thin: int = 10, seed: int = 0,
                   N: int = 2001, tol: float = 0.02, ks_tol: float = 0.05) -> CheckResult:
    """Reflected Langevin chains on ``u(a) = t a`` against the exact tilted density."""
    layout = (0, 1, 1, 1)
    pack = np.zeros(kernels.pack_size(*layout))
    rng = np.random.default_rng(seed)
    tt = np.full((chains, 1), t)
    y = rng.uniform(0, 1, (chains, 1))
    y = kernels.langevin(pack, layout, tt, y, rng.standard_normal((burn_in, chains, 1)), eta, beta)
    kept = []
    for _ in range(steps // thin):
        y = kernels.langevin(pack, layout, tt, y, rng.standard_normal((thin, chains, 1)), eta, beta)
        kept.append(y[:, 0].copy())
    samples = np.concatenate(kept)
    mean_cf, var_cf = truncated_exponential_moments(beta * t)
    mean_err = abs(samples.mean() - mean_cf) / mean_cf
    var_err = abs(samples.var() - var_cf) / var_cf
    gibbs = GridOracle(1, N).gibbs(lambda x: t * x[:, 0], beta)
    edges = np.arange(1, N + 1) / N
    grid_cdf = np.cumsum(gibbs.weights)
    ks = stats.kstest(samples, lambda a: np.interp(a, np.concatenate([[0.0], edges]),
                                                  np.concatenate([[0.0], grid_cdf]))).statistic
    passed = bool(mean_err <= tol and var_err <= tol and ks <= ks_tol)
    return CheckResult("langevin", passed,
                       f"mean err {mean_err:.4f}, var err {var_err:.4f} (<= {tol}), KS {ks:.4f} (<= {ks_tol})",
                       {"mean": float(samples.mean()), "mean_closed_form": mean_cf, "var": float(samples.var()),
                        "var_closed_form": var_cf, "ks": float(ks), "samples": int(samples.size)})


# -- grid Gibbs sanity --------------------------------------------------------------


@_timed
def check_gibbs(N: int = 2001) -> CheckResult:
    """Uniform limit, point-mass limit, closed-form mean and normalisation of the grid oracle."""
    oracle = GridOracle(1, N)
    uniform = oracle.gibbs(lambda x: np.sin(3 * x[:, 0]), 0.0)
    flat_err = float(np.max(np.abs(uniform.weights - 1.0 / N)))
    peaked = oracle.gibbs(lambda x: -50.0 * (x[:, 0] - 0.3) ** 2, 1e6)
    near = np.abs(oracle.points[:, 0] - 0.3) <= 1.0 / N
    mass = float(peaked.weights[near].sum())
    t, beta = 0.8, 8.0
    lin = oracle.gibbs(lambda x: t * x[:, 0], beta)
    mean_cf, _ = truncated_exponential_moments(beta * t)
    mean_err = abs(float(lin.mean[0]) - mean_cf)
    norm_err = max(abs(math.fsum(r.weights) - 1.0) for r in (uniform, peaked, lin))
    passed = flat_err < 1e-15 and mass >= 0.99 and mean_err <= 1e-6 and norm_err <= 1e-12
    return CheckResult("gibbs", passed,
                       f"uniform dev {flat_err:.1e}, peak mass {mass:.4f}, mean err {mean_err:.1e}, "
                       f"norm err {norm_err:.1e}",
                       {"uniform_dev": flat_err, "peak_mass": mass, "mean_err": mean_err, "norm_err": norm_err})


# -- Fenchel reconstruction ----------------------------------------------------------


@_timed
def check_fenchel(prices=(0.37, 0.61), grid: int = 51, probes: int = 1000, seed: int = 0,
                  tol: float = 0.02) -> CheckResult:
    """Rebuild posted-price and zero menus from their direct forms on a type grid."""
    prices = np.asarray(prices, dtype=np.float64)
    m = prices.size
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (probes, m))
    types, util = tabulate_direct(posted_price_mechanism(prices), m, grid)
    rebuilt = fenchel_menu_from_direct(types, util, x)
    err = float(np.max(np.abs(rebuilt - x @ prices)))
    ztypes, zutil = tabulate_direct(lambda tt: (np.zeros_like(tt), np.zeros(len(tt))), m, grid)
    zero_err = float(np.max(np.abs(fenchel_menu_from_direct(ztypes, zutil, x) - x.sum(axis=1))))
    at_zero = float(abs(fenchel_menu_from_direct(types, util, np.zeros(m))[0]))
    lam = rng.uniform(0, 1, (probes, 1))
    x2 = rng.uniform(0, 1, (probes, m))
    mix = fenchel_menu_from_direct(types, util, lam * x + (1 - lam) * x2)
    gap = float(np.max(mix - (lam[:, 0] * rebuilt + (1 - lam[:, 0]) * fenchel_menu_from_direct(types, util, x2))))
    passed = err <= tol and zero_err <= 1e-12 and at_zero <= 1e-12 and gap <= CONVEXITY_SLACK
    return CheckResult("fenchel", passed,
                       f"posted-price L-inf err {err:.4f} (<= {tol}), zero-menu err {zero_err:.1e}, "
                       f"p(0) {at_zero:.1e}, Jensen gap {gap:.1e}",
                       {"linf": err, "zero_menu_err": zero_err, "p0": at_zero, "jensen_gap": gap})


ORACLE_CHECKS = {
    "covtrick": check_covariance_trick,
    "langevin": check_langevin,
    "gibbs": check_gibbs,
    "fenchel": check_fenchel,
}


# -- approximation ------------------------------------------------------------------


def fit_convex(target, m: int, G: int = 4, E: int = 4, steps: int = 3000, lr0: float = 0.03,
               lr1: float = 1e-3, points: int = 201, seed: int = 0, soft_beta: float = 4096.0):
    """Least-squares fit of a single-player network to ``target`` on a grid of ``[0, 1]^m``.

    Returns the fitted network and its hard-max L-inf error on a grid twice as fine.
    """
    from .oracles import unit_grid
    from .training import Adam

    net = PartialGroupMaxNet(PgmnSpec(d_x=m, K=1, G=G, E=E, soft_beta=soft_beta), seed=seed)
    per_axis = points if m == 1 else max(11, int(round(points ** (1.0 / m))))
    x = np.clip((unit_grid(per_axis, m) * per_axis - 0.5) / max(per_axis - 1, 1), 0.0, 1.0)
    y = np.asarray(target(x), dtype=np.float64)
    opt = Adam(net.params)
    for k in range(steps):
        err = net.forward(x) - _const(y)
        loss = ad.mean(err * err)
        ad.backward(loss)
        opt.update(net.params.grads(), lr0 * (lr1 / lr0) ** (k / max(steps - 1, 1)))
    fine = 2 * per_axis - 1
    xf = np.clip((unit_grid(fine, m) * fine - 0.5) / (fine - 1), 0.0, 1.0)
    linf = float(np.max(np.abs(net.value(xf, soft_beta=math.inf) - target(xf))))
    return net, linf
