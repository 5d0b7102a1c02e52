"""Training loop: Gibbs sample pools, Langevin refresh, covariance-trick loss, Adam."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ParamStore, Tensor
from .config import ExperimentConfig, config_from_json
from .mechanism import PricingRule, conditioning, expected_utility
from .networks import PartialGroupMaxNet, PgmnSpec
from .problems import MechanismProblem, designer_value, player_cost, sample_types

CHECKPOINT_FORMAT = "convexmenu-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("iter", "loss", "eu_validation", "beta", "lr_adam", "eta_langevin", "wallclock_s")

# stream identifiers for np.random.default_rng([seed, PURPOSE, iteration])
_TYPES, _POOL, _BATCH, _NOISE, _VAL, _INIT = range(6)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


# -- loss ----------------------------------------------------------------------


def _player_rows(net: PartialGroupMaxNet, t: np.ndarray):
    """Conditioning rows for every (player, sample) pair, player-major."""
    B, n, m = t.shape
    if n == 1:
        return None
    return np.concatenate([conditioning(t, i) for i in range(n)], axis=0)


def player_terms(net: PartialGroupMaxNet, problem: MechanismProblem, t, outcomes, soft_beta=None):
    """Summed prices and summed player utilities for each outcome array.

    ``outcomes`` is a list of ``(B, n, m)`` arrays; returns one
    ``(sum_i p_i, sum_i u_i)`` pair of ``(B,)`` tensors per entry. The affine
    maps are computed once and shared across outcomes.
    """
    t = np.asarray(t, dtype=np.float64)
    B, n, m = t.shape
    cond = _player_rows(net, t)
    maps = net.affine_maps(cond)
    own = np.concatenate([t[:, i] for i in range(n)], axis=0)
    f0 = net.forward(np.zeros((B * n, m)), cond, soft_beta, maps)
    out = []
    for x in outcomes:
        xr = np.concatenate([x[:, i] for i in range(n)], axis=0)
        fx = net.forward(xr, cond, soft_beta, maps)
        c = player_cost(problem, xr)
        p = fx - f0 + c
        u = Tensor(np.sum(own * xr, axis=1)) + c - p
        out.append((_sum_players(p, n, B), _sum_players(u, n, B)))
    return out


def _sum_players(v: Tensor, n: int, B: int) -> Tensor:
    return v if n == 1 else ad.sum(ad.reshape(v, (n, B)), axis=0)


def affine_social_welfare(net, problem, x, t, beta, soft_beta=None) -> Tensor:
    """``sum_i beta * u_i(x_i; t, theta)`` for each profile (shared beta)."""
    (_, u), = player_terms(net, problem, t, [np.asarray(x, dtype=np.float64)], soft_beta)
    return ad.scale(u, beta)


def covariance_trick_loss(net, problem, t, y, z, beta, soft_beta=None, reduce: bool = True) -> Tensor:
    """Per-profile surrogate ``L`` whose gradient is unbiased for the tempered objective.

    ``L = 0.5 * [(u0(y) + u0(z)) + sg(u0(y) - u0(z)) * (ASW(y) - ASW(z))]``.
    Returns the batch mean when ``reduce`` (maximise it; train on ``-L``).
    """
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    (py, uy), (pz, uz) = player_terms(net, problem, t, [y, z], soft_beta)
    u0y = designer_value(problem, y) + py
    u0z = designer_value(problem, z) + pz
    diff = ad.stop_gradient(u0y - u0z)
    cov = diff * ad.scale(uy - uz, beta)
    L = ad.scale(u0y + u0z + cov, 0.5)
    return ad.mean(L) if reduce else L


# -- sampling --------------------------------------------------------------------


def langevin_step(net: PartialGroupMaxNet, t, y, eta: float, beta: float, noise,
                  soft_beta=None, reflect: bool = True) -> np.ndarray:
    """``len(noise)`` Langevin steps on every player's pool entry.

    ``y`` and ``t`` have shape ``(B, n, m)``; ``noise`` has shape ``(S, B, n, m)``.
    Each step is ``y + eta * grad u_i(y) + sqrt(2 eta / beta) * eps`` folded
    back into the unit box.
    """
    sb = net.spec.soft_beta if soft_beta is None else soft_beta
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if eta == 0 or noise.shape[0] == 0:
        return y.copy()
    B, n, m = t.shape
    out = np.empty_like(y)
    rule = PricingRule(net, soft_beta=sb)
    for i in range(n):
        cond = conditioning(t, i)
        for sl, pack in rule._chunks(B, cond):
            out[sl, i] = kernels.langevin(pack, net.layout, t[sl, i], y[sl, i],
                                          noise[:, sl, i], eta, beta, sb, reflect)
    return out


# -- schedules and optimiser ------------------------------------------------------


def schedules(it: int, cfg: ExperimentConfig) -> tuple[float, float, float]:
    """``(beta, eta_langevin, lr_adam)`` at iteration ``it`` of ``T``."""
    tr = cfg.training
    T = tr.T
    if not 0 <= it <= T:
        raise ValueError(f"iteration {it} outside [0, {T}]")
    frac = it / T
    k = max(0, math.floor((frac - tr.beta_warmup) / tr.beta_every + 1e-9)) if frac >= tr.beta_warmup else 0
    beta = tr.beta_max if it == T else min(tr.beta_max, tr.beta_init * tr.beta_growth**k)
    eta = tr.eta_init * (tr.eta_final / tr.eta_init) ** frac
    lr = tr.lr_init * (tr.lr_final / tr.lr_init) ** frac
    return beta, eta, lr


class Adam:
    """Adam with bias correction over the parameters of a :class:`ParamStore`."""

    def __init__(self, params: ParamStore, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.value) for k, v in params}
        self.v = {k: np.zeros_like(v.value) for k, v in params}

    def update(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params:
            g = grads[name]
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: a.ravel().tolist() for k, a in self.m.items()},
            "v": {k: a.ravel().tolist() for k, a in self.v.items()},
        }

    def load_state_dict(self, d: dict) -> None:
        self.t = int(d["t"])
        for key in ("m", "v"):
            target = getattr(self, key)
            for name in target:
                target[name] = np.asarray(d[key][name], dtype=np.float64).reshape(target[name].shape)


def adam_update(opt: Adam, grads: dict[str, np.ndarray], lr: float) -> ParamStore:
    opt.update(grads, lr)
    return opt.params


# -- state and checkpoints -----------------------------------------------------------


def digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    net: PartialGroupMaxNet
    opt: Adam
    types: np.ndarray
    y: np.ndarray
    z: np.ndarray
    iter: int = 0
    beta: float = 0.0
    eta: float = 0.0
    lr: float = 0.0
    best_eu: float = -math.inf
    best_iter: int = -1
    best_params: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)


def init_state(cfg: ExperimentConfig) -> TrainState:
    problem = cfg.make_problem()
    seed = cfg.run.seed
    net = PartialGroupMaxNet(cfg.network_spec(), seed=[seed, _INIT])
    types = sample_types(problem, cfg.training.M, np.random.default_rng([seed, _TYPES]))
    pool_rng = np.random.default_rng([seed, _POOL])
    y = pool_rng.uniform(0.0, 1.0, types.shape)
    z = pool_rng.uniform(0.0, 1.0, types.shape)
    beta, eta, lr = schedules(0, cfg)
    return TrainState(net, Adam(net.params), types, y, z, 0, beta, eta, lr,
                      best_params={k: v.copy() for k, v in net.params.values().items()})


def save_checkpoint(path: str | os.PathLike, cfg: ExperimentConfig, state: TrainState) -> Path:
    path = Path(path)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "network": state.net.to_dict(),
        "best": {
            "iter": state.best_iter,
            "eu": None if math.isinf(state.best_eu) else state.best_eu,
            "params": {k: v.ravel().tolist() for k, v in state.best_params.items()},
        },
        "state": {
            "iter": state.iter,
            "beta": state.beta,
            "eta": state.eta,
            "lr": state.lr,
            "adam": state.opt.state_dict(),
            "y": state.y.ravel().tolist(),
            "z": state.z.ravel().tolist(),
            "types_digest": digest(state.types),
            "pool_digest": digest(state.y, state.z),
        },
        # wallclock stays in metrics.csv only, so equal runs give equal checkpoints
        "metrics": [{k: v for k, v in r.items() if k != "wallclock_s"} for r in state.metrics],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)
    return path


def read_checkpoint(path: str | os.PathLike) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupted checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    return doc


def load_network(doc_or_path, which: str = "best", expect: PgmnSpec | None = None) -> PartialGroupMaxNet:
    """The best-validated (or ``which="last"``) network stored in a checkpoint."""
    doc = read_checkpoint(doc_or_path) if not isinstance(doc_or_path, dict) else doc_or_path
    spec = PgmnSpec.from_dict(doc["network"]["spec"])
    if expect is not None and spec != expect:
        raise ValueError(f"network spec mismatch: checkpoint has {spec}, expected {expect}")
    net = PartialGroupMaxNet(spec)
    net.load_params(doc["best"]["params"] if which == "best" else doc["network"]["params"])
    return net


def load_state(cfg: ExperimentConfig, path: str | os.PathLike) -> TrainState:
    """Rebuild a :class:`TrainState` from a checkpoint written with ``cfg``."""
    doc = read_checkpoint(path)
    state = init_state(cfg)
    saved = PgmnSpec.from_dict(doc["network"]["spec"])
    if saved != state.net.spec:
        raise ValueError(f"network spec mismatch: checkpoint has {saved}, config gives {state.net.spec}")
    st = doc["state"]
    if st["types_digest"] != digest(state.types):
        raise ValueError("checkpoint was trained on different type samples (seed or problem changed)")
    state.net.load_params(doc["network"]["params"])
    state.opt.load_state_dict(st["adam"])
    state.y = np.asarray(st["y"], dtype=np.float64).reshape(state.types.shape)
    state.z = np.asarray(st["z"], dtype=np.float64).reshape(state.types.shape)
    if digest(state.y, state.z) != st["pool_digest"]:
        raise ValueError("checkpoint pools fail their digest check")
    state.iter = int(st["iter"])
    state.beta, state.eta, state.lr = st["beta"], st["eta"], st["lr"]
    best = doc["best"]
    state.best_iter = int(best["iter"])
    state.best_eu = -math.inf if best["eu"] is None else best["eu"]
    state.best_params = {
        k: np.asarray(best["params"][k], dtype=np.float64).reshape(v.value.shape) for k, v in state.net.params
    }
    state.metrics = [dict(r) for r in doc.get("metrics", [])]
    return state


def write_metrics(path: str | os.PathLike, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k])
                        for k in METRIC_FIELDS})


# -- the loop ------------------------------------------------------------------------


@dataclass
class TrainResult:
    net: PartialGroupMaxNet  # best-validated parameters
    state: TrainState
    checkpoint: Path | None


def validate(net, cfg: ExperimentConfig) -> float:
    problem = cfg.make_problem()
    t = sample_types(problem, cfg.training.val_samples, np.random.default_rng([cfg.run.seed, _VAL]))
    eu, _ = expected_utility(PricingRule(net), problem, len(t), 0,
                             cfg.solver(cfg.training.val_infer_iters), types=t)
    return eu


def train(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None, resume: str | os.PathLike | None = None,
          stop_at: int | None = None, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Run (or continue) training; writes ``checkpoint.json`` and ``metrics.csv`` to ``out_dir``.

    ``stop_at`` ends the run early after that many iterations, leaving a
    resumable checkpoint.
    """
    problem = cfg.make_problem()
    tr = cfg.training
    seed = cfg.run.seed
    state = load_state(cfg, resume) if resume else init_state(cfg)
    net = state.net
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint.json" if out is not None else None
    reflect = tr.boundary == "reflect"
    M = tr.M
    end = tr.T if stop_at is None else min(tr.T, stop_at)
    t_start = time.perf_counter()
    while state.iter < end:
        it = state.iter
        beta, eta, lr = schedules(it, cfg)
        idx = np.sort(np.random.default_rng([seed, _BATCH, it]).choice(M, tr.B, replace=False)) \
            if tr.B < M else np.arange(M)
        rows = np.arange(M) if tr.langevin_scope == "pool" else idx
        noise = np.random.default_rng([seed, _NOISE, it]).standard_normal((2, tr.S, len(rows)) + state.types.shape[1:])
        t_rows = state.types[rows]
        state.y[rows] = langevin_step(net, t_rows, state.y[rows], eta, beta, noise[0], reflect=reflect)
        state.z[rows] = langevin_step(net, t_rows, state.z[rows], eta, beta, noise[1], reflect=reflect)

        net.params.zero_grad()
        L = covariance_trick_loss(net, problem, state.types[idx], state.y[idx], state.z[idx], beta)
        loss = -L
        if not np.isfinite(loss.value):
            saved = save_checkpoint(ckpt, cfg, state) if ckpt is not None else None
            raise TrainingAborted(f"non-finite loss at iteration {it}", saved)
        ad.backward(loss)
        grads = net.params.grads()
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            saved = save_checkpoint(ckpt, cfg, state) if ckpt is not None else None
            raise TrainingAborted(f"non-finite gradient at iteration {it}", saved)
        state.opt.update(grads, lr)
        state.iter = it + 1
        state.beta, state.eta, state.lr = schedules(state.iter, cfg)

        row = {"iter": state.iter, "loss": float(loss.value), "eu_validation": None,
               "beta": beta, "lr_adam": lr, "eta_langevin": eta}
        if state.iter % tr.val_every == 0 or state.iter == tr.T:
            eu = validate(net, cfg)
            row["eu_validation"] = eu
            if eu > state.best_eu:
                state.best_eu, state.best_iter = eu, state.iter
                state.best_params = {k: v.copy() for k, v in net.params.values().items()}
        row["wallclock_s"] = round(time.perf_counter() - t_start, 3)
        if state.iter % tr.log_every == 0 or row["eu_validation"] is not None or state.iter == tr.T:
            state.metrics.append(row)
            if progress is not None:
                progress(row)
    if ckpt is not None:
        save_checkpoint(ckpt, cfg, state)
        write_metrics(out / "metrics.csv", state.metrics)
    best = PartialGroupMaxNet(net.spec)
    best.load_params({k: v for k, v in state.best_params.items()})
    return TrainResult(best, state, ckpt)


def config_of_checkpoint(doc_or_path) -> ExperimentConfig:
    doc = read_checkpoint(doc_or_path) if not isinstance(doc_or_path, dict) else doc_or_path
    return config_from_json(doc["config"])
