"""Experiment configuration: TOML sections, defaults, validation."""
from __future__ import annotations

import dataclasses
import math
import os
import re
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .mechanism import SolverConfig
from .networks import DEFAULT_SOFT_BETA, PgmnSpec
from .problems import DISTS, REVERSE_MODES, MechanismProblem

OUT_ENV = "CONVEXMENU_OUT"


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violation found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class ProblemSection:
    setting: str | None = None  # shorthand such as "U_1_2"; overrides the fields below
    n: int = 1
    m: int = 2
    dist: str = "uniform"
    c_prod: float = 0.0
    c_dup: float = 0.0
    reverse: str = "none"
    buyer_value: float = 1.0


@dataclass
class NetworkSection:
    K: int | None = None
    G: int | None = None
    E: int | None = None
    h_x: int | None = None
    soft_beta: float = DEFAULT_SOFT_BETA  # 0 or inf selects the hard max
    pan_hidden: int | None = None
    pan_layers: int = 2
    slope: float = 0.01


@dataclass
class TrainingSection:
    M: int = 65536
    B: int = 4096
    T: int = 5000
    S: int | None = None
    langevin_scope: str | None = None  # "pool" or "batch"
    boundary: str = "reflect"  # or "clamp"
    beta_init: float | None = None
    beta_max: float | None = None
    beta_growth: float = 1.15
    beta_warmup: float = 0.2
    beta_every: float = 0.02
    lr_init: float = 5e-4
    lr_final: float = 1e-5
    eta_init: float = 0.03
    eta_final: float = 0.01
    val_every: int = 500
    val_samples: int | None = None
    val_infer_iters: int | None = None
    log_every: int = 10


@dataclass
class EvalSection:
    test_samples: int | None = None
    test_seed: int = 20240601
    infer_iters: int = 5000
    infer_lr0: float = 0.2
    infer_lr1: float = 3e-4
    momentum: float = 0.9
    regret_samples: int = 1000
    regret_restarts: int = 8
    regret_infer_iters: int = 1000
    baselines: list = field(default_factory=list)


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str | None = None
    name: str | None = None


_SECTIONS = {
    "problem": ProblemSection,
    "network": NetworkSection,
    "training": TrainingSection,
    "eval": EvalSection,
    "run": RunSection,
}
_BASELINES = ("vcg", "bundle_opt", "separable_opt")


@dataclass
class ExperimentConfig:
    problem: ProblemSection = field(default_factory=ProblemSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    # -- (de)serialisation ---------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict, resolve: bool = True) -> "ExperimentConfig":
        errors = []
        sections = {}
        for key, value in data.items():
            if key not in _SECTIONS:
                errors.append(f"unknown section [{key}]")
                continue
            if not isinstance(value, dict):
                errors.append(f"[{key}] must be a table")
                continue
            klass = _SECTIONS[key]
            names = {f.name for f in dataclasses.fields(klass)}
            unknown = sorted(set(value) - names)
            errors += [f"unknown key {key}.{k}" for k in unknown]
            hints = typing.get_type_hints(klass)
            kept = {}
            for k, v in value.items():
                if k not in names:
                    continue
                if not _type_ok(v, hints[k]):
                    errors.append(f"{key}.{k}: expected {_type_name(hints[k])}, got {v!r}")
                    continue
                kept[k] = float(v) if _wants_float(hints[k]) and isinstance(v, int) else v
            sections[key] = klass(**kept)
        if errors:
            raise ConfigError(errors)
        cfg = cls(**sections)
        return cfg.resolved() if resolve else cfg

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: _json_safe(v) for k, v in sec.items()}
        return out

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    # -- defaults ------------------------------------------------------------

    def resolved(self) -> "ExperimentConfig":
        """Fill every automatic field and validate; raises :class:`ConfigError`."""
        p = dataclasses.replace(self.problem)
        if p.setting:
            try:
                parsed = MechanismProblem.from_setting_id(p.setting)
            except ValueError as exc:
                raise ConfigError([f"problem.setting: {exc}"]) from None
            p.n, p.m, p.dist = parsed.n, parsed.m, parsed.dist
            p.c_prod, p.c_dup, p.reverse = parsed.c_prod, parsed.c_dup, parsed.reverse
            p.setting = None
        n, m = p.n, p.m
        nw = dataclasses.replace(self.network)
        if not nw.soft_beta:
            nw.soft_beta = math.inf
        base = PgmnSpec.default(max(n, 1), max(m, 1), p.dist) if n >= 1 and m >= 1 else None
        if base is not None:
            if nw.K is None:
                nw.K = base.K
            if nw.G is None:
                nw.G = base.G
            if nw.E is None:
                nw.E = nw.h_x // nw.G if nw.h_x and nw.G else base.hidden // nw.G
            if nw.h_x is None:
                nw.h_x = nw.G * nw.E
            if nw.pan_hidden is None:
                nw.pan_hidden = base.pan_hidden
        tr = dataclasses.replace(self.training)
        if tr.S is None:
            tr.S = 2 if n == 1 else 16
        if tr.langevin_scope is None:
            tr.langevin_scope = "pool" if n == 1 else "batch"
        if tr.beta_init is None:
            tr.beta_init = 16.0 if n == 1 else 64.0
        if tr.beta_max is None:
            tr.beta_max = 4096.0 if p.dist == "bernoulli" else 512.0
        if tr.val_samples is None:
            tr.val_samples = 2**14 if n == 1 else 2**12
        ev = dataclasses.replace(self.eval, baselines=list(self.eval.baselines))
        if tr.val_infer_iters is None:
            tr.val_infer_iters = ev.infer_iters
        if ev.test_samples is None:
            ev.test_samples = 2**18 if n == 1 else 2**16
        rn = dataclasses.replace(self.run)
        if rn.out_dir is None:
            rn.out_dir = os.environ.get(OUT_ENV, "runs")
        if rn.name is None:
            try:
                rn.name = f"{MechanismProblem(n, m, p.dist, p.c_prod, p.c_dup, p.reverse).setting_id}_seed{rn.seed}"
            except ValueError:
                rn.name = f"run_seed{rn.seed}"
        cfg = ExperimentConfig(p, nw, tr, ev, rn)
        errors = cfg.validate()
        if errors:
            raise ConfigError(errors)
        return cfg

    def validate(self) -> list[str]:
        e = []
        p, nw, tr, ev = self.problem, self.network, self.training, self.eval
        if p.n < 1:
            e.append("problem.n must be >= 1")
        if p.m < 1:
            e.append("problem.m must be >= 1")
        if p.dist not in DISTS:
            e.append(f"problem.dist must be one of {DISTS}")
        if p.reverse not in REVERSE_MODES:
            e.append(f"problem.reverse must be one of {REVERSE_MODES}")
        if p.c_prod < 0 or p.c_dup < 0:
            e.append("problem.c_prod and problem.c_dup must be >= 0")
        if p.buyer_value <= 0:
            e.append("problem.buyer_value must be > 0")
        for k in ("K", "G", "E", "h_x", "pan_hidden"):
            v = getattr(nw, k)
            if v is None or v < (0 if k == "K" else 1):
                e.append(f"network.{k} must be {'>= 0' if k == 'K' else 'positive'}")
        if nw.G and nw.E and nw.h_x and nw.h_x != nw.G * nw.E:
            e.append(f"network.h_x ({nw.h_x}) must equal network.G * network.E ({nw.G} * {nw.E})")
        if nw.soft_beta <= 0:
            e.append("network.soft_beta must be positive")
        if tr.M < 1:
            e.append("training.M must be >= 1")
        if tr.B < 1:
            e.append("training.B must be >= 1")
        if tr.B > tr.M:
            e.append(f"training.B ({tr.B}) must not exceed training.M ({tr.M})")
        if tr.T < 1:
            e.append("training.T must be >= 1")
        if tr.S < 0:
            e.append("training.S must be >= 0")
        if tr.langevin_scope not in ("pool", "batch"):
            e.append("training.langevin_scope must be 'pool' or 'batch'")
        if tr.boundary not in ("reflect", "clamp"):
            e.append("training.boundary must be 'reflect' or 'clamp'")
        for k in ("beta_init", "beta_max", "lr_init", "lr_final", "eta_init", "eta_final", "beta_every"):
            if not getattr(tr, k) > 0:
                e.append(f"training.{k} must be positive")
        if tr.beta_max < tr.beta_init:
            e.append("training.beta_max must be >= training.beta_init")
        if tr.beta_growth < 1:
            e.append("training.beta_growth must be >= 1")
        if not 0 <= tr.beta_warmup <= 1:
            e.append("training.beta_warmup must lie in [0, 1]")
        if tr.lr_final > tr.lr_init:
            e.append("training.lr_final must not exceed training.lr_init")
        if tr.eta_final > tr.eta_init:
            e.append("training.eta_final must not exceed training.eta_init")
        for k in ("val_every", "val_samples", "val_infer_iters", "log_every"):
            if getattr(tr, k) < 1:
                e.append(f"training.{k} must be >= 1")
        for k in ("test_samples", "infer_iters", "regret_samples", "regret_restarts", "regret_infer_iters"):
            if getattr(ev, k) < 1:
                e.append(f"eval.{k} must be >= 1")
        if ev.infer_lr0 <= 0 or ev.infer_lr1 <= 0:
            e.append("eval.infer_lr0 and eval.infer_lr1 must be positive")
        if not 0 <= ev.momentum < 1:
            e.append("eval.momentum must lie in [0, 1)")
        bad = [b for b in ev.baselines if b not in _BASELINES]
        if bad:
            e.append(f"eval.baselines: unknown {bad}; choose from {_BASELINES}")
        if self.run.name and not re.fullmatch(r"[\w.\-]+", self.run.name):
            e.append("run.name may only contain letters, digits, '_', '-' and '.'")
        return e

    # -- derived objects -----------------------------------------------------

    def make_problem(self) -> MechanismProblem:
        p = self.problem
        return MechanismProblem(p.n, p.m, p.dist, p.c_prod, p.c_dup, p.reverse, p.buyer_value)

    def network_spec(self) -> PgmnSpec:
        nw = self.network
        return PgmnSpec(
            d_x=self.problem.m,
            d_y=(self.problem.n - 1) * self.problem.m,
            K=nw.K,
            G=nw.G,
            E=nw.E,
            soft_beta=nw.soft_beta,
            pan_hidden=nw.pan_hidden,
            pan_layers=nw.pan_layers,
            slope=nw.slope,
            h_x=nw.h_x,
        )

    def solver(self, iters: int | None = None) -> SolverConfig:
        ev = self.eval
        return SolverConfig(iters or ev.infer_iters, ev.infer_lr0, ev.infer_lr1, ev.momentum)

    @property
    def run_dir(self) -> Path:
        return Path(self.run.out_dir) / self.run.name


def _allowed(hint) -> tuple[type, ...]:
    args = typing.get_args(hint) or (hint,)
    return tuple(typing.get_origin(a) or a for a in args)


def _wants_float(hint) -> bool:
    return float in _allowed(hint)


def _type_ok(v, hint) -> bool:
    allowed = _allowed(hint)
    if isinstance(v, bool):
        return bool in allowed
    if isinstance(v, int) and float in allowed:
        return True
    return isinstance(v, allowed)


def _type_name(hint) -> str:
    return " or ".join("none" if a is type(None) else a.__name__ for a in _allowed(hint))


def _json_safe(v):
    if isinstance(v, float) and math.isinf(v):
        return None
    return v


def _toml_line(err: tomllib.TOMLDecodeError) -> str:
    mt = re.search(r"line (\d+)", str(err))
    return f"line {mt.group(1)}" if mt else "unknown line"


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    """Read a TOML file (``None`` or an empty file gives the defaults)."""
    if path is None:
        return ExperimentConfig().resolved()
    text = Path(path).read_text()
    return parse_config(text, source=str(path))


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{source}: parse error at {_toml_line(exc)}: {exc}"]) from None
    data = _restore_inf(data)
    return ExperimentConfig.from_dict(data)


def _restore_inf(data: dict) -> dict:
    net = data.get("network")
    if isinstance(net, dict) and net.get("soft_beta", 0) is None:
        net["soft_beta"] = math.inf
    return data


def config_from_json(d: dict) -> ExperimentConfig:
    """Inverse of :meth:`ExperimentConfig.to_dict` (``None`` soft_beta means hard max)."""
    d = {k: dict(v) for k, v in d.items()}
    if d.get("network", {}).get("soft_beta", 1) is None:
        d["network"]["soft_beta"] = math.inf
    return ExperimentConfig.from_dict(d, resolve=False)


def dump_toml(cfg: ExperimentConfig) -> str:
    """Write a config back out as TOML (automatic fields included)."""
    lines = []
    for name, sec in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in sec.items():
            if v is None:
                if name == "network" and k == "soft_beta":
                    lines.append(f"{k} = inf")
                continue
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)
