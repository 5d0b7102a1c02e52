"""End-to-end experiment: train, evaluate the best network, run baselines, write a report."""
from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .baselines import run_baseline
from .config import ExperimentConfig, config_from_json
from .mechanism import MenuMechanism, PricingRule, estimate_regret, expected_utility
from .networks import PartialGroupMaxNet
from .training import load_network, read_checkpoint, train

REPORT_FORMAT = "convexmenu-report"


@dataclass
class RunReport:
    setting: str
    eu: float
    std_err: float
    test_samples: int
    test_seed: int
    regret: dict | None
    baselines: list[dict] = field(default_factory=list)
    best_iter: int | None = None
    checkpoint: str | None = None
    wallclock_s: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, **asdict(self)}

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def evaluate_network(net: PartialGroupMaxNet, cfg: ExperimentConfig, samples: int | None = None,
                     seed: int | None = None, regret: bool = True) -> tuple[float, float, dict | None]:
    """Test EU (mean and standard error) and, optionally, the regret estimate of ``net``."""
    problem = cfg.make_problem()
    ev = cfg.eval
    samples = ev.test_samples if samples is None else samples
    seed = ev.test_seed if seed is None else seed
    rule = PricingRule(net)
    eu, se = expected_utility(rule, problem, samples, seed, cfg.solver())
    report = None
    if regret:
        mech = MenuMechanism(rule, problem, cfg.solver())
        r = estimate_regret(mech, problem, ev.regret_samples, ev.regret_restarts, seed,
                            misreport_solver=cfg.solver(ev.regret_infer_iters))
        report = asdict(r)
    return eu, se, report


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None,
                   resume: str | os.PathLike | None = None, regret: bool = True,
                   progress: Callable[[dict], None] | None = None) -> RunReport:
    """Train, evaluate the best-validated network, run the requested baselines.

    Writes ``checkpoint.json``, ``metrics.csv`` and ``report.json`` under
    ``out_dir`` (default: the configured run directory). A training abort
    propagates after its checkpoint has been written.
    """
    out = Path(out_dir) if out_dir is not None else cfg.run_dir
    t0 = time.perf_counter()
    result = train(cfg, out, resume=resume, progress=progress)
    eu, se, reg = evaluate_network(result.net, cfg, regret=regret)
    problem = cfg.make_problem()
    bases = [run_baseline(name, problem, cfg.eval.test_samples, cfg.eval.test_seed)
             for name in cfg.eval.baselines]
    report = RunReport(
        setting=problem.setting_id,
        eu=eu,
        std_err=se,
        test_samples=cfg.eval.test_samples,
        test_seed=cfg.eval.test_seed,
        regret=reg,
        baselines=bases,
        best_iter=result.state.best_iter,
        checkpoint=str(result.checkpoint) if result.checkpoint is not None else None,
        wallclock_s=round(time.perf_counter() - t0, 3),
        config=cfg.to_dict(),
    )
    report.write(out / "report.json")
    return report


def evaluate_checkpoint(path: str | os.PathLike, samples: int | None = None, seed: int | None = None,
                        regret: bool = True, which: str = "best") -> RunReport:
    """Re-evaluate a saved checkpoint with its recorded configuration."""
    t0 = time.perf_counter()
    doc = read_checkpoint(path)
    cfg = config_from_json(doc["config"])
    net = load_network(doc, which, expect=cfg.network_spec())
    eu, se, reg = evaluate_network(net, cfg, samples, seed, regret)
    best_eu = doc["best"]["eu"]
    return RunReport(
        setting=cfg.make_problem().setting_id,
        eu=eu,
        std_err=se,
        test_samples=cfg.eval.test_samples if samples is None else samples,
        test_seed=cfg.eval.test_seed if seed is None else seed,
        regret=reg,
        best_iter=doc["best"]["iter"] if which == "best" and best_eu is not None else None,
        checkpoint=str(path),
        wallclock_s=round(time.perf_counter() - t0, 3),
        config=cfg.to_dict(),
    )


def report_without_wallclock(report: RunReport | dict) -> dict:
    d = report.to_dict() if isinstance(report, RunReport) else dict(report)
    d.pop("wallclock_s", None)
    return d

