"""Time the compiled kernels against the numpy fallback on realistic packs.

    python benchmarks/bench_kernels.py [--rows 4096] [--repeat 5]

Prints one line per kernel with the best-of-``repeat`` wall time of each
backend, their ratio, and the largest output difference between them.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from convexmenu import kernels
from convexmenu.networks import PartialGroupMaxNet, PgmnSpec


def best_time(fn, repeat: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(rows: int, seed: int):
    rng = np.random.default_rng(seed)
    for n, m in ((1, 2), (1, 10), (3, 2)):
        net = PartialGroupMaxNet(PgmnSpec.default(n, m), seed=seed)
        cond = rng.uniform(0, 1, (rows, (n - 1) * m)) if n > 1 else None
        pack = net.pack(cond)
        t = rng.uniform(0, 1, (rows, m))
        x = rng.uniform(0, 1, (rows, m))
        yield f"n={n} m={m}", net.layout, pack, t, x, rng


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--infer-iters", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if kernels.compiled is None:
        raise SystemExit("compiled extension not built; reinstall without CONVEXMENU_NO_EXT")
    fast, slow = kernels.compiled, kernels.fallback
    soft = 4096.0
    print(f"{'kernel':<28}{'compiled s':>12}{'numpy s':>12}{'speedup':>10}{'max diff':>12}")
    for label, layout, pack, t, x, rng in cases(args.rows, args.seed):
        noise = rng.standard_normal((2, args.rows, t.shape[1]))
        x0 = np.full_like(t, 0.5)
        jobs = {
            "value_and_xgrad": lambda k: k.value_and_xgrad(pack, layout, x, soft),
            "langevin x2": lambda k: k.langevin(pack, layout, t, x, noise, 0.01, 512.0, soft),
            f"best_response x{args.infer_iters}": lambda k: k.best_response(
                pack, layout, t, x0, args.infer_iters, 0.2, 3e-4, 0.9, np.inf),
        }
        for name, job in jobs.items():
            tf, of = best_time(lambda: job(fast), args.repeat)
            ts, os_ = best_time(lambda: job(slow), args.repeat)
            of = of if isinstance(of, tuple) else (of,)
            os_ = os_ if isinstance(os_, tuple) else (os_,)
            diff = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) for a, b in zip(of, os_))
            print(f"{label + ' ' + name:<28}{tf:>12.4f}{ts:>12.4f}{ts / tf:>9.1f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
