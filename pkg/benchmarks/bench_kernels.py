"""Compiled vs pure-Python kernels.

    python benchmarks/bench_kernels.py [--scenario 2] [--repeat 5] [--json out.json]

Each case is timed on both backends (best of ``--repeat`` runs) and the
outputs are compared, so a speedup is only reported for identical results.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from sglosa import _core, _fallback
from sglosa import ddp, dddp
from sglosa.harness import SCENARIOS
from sglosa.sdp import EscapeCache, Grid, backward_recursion


def best_time(fn, repeat: int, min_time: float = 0.05) -> float:
    """Best per-call time; fast calls are looped until ``min_time`` elapses."""
    n = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        if time.perf_counter() - t0 >= min_time or n >= 1 << 16:
            break
        n *= 2
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        best = min(best, (time.perf_counter() - t0) / n)
    return best


def cases(sc, rng):
    esc = sc.escape_args
    xs = rng.uniform(0, sc.x1, 4096)
    vs = rng.uniform(0, sc.bounds.v_max, 4096)
    init = ddp.initial_trajectory(sc)
    stencil = ddp.Stencil()
    pts, op = ddp._points(stencil), ddp.fit_operator(stencil)
    p = sc.prior.switch_probabilities
    grid = Grid.for_scenario(sc, 0.5)
    cache = EscapeCache(sc, grid)
    cache.fill()
    boxes = [grid.full_box] * (sc.prior.k_max + 1)
    x1, t1 = sc.x1, sc.prior.k_max * sc.T

    yield ("escape_batch (4096 states)",
           lambda k: k.escape_batch(xs, vs, esc[0], esc[1], esc[2]),
           lambda r: np.concatenate([np.ravel(r[0]), np.ravel(r[1])]))
    yield ("two_segment_search",
           lambda k: k.two_segment_search(sc.x0, sc.v0, x1, t1, sc.bounds.v_max, *esc),
           lambda r: np.array([r[1]]))
    yield ("escape_fits (3x3 stencil)",
           lambda k: k.escape_fits(init.x, init.v, p, pts, op, *esc),
           np.ravel)
    yield ("expected_cost",
           lambda k: k.expected_cost(init.x, init.v, init.a, p, *esc),
           lambda r: np.array([r]))
    yield ("SDP recursion (delta=0.5)",
           lambda k: backward_recursion(sc, grid, boxes, cache, kernels=k),
           lambda t: np.array([t.values[0][np.isfinite(t.values[0])].sum()]))
    yield ("DDP solve",
           lambda k: ddp.solve_ddp(sc, initial=init, kernels=k),
           lambda r: np.array([r.cost]))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", type=int, choices=(1, 2, 3), default=1)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write the results to this file")
    args = ap.parse_args(argv)

    sc = SCENARIOS[args.scenario]
    rows = []
    print(f"{'kernel':32s} {'compiled':>12s} {'python':>12s} {'speedup':>9s} {'max |diff|':>11s}")
    for name, call, summary in cases(sc, np.random.default_rng(0)):
        rc, rp = summary(call(_core)), summary(call(_fallback))
        diff = float(np.max(np.abs(rc - rp))) if rc.size else 0.0
        tc = best_time(lambda: call(_core), args.repeat)
        tp = best_time(lambda: call(_fallback), max(1, args.repeat // 2))
        rows.append({"kernel": name, "compiled_s": tc, "python_s": tp,
                     "speedup": tp / tc, "max_abs_diff": diff})
        print(f"{name:32s} {tc:12.3e} {tp:12.3e} {tp / tc:9.1f} {diff:11.2e}")

    # whole-solver context for the DDP/DDDP timing ordering
    t_dddp = best_time(lambda: dddp.solve_dddp(sc), 3, min_time=0.0)
    t_ddp = best_time(lambda: ddp.solve_ddp(sc), args.repeat)
    print(f"\nscenario {args.scenario}: DDDP {t_dddp:.3e} s, DDP {t_ddp:.3e} s "
          f"(ratio {t_dddp / t_ddp:.0f})")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"scenario": args.scenario, "kernels": rows,
                       "dddp_s": t_dddp, "ddp_s": t_ddp}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
