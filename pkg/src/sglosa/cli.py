"""``sglosa`` command line: solve a scenario, simulate the closed loop, or
run the timing/parameter sweeps."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import backend
from .harness import (SOLVERS, ConfigError, builtin_config, dddp_param_sweep, load_config,
                      monte_carlo, mpc_simulate, run_scenario, solve, sweep_initial_conditions)

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sglosa", description=__doc__)
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--scenario", type=int, choices=(1, 2, 3),
                   help="built-in scenario used as the base configuration")
    p.add_argument("--solver", choices=SOLVERS, default="ddp")
    p.add_argument("--delta-a", type=float, dest="delta_a",
                   help="control discretization: SDP grid spacing / DDDP initial spacing")
    p.add_argument("--cv", type=float, help="DDDP corridor factor for speed")
    p.add_argument("--cx", type=float, help="DDDP corridor factor for position")
    p.add_argument("--corridor", choices=("halfwidth", "width"),
                   help="DDDP position corridor: +-C_x*da (halfwidth) or +-C_x*da/2 (width)")
    p.add_argument("--seed", type=int, help="seed of the switching realization (MPC)")
    p.add_argument("--out-dir", type=Path, dest="out_dir", default=Path("out"))
    p.add_argument("--sweep", choices=("initial", "dddp-params"),
                   help="initial: DDDP/DDP timing over (x0, v0); dddp-params: C_v x da0 grid")
    p.add_argument("--x0-grid", type=_floats, dest="x0_grid", default=[0.0, 25.0, 50.0, 75.0, 100.0])
    p.add_argument("--v0-grid", type=_floats, dest="v0_grid", default=[2.0, 5.0, 8.0, 11.0, 14.0])
    p.add_argument("--mpc", action="store_true", help="closed-loop run with a realized switch")
    p.add_argument("--runs", type=int, help="number of closed-loop runs (seeds seed..seed+runs-1)")
    p.add_argument("--resolve", action="store_true", help="re-plan at every step (MPC)")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells / SDP row blocks")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args):
    base = builtin_config(args.scenario) if args.scenario else None
    if args.config:
        cfg = load_config(args.config, base)
    elif base is not None:
        cfg = base
    else:
        raise ConfigError("scenario: give --scenario or --config")
    if args.delta_a is not None:
        if args.delta_a <= 0:
            raise ConfigError("delta-a: must be positive")
        cfg = replace(cfg, sdp=replace(cfg.sdp, delta=args.delta_a))
        try:
            cfg = replace(cfg, dddp=replace(cfg.dddp, da0=args.delta_a,
                                            da_floor=min(cfg.dddp.da_floor, args.delta_a)))
        except ValueError as exc:
            raise ConfigError(f"delta-a: {exc}") from None
    if args.cv is not None or args.cx is not None:
        cx, cv = cfg.dddp.C
        try:
            cfg = replace(cfg, dddp=replace(cfg.dddp, C=(args.cx if args.cx is not None else cx,
                                                         args.cv if args.cv is not None else cv)))
        except ValueError as exc:
            raise ConfigError(f"cv/cx: {exc}") from None
    if args.corridor is not None:
        cfg = replace(cfg, dddp=replace(cfg.dddp, corridor=args.corridor))
    mpc = cfg.mpc
    if args.seed is not None:
        mpc = replace(mpc, seed=args.seed)
    if args.runs is not None:
        if args.runs < 1:
            raise ConfigError("runs: must be >= 1")
        mpc = replace(mpc, runs=args.runs)
    if args.resolve:
        mpc = replace(mpc, resolve=True)
    if args.jobs > 1:
        cfg = replace(cfg, sdp=replace(cfg.sdp, jobs=args.jobs))
    return replace(cfg, mpc=mpc)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits with 2, which is reserved for non-convergence
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out_dir = args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    name = cfg.scenario.name or "scenario"

    if args.sweep == "initial":
        rows = sweep_initial_conditions(cfg, args.x0_grid, args.v0_grid, args.jobs,
                                        out_dir / f"{name}_sweep_initial.csv")
        failed = sum(1 for r in rows if r["error"])
        print(f"{len(rows)} cells, {failed} failed -> {out_dir / f'{name}_sweep_initial.csv'}")
        return EXIT_OK
    if args.sweep == "dddp-params":
        rows = dddp_param_sweep(cfg, jobs=args.jobs, path=out_dir / f"{name}_dddp_params.csv")
        for r in rows:
            print(f"C_v={r['C_v']:g} da0={r['da0']:g}: cost={r['cost']:.6f} "
                  f"iterations={r['iterations']} time={r['time']:.3g}s {r['error']}")
        return EXIT_OK

    if args.mpc:
        if cfg.mpc.runs > 1:
            summ = monte_carlo(cfg, args.solver, cfg.mpc.runs, cfg.mpc.seed)
            out = {"solver": args.solver, "runs": summ.runs, "mean_realized_cost": summ.mean,
                   "std_error": summ.std_error, "planned_cost": summ.planned_cost,
                   "k1_counts": {str(k): n for k, n in sorted(summ.k1_counts.items())}}
        else:
            r = mpc_simulate(cfg, args.solver, cfg.mpc.seed, cfg.mpc.resolve)
            out = {"solver": args.solver, "seed": r.seed, "resolve": cfg.mpc.resolve,
                   "realized_k1": r.realized_k1, "controls": r.controls,
                   "pre_switch_cost": r.pre_switch_cost, "tail_cost": r.tail_cost,
                   "realized_cost": r.realized_cost}
        path = out_dir / f"{name}_{args.solver}_mpc.json"
        path.write_text(json.dumps(out, indent=2))
        print(json.dumps({k: v for k, v in out.items() if k != "controls"}, indent=2))
        return EXIT_OK

    rep = run_scenario(cfg, args.solver, out_dir)
    print(f"{rep.scenario} {rep.solver} [{backend.BACKEND}]: cost={rep.cost:.6f} "
          f"iterations={rep.iterations} time={rep.wall_time:.4g}s converged={rep.converged}")
    print(f"trajectory: {rep.trajectory_path}")
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
