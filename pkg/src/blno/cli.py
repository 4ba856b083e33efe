"""Command-line entry point: ``blno <subcommand> [flags]``.

Every subcommand writes ``manifest.txt`` into its output directory before
doing any work. ``blno replay <manifest>`` re-runs the recorded command.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 verification failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import shlex
import subprocess
import sys
from pathlib import Path

import numpy as np

from .linalg import LinalgError

log = logging.getLogger("blno")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version
    try:
        return "artifact-" + version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("BLNO_OUT_DIR", "runs")
    return Path(root) / args.command


def write_manifest(out: Path, args, argv: list[str], extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"subcommand={args.command}", f"argv={shlex.join(argv)}", f"build={_build_id()}",
             f"out_dir={out}"]
    for k, v in sorted(vars(args).items()):
        if k in ("command", "func"):
            continue
        lines.append(f"arg.{k}={v}")
    for k, v in (extra or {}).items():
        lines.append(f"config.{k}={v}")
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


# ---------------------------------------------------------------- toy

def cmd_toy(args, argv):
    from . import plotting
    from .problems.toy import ToyConfig, ToyDynamics, toy_run, trajectory_array, write_toy_csv

    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    names = [d.value for d in ToyDynamics] if args.dynamics == "all" else [args.dynamics]
    try:
        init = tuple(float(v) for v in args.init.split(","))
        assert len(init) == 2
    except (ValueError, AssertionError):
        raise UsageError("--init takes two comma-separated numbers, e.g. 0.5,0.5") from None
    out = _out_dir(args)
    write_manifest(out, args, argv)
    trajs = {}
    for name in names:
        cfg = ToyConfig(ToyDynamics(name), args.lr, args.ttsa_multiple, args.reg, args.inner_steps)
        traj = toy_run(cfg, args.steps, init)
        write_toy_csv(out / f"toy_{name}.csv", traj)
        trajs[name] = trajectory_array(traj)
        print(f"{name}: final |(theta, omega)| = {traj[-1].norm:.3e}")
    if args.plot:
        plotting.toy_phase(trajs, out / "toy_phase.svg")
    return EXIT_OK


# ---------------------------------------------------------------- ihvp bench

def cmd_ihvp_bench(args, argv):
    from . import plotting
    from .problems.bench import ihvp_bench, summarize, write_bench_csv, write_summary_csv

    if args.nets < 1:
        raise UsageError("--nets must be >= 1")
    out = _out_dir(args)
    write_manifest(out, args, argv)
    rows = ihvp_bench(args.nets, args.rank, args.seed, args.rho, args.cg_iters, args.hessian, args.sampling)
    write_bench_csv(out / "ihvp_bench.csv", rows, args.timing)
    summary = summarize(rows)
    write_summary_csv(out / "ihvp_summary.csv", summary)
    for s in summary:
        print(f"{s['method']:>12}: mean {s['mean']:.3e}  median {s['median']:.3e}  "
              f"IQR [{s['q25']:.3e}, {s['q75']:.3e}]  max {s['max']:.3e}")
    if args.plot:
        errs = {m: np.array([r.error for r in rows if r.method == m and np.isfinite(r.error)])
                for m in ("nystrom", "cg", "nystrom_pcg")}
        plotting.bench_errors(errs, out / "ihvp_bench.svg")
    return EXIT_OK


# ---------------------------------------------------------------- blo

PRESETS = ("random", "convergence")


def cmd_blo(args, argv):
    from . import plotting
    from .blo import BloConfig, CgSolver, ExactSolver, NystromSolver, recommended_schedule, solve
    from .linalg import make_rng
    from .problems.quadratic import convergence_preset, make_quadratic

    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
    if args.preset == "convergence":
        oracle, x0 = convergence_preset(args.seed, args.kappa)
    else:
        oracle, x0 = make_quadratic(args.m, args.n, args.kappa, args.seed), None
    rank = args.rank if args.rank else max(1, oracle.n // 2)
    if args.solver == "exact":
        solver = ExactSolver(0.0)
    elif args.solver == "cg":
        solver = CgSolver(0.0, args.cg_iters)
    else:
        solver = NystromSolver(rank, args.rho, args.sampling)
    if args.schedule == "auto":
        sch = recommended_schedule(oracle.L, oracle.mu, 0.0, 1.0, args.rho if args.solver == "nystrom" else 0.0)
        outer_lr, inner_lr, inner_iters = sch.outer_lr, sch.inner_lr, sch.inner_iters
        print(f"schedule: alpha_x={sch.outer_lr:.6g} alpha_y={sch.inner_lr:.6g} D={sch.inner_iters} "
              f"L_phi={sch.L_phi:.6g}")
    else:
        if None in (args.outer_lr, args.inner_lr, args.inner_iters):
            raise UsageError("--schedule manual needs --outer-lr, --inner-lr and --inner-iters")
        outer_lr, inner_lr, inner_iters = args.outer_lr, args.inner_lr, args.inner_iters
    try:
        cfg = BloConfig(outer_lr, inner_lr, args.outer_iters, inner_iters, solver,
                        warm_start=not args.cold_start, target_eps=args.eps)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    write_manifest(out, args, argv, {"outer_lr": outer_lr, "inner_lr": inner_lr, "inner_iters": inner_iters,
                                     "L": oracle.L, "mu": oracle.mu})
    rec = solve(oracle.problem, cfg, make_rng(args.seed, stream=7), x0=x0)
    rec.write_csv(out / "blo.csv", args.timing)
    print(f"running mean |grad|^2 = {rec.running_mean:.6e}  stationary={rec.stationary}")
    if args.plot and rec.norms_sq:
        plotting.convergence(np.array(rec.norms_sq), out / "blo.svg")
    if rec.error:
        print(f"error: {rec.error}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------- train / aggregate

def _train_one(job):
    from .rl.train import train
    algo, env, cfg, seed, path = job
    res = train(algo, env, cfg, seed, path)
    return seed, res.error, res.best_return()


def cmd_train(args, argv):
    from .rl.config import RlConfig, load_config
    from .rl.envs import ENVIRONMENTS
    from .rl.train import ALGOS

    if args.algo not in ALGOS:
        raise UsageError(f"unknown algo {args.algo!r}; choose from {{{', '.join(ALGOS)}}}")
    if args.env not in ENVIRONMENTS:
        raise UsageError(f"unknown env {args.env!r}; choose from {{{', '.join(sorted(ENVIRONMENTS))}}}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    overrides = {"total_timesteps": args.total_timesteps}
    try:
        cfg: RlConfig = load_config(args.config, overrides)
    except (ValueError, OSError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    out = _out_dir(args)
    write_manifest(out, args, argv, dict(cfg.items()))
    seeds = [args.seed + i for i in range(args.seeds)]
    jobs = [(args.algo, args.env, cfg, s, out / f"curve_{args.algo}_{args.env}_seed{s}.csv") for s in seeds]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    failed = False
    for seed, error, best in sorted(results):
        print(f"seed {seed}: best mean return {best:.1f}" + (f"  error: {error}" if error else ""))
        failed |= bool(error)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_aggregate(args, argv):
    from . import plotting
    from .rl.train import aggregate, read_curve_csv, write_aggregate_csv

    src = Path(args.in_dir)
    files = sorted(src.glob("curve_*.csv"))
    if not files:
        raise UsageError(f"no curve_*.csv files in {src}")
    out = _out_dir(args)
    write_manifest(out, args, argv)
    rows = aggregate([read_curve_csv(f) for f in files])
    write_aggregate_csv(out / "aggregate.csv", rows)
    if args.plot:
        curves = {}
        for key in sorted({(r[0], r[1]) for r in rows}):
            sel = [r for r in rows if (r[0], r[1]) == key]
            curves[f"{key[0]} ({key[1]})"] = tuple(np.array([r[i] for r in sel], dtype=float) for i in (2, 3, 4, 5))
        plotting.learning_curves(curves, out / "aggregate.svg")
    print(f"aggregated {len(files)} curves into {out / 'aggregate.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- verify

def cmd_verify(args, argv):
    from .verify import run_checks, write_report_csv

    out = _out_dir(args)
    write_manifest(out, args, argv)
    checks = run_checks(args.seed, args.tolerance_scale)
    write_report_csv(out / "verify.csv", checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.max_error:.3e} (bound {c.bound:.1e})")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY


# ---------------------------------------------------------------- replay

def cmd_replay(args, argv):
    m = read_manifest(args.manifest)
    if "argv" not in m:
        raise UsageError(f"{args.manifest} is not a manifest (no argv line)")
    recorded = shlex.split(m["argv"])
    if recorded and recorded[0] == "replay":
        raise UsageError("refusing to replay a replay manifest")
    out = args.out or m.get("out_dir")
    cleaned, skip = [], False
    for tok in recorded:
        if skip:
            skip = False
            continue
        if tok == "--out":
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        cleaned.append(tok)
    return main(cleaned + ["--out", out])


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blno", description="Bilevel optimization with Nystrom hypergradients.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, plot=True):
        sp.add_argument("--out", default=None, help="output directory (default $BLNO_OUT_DIR/<command>)")
        if plot:
            sp.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True)

    sp = sub.add_parser("toy", help="one-step actor-critic game dynamics")
    sp.add_argument("--dynamics", default="all",
                    choices=["all", "simultaneous", "ttsa", "stackelberg", "regularized"])
    sp.add_argument("--steps", type=int, default=5000)
    sp.add_argument("--lr", type=float, default=5e-2)
    sp.add_argument("--reg", type=float, default=0.3)
    sp.add_argument("--ttsa-multiple", type=float, default=4.0)
    sp.add_argument("--inner-steps", type=int, default=0, help="0 uses the exact best response")
    sp.add_argument("--init", default="0.5,0.5")
    common(sp)
    sp.set_defaults(func=cmd_toy)

    sp = sub.add_parser("ihvp-bench", help="IHVP errors on random MLP Hessians")
    sp.add_argument("--nets", type=int, default=20)
    sp.add_argument("--rank", type=int, default=5)
    sp.add_argument("--rho", type=float, default=0.01)
    sp.add_argument("--cg-iters", type=int, default=30)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--hessian", choices=["rop", "fd"], default="rop")
    sp.add_argument("--sampling", choices=["uniform", "diagonal_squared"], default="uniform")
    sp.add_argument("--timing", action="store_true", help="record wall_ns (breaks byte determinism)")
    common(sp)
    sp.set_defaults(func=cmd_ihvp_bench)

    sp = sub.add_parser("blo", help="bilevel solve on the quadratic family")
    sp.add_argument("--preset", default="random")
    sp.add_argument("--kappa", type=float, default=20.0)
    sp.add_argument("--m", type=int, default=4)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--solver", choices=["exact", "cg", "nystrom"], default="nystrom")
    sp.add_argument("--rank", type=int, default=0, help="Nystrom rank (default n/2)")
    sp.add_argument("--rho", type=float, default=0.01)
    sp.add_argument("--sampling", choices=["uniform", "diagonal_squared"], default="uniform")
    sp.add_argument("--cg-iters", type=int, default=20)
    sp.add_argument("--schedule", choices=["auto", "manual"], default="auto")
    sp.add_argument("--outer-lr", type=float)
    sp.add_argument("--inner-lr", type=float)
    sp.add_argument("--inner-iters", type=int)
    sp.add_argument("--outer-iters", type=int, default=2000)
    sp.add_argument("--eps", type=float, default=1e-6)
    sp.add_argument("--cold-start", action="store_true")
    sp.add_argument("--timing", action="store_true", help="record wall_ns (breaks byte determinism)")
    common(sp)
    sp.set_defaults(func=cmd_blo)

    sp = sub.add_parser("train", help="train an actor-critic variant or PPO")
    sp.add_argument("--algo", required=True)
    sp.add_argument("--env", default="cartpole")
    sp.add_argument("--config", default=None, help="key = value file")
    sp.add_argument("--seeds", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0, help="first seed")
    sp.add_argument("--total-timesteps", type=int, default=None)
    sp.add_argument("--jobs", type=int, default=1)
    common(sp, plot=False)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("aggregate", help="mean and 95%% interval across seeds")
    sp.add_argument("--in-dir", required=True)
    common(sp)
    sp.set_defaults(func=cmd_aggregate)

    sp = sub.add_parser("verify", help="exact-oracle checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tolerance-scale", type=float, default=1.0)
    common(sp, plot=False)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", default=None, help="output directory (default: the recorded one)")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub_argv = argv[argv.index(args.command):] if args.command in argv else argv
    try:
        return args.func(args, sub_argv)
    except UsageError as exc:
        print(f"blno {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, LinalgError, ArithmeticError) as exc:
        print(f"blno {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
