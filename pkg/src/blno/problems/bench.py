"""IHVP accuracy on Hessians of freshly initialized two-layer ReLU nets.

For every net a probe u ~ N(0, I) is drawn and (H + rho I)^{-1} u is
computed densely as ground truth. Each solver's error is |v_hat - v*|.
"""
from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass

import numpy as np

from ..ihvp import SamplingMode, cg_ihvp, exact_ihvp, nystrom_ihvp, nystrom_pcg, sample_columns
from ..linalg import make_rng
from .mlp import init_mlp, mlp_hessian_operator, param_count

BATCH_SIZES = (8, 16, 32, 64)
INPUT_DIMS = (32, 64, 128)
HIDDEN_DIMS = (8, 16, 32)
OUTPUT_DIMS = (4, 8, 16)
MAX_P = 2048
METHODS = ("nystrom", "cg", "nystrom_pcg")


@dataclass(frozen=True)
class MlpBenchSpec:
    batch: int
    input_dim: int
    hidden: int
    output_dim: int
    seed: int
    rho: float = 0.01
    cg_iters: int = 30
    nystrom_rank: int = 5

    @property
    def P(self) -> int:
        return param_count(self.input_dim, self.hidden, self.output_dim)


def allowed_shapes(max_p: int = MAX_P) -> list[tuple[int, int, int, int]]:
    return [s for s in itertools.product(BATCH_SIZES, INPUT_DIMS, HIDDEN_DIMS, OUTPUT_DIMS)
            if param_count(s[1], s[2], s[3]) <= max_p]


@dataclass
class BenchRow:
    net_id: int
    P: int
    method: str
    error: float
    residual: float
    wall_ns: int
    flag: str
    solution_norm: float = float("nan")
    probe_norm: float = float("nan")


def draw_spec(net_id: int, seed: int, rank: int = 5, rho: float = 0.01, cg_iters: int = 30) -> MlpBenchSpec:
    shapes = allowed_shapes()
    rng = make_rng(seed, stream=10_000 + net_id)
    b, i, h, o = shapes[int(rng.integers(len(shapes)))]
    return MlpBenchSpec(b, i, h, o, seed, rho, cg_iters, rank)


def bench_one(net_id: int, spec: MlpBenchSpec, hessian: str = "rop",
              mode: SamplingMode | str = SamplingMode.UNIFORM) -> list[BenchRow]:
    rng = make_rng(spec.seed, stream=20_000 + net_id)
    net = init_mlp(spec.input_dim, spec.hidden, spec.output_dim, rng)
    X = rng.standard_normal((spec.batch, spec.input_dim))
    Y = 0.5 * rng.standard_normal((spec.batch, spec.output_dim))
    u = rng.standard_normal(net.P)
    op = mlp_hessian_operator(net, X, Y, hessian)
    try:
        v_star = exact_ihvp(op, spec.rho, u)
    except Exception as exc:  # the whole net is unusable without ground truth
        return [BenchRow(net_id, net.P, m, float("nan"), float("nan"), 0, f"oracle_failed: {exc}") for m in METHODS]
    rows = []
    unorm = float(np.linalg.norm(u))
    sketch = None
    for method in METHODS:
        t0 = time.perf_counter_ns()
        try:
            if method == "cg":
                rep = cg_ihvp(op, u, 0.0, spec.cg_iters, tol=1e-10)
            else:
                if sketch is None:
                    sketch = sample_columns(op, min(spec.nystrom_rank, op.dim), mode, rng)
                if method == "nystrom":
                    rep = nystrom_ihvp(sketch, spec.rho, u)
                else:
                    rep = nystrom_pcg(op, u, sketch, spec.rho, spec.cg_iters, tol=1e-10)
        except Exception as exc:
            rows.append(BenchRow(net_id, net.P, method, float("nan"), float("nan"),
                                 time.perf_counter_ns() - t0, f"failed: {exc}", probe_norm=unorm))
            continue
        flag = "diverged" if rep.diverged else ("ok" if np.all(np.isfinite(rep.solution)) else "nonfinite")
        rows.append(BenchRow(net_id, net.P, method, float(np.linalg.norm(rep.solution - v_star)),
                             float(rep.residual_norm), time.perf_counter_ns() - t0, flag,
                             float(np.linalg.norm(rep.solution)), unorm))
    return rows


def ihvp_bench(n_nets: int, q: int = 5, seed: int = 0, rho: float = 0.01, cg_iters: int = 30,
               hessian: str = "rop", mode: SamplingMode | str = SamplingMode.UNIFORM) -> list[BenchRow]:
    if n_nets < 1:
        raise ValueError("n_nets must be >= 1")
    rows = []
    for i in range(n_nets):
        rows.extend(bench_one(i, draw_spec(i, seed, q, rho, cg_iters), hessian, mode))
    return rows


BENCH_COLUMNS = ("net_id", "P", "method", "error", "residual", "wall_ns", "flag")


def write_bench_csv(path, rows: list[BenchRow], record_timing: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow((r.net_id, r.P, r.method, repr(r.error), repr(r.residual),
                        r.wall_ns if record_timing else 0, r.flag))


def summarize(rows: list[BenchRow]) -> list[dict]:
    out = []
    for m in METHODS:
        e = np.array([r.error for r in rows if r.method == m and np.isfinite(r.error)])
        if e.size == 0:
            out.append(dict(method=m, n=0, mean=np.nan, median=np.nan, q25=np.nan, q75=np.nan, max=np.nan))
            continue
        q25, med, q75 = np.percentile(e, [25, 50, 75])
        out.append(dict(method=m, n=int(e.size), mean=float(e.mean()), median=float(med),
                        q25=float(q25), q75=float(q75), max=float(e.max())))
    return out


def write_summary_csv(path, summary: list[dict]) -> None:
    cols = ("method", "n", "mean", "median", "q25", "q75", "max")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in summary:
            w.writerow([s[c] if isinstance(s[c], (int, str)) else repr(s[c]) for c in cols])
