"""Experiment runner: config, worker orchestration, post-run checks, metrics files."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import collectives as coll
from .cost import ALGORITHMS, predicted_volume
from .errors import InvalidArgument, UnsupportedConfiguration
from .oktopk import BETA_PHASES, OkState, ok_sparse_allreduce
from .sparse import SparseGrad, select_by_threshold, topk_exact
from .trainer import (
    DriftingProcess,
    LeastSquares,
    ModelState,
    Quadratic,
    Residual,
    TightCase,
    TinyMLP,
    XiCollector,
    dense_sgd_step,
    measure_xi,
    oktopk_sgd_step,
)
from .transport import InProcTransport, TrafficLedger, is_pow2, run_workers
from .tcp import read_rank_map, tcp_factory

COLUMNS = ("iter", "objective", "phase", "rank", "words_sent", "words_recv",
           "msgs", "selected_k", "exact_k", "xi", "wall_ns")
PROBLEMS = ("quadratic", "lsq", "mlp", "drifting", "tight")
STREAMS = ("drifting", "tight")
NEEDS_POW2 = ("dense", "topkdsa", "gtopk")
ALGO_PHASES = {
    "dense": ("dense",),
    "topka": ("allgatherv",),
    "gaussiank": ("allgatherv",),
    "gtopk": ("split",),
    "topkdsa": ("split", "allgatherv"),
    "oktopk": ("consensus", "split", "gather", "balance", "allgatherv"),
}
OK_SLACK = 0.3


@dataclass
class ExperimentConfig:
    algorithm: str = "oktopk"
    P: int = 4
    n: int = 1000
    density: float = 0.01
    tau: int = 64
    tau_prime: int = 32
    bucket_size: int = 4
    steps: int = 10
    problem: str = "lsq"
    seed: int = 0
    transport: str = "inproc"
    rank_map: str | None = None
    instrumented: bool = False
    lr: float = 0.3
    wall_time: bool = False
    out: str | None = None
    fmt: str = "csv"

    @property
    def k(self):
        return max(1, math.ceil(self.density * self.n - 1e-9))

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise InvalidArgument(f"unknown algorithm {self.algorithm!r}")
        if self.problem not in PROBLEMS:
            raise InvalidArgument(f"unknown problem {self.problem!r}")
        if not 0 < self.density <= 1:
            raise InvalidArgument("density must be in (0, 1]")
        if self.P < 1 or self.n < 1 or self.steps < 1:
            raise InvalidArgument("workers, n and steps must be positive")
        if self.tau < 1 or self.tau_prime < 1 or self.bucket_size < 1:
            raise InvalidArgument("tau, tau-prime and bucket must be positive")
        if self.algorithm in NEEDS_POW2 and not is_pow2(self.P):
            raise UnsupportedConfiguration(f"{self.algorithm} needs a power-of-two worker count")
        if self.transport not in ("inproc", "tcp"):
            raise InvalidArgument("transport must be inproc or tcp")
        if self.transport == "tcp" and not self.rank_map:
            raise InvalidArgument("tcp transport needs a rank map file")
        if self.fmt not in ("csv", "jsonl"):
            raise InvalidArgument("format must be csv or jsonl")
        if self.problem == "tight" and self.algorithm != "oktopk":
            raise InvalidArgument("the tight-case problem only applies to oktopk")
        return self


def make_problem(cfg):
    if cfg.problem == "quadratic":
        return Quadratic(cfg.n, cfg.seed)
    if cfg.problem == "lsq":
        return LeastSquares(cfg.n, cfg.P, cfg.seed, batch=max(1, cfg.n // 4))
    if cfg.problem == "mlp":
        return TinyMLP(cfg.n, cfg.P, cfg.seed)
    if cfg.problem == "drifting":
        return DriftingProcess(cfg.n, cfg.seed)
    return TightCase(cfg.n, cfg.k, cfg.P, cfg.tau, cfg.tau_prime)


@dataclass
class RunResult:
    rows: list
    checks: dict = field(default_factory=dict)
    final: list = field(default_factory=list)  # per-rank final w or last u

    @property
    def ok(self):
        return all(self.checks.values())


def _sparse_step(ctx, cfg, k, acc):
    """Baseline sparse allreduce on ``acc``; returns (u, contributing indexes, selected)."""
    if cfg.algorithm == "topka":
        r = coll.topka_allreduce(ctx, acc, k)
    elif cfg.algorithm == "gtopk":
        r = coll.gtopk_allreduce(ctx, acc, k)
    elif cfg.algorithm == "topkdsa":
        r = coll.topkdsa_allreduce(ctx, acc, k)
    else:
        r = coll.gaussiank_allreduce(ctx, acc, k)
    u = r.accumulated
    local = _local_selection(cfg.algorithm, acc, k, r)
    if cfg.algorithm == "gtopk":
        local = np.intersect1d(local, u.indices, assume_unique=True)
    return u, local, r.selected, r


def _local_selection(alg, acc, k, r):
    if alg == "gaussiank":
        return select_by_threshold(acc, r.info["threshold"]).indices
    return topk_exact(acc, k)[0].indices


def _worker(cfg, problem, collector):
    k = cfg.k
    phases = ALGO_PHASES[cfg.algorithm]
    stream = cfg.problem in STREAMS

    def body(ctx):
        rows = []
        ok = OkState.create(cfg.tau, cfg.tau_prime, cfg.bucket_size)
        state = None if stream else ModelState(problem.init_weights(), 0, cfg.lr)
        residual = None if stream else Residual.zeros(cfg.n)
        last = None
        for t in range(1, cfg.steps + 1):
            before = ctx.ledger.snapshot(ctx.rank)
            t0 = time.perf_counter_ns()
            xi = math.nan
            sel, gsel = 0, 0
            if stream:
                g = problem.gradient(ctx.rank, t)
                if cfg.algorithm == "oktopk":
                    last, _ = ok_sparse_allreduce(ctx, ok, g, t, k)
                    sel, gsel = ok.local_selected, ok.global_selected
                elif cfg.algorithm == "dense":
                    last = coll.dense_allreduce(ctx, g)
                    sel = gsel = cfg.n
                else:
                    last, _, sel, _ = _sparse_step(ctx, cfg, k, g)
                    gsel = last.nnz
                objective = math.nan
            elif cfg.algorithm == "dense":
                state = dense_sgd_step(ctx, state, problem)
                sel = gsel = cfg.n
                objective = problem.objective(state.w)
            elif cfg.algorithm == "oktopk":
                samples = []
                hook = None
                if cfg.instrumented:
                    hook = lambda acc, grad: samples.append(
                        measure_xi(ctx, collector, acc, grad, state.lr_at(state.t + 1), k))
                state = oktopk_sgd_step(ctx, state, residual, problem, k, ok, hook=hook)
                if samples:
                    xi = samples[0]
                sel, gsel = ok.local_selected, ok.global_selected
                objective = problem.objective(state.w)
            else:
                t_next = state.t + 1
                grad = problem.gradient(state.w, ctx.rank, t_next)
                acc = residual.eps + state.lr_at(t_next) * grad
                u, local, sel, _ = _sparse_step(ctx, cfg, k, acc)
                gsel = u.nnz
                eps = acc.copy()
                eps[local] = 0.0
                residual.eps = eps
                w = state.w.copy()
                w[u.indices] -= u.values / ctx.size
                state = ModelState(w, t_next, state.lr, state.decay)
                objective = problem.objective(state.w)
            wall = time.perf_counter_ns() - t0 if cfg.wall_time else 0
            after = ctx.ledger.snapshot(ctx.rank)
            for phase in phases:
                d = {}
                for direction in ("sent", "recv"):
                    key = (ctx.rank, phase, direction)
                    w1, m1 = after.get(key, (0, 0))
                    w0, m0 = before.get(key, (0, 0))
                    d[direction] = (w1 - w0, m1 - m0)
                rows.append({
                    "iter": t,
                    "objective": objective,
                    "phase": phase,
                    "rank": ctx.rank,
                    "words_sent": d["sent"][0],
                    "words_recv": d["recv"][0],
                    "msgs": d["sent"][1],
                    "selected_k": gsel if phase == "allgatherv" and cfg.algorithm == "oktopk" else sel,
                    "exact_k": k,
                    "xi": xi,
                    "wall_ns": wall,
                    "_refresh": bool(ok.refreshed_thresholds or ok.refreshed_boundaries)
                    if cfg.algorithm == "oktopk" else False,
                })
        final = state.w if state is not None else last
        return rows, final

    return body


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    cfg.validate()
    problem = make_problem(cfg)
    collector = XiCollector(cfg.P) if cfg.instrumented and cfg.algorithm == "oktopk" else None
    ledger = TrafficLedger()
    if cfg.transport == "tcp":
        addresses = read_rank_map(cfg.rank_map)
        if len(addresses) != cfg.P:
            raise InvalidArgument(f"rank map lists {len(addresses)} ranks, expected {cfg.P}")
        transport = tcp_factory(addresses)
    else:
        transport = InProcTransport(cfg.P)
    out = run_workers(cfg.P, _worker(cfg, problem, collector), transport=transport, ledger=ledger)
    rows = [r for rank_rows, _ in out for r in rank_rows]
    order = {p: i for i, p in enumerate(ALGO_PHASES[cfg.algorithm])}
    rows.sort(key=lambda r: (r["iter"], r["rank"], order[r["phase"]]))
    finals = [f for _, f in out]
    result = RunResult(rows, final=finals)
    result.checks = post_run_checks(cfg, rows, finals, ledger)
    for r in rows:
        r.pop("_refresh")
    return result


def _identical(a, b):
    if isinstance(a, SparseGrad):
        return a.same_as(b)
    return np.asarray(a).tobytes() == np.asarray(b).tobytes()


def post_run_checks(cfg, rows, finals, ledger):
    """Named invariant checks; the CLI exits nonzero if any fails."""
    checks = {
        "replicas_identical": all(_identical(finals[0], f) for f in finals[1:]),
        "ledger_conserved": ledger.conserved(),
    }
    P, n, k = cfg.P, cfg.n, cfg.k
    per_iter = {}
    for r in rows:
        key = (r["iter"], r["rank"])
        per_iter.setdefault(key, {})[r["phase"]] = r["words_sent"]
    if cfg.algorithm == "dense":
        edges = coll.block_edges(n, P)
        want = {rk: 2 * (n - (edges[b + 1] - edges[b])) for rk, b in _owned_blocks(P).items()}
        checks["volume_dense_exact"] = all(
            d["dense"] == want[rank] for (it, rank), d in per_iter.items())
    elif cfg.algorithm == "topka":
        checks["volume_topka_exact"] = all(
            d["allgatherv"] == 2 * k * (P - 1) for d in per_iter.values())
    elif cfg.algorithm == "gtopk":
        bound = predicted_volume("gtopk", n, k, P)[1][1]
        checks["volume_gtopk_bound"] = all(d["split"] <= bound for d in per_iter.values())
    elif cfg.algorithm == "oktopk":
        steady = {(r["iter"], r["rank"]) for r in rows if not r["_refresh"]}
        vols = [sum(per_iter[key].get(p, 0) for p in BETA_PHASES) for key in steady]
        if vols:
            bound = predicted_volume("oktopk", n, k, P)[1][1] * (1 + OK_SLACK)
            checks["volume_oktopk_bound"] = float(np.mean(vols)) <= bound + 1e-9
    return checks


def _owned_blocks(P):
    return {r: (coll._halving_schedule(r, P)[-1][1][0] if P > 1 else 0) for r in range(P)}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in COLUMNS])
    return buf.getvalue()


def emit_metrics(rows, path, fmt="csv"):
    """Write rows as CSV or JSON lines with the fixed column set."""
    if not rows:
        raise InvalidArgument("no rows to write")
    if fmt == "csv":
        text = rows_to_csv(rows)
    elif fmt == "jsonl":
        text = "".join(json.dumps({c: r[c] for c in COLUMNS}) + "\n" for r in rows)
    else:
        raise InvalidArgument(f"unknown format {fmt!r}")
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise InvalidArgument(f"cannot write {path}: {exc}") from exc
    return path


def read_metrics(path, fmt="csv"):
    text = Path(path).read_text()
    if fmt == "jsonl":
        return [json.loads(line) for line in text.splitlines() if line]
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append({c: (rec[c] if c == "phase" else _num(rec[c])) for c in COLUMNS})
    return rows


def _num(s):
    try:
        return int(s)
    except ValueError:
        return float(s)
