"""Experiment drivers shared by the CLI and the acceptance tests."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .constructions import (
    BUDGETS,
    CG_LIN,
    OP_GROUPS,
    TOLERANCES,
    ConstructionReport,
    LinearizationParams,
    nlaf_cg,
    sweep_linearization,
)
from .pwl import PwlFfnParams
from .reference import cg_solve, gen_problem_set

__all__ = [
    "thread_count",
    "parallel_map",
    "VERIFY_FFN",
    "OpVerdict",
    "verify_ops",
    "CgComparison",
    "compare_cg",
    "fmt",
]

# division is sampled with |b| >= 0.1, so the reciprocal is built on that domain
VERIFY_FFN = PwlFfnParams(bound=4.0, knots=256, div_guard=0.1)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("NLAF_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Ordered map, fanned out over at most ``NLAF_THREADS`` threads."""
    items = list(items)
    workers = min(thread_count(), len(items)) or 1
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def fmt(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class OpVerdict:
    op: str
    n: int
    reports: tuple[ConstructionReport, ...]

    @property
    def best(self) -> ConstructionReport:
        return min(self.reports, key=lambda r: (not np.isfinite(r.max_error), r.max_error))

    @property
    def tolerance(self) -> float:
        return TOLERANCES[self.op]

    @property
    def budget_ok(self) -> bool:
        return all(r.budget_ok for r in self.reports)

    @property
    def accuracy_ok(self) -> bool:
        return bool(self.best.max_error < self.tolerance)

    @property
    def passed(self) -> bool:
        return self.budget_ok and self.accuracy_ok


def expand_ops(spec: str) -> list[str]:
    """``all``, group names or op names, comma separated, into op names."""
    out: list[str] = []
    for token in (t.strip() for t in spec.split(",")):
        if not token:
            continue
        if token == "all":
            names = [op for group in OP_GROUPS.values() for op in group]
        elif token in OP_GROUPS:
            names = list(OP_GROUPS[token])
        elif token in TOLERANCES:
            names = [token]
        else:
            raise ValueError(f"unknown operation {token!r}")
        out.extend(x for x in names if x not in out)
    if not out:
        raise ValueError("no operations selected")
    return out


def verify_ops(ops: list[str], ns: list[int], grid, trials: int = 8, seed: int = 0,
               ffn: PwlFfnParams = VERIFY_FFN) -> list[OpVerdict]:
    jobs = [(op, n) for op in ops for n in ns]

    def run(job):
        op, n = job
        return OpVerdict(op, n, tuple(sweep_linearization(op, n, grid, trials, seed, ffn=ffn)))

    return parallel_map(run, jobs)


@dataclass(frozen=True)
class CgComparison:
    T: int
    deviation: np.ndarray  # (T+1,) mean over seeds of ||x_nlaf - x_cg|| / max(||x_cg||, eps)
    nlaf_rel_err: np.ndarray  # (T+1,) mean ||x_nlaf - x_true|| / ||x_true||
    cg_rel_err: np.ndarray
    first_bad: tuple[int, int] | None = None  # (problem index, iteration) of a non-finite prompt

    @property
    def max_deviation(self) -> float:
        return float(np.max(self.deviation))

    def long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "series", "value"])
        for t in range(self.T + 1):
            w.writerow([t, "nlaf_vs_cg", fmt(self.deviation[t])])
            w.writerow([t, "nlaf_rel_err", fmt(self.nlaf_rel_err[t])])
            w.writerow([t, "cg_rel_err", fmt(self.cg_rel_err[t])])
        return buf.getvalue()


def compare_cg(n: int, sigma: float, seeds: int, T: int | None = None,
               lin: LinearizationParams = CG_LIN, seed: int = 0, eps: float = 1e-12) -> CgComparison:
    """Run the constructed CG transformer and reference CG on ``seeds`` seeded problems."""
    if n > 16:
        raise ValueError("n must be <= 16 (construction prompts grow as n^2)")
    if seeds < 1:
        raise ValueError("need at least one seed")
    T = n if T is None else T
    problems = gen_problem_set(n, sigma, seed, seeds)

    def run(prob):
        A, b, x_true = prob["A"], prob["b"], prob["x_true"]
        x0 = np.zeros(n)
        with np.errstate(all="ignore"):
            traj = nlaf_cg(A, b, x0, T, lin)
        ref = cg_solve(A, b, x0, T)
        bad = next((t for t, p in enumerate(traj.prompts) if not np.all(np.isfinite(p))), None)
        dev = np.linalg.norm(traj.x - ref.x, axis=1) / np.maximum(np.linalg.norm(ref.x, axis=1), eps)
        xt = np.linalg.norm(x_true)
        return (dev, np.linalg.norm(traj.x - x_true, axis=1) / xt,
                np.linalg.norm(ref.x - x_true, axis=1) / xt, bad)

    rows = parallel_map(run, problems)
    first_bad = next(((i, r[3]) for i, r in enumerate(rows) if r[3] is not None), None)
    dev, nre, cre = (np.mean([r[k] for r in rows], axis=0) for k in range(3))
    return CgComparison(T, dev, nre, cre, first_bad)
