"""Acceptance gates, one test per criterion; each records a PASS/FAIL line."""

import time

import numpy as np
import pytest

from nlaformer.cli import metrics_csv
from nlaformer.constructions import (
    BUDGETS,
    OP_GROUPS,
    LinearizationParams,
    build,
    build_cg_loop,
    build_cg_pre,
    reports_to_csv,
    sweep_linearization,
)
from nlaformer.dense import make_rng
from nlaformer.experiments import compare_cg
from nlaformer.pwl import PwlFfnParams, mul_error_bound
from nlaformer.reference import ProblemSpec, cg_solve, gen_problem
from nlaformer.training import (
    PRESETS,
    TrainConfig,
    forward_tape,
    init_pipeline,
    loss_joint,
    loss_result,
    loss_step_solution,
    make_dataset,
    pipeline_from_params,
    pipeline_params,
    probe_spec,
    train,
)


def _line(record, k, ok, detail, elapsed, limit):
    ok = ok and elapsed < limit
    bound = f"limit {limit:g}s" if np.isfinite(limit) else "no time limit"
    record(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.2f}s, {bound})")
    return ok


# ---------------------------------------------------------------------------
# shared runs (criterion 9 reruns these)

def accuracy_csv():
    lin = (15.0, 1e-3)
    reports = []
    for group in OP_GROUPS.values():
        for op in group:
            if op in ("mul", "div"):
                continue
            for n in (2, 4, 8):
                reports.extend(sweep_linearization(op, n, [lin], trials=8, seed=0))
    return reports, reports_to_csv(reports)


def cg_csvs():
    return {n: compare_cg(n, 1.2, 32, None, LinearizationParams(20.0, 1e-4), seed=0) for n in (4, 8)}


def toy_run():
    cfg = PRESETS["toy-joint"]
    res = train(cfg)
    return res, metrics_csv(res, cfg.T)


_CACHE = {}


def _cached(name, fn):
    if name not in _CACHE:
        _CACHE[name] = fn()
    return _CACHE[name]


# ---------------------------------------------------------------------------

def test_criterion_1_budgets(acceptance_line):
    t0 = time.perf_counter()
    bad = []
    for n in (2, 4, 8):
        for group in OP_GROUPS.values():
            for op in group:
                con = build(op, n)
                if (con.n_layers, con.n_heads) != BUDGETS[op]:
                    bad.append(f"{op}/n={n}: {(con.n_layers, con.n_heads)}")
                if op not in ("add", "sub", "mul", "div", "row_shift", "column_shift"):
                    if con.layout.width != n + 1:
                        bad.append(f"{op}/n={n}: width {con.layout.width}")
        pre, lay = build_cg_pre(n)
        loop, _ = build_cg_loop(n)
        if (1, pre.n_heads) != BUDGETS["cg_pre"] or (1, loop.n_heads) != BUDGETS["cg_loop"]:
            bad.append(f"cg/n={n}")
        if lay.width != n + 1:
            bad.append(f"cg/n={n}: width {lay.width}")
    # fixed row count per op, linear in n (area O(n^2))
    for group in OP_GROUPS.values():
        for op in group:
            h = [build(op, n).layout.height for n in (2, 3, 4)]
            if h[2] - h[1] != h[1] - h[0]:
                bad.append(f"{op}: rows {h}")
    ok = _line(acceptance_line, 1, not bad, f"budget/shape mismatches: {bad or 'none'}",
               time.perf_counter() - t0, 1.0)
    assert ok


def test_criterion_2_construction_accuracy(acceptance_line):
    t0 = time.perf_counter()
    reports, _ = _cached("acc", accuracy_csv)
    worst = {}
    for r in reports:
        worst[r.op] = max(worst.get(r.op, 0.0), r.max_error)
    tol = {op: (1e-12 if op in ("add", "sub") else 1e-2 if op in ("ab", "abv") else 1e-3) for op in worst}
    failing = {op: e for op, e in worst.items() if not e < tol[op]}
    detail = ", ".join(f"{op}={worst[op]:.1e}" for op in sorted(worst))
    ok = _line(acceptance_line, 2, not failing, f"max errors at (15,1e-3), n in 2,4,8: {detail}",
               time.perf_counter() - t0, 30.0)
    assert ok, failing


def test_criterion_3_pwl_scalar_ops(acceptance_line):
    t0 = time.perf_counter()
    ffn = PwlFfnParams(bound=4.0, knots=256, div_guard=0.1)
    rng = make_rng(3)
    n = 2048
    a = rng.uniform(-1, 1, n)
    b = rng.uniform(-1, 1, n)
    bdiv = np.where(np.abs(b) < 0.1, np.sign(b + 1e-300) * 0.1, b)
    bdiv[:4] = [0.1, -0.1, 1.0, -1.0]
    errs = {}
    for op, bb, oracle in (("mul", b, a * b), ("div", bdiv, a / bdiv)):
        con = build(op, n, ffn=ffn)
        out = con.run(con.prompt({"a": a, "b": bb}))[-1][con.layout.row("result")]
        errs[op] = float(np.abs(out - oracle).max())
    bound = mul_error_bound(4.0, 256)
    ok = errs["mul"] < 5e-3 and errs["div"] < 5e-3 and errs["mul"] <= bound + 1e-12
    ok = _line(acceptance_line, 3, ok,
               f"mul={errs['mul']:.2e} (bound {bound:.2e}), div={errs['div']:.2e}, tol 5e-3",
               time.perf_counter() - t0, 5.0)
    assert ok


def test_criterion_4_nlaf_cg_fidelity(acceptance_line):
    t0 = time.perf_counter()
    res = _cached("cg", cg_csvs)
    dev = {n: c.max_deviation for n, c in res.items()}
    ok = all(v < 1e-2 for v in dev.values()) and all(c.first_bad is None for c in res.values())
    ok = _line(acceptance_line, 4, ok, f"max_t mean deviation n=4: {dev[4]:.2e}, n=8: {dev[8]:.2e}, tol 1e-2",
               time.perf_counter() - t0, 60.0)
    assert ok


def test_criterion_5_cg_invariants(acceptance_line):
    t0 = time.perf_counter()
    worst = {"orth": 0.0, "conj": 0.0, "term": 0.0, "beta": 0.0}
    for seed in range(10):
        A, _, b = gen_problem(ProblemSpec(8, 1.2, seed))
        tr = cg_solve(A, b, np.zeros(8), 8)
        stop = tr.stopped_at if tr.stopped_at is not None else 8
        live = [k for k in range(stop) if np.linalg.norm(tr.r[k]) >= 1e-12]
        for i in live:
            for j in live:
                if i != j:
                    ri, rj, di, dj = tr.r[i], tr.r[j], tr.d[i], tr.d[j]
                    worst["orth"] = max(worst["orth"], abs(ri @ rj) / (np.linalg.norm(ri) * np.linalg.norm(rj)))
                    worst["conj"] = max(worst["conj"], abs(di @ A @ dj) / np.sqrt((di @ A @ di) * (dj @ A @ dj)))
        worst["term"] = max(worst["term"], tr.rel_res[8])
        for k in range(stop):
            rhs = tr.r[k + 1] @ tr.r[k + 1]
            worst["beta"] = max(worst["beta"], abs(tr.beta[k] * (tr.r[k] @ tr.r[k]) - rhs) / rhs)
    ok = worst["orth"] <= 1e-8 and worst["conj"] <= 1e-8 and worst["term"] < 1e-8 and worst["beta"] <= 1e-12
    ok = _line(acceptance_line, 5, ok, ", ".join(f"{k}={v:.1e}" for k, v in worst.items()),
               time.perf_counter() - t0, 5.0)
    assert ok


def _weight_class(name):
    if name in ("embed", "readout"):
        return name
    return name.split(".")[-1]  # wq, wk, wv, w0, b0, w1, b1


def test_criterion_6_gradient_checks(acceptance_line):
    t0 = time.perf_counter()
    cfg = TrainConfig(n=3, d_embed=12, T=3, K=4)
    pipe = init_pipeline(cfg, seed=21)
    data = make_dataset(3, 1.2, 22, 4, 3)
    probes = probe_spec(3)
    params = pipeline_params(pipe)

    def loss(p):
        t = forward_tape(pipeline_from_params(pipe, p), data.prompts, probes)
        return loss_joint(t.x, t.inner, data.x_ref, data.in_ref, 0.01)

    taped = forward_tape(pipe, data.prompts, probes)
    _, gx, gi = loss_joint(taped.x, taped.inner, data.x_ref, data.in_ref, 0.01, grad=True)
    grads = taped.tape.backward(taped.seeds(gx, gi))
    rng = make_rng(23)
    h = 1e-5
    worst = {}
    classes = {}
    for name in params:
        classes.setdefault(_weight_class(name), []).append(name)
    for cls, names in sorted(classes.items()):
        for _ in range(20):
            name = names[rng.integers(len(names))]
            idx = tuple(int(rng.integers(s)) for s in params[name].shape)
            up = {k: v.copy() for k, v in params.items()}
            dn = {k: v.copy() for k, v in params.items()}
            up[name][idx] += h
            dn[name][idx] -= h
            fd = (loss(up) - loss(dn)) / (2 * h)
            g = grads[name][idx]
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-8)
            worst[cls] = max(worst.get(cls, 0.0), rel)
    ok = all(v < 1e-5 for v in worst.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items()))
    ok = _line(acceptance_line, 6, ok, f"max rel err per class: {detail}", time.perf_counter() - t0, 60.0)
    assert ok


def _brute(x_hat, x_ref, in_hat=None, in_ref=None, eta=0.0, x_true=None, lam=0.0, K=None):
    B, steps, n = x_hat.shape
    T = steps - 1
    t0 = 0 if K is None else max(T - K + 1, 0)
    total = 0.0
    for b in range(B):
        s = 0.0
        for t in range(t0, T + 1):
            for i in range(n):
                s += (x_hat[b, t, i] - x_ref[b, t, i]) ** 2
                if x_true is not None:
                    s += lam * (x_hat[b, t, i] - x_true[b, i]) ** 2
            if in_hat is not None:
                for i in range(2 * n):
                    s += eta * (in_hat[b, t, i] - in_ref[b, t, i]) ** 2
        total += s / ((T - t0 + 1) * n)
    return total / B


def test_criterion_7_loss_oracles(acceptance_line):
    t0 = time.perf_counter()
    worst = 0.0
    bitwise = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        B, T, n = 3, 4, 3
        xh, xr = rng.standard_normal((B, T + 1, n)), rng.standard_normal((B, T + 1, n))
        ih, ir = rng.standard_normal((B, T + 1, 2 * n)), rng.standard_normal((B, T + 1, 2 * n))
        xt = rng.standard_normal((B, n))
        pairs = [
            (loss_result(xh, xr), _brute(xh, xr)),
            (loss_joint(xh, ih, xr, ir, 0.0005), _brute(xh, xr, ih, ir, 0.0005)),
            (loss_step_solution(xh, xr, xt, 10.0, 3), _brute(xh, xr, x_true=xt, lam=10.0, K=3)),
        ]
        for got, want in pairs:
            worst = max(worst, abs(got - want) / abs(want))
        base = loss_result(xh, xr)
        bitwise &= loss_joint(xh, ih, xr, ir, 0.0) == base
        bitwise &= loss_step_solution(xh, xr, xt, 0.0, T + 1) == base
    ok = worst <= 1e-12 and bitwise
    ok = _line(acceptance_line, 7, ok, f"max rel diff vs brute force {worst:.1e}, reductions bitwise={bitwise}",
               time.perf_counter() - t0, 5.0)
    assert ok


def test_criterion_8_toy_training(acceptance_line):
    t0 = time.perf_counter()
    res, _ = _cached("toy", toy_run)
    disc = [m.discrepancy for _, _, m in res.history]
    ok = res.loss_ratio <= 0.1 and disc[-1] < disc[0]
    ok = _line(acceptance_line, 8, ok,
               f"loss {res.initial_loss:.3e} -> {res.final_loss:.3e} (ratio {res.loss_ratio:.4f}), "
               f"discrepancy {disc[0]:.3e} -> {disc[-1]:.3e}", time.perf_counter() - t0, 900.0)
    assert ok


def test_criterion_9_determinism(acceptance_line):
    t0 = time.perf_counter()
    first = (_cached("acc", accuracy_csv)[1],
             "".join(c.long_csv() for c in _cached("cg", cg_csvs).values()),
             _cached("toy", toy_run)[1])
    again = (accuracy_csv()[1], "".join(c.long_csv() for c in cg_csvs().values()), toy_run()[1])
    same = [a.encode() == b.encode() for a, b in zip(first, again)]
    ok = all(same)
    _line(acceptance_line, 9, ok, f"byte-identical CSVs (accuracy, cgrun, training): {same}",
          time.perf_counter() - t0, float("inf"))
    assert ok
