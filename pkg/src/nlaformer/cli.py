"""``nlaf`` command line: verify, cgrun, train, gen.

Exit codes: 0 all gates pass, 1 a gate failed, 2 usage error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .artifacts import RunManifest, write_weights
from .constructions import BUDGETS, CG_LIN, DEFAULT_GRID, OP_GROUPS, LinearizationParams, reports_to_csv
from .experiments import VERIFY_FFN, compare_cg, expand_ops, fmt, verify_ops
from .reference import gen_problem_set, save_problem_set
from .training import PRESETS, SWEEPS, NumericDivergence, TrainConfig, pipeline_params, train

EXIT_OK, EXIT_GATE, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return vals


def parse_grid(text: str):
    """``default`` or ``C:c`` pairs separated by commas, e.g. ``15:1e-3,20:1e-4``."""
    if text == "default":
        return list(DEFAULT_GRID)
    grid = []
    for item in text.split(","):
        try:
            C, c = item.split(":")
            grid.append((float(C), float(c)))
        except ValueError:
            raise UsageError(f"bad grid point {item!r}; expected C:c") from None
    if not grid:
        raise UsageError("grid must be non-empty")
    return grid


def _emit(path: str | None, text: str) -> list[str]:
    if path is None or path == "-":
        sys.stdout.write(text)
        return []
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)
    return [path]


def _finish(manifest: RunManifest, started: float) -> int:
    manifest.wall_clock_s = round(time.perf_counter() - started, 3)
    manifest.write_sidecars()
    return EXIT_OK if all(manifest.gates.values()) else EXIT_GATE


# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    started = time.perf_counter()
    ops = expand_ops(args.ops)
    grid = parse_grid(args.grid)
    if args.C is not None or args.c is not None:
        grid = [(args.C if args.C is not None else 15.0, args.c if args.c is not None else 1e-3)]
    for C, c in grid:
        LinearizationParams(C, c)
    verdicts = verify_ops(ops, args.n, grid, args.trials, args.seed)
    reports = [r for v in verdicts for r in v.reports]
    outputs = _emit(args.out, reports_to_csv(reports))

    by_group: dict[tuple[str, int], list] = {}
    group_of = {op: g for g, members in OP_GROUPS.items() for op in members}
    for v in verdicts:
        by_group.setdefault((group_of[v.op], v.n), []).append(v)
    report = sys.stdout if outputs else sys.stderr
    gates = {}
    for (group, n), vs in by_group.items():
        print(f"== {group} n={n} ==", file=report)
        for v in vs:
            layers, heads = BUDGETS[v.op]
            best = v.best
            label = f"{v.op}: " if len(vs) > 1 else ""
            print(f"{label}layers={layers} heads={heads} {'PASS' if v.budget_ok else 'FAIL'}", file=report)
            print(f"{label}best max_error={best.max_error:.3e} at C={best.C:g} c={best.c:g} "
                  f"tol={v.tolerance:g} {'PASS' if v.accuracy_ok else 'FAIL'}"
                  + (" (derived, not transcribed)" if best.derived else ""), file=report)
            gates[f"{v.op}/n={n}/budget"] = v.budget_ok
            gates[f"{v.op}/n={n}/accuracy"] = v.accuracy_ok
    ok = all(gates.values())
    print(f"verify: {'PASS' if ok else 'FAIL'}", file=report)
    cfg = {"ops": ops, "n": args.n, "grid": [list(g) for g in grid], "trials": args.trials, "seed": args.seed,
           "ffn": {"bound": VERIFY_FFN.bound, "knots": VERIFY_FFN.knots, "div_guard": VERIFY_FFN.div_guard}}
    return _finish(RunManifest("verify", cfg, args.seed, outputs, gates), started)


def cmd_cgrun(args) -> int:
    started = time.perf_counter()
    n = args.n[0]
    if len(args.n) != 1:
        raise UsageError("cgrun takes a single --n")
    if n > 16:
        raise UsageError("cgrun requires n <= 16")
    lin = LinearizationParams(args.C if args.C is not None else CG_LIN.C, args.c if args.c is not None else CG_LIN.c)
    cmp_ = compare_cg(n, args.sigma, args.seeds, args.T, lin, args.seed)
    cfg = {"n": n, "sigma": args.sigma, "seeds": args.seeds, "T": cmp_.T, "C": lin.C, "c": lin.c, "seed": args.seed}
    if cmp_.first_bad is not None:
        prob, t = cmp_.first_bad
        print(f"cgrun: linearization diverged: non-finite prompt at iteration {t} of problem {prob}",
              file=sys.stderr)
        if args.out:
            RunManifest("cgrun", cfg, args.seed, [], {"finite": False}).write(args.out + ".manifest.json")
        return EXIT_DIVERGED
    outputs = _emit(args.out, cmp_.long_csv())
    gate = cmp_.max_deviation < args.tol
    print(f"cgrun: max_t mean deviation {cmp_.max_deviation:.3e} (tol {args.tol:g}) {'PASS' if gate else 'FAIL'}",
          file=sys.stderr if not outputs else sys.stdout)
    return _finish(RunManifest("cgrun", cfg, args.seed, outputs, {"finite": True, "deviation": bool(gate)}), started)


def resolve_train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """Defaults < preset < config file < flags."""
    if base is not None:
        cfg = base
    else:
        cfg = PRESETS[args.preset] if args.preset in PRESETS else TrainConfig()
    if args.config:
        d = json.loads(Path(args.config).read_text())
        merged = json.loads(cfg.to_json())
        merged.update(d)
        cfg = TrainConfig.from_dict(merged)
    over = {}
    for flag, key in (("teacher", "teacher"), ("T", "T"), ("seed", "seed"), ("steps", "steps"), ("mode", "mode")):
        val = getattr(args, flag, None)
        if val is not None:
            over[key] = val
    if args.n is not None:
        if len(args.n) != 1:
            raise UsageError("train takes a single --n")
        over["n"] = args.n[0]
    if args.sigma is not None:
        over["sigma"] = args.sigma
    if args.lr is not None:
        over["lr_schedule"] = ((args.lr, 0),)
    if "T" in over and "K" not in over:
        over["K"] = min(cfg.K, over["T"] + 1)
    return replace(cfg, **over)


def metrics_csv(result, T: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", *[f"rel_err_t{t}" for t in range(T + 1)],
                *[f"int_err_t{t}" for t in range(T + 1)], "discrepancy"])
    for step, loss, m in result.history:
        w.writerow([step, fmt(loss), *[fmt(v) for v in m.row()]])
    return buf.getvalue()


def _train_one(cfg: TrainConfig, out_dir: Path, check: bool, started: float) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_dict = json.loads(cfg.to_json())
    try:
        result = train(cfg, log=lambda s: print(s, file=sys.stderr))
    except NumericDivergence as exc:
        print(f"train: {exc}", file=sys.stderr)
        RunManifest("train", cfg_dict, cfg.seed, [], {"finite": False}).write(out_dir / "run.manifest.json")
        return EXIT_DIVERGED
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text(metrics_csv(result, cfg.T))
    weights_path = out_dir / "weights.nlafw"
    write_weights(weights_path, pipeline_params(result.pipeline), cfg_dict)
    summary_path = out_dir / "summary.json"
    disc = [m.discrepancy for _, _, m in result.history]
    summary = {"initial_loss": result.initial_loss, "final_loss": result.final_loss,
               "loss_ratio": result.loss_ratio, "discrepancy_first": disc[0], "discrepancy_last": disc[-1]}
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"train: loss {result.initial_loss:.6e} -> {result.final_loss:.6e}  ratio {result.loss_ratio:.4f}")
    print(f"train: discrepancy {disc[0]:.6e} -> {disc[-1]:.6e}")
    gates = {"finite": bool(np.isfinite(result.final_loss))}
    if check:
        gates["loss_ratio<=0.1"] = bool(result.loss_ratio <= 0.1)
        gates["discrepancy_decreased"] = bool(disc[-1] < disc[0])
    manifest = RunManifest("train", cfg_dict, cfg.seed, [str(metrics_path), str(weights_path), str(summary_path)],
                           gates)
    return _finish(manifest, started)


def cmd_train(args) -> int:
    started = time.perf_counter()
    out = Path(args.out or "nlaf-train")
    if args.preset in SWEEPS:
        codes = []
        key = "eta" if args.preset == "eta-grid" else "lam"
        for base in SWEEPS[args.preset]:
            cfg = resolve_train_config(args, base)
            codes.append(_train_one(cfg, out / f"{key}={getattr(base, key):g}", args.check, started))
        return max(codes)
    if args.preset is not None and args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS) + sorted(SWEEPS)}")
    return _train_one(resolve_train_config(args), out, args.check, started)


def cmd_gen(args) -> int:
    started = time.perf_counter()
    if len(args.n) != 1:
        raise UsageError("gen takes a single --n")
    n = args.n[0]
    problems = gen_problem_set(n, args.sigma, args.seed, args.count)
    out = args.out or f"problems_n{n}_sigma{args.sigma:g}_seed{args.seed}.json"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_problem_set(out, n, args.sigma, args.seed, problems)
    print(f"gen: wrote {len(problems)} problems to {out}")
    cfg = {"n": n, "sigma": args.sigma, "seed": args.seed, "count": args.count}
    return _finish(RunManifest("gen", cfg, args.seed, [str(out)], {"written": True}), started)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlaf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="build constructions, sweep (C, c), check budgets and accuracy")
    v.add_argument("--ops", default="all", help="'all', group or op names, comma separated")
    v.add_argument("--n", type=_int_list, default=[4], help="comma-separated sizes")
    v.add_argument("--grid", default="default", help="'default' or C:c pairs, e.g. 15:1e-3,20:1e-4")
    v.add_argument("--C", type=float, help="single grid point C (overrides --grid)")
    v.add_argument("--c", type=float, help="single grid point c (overrides --grid)")
    v.add_argument("--trials", type=int, default=8)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="CSV path (default: stdout)")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("cgrun", help="compare the CG transformer against reference CG")
    g.add_argument("--n", type=_int_list, default=[4])
    g.add_argument("--sigma", type=float, default=1.2)
    g.add_argument("--seeds", type=int, default=32, help="number of seeded problems")
    g.add_argument("--seed", type=int, default=0, help="base seed")
    g.add_argument("--T", type=int, help="iterations (default n)")
    g.add_argument("--C", type=float)
    g.add_argument("--c", type=float)
    g.add_argument("--tol", type=float, default=1e-2)
    g.add_argument("--out", help="CSV path (default: stdout)")
    g.set_defaults(func=cmd_cgrun)

    t = sub.add_parser("train", help="toy-scale training run")
    t.add_argument("--preset", help=f"one of {sorted(PRESETS) + sorted(SWEEPS)}")
    t.add_argument("--config", help="TrainConfig JSON (overrides the preset)")
    t.add_argument("--teacher", choices=["cg", "pcg"])
    t.add_argument("--mode", choices=["result", "joint", "step_solution"])
    t.add_argument("--n", type=_int_list)
    t.add_argument("--sigma", type=float)
    t.add_argument("--T", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float, help="constant learning rate (replaces the schedule)")
    t.add_argument("--check", action="store_true", help="gate on loss ratio <= 0.1 and falling discrepancy")
    t.add_argument("--out", help="output directory (default nlaf-train)")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("gen", help="write a seeded SPD problem set as JSON")
    q.add_argument("--n", type=_int_list, default=[4])
    q.add_argument("--sigma", type=float, default=1.2, help="lognormal diagonal spread, e.g. 1.0, 1.2, 1.4")
    q.add_argument("--count", type=int, default=1)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", help="JSON path")
    q.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"nlaf {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"nlaf {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
