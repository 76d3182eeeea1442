"""Toy-scale training of a looped transformer against CG trajectories."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from ..constructions import cg_layout, cg_prompt
from ..dense import child_seed, make_rng
from ..engine import AttentionHead, NlafPipeline, ProbeSpec, ReluNetwork, TransformerLayer
from ..reference import cg_solve, gen_problem_set, pcg_jacobi
from .losses import MetricSet, compute_metrics, loss_joint, loss_result, loss_step_solution, window_start
from .optim import AdamState, adam_step, lr_at
from .tape import forward_tape, pipeline_from_params, pipeline_params

__all__ = [
    "TrainConfig",
    "NumericDivergence",
    "PRESETS",
    "SWEEPS",
    "ETA_GRID",
    "LAMBDA_GRID",
    "Dataset",
    "make_dataset",
    "init_pipeline",
    "probe_spec",
    "batch_loss",
    "train",
    "TrainResult",
]

ETA_GRID = (0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001)
LAMBDA_GRID = (13.0, 10.0, 7.0, 4.0, 1.0, 0.5)
DEFAULT_SCHEDULE = ((1e-3, 1000), (3e-4, 500), (1e-4, 0))


class NumericDivergence(FloatingPointError):
    """A loss or tensor became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    n: int = 4
    d_embed: int = 32
    T: int = 4
    K: int = 5
    batch: int = 16
    steps: int = 2000
    lr_schedule: tuple = DEFAULT_SCHEDULE
    seed: int = 0
    mode: str = "joint"
    teacher: str = "cg"
    eta: float = 0.0005
    lam: float = 10.0
    sigma: float = 1.2
    train_size: int = 512
    eval_size: int = 64
    eval_every: int = 100
    pre_heads: int = 4
    loop_heads: int = 2
    ffn_mult: int = 4
    init_scale: float = 1.0

    def __post_init__(self):
        if self.eta < 0 or self.lam < 0:
            raise ValueError("eta and lambda must be >= 0")
        window_start(self.T, self.K)
        if self.mode not in ("result", "joint", "step_solution"):
            raise ValueError(f"unknown supervision mode {self.mode!r}")
        if self.teacher not in ("cg", "pcg"):
            raise ValueError(f"unknown teacher {self.teacher!r}")
        for name in ("n", "d_embed", "batch", "train_size", "eval_size", "eval_every", "pre_heads", "loop_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0 or self.T < 0:
            raise ValueError("steps and T must be >= 0")
        object.__setattr__(self, "lr_schedule", tuple(tuple(x) for x in self.lr_schedule))

    def to_json(self) -> str:
        d = asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


PRESETS = {
    "toy-joint": TrainConfig(),
    "toy-result": TrainConfig(mode="result"),
    "toy-step-solution": TrainConfig(mode="step_solution"),
}
SWEEPS = {
    "eta-grid": [replace(PRESETS["toy-joint"], eta=e) for e in ETA_GRID],
    "lambda-grid": [replace(PRESETS["toy-step-solution"], lam=lam) for lam in LAMBDA_GRID],
}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    prompts: np.ndarray  # (P, 6n+2, n+1)
    x_true: np.ndarray  # (P, n)
    x_ref: np.ndarray  # (P, T+1, n)
    in_ref: np.ndarray  # (P, T+1, 2n): (r_t, d_t)

    def __len__(self):
        return self.prompts.shape[0]

    def take(self, idx) -> "Dataset":
        return Dataset(self.prompts[idx], self.x_true[idx], self.x_ref[idx], self.in_ref[idx])


def make_dataset(n: int, sigma: float, seed: int, count: int, T: int, teacher: str = "cg") -> Dataset:
    layout = cg_layout(n)
    solver = cg_solve if teacher == "cg" else pcg_jacobi
    prompts, xs, xr, ir = [], [], [], []
    for prob in gen_problem_set(n, sigma, seed, count):
        x0 = np.zeros(n)
        traj = solver(prob["A"], prob["b"], x0, T)
        prompts.append(cg_prompt(layout, prob["A"], prob["b"], x0))
        xs.append(prob["x_true"])
        xr.append(traj.x)
        ir.append(np.concatenate([traj.r, traj.d], axis=1))
    return Dataset(np.stack(prompts), np.stack(xs), np.stack(xr), np.stack(ir))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def probe_spec(n: int) -> ProbeSpec:
    """Reads of the readout output ``[x; r; d]``."""
    return ProbeSpec(np.arange(n), np.arange(n, 3 * n))


def _layer(rng, d: int, heads: int, hidden: int, scale: float) -> TransformerLayer:
    s = scale / np.sqrt(d)
    hs = tuple(AttentionHead(s * rng.standard_normal((d, d)), s * rng.standard_normal((d, d)),
                             0.5 * s * rng.standard_normal((d, d))) for _ in range(heads))
    ffn = ReluNetwork((s * rng.standard_normal((hidden, d)),
                       0.5 * scale / np.sqrt(hidden) * rng.standard_normal((d, hidden))),
                      (np.zeros(hidden), np.zeros(d)))
    return TransformerLayer(hs, ffn)


def init_pipeline(cfg: TrainConfig, seed: int | None = None) -> NlafPipeline:
    """Embed, a 1-layer pre block, a 1-layer loop block and a readout to ``[x; r; d]``."""
    rng = make_rng(child_seed(cfg.seed if seed is None else seed, 0))
    n, d = cfg.n, cfg.d_embed
    raw = cg_layout(n).height
    embed = rng.standard_normal((d, raw)) / np.sqrt(raw)
    pre = _layer(rng, d, cfg.pre_heads, cfg.ffn_mult * d, cfg.init_scale)
    loop = _layer(rng, d, cfg.loop_heads, cfg.ffn_mult * d, cfg.init_scale)
    readout = rng.standard_normal((3 * n, d)) / np.sqrt(d)
    return NlafPipeline((pre,), (loop,), (), cfg.T, embed, readout)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def batch_loss(cfg: TrainConfig, x_hat, in_hat, data: Dataset, grad: bool = False):
    """Configured loss; with ``grad`` returns ``(value, grad_x, grad_in or None)``."""
    if cfg.mode == "result":
        out = loss_result(x_hat, data.x_ref, grad)
        return (*out, None) if grad else out
    if cfg.mode == "joint":
        return loss_joint(x_hat, in_hat, data.x_ref, data.in_ref, cfg.eta, grad)
    out = loss_step_solution(x_hat, data.x_ref, data.x_true, cfg.lam, cfg.K, grad)
    return (*out, None) if grad else out


def _predict(pipe: NlafPipeline, data: Dataset, probes: ProbeSpec):
    taped = forward_tape(pipe, data.prompts, probes)
    return taped.x, taped.inner


def evaluate(cfg: TrainConfig, pipe: NlafPipeline, data: Dataset) -> tuple[float, MetricSet]:
    x_hat, in_hat = _predict(pipe, data, probe_spec(cfg.n))
    return batch_loss(cfg, x_hat, in_hat, data), compute_metrics(x_hat, in_hat, data.x_true, data.in_ref)


@dataclass
class TrainResult:
    pipeline: NlafPipeline
    history: list[tuple[int, float, MetricSet]] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")

    @property
    def loss_ratio(self) -> float:
        return self.final_loss / self.initial_loss


def _describe_nonfinite(taped) -> str:
    node = taped.tape.first_nonfinite()
    if node is None:
        return "loss is non-finite"
    kind = taped.tape.ops[node][0]
    return f"first non-finite tensor is node {node} ({kind})"


def train(cfg: TrainConfig, pipe: NlafPipeline | None = None,
          train_data: Dataset | None = None, eval_data: Dataset | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Adam on seeded mini-batches; held-out metrics every ``eval_every`` steps and at the end."""
    if pipe is None:
        pipe = init_pipeline(cfg)
    if train_data is None:
        train_data = make_dataset(cfg.n, cfg.sigma, child_seed(cfg.seed, 1), cfg.train_size, cfg.T, cfg.teacher)
    if eval_data is None:
        eval_data = make_dataset(cfg.n, cfg.sigma, child_seed(cfg.seed, 2), cfg.eval_size, cfg.T, cfg.teacher)
    probes = probe_spec(cfg.n)
    batch_rng = make_rng(child_seed(cfg.seed, 3))
    params = pipeline_params(pipe)
    state = AdamState()
    result = TrainResult(pipe)
    result.initial_loss = evaluate(cfg, pipe, train_data)[0]

    def record(step):
        with np.errstate(all="ignore"):
            loss, metrics = evaluate(cfg, pipe, eval_data)
        if not np.isfinite(loss):
            raise NumericDivergence(f"step {step}: held-out loss is non-finite")
        result.history.append((step, loss, metrics))
        if log is not None:
            log(f"step {step:6d}  loss {loss:.6e}  discrepancy {metrics.discrepancy:.6e}")

    for step in range(cfg.steps):
        if step % cfg.eval_every == 0:
            record(step)
        idx = np.sort(batch_rng.choice(len(train_data), size=min(cfg.batch, len(train_data)), replace=False))
        batch = train_data.take(idx)
        with np.errstate(all="ignore"):
            taped = forward_tape(pipe, batch.prompts, probes)
            value, gx, gin = batch_loss(cfg, taped.x, taped.inner, batch, grad=True)
        if not np.isfinite(value):
            raise NumericDivergence(f"step {step}: {_describe_nonfinite(taped)}")
        grads = taped.tape.backward(taped.seeds(gx, gin))
        with np.errstate(all="ignore"):
            params, state = adam_step(params, grads, state, lr_at(cfg.lr_schedule, step))
        bad = next((k for k, v in params.items() if not np.all(np.isfinite(v))), None)
        if bad is not None:
            raise NumericDivergence(f"step {step}: parameter {bad} became non-finite")
        pipe = pipeline_from_params(pipe, params)
    record(cfg.steps)
    result.pipeline = pipe
    result.final_loss = evaluate(cfg, pipe, train_data)[0]
    return result
