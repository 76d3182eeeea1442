"""Reference solvers, exact operation oracles and SPD problem generators."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dense
from .dense import DimensionError, as_matrix, as_vector, make_rng

__all__ = [
    "NotSPDError",
    "CgTrajectory",
    "ProblemSpec",
    "cg_solve",
    "pcg_jacobi",
    "op_oracle",
    "gen_problem",
    "gen_problem_set",
    "save_problem_set",
    "load_problem_set",
    "STOP_RTOL",
]

STOP_RTOL = 1e-14


class NotSPDError(ValueError):
    """The matrix handed to a CG variant is not symmetric positive definite."""


@dataclass(frozen=True)
class CgTrajectory:
    """Iterates ``0..T`` of a CG run; ``alpha``/``beta`` have one entry per step.

    ``beta[k]`` is the coefficient producing ``d[k+1]``.  After early stopping
    the converged state is repeated and the coefficients are zero.
    """

    x: np.ndarray  # (T+1, n)
    r: np.ndarray  # (T+1, n)
    d: np.ndarray  # (T+1, n)
    alpha: np.ndarray  # (T,)
    beta: np.ndarray  # (T,)
    rel_res: np.ndarray  # (T+1,)
    stopped_at: int | None = None

    @property
    def steps(self) -> int:
        return self.alpha.size


def _check_system(A, b, x0):
    A = as_matrix(A, "A")
    b = as_vector(b, "b")
    x0 = as_vector(x0, "x0")
    n = A.shape[0]
    if A.shape != (n, n) or b.size != n or x0.size != n:
        raise DimensionError(f"system shapes A{A.shape}, b{b.shape}, x0{x0.shape} do not conform")
    return A, b, x0


def _run(A, b, x0, T, precond):
    if T < 0:
        raise ValueError("T must be >= 0")
    n = b.size
    xs, rs, ds = np.zeros((T + 1, n)), np.zeros((T + 1, n)), np.zeros((T + 1, n))
    alpha, beta = np.zeros(T), np.zeros(T)
    bnorm = np.linalg.norm(b)
    x = x0.copy()
    r = b - A @ x
    z = precond(r)
    d = z.copy()
    rz = r @ z
    xs[0], rs[0], ds[0] = x, r, d
    stopped = None
    for k in range(T):
        if np.linalg.norm(r) <= STOP_RTOL * bnorm:
            stopped = k
            xs[k + 1:], rs[k + 1:], ds[k + 1:] = x, r, d
            break
        ad = A @ d
        dad = d @ ad
        if not dad > 0:
            raise NotSPDError(f"d_k^T A d_k = {dad:.3e} <= 0 at step {k}")
        a = rz / dad
        x = x + a * d
        r = r - a * ad
        z = precond(r)
        rz_new = r @ z
        bt = rz_new / rz
        d = z + bt * d
        rz = rz_new
        alpha[k], beta[k] = a, bt
        xs[k + 1], rs[k + 1], ds[k + 1] = x, r, d
    denom = bnorm if bnorm > 0 else 1.0
    rel = np.linalg.norm(rs, axis=1) / denom
    return CgTrajectory(xs, rs, ds, alpha, beta, rel, stopped)


def cg_solve(A, b, x0, T: int) -> CgTrajectory:
    """Classical conjugate gradient, ``T`` steps from ``x0``."""
    A, b, x0 = _check_system(A, b, x0)
    return _run(A, b, x0, T, lambda r: r)


def pcg_jacobi(A, b, x0, T: int) -> CgTrajectory:
    """Conjugate gradient preconditioned by ``M = diag(A)``."""
    A, b, x0 = _check_system(A, b, x0)
    diag = np.diag(A).copy()
    if np.any(diag <= 0):
        raise NotSPDError("Jacobi preconditioner needs a positive diagonal")
    return _run(A, b, x0, T, lambda r: r / diag)


_ORACLES = {
    "add": lambda i: dense.add(i["a"], i["b"]),
    "sub": lambda i: dense.sub(i["a"], i["b"]),
    "mul": lambda i: np.multiply(as_vector(i["a"]), as_vector(i["b"])),
    "div": lambda i: np.divide(as_vector(i["a"]), as_vector(i["b"])),
    "column_shift": lambda i: (as_vector(i["b"]).copy(), as_vector(i["a"]).copy()),
    "row_shift": lambda i: (as_vector(i["b"]).copy(), as_vector(i["a"]).copy()),
    "vector_transpose": lambda i: as_vector(i["a"]).copy(),
    "inner": lambda i: dense.dot(i["a"], i["b"]),
    "outer": lambda i: np.multiply.outer(as_vector(i["a"]), as_vector(i["b"])),
    "transpose": lambda i: dense.transpose(i["A"]),
    "atb": lambda i: dense.matmul(dense.transpose(i["A"]), i["B"]),
    "ab": lambda i: dense.matmul(as_matrix(i["A"]), as_matrix(i["B"])),
    "abv": lambda i: dense.matmul(as_matrix(i["A"]), as_vector(i["b"])),
}


def op_oracle(kind: str, inputs: dict):
    """Exact result of operation ``kind`` on ``inputs`` (keys ``a``, ``b``, ``A``, ``B``)."""
    try:
        fn = _ORACLES[kind]
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}") from None
    return fn(inputs)


@dataclass(frozen=True)
class ProblemSpec:
    n: int
    sigma: float
    seed: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def gen_problem(spec: ProblemSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``A = Q diag(lam) Q^T + diag(exp(sigma z))``, ``x_true ~ N(0, I)``, ``b = A x_true``."""
    rng = make_rng(spec.seed)
    n = spec.n
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = rng.uniform(0.1, 1.0, size=n)
    g = (q * lam) @ q.T
    g = 0.5 * (g + g.T)
    A = g + np.diag(np.exp(spec.sigma * rng.standard_normal(n)))
    np.linalg.cholesky(A)
    x_true = rng.standard_normal(n)
    return A, x_true, A @ x_true


def gen_problem_set(n: int, sigma: float, seed: int, count: int) -> list[dict]:
    """``count`` problems with seeds derived from ``seed``."""
    out = []
    for i in range(count):
        spec = ProblemSpec(n, sigma, dense.child_seed(seed, i))
        A, x, b = gen_problem(spec)
        out.append({"n": n, "sigma": sigma, "seed": spec.seed, "A": A, "x_true": x, "b": b})
    return out


def save_problem_set(path, n: int, sigma: float, seed: int, problems: list[dict]) -> None:
    doc = {
        "n": n,
        "sigma": sigma,
        "seed": seed,
        "count": len(problems),
        "problems": [
            {
                "n": p["n"],
                "sigma": p["sigma"],
                "seed": p["seed"],
                "A": p["A"].ravel().tolist(),
                "x_true": p["x_true"].tolist(),
                "b": p["b"].tolist(),
            }
            for p in problems
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_problem_set(path) -> list[dict]:
    doc = json.loads(Path(path).read_text())
    problems = []
    for p in doc["problems"]:
        n = int(p["n"])
        problems.append({
            "n": n,
            "sigma": float(p["sigma"]),
            "seed": int(p["seed"]),
            "A": np.asarray(p["A"], dtype=np.float64).reshape(n, n),
            "x_true": np.asarray(p["x_true"], dtype=np.float64),
            "b": np.asarray(p["b"], dtype=np.float64),
        })
    return problems
