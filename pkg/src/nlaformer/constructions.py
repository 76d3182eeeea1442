"""Explicit transformer weights for linear-algebra operations and CG.

Every attention-based construction uses the same device.  Token 1 is an
anchor column (zero payload, positional ``e_1``).  Its key carries ``C`` in an
extra head row and every query carries ``1`` there, so each softmax column is
dominated by the anchor and, for the remaining tokens,
``e^C softmax(Z)_{k,j} ~= exp(Z_{k,j})``.  The scores of the remaining tokens
are bilinear, ``Z_{k,j} = c <key_k, query_j>``, and the value matrix is scaled
by ``e^C``.  A second head with the opposite query sign and a negated value
matrix cancels the constant term (and the quadratic term with it), leaving
``2c * sum_k value_k <key_k, query_j>``.  A linear FFN then rescales by
``1/(2c)`` and clears the scratch rows.

``cancel="zero"`` switches to the cancelling head with the bilinear query
zeroed instead of mirrored; it removes the constant but keeps the quadratic
error, and is kept for comparison sweeps.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .dense import make_rng
from .engine import (
    AttentionHead,
    ExactOracle,
    ReluNetwork,
    RowLayout,
    TransformerLayer,
    NlafPipeline,
    ProbeSpec,
    Trajectory,
    head_output,
    nlaf_run,
    linear_relu_network,
    tf_layer,
)
from .pwl import DomainError, PwlFfnParams, div_network, mul_network

__all__ = [
    "LinearizationParams",
    "DEFAULT_LIN",
    "ConstructionReport",
    "Construction",
    "BUDGETS",
    "OP_GROUPS",
    "TOLERANCES",
    "build",
    "build_pointwise",
    "build_column_shift",
    "build_row_shift",
    "build_vector_transpose",
    "build_inner_product",
    "build_outer_product",
    "build_matrix_transpose",
    "build_atb",
    "build_ab",
    "build_ab_vec",
    "cg_layout",
    "cg_prompt",
    "CG_LIN",
    "build_cg_pipeline",
    "nlaf_cg",
    "build_cg_pre",
    "build_cg_loop",
    "linearization_error",
    "cancellation_ratio",
    "sweep_linearization",
    "reports_to_csv",
    "DEFAULT_GRID",
]


@dataclass(frozen=True)
class LinearizationParams:
    C: float = 15.0
    c: float = 1e-3
    cancel: str = "mirror"

    def __post_init__(self):
        if not (0 < self.C <= 30):
            raise ValueError(f"C must lie in (0, 30], got {self.C}")
        if not (0 < self.c <= 1):
            raise ValueError(f"c must lie in (0, 1], got {self.c}")
        if self.cancel not in ("mirror", "zero"):
            raise ValueError(f"unknown cancel mode {self.cancel!r}")

    @property
    def payload_scale(self) -> float:
        """Factor by which a head pair scales its bilinear payload."""
        return 2.0 * self.c if self.cancel == "mirror" else self.c


DEFAULT_LIN = LinearizationParams()
DEFAULT_GRID = tuple((C, c) for c in (1e-1, 1e-2, 1e-3, 1e-4) for C in (5.0, 10.0, 15.0, 20.0))

# (layers, heads per layer) for each construction
BUDGETS = {
    "add": (1, 1), "sub": (1, 1), "mul": (1, 1), "div": (1, 1),
    "column_shift": (1, 2),
    "row_shift": (1, 1),
    "vector_transpose": (1, 2),
    "inner": (1, 2),
    "outer": (1, 2),
    "transpose": (1, 2),
    "atb": (1, 2),
    "ab": (2, 2),
    "abv": (2, 2),
    "cg_pre": (1, 4),
    "cg_loop": (1, 2),
}

OP_GROUPS = {
    "pointwise": ("add", "sub", "mul", "div"),
    "column_shift": ("column_shift",),
    "row_shift": ("row_shift",),
    "vector_transpose": ("vector_transpose",),
    "inner": ("inner",),
    "outer": ("outer",),
    "transpose": ("transpose",),
    "atb": ("atb",),
    "ab": ("ab",),
    "abv": ("abv",),
}

TOLERANCES = {
    "add": 1e-12, "sub": 1e-12, "row_shift": 1e-12,
    "mul": 5e-3, "div": 5e-3,
    "column_shift": 1e-3, "vector_transpose": 1e-3, "inner": 1e-3, "outer": 1e-3,
    "transpose": 1e-3, "atb": 1e-3,
    "ab": 1e-2, "abv": 1e-2,
}


# ---------------------------------------------------------------------------
# weight helpers
# ---------------------------------------------------------------------------

def _reader(layout: RowLayout, name: str, offsets=None) -> np.ndarray:
    """Rows of a 0/1 matrix picking band ``name`` (or some of its rows)."""
    sel = layout.selector(name)
    return sel if offsets is None else sel[list(offsets)]


def _move(layout: RowLayout, dst: str, src: str, src_offsets=None) -> np.ndarray:
    """``D x D`` matrix copying rows of ``src`` into band ``dst`` (row by row)."""
    m = np.zeros((layout.height, layout.height))
    d0 = layout.bands[dst][0]
    s0, s_len = layout.bands[src]
    offs = range(s_len) if src_offsets is None else src_offsets
    for i, off in enumerate(offs):
        m[d0 + i, s0 + off] = 1.0
    return m


def _head_pair(layout: RowLayout, key: np.ndarray, query: np.ndarray, value: np.ndarray,
               lin: LinearizationParams) -> tuple[AttentionHead, AttentionHead]:
    dim = layout.height
    pos0, npos = layout.bands["positional"]
    if np.any(key[:, pos0]):
        raise ValueError("payload keys must not read the anchor's positional row")
    anchor_key = np.zeros((1, dim))
    anchor_key[0, pos0] = lin.C
    anchor_query = np.zeros((1, dim))
    anchor_query[0, pos0:pos0 + npos] = 1.0
    w_k = np.vstack([key, anchor_key])
    w_v = np.exp(lin.C) * value
    w_q_main = np.vstack([lin.c * query, anchor_query])
    back = -1.0 if lin.cancel == "mirror" else 0.0
    w_q_cancel = np.vstack([back * lin.c * query, anchor_query])
    return (AttentionHead(w_q_main, w_k, w_v), AttentionHead(w_q_cancel, w_k.copy(), -w_v))


def _linear_ffn(layout: RowLayout, terms: Iterable[tuple[str, str, float]]) -> ReluNetwork:
    """Linear FFN ``out[dst] += coef * u[src]`` for each ``(dst, src, coef)`` (bands of equal length)."""
    lin_map = np.zeros((layout.height, layout.height))
    for dst, src, coef in terms:
        lin_map += coef * _move(layout, dst, src)
    return linear_relu_network(lin_map)


def _pos_to(layout: RowLayout, dst: str, n: int) -> np.ndarray:
    """Value map sending token ``k+1``'s positional one-hot ``e_{k+1}`` to ``dst`` row ``k``."""
    return _move(layout, dst, "positional", range(1, n + 1))


def _zero_head_layer(layout: RowLayout, ffn) -> TransformerLayer:
    return TransformerLayer((AttentionHead.zero(layout.height),), ffn)


# ---------------------------------------------------------------------------
# constructions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Construction:
    """Built layers plus everything needed to check them against an oracle."""

    op: str
    n: int
    layers: tuple[TransformerLayer, ...]
    layout: RowLayout
    prompt: Callable[[dict], np.ndarray] = field(repr=False)
    stages: Callable[[dict], list[np.ndarray]] = field(repr=False)
    sample: Callable[[np.random.Generator], dict] = field(repr=False)
    ffn_variant: str = "relu-linear"
    lin: LinearizationParams | None = None
    derived: bool = False

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_heads(self) -> int:
        return max(layer.n_heads for layer in self.layers)

    def run(self, p: np.ndarray) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            p = tf_layer(p, layer)
            out.append(p)
        return out


def _uniform(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def build_pointwise(op: str, n: int, ffn: PwlFfnParams = PwlFfnParams()) -> tuple[TransformerLayer, RowLayout]:
    """One zero-attention layer whose FFN writes ``a op b`` into the third row."""
    if n < 1:
        raise ValueError("n must be >= 1")
    layout = RowLayout.stack([("operand_a", 1), ("operand_b", 1), ("result", 1)], width=n)
    a, b, r = (layout.row(k) for k in ("operand_a", "operand_b", "result"))
    if op == "add":
        net = _linear_ffn(layout, [("result", "operand_a", 1.0), ("result", "operand_b", 1.0)])
    elif op == "sub":
        net = _linear_ffn(layout, [("result", "operand_a", 1.0), ("result", "operand_b", -1.0)])
    elif op == "mul":
        net = mul_network(layout, a, b, r, ffn)
    elif op == "div":
        net = div_network(layout, a, b, r, ffn)
    else:
        raise ValueError(f"unknown pointwise op {op!r}")
    return _zero_head_layer(layout, net), layout


def pointwise_prompt(layout: RowLayout, a, b, op: str = "add", ffn: PwlFfnParams = PwlFfnParams()) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if op in ("mul", "div") and (np.abs(a).max() > ffn.bound or np.abs(b).max() > ffn.bound):
        raise DomainError(f"{op} operands must satisfy |x| <= {ffn.bound}")
    if op == "div" and np.abs(b).min() < ffn.div_guard:
        raise DomainError(f"division needs |b_i| >= {ffn.div_guard}, got min {np.abs(b).min():.3g}")
    p = layout.zeros()
    p[layout.row("operand_a")] = a
    p[layout.row("operand_b")] = b
    return p


_POINTWISE_FN = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}


def _pointwise_construction(op: str, n: int, ffn: PwlFfnParams) -> Construction:
    layer, layout = build_pointwise(op, n, ffn)

    def prompt(inp):
        return pointwise_prompt(layout, inp["a"], inp["b"], op, ffn)

    def stages(inp):
        p = prompt(inp)
        p[layout.row("result")] = _POINTWISE_FN[op](inp["a"], inp["b"])
        return [p]

    def sample(rng):
        a = _uniform(rng, n)
        if op == "div":
            lo = max(ffn.div_guard, 0.1)
            b = rng.uniform(lo, 1.0, size=n) * rng.choice([-1.0, 1.0], size=n)
        else:
            b = _uniform(rng, n)
        return {"a": a, "b": b}

    variant = "relu-linear" if op in ("add", "sub") else f"relu-pwl(B={ffn.bound:g},K={ffn.knots},delta={ffn.div_guard:g})"
    return Construction(op, n, (layer,), layout, prompt, stages, sample, variant)


def build_column_shift(n: int, lin: LinearizationParams = DEFAULT_LIN) -> tuple[TransformerLayer, RowLayout]:
    """Swap the two payload columns ``[0 a b] -> [0 b a]`` (three tokens)."""
    layout = RowLayout.stack([("payload", n), ("scratch", n), ("positional", 3)], width=3)
    key = _reader(layout, "positional", [1, 2])
    query = _reader(layout, "positional", [2, 1])
    value = _move(layout, "scratch", "payload")
    heads = _head_pair(layout, key, query, value, lin)
    s = lin.payload_scale
    ffn = _linear_ffn(layout, [("payload", "payload", -1.0), ("payload", "scratch", 1.0 / s),
                               ("scratch", "scratch", -1.0)])
    return TransformerLayer(heads, ffn), layout


def _column_shift_construction(n, lin):
    layer, layout = build_column_shift(n, lin)

    def prompt(inp):
        p = layout.zeros()
        p[layout.rows("payload"), 1] = inp["a"]
        p[layout.rows("payload"), 2] = inp["b"]
        return p

    def stages(inp):
        return [prompt({"a": inp["b"], "b": inp["a"]})]

    return Construction("column_shift", n, (layer,), layout, prompt, stages,
                        lambda rng: {"a": _uniform(rng, n), "b": _uniform(rng, n)}, lin=lin)


def build_row_shift(n: int, lin: LinearizationParams = DEFAULT_LIN) -> tuple[TransformerLayer, RowLayout]:
    """Swap rows ``[a^T; b^T] -> [b^T; a^T]``.

    A row swap acts on each column separately, so the FFN performs it exactly
    and the single head is zero.  ``lin`` is accepted for a uniform builder
    signature and ignored.
    """
    layout = RowLayout.stack([("operand_a", 1), ("operand_b", 1)], width=n)
    ffn = _linear_ffn(layout, [("operand_a", "operand_a", -1.0), ("operand_a", "operand_b", 1.0),
                               ("operand_b", "operand_b", -1.0), ("operand_b", "operand_a", 1.0)])
    return _zero_head_layer(layout, ffn), layout


def _row_shift_construction(n, lin):
    layer, layout = build_row_shift(n, lin)

    def prompt(inp):
        p = layout.zeros()
        p[layout.row("operand_a")] = inp["a"]
        p[layout.row("operand_b")] = inp["b"]
        return p

    return Construction("row_shift", n, (layer,), layout, prompt,
                        lambda inp: [prompt({"a": inp["b"], "b": inp["a"]})],
                        lambda rng: {"a": _uniform(rng, n), "b": _uniform(rng, n)}, derived=True)


def build_vector_transpose(n: int, lin: LinearizationParams = DEFAULT_LIN) -> tuple[TransformerLayer, RowLayout]:
    """Move the row ``a^T`` (tokens 2..n+1) into the last column as ``a``."""
    layout = RowLayout.stack([("operand_a", 1), ("result", n), ("positional", n + 1)], width=n + 1)
    key = _reader(layout, "operand_a")
    query = _reader(layout, "positional", [n])
    heads = _head_pair(layout, key, query, _pos_to(layout, "result", n), lin)
    s = lin.payload_scale
    ffn = _linear_ffn(layout, [("result", "result", 1.0 / s - 1.0), ("operand_a", "operand_a", -1.0)])
    return TransformerLayer(heads, ffn), layout


def _vector_transpose_construction(n, lin):
    layer, layout = build_vector_transpose(n, lin)

    def prompt(inp):
        p = layout.zeros()
        p[layout.row("operand_a"), 1:] = inp["a"]
        return p

    def stages(inp):
        p = layout.zeros()
        p[layout.rows("result"), n] = inp["a"]
        return [p]

    return Construction("vector_transpose", n, (layer,), layout, prompt, stages,
                        lambda rng: {"a": _uniform(rng, n)}, lin=lin)


def build_inner_product(n: int, lin: LinearizationParams = DEFAULT_LIN) -> tuple[TransformerLayer, RowLayout]:
    """Write ``a^T b`` into the result row of the last column."""
    layout = RowLayout.stack([("operand_a", 1), ("operand_b", 1), ("result", 1), ("positional", n + 1)],
                             width=n + 1)
    key = _reader(layout, "operand_a")
    query = _reader(layout, "positional", [n])
    value = _move(layout, "result", "operand_b")
    heads = _head_pair(layout, key, query, value, lin)
    ffn = _linear_ffn(layout, [("result", "result", 1.0 / lin.payload_scale - 1.0)])
    return TransformerLayer(heads, ffn), layout


def _two_rows_prompt(layout, inp):
    p = layout.zeros()
    p[layout.row("operand_a"), 1:] = inp["a"]
    p[layout.row("operand_b"), 1:] = inp["b"]
    return p


def _inner_construction(n, lin):
    layer, layout = build_inner_product(n, lin)

    def stages(inp):
        p = _two_rows_prompt(layout, inp)
        p[layout.row("result"), n] = inp["a"] @ inp["b"]
        return [p]

    return Construction("inner", n, (layer,), layout, lambda inp: _two_rows_prompt(layout, inp), stages,
                        lambda rng: {"a": _uniform(rng, n), "b": _uniform(rng, n)}, lin=lin)


def build_outer_product(n: int, lin: LinearizationParams = DEFAULT_LIN) -> tuple[TransformerLayer, RowLayout]:
    """Write ``a b^T`` into the result band (tokens 2..n+1)."""
    layout = RowLayout.stack([("operand_a", 1), ("operand_b", 1), ("result", n), ("positional", n + 1)],
                             width=n + 1)
    key = _reader(layout, "operand_a")
    query = _reader(layout, "operand_b")
    heads = _head_pair(layout, key, query, _pos_to(layout, "result", n), lin)
    ffn = _linear_ffn(layout, [("result", "result", 1.0 / lin.payload_scale - 1.0)])
    return TransformerLayer(heads, ffn), layout


def _outer_construction(n, lin):
    layer, layout = build_outer_product(n, lin)

    def stages(inp):
        p = _two_rows_prompt(layout, inp)
        p[layout.rows("result"), 1:] = np.outer(inp["a"], inp["b"])
        return [p]

    return Construction("outer", n, (layer,), layout, lambda inp: _two_rows_prompt(layout, inp), stages,
                        lambda rng: {"a": _uniform(rng, n), "b": _uniform(rng, n)}, lin=lin)


def build_matrix_transpose(n: int, lin: LinearizationParams = DEFAULT_LIN) -> tuple[TransformerLayer, RowLayout]:
    """Replace ``A`` (tokens 2..n+1) by ``A^T`` in place, using a scratch band."""
    layout = RowLayout.stack([("operand_a", n), ("scratch", n), ("positional", n + 1)], width=n + 1)
    key = _reader(layout, "operand_a")
    query = _reader(layout, "positional", range(1, n + 1))
    heads = _head_pair(layout, key, query, _pos_to(layout, "scratch", n), lin)
    ffn = _linear_ffn(layout, [("operand_a", "operand_a", -1.0),
                               ("operand_a", "scratch", 1.0 / lin.payload_scale),
                               ("scratch", "scratch", -1.0)])
    return TransformerLayer(heads, ffn), layout


def _matrix_prompt(layout, bands: dict):
    p = layout.zeros()
    for name, mat in bands.items():
        p[layout.rows(name), 1:] = mat
    return p


def _transpose_construction(n, lin):
    layer, layout = build_matrix_transpose(n, lin)
    return Construction(
        "transpose", n, (layer,), layout,
        lambda inp: _matrix_prompt(layout, {"operand_a": inp["A"]}),
        lambda inp: [_matrix_prompt(layout, {"operand_a": inp["A"].T})],
        lambda rng: {"A": _uniform(rng, n, n)}, lin=lin)


def build_atb(n: int, lin: LinearizationParams = DEFAULT_LIN) -> tuple[TransformerLayer, RowLayout]:
    """Write ``A^T B`` into the result band."""
    layout = RowLayout.stack([("operand_a", n), ("operand_b", n), ("result", n), ("positional", n + 1)],
                             width=n + 1)
    heads = _head_pair(layout, _reader(layout, "operand_a"), _reader(layout, "operand_b"),
                       _pos_to(layout, "result", n), lin)
    ffn = _linear_ffn(layout, [("result", "result", 1.0 / lin.payload_scale - 1.0)])
    return TransformerLayer(heads, ffn), layout


def _atb_construction(n, lin):
    layer, layout = build_atb(n, lin)
    return Construction(
        "atb", n, (layer,), layout,
        lambda inp: _matrix_prompt(layout, {"operand_a": inp["A"], "operand_b": inp["B"]}),
        lambda inp: [_matrix_prompt(layout, {"operand_a": inp["A"], "operand_b": inp["B"],
                                             "result": inp["A"].T @ inp["B"]})],
        lambda rng: {"A": _uniform(rng, n, n), "B": _uniform(rng, n, n)}, lin=lin)


def build_ab(n: int, lin: LinearizationParams = DEFAULT_LIN) -> tuple[list[TransformerLayer], RowLayout]:
    """Two layers: transpose ``A`` into scratch, then ``(A^T)^T B = A B``."""
    layout = RowLayout.stack([("operand_a", n), ("operand_b", n), ("result", n), ("scratch", n),
                              ("positional", n + 1)], width=n + 1)
    s = lin.payload_scale
    first = TransformerLayer(
        _head_pair(layout, _reader(layout, "operand_a"), _reader(layout, "positional", range(1, n + 1)),
                   _pos_to(layout, "scratch", n), lin),
        _linear_ffn(layout, [("scratch", "scratch", 1.0 / s - 1.0)]))
    second = TransformerLayer(
        _head_pair(layout, _reader(layout, "scratch"), _reader(layout, "operand_b"),
                   _pos_to(layout, "result", n), lin),
        _linear_ffn(layout, [("result", "result", 1.0 / s - 1.0), ("scratch", "scratch", -1.0)]))
    return [first, second], layout


def _ab_construction(n, lin):
    layers, layout = build_ab(n, lin)

    def prompt(inp):
        return _matrix_prompt(layout, {"operand_a": inp["A"], "operand_b": inp["B"]})

    def stages(inp):
        mid = _matrix_prompt(layout, {"operand_a": inp["A"], "operand_b": inp["B"], "scratch": inp["A"].T})
        end = _matrix_prompt(layout, {"operand_a": inp["A"], "operand_b": inp["B"], "result": inp["A"] @ inp["B"]})
        return [mid, end]

    return Construction("ab", n, tuple(layers), layout, prompt, stages,
                        lambda rng: {"A": _uniform(rng, n, n), "B": _uniform(rng, n, n)}, lin=lin)


def build_ab_vec(n: int, lin: LinearizationParams = DEFAULT_LIN) -> tuple[list[TransformerLayer], RowLayout]:
    """Two layers: transpose the row ``b^T`` into a scratch column, then gather ``A b``.

    The second layer keys tokens by position and queries with the scratch
    column, so token ``k+1`` receives weight ``b_k`` and contributes column
    ``k`` of ``A``.
    """
    layout = RowLayout.stack([("operand_a", n), ("operand_b", 1), ("result", n), ("scratch", n),
                              ("positional", n + 1)], width=n + 1)
    s = lin.payload_scale
    first = TransformerLayer(
        _head_pair(layout, _reader(layout, "operand_b"), _reader(layout, "positional", [n]),
                   _pos_to(layout, "scratch", n), lin),
        _linear_ffn(layout, [("scratch", "scratch", 1.0 / s - 1.0)]))
    second = TransformerLayer(
        _head_pair(layout, _reader(layout, "positional", range(1, n + 1)), _reader(layout, "scratch"),
                   _move(layout, "result", "operand_a"), lin),
        _linear_ffn(layout, [("result", "result", 1.0 / s - 1.0), ("scratch", "scratch", -1.0)]))
    return [first, second], layout


def _abv_construction(n, lin):
    layers, layout = build_ab_vec(n, lin)

    def prompt(inp):
        p = _matrix_prompt(layout, {"operand_a": inp["A"]})
        p[layout.row("operand_b"), 1:] = inp["b"]
        return p

    def stages(inp):
        mid = prompt(inp)
        mid[layout.rows("scratch"), n] = inp["b"]
        end = prompt(inp)
        end[layout.rows("result"), n] = inp["A"] @ inp["b"]
        return [mid, end]

    return Construction("abv", n, tuple(layers), layout, prompt, stages,
                        lambda rng: {"A": _uniform(rng, n, n), "b": _uniform(rng, n)}, lin=lin)


_BUILDERS = {
    "column_shift": _column_shift_construction,
    "row_shift": _row_shift_construction,
    "vector_transpose": _vector_transpose_construction,
    "inner": _inner_construction,
    "outer": _outer_construction,
    "transpose": _transpose_construction,
    "atb": _atb_construction,
    "ab": _ab_construction,
    "abv": _abv_construction,
}


def build(op: str, n: int, lin: LinearizationParams = DEFAULT_LIN, ffn: PwlFfnParams = PwlFfnParams()) -> Construction:
    """Build any of the ten operations (pointwise split into add/sub/mul/div)."""
    if op in _POINTWISE_FN:
        return _pointwise_construction(op, n, ffn)
    try:
        return _BUILDERS[op](n, lin)
    except KeyError:
        raise ValueError(f"unknown operation {op!r}; choose from {sorted(BUDGETS)}") from None


# ---------------------------------------------------------------------------
# conjugate gradient
# ---------------------------------------------------------------------------

def cg_layout(n: int) -> RowLayout:
    return RowLayout.stack([("a_cols", n), ("b_row", 1), ("d_band", n), ("x_band", n), ("r_band", n),
                            ("scratch", n), ("positional", n + 1)], width=n + 1)


def cg_prompt(layout: RowLayout, A, b, x, d=None, r=None) -> np.ndarray:
    """Prompt with row ``i`` of ``A`` stored as token ``i+1`` and the vectors in the last column."""
    A = np.asarray(A, float)
    p = layout.zeros()
    p[layout.rows("a_cols"), 1:] = A.T
    p[layout.row("b_row"), 1:] = b
    last = layout.width - 1
    p[layout.rows("x_band"), last] = x
    if d is not None:
        p[layout.rows("d_band"), last] = d
    if r is not None:
        p[layout.rows("r_band"), last] = r
    return p


def _cg_step_oracle(layout: RowLayout, scale: float) -> ExactOracle:
    rows = {k: layout.rows(k) for k in ("d_band", "x_band", "r_band", "scratch")}

    def step(u: np.ndarray) -> np.ndarray:
        out = np.zeros_like(u)
        d, x, r = u[rows["d_band"]], u[rows["x_band"]], u[rows["r_band"]]
        ad = u[rows["scratch"]] / scale
        out[rows["scratch"]] = -u[rows["scratch"]]
        rr = r @ r
        dad = d @ ad
        if not (rr > 0 and dad > 0 and np.isfinite(rr) and np.isfinite(dad)):
            return out  # converged (or empty) column: hold the state
        alpha = rr / dad
        r_new = r - alpha * ad
        beta = (r_new @ r_new) / rr
        out[rows["x_band"]] = alpha * d
        out[rows["r_band"]] = r_new - r
        out[rows["d_band"]] = (r_new + beta * d) - d
        return out

    return ExactOracle("cg-step", layout.height, step)


def build_cg_loop(n: int, lin: LinearizationParams = LinearizationParams(20.0, 1e-4)) -> tuple[TransformerLayer, RowLayout]:
    """One CG iteration: two heads put ``A d_k`` (scaled) into scratch, the FFN updates d, x, r."""
    layout = cg_layout(n)
    heads = _head_pair(layout, _reader(layout, "a_cols"), _reader(layout, "d_band"),
                       _pos_to(layout, "scratch", n), lin)
    return TransformerLayer(heads, _cg_step_oracle(layout, lin.payload_scale)), layout


def build_cg_pre(n: int, lin: LinearizationParams = LinearizationParams(20.0, 1e-4)) -> tuple[TransformerLayer, RowLayout]:
    """Initialisation ``d_0 = r_0 = b - A x_0``: heads 1-2 gather ``b``, heads 3-4 gather ``A x_0``."""
    layout = cg_layout(n)
    make_b = _head_pair(layout, _reader(layout, "b_row"), _reader(layout, "positional", [n]),
                        _pos_to(layout, "scratch", n), lin)
    make_ax = _head_pair(layout, _reader(layout, "a_cols"), _reader(layout, "x_band"),
                         _pos_to(layout, "r_band", n), lin)
    inv = 1.0 / lin.payload_scale
    ffn = _linear_ffn(layout, [
        ("d_band", "scratch", inv), ("d_band", "r_band", -inv),
        ("r_band", "scratch", inv), ("r_band", "r_band", -inv - 1.0),
        ("scratch", "scratch", -1.0),
    ])
    return TransformerLayer(make_b + make_ax, ffn), layout


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------

def linearization_error(z: np.ndarray, C: float, rows=None, cols=None) -> float:
    """``max |e^C softmax(Z)_{l,j} - (1 + Z_{l,j})|`` over the targeted entries (default: rows >= 2)."""
    from .dense import softmax_cols
    s = np.exp(C) * softmax_cols(z)
    rows = slice(1, None) if rows is None else rows
    cols = slice(None) if cols is None else cols
    return float(np.max(np.abs(s[rows, cols] - (1.0 + z[rows, cols]))))


def cancellation_ratio(con: Construction, rng: np.random.Generator) -> tuple[float, float]:
    """Distance of the first layer's attention output from its bilinear target.

    The target is ``scale * V0 P (key^T query)``, the term the head pair is
    meant to deliver.  Returns the Frobenius errors ``(main head alone, pair)``.
    """
    if con.lin is None:
        raise ValueError(f"{con.op} has no attention payload")
    lin = con.lin
    p = con.prompt(con.sample(rng))
    main, cancel = con.layers[0].heads[:2]
    z = (main.w_k[:-1] @ p).T @ (main.w_q[:-1] @ p)
    target = (lin.payload_scale / lin.c) * (np.exp(-lin.C) * main.w_v @ p) @ z
    alone = head_output(p, main)
    pair = alone + head_output(p, cancel)
    return float(np.linalg.norm(alone - target)), float(np.linalg.norm(pair - target))


@dataclass(frozen=True)
class ConstructionReport:
    op: str
    n: int
    layers: int
    heads: int
    prompt_rows: int
    prompt_cols: int
    C: float
    c: float
    ffn_variant: str
    max_error: float
    stage_errors: tuple[float, ...] = ()
    positional_error: float = 0.0
    derived: bool = False

    @property
    def budget_ok(self) -> bool:
        return (self.layers, self.heads) == BUDGETS[self.op]

    CSV_FIELDS = ("op", "n", "layers", "heads", "C", "c", "ffn_variant", "max_error", "stage1_error")

    def csv_row(self) -> list[str]:
        stage1 = f"{self.stage_errors[0]:.6e}" if len(self.stage_errors) > 1 else ""
        return [self.op, str(self.n), str(self.layers), str(self.heads), f"{self.C:g}", f"{self.c:g}",
                self.ffn_variant, f"{self.max_error:.6e}", stage1]


def reports_to_csv(reports: Sequence[ConstructionReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ConstructionReport.CSV_FIELDS)
    for rep in reports:
        w.writerow(rep.csv_row())
    return buf.getvalue()


def evaluate(con: Construction, trials: int = 8, seed: int = 0) -> tuple[float, tuple[float, ...], float]:
    """Max error of the final output, per-stage errors, and positional-band drift."""
    rng = make_rng(seed)
    stage_err = np.zeros(con.n_layers)
    pos_err = 0.0
    for _ in range(trials):
        inp = con.sample(rng)
        got = con.run(con.prompt(inp))
        want = con.stages(inp)
        for i, (g, w) in enumerate(zip(got, want)):
            stage_err[i] = max(stage_err[i], float(np.max(np.abs(g - w))))
        if "positional" in con.layout:
            rows = con.layout.rows("positional")
            pos_err = max(pos_err, float(np.max(np.abs(got[-1][rows] - want[-1][rows]))))
    return float(stage_err[-1]), tuple(float(e) for e in stage_err), pos_err


def sweep_linearization(op: str, n: int, grid: Sequence[tuple[float, float]] = DEFAULT_GRID,
                        trials: int = 8, seed: int = 0, cancel: str = "mirror",
                        ffn: PwlFfnParams = PwlFfnParams()) -> list[ConstructionReport]:
    """One report per ``(C, c)`` grid point; degradation is recorded, never raised."""
    if not grid:
        raise ValueError("grid must be non-empty")
    reports = []
    for C, c in grid:
        lin = LinearizationParams(C, c, cancel)
        con = build(op, n, lin, ffn)
        with np.errstate(over="ignore", invalid="ignore"):
            err, stages, pos = evaluate(con, trials, seed)
        reports.append(ConstructionReport(
            op, n, con.n_layers, con.n_heads, con.layout.height, con.layout.width, C, c,
            con.ffn_variant if con.lin is None else f"{con.ffn_variant}/{cancel}",
            err, stages, pos, con.derived))
    return reports


CG_LIN = LinearizationParams(20.0, 1e-4)


def build_cg_pipeline(n: int, T: int, lin: LinearizationParams = CG_LIN) -> tuple[NlafPipeline, RowLayout, ProbeSpec]:
    """Pre block plus the loop block run ``T`` times (collapsed post)."""
    pre, layout = build_cg_pre(n, lin)
    loop, _ = build_cg_loop(n, lin)
    return NlafPipeline((pre,), (loop,), (), T), layout, ProbeSpec.from_layout(layout)


def nlaf_cg(A, b, x0, T: int, lin: LinearizationParams = CG_LIN) -> Trajectory:
    """Run the constructed CG transformer on one system."""
    A = np.asarray(A, float)
    pipe, layout, probes = build_cg_pipeline(A.shape[0], T, lin)
    return nlaf_run(cg_prompt(layout, A, b, x0), pipe, probes)
