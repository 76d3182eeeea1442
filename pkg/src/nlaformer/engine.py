"""Transformer forward pass with residual attention and column-wise FFN.

One layer computes::

    Attn(P) = P + sum_i  W_V^i P  softmax(P^T W_K^i^T W_Q^i P)
    TF(P)   = Attn(P) + FFN(Attn(P))

with the softmax taken over each column.  All functions accept either a
single prompt of shape ``(D, N)`` or a batch ``(B, D, N)``; batched matmul is
slice-wise identical to the single-prompt call, so batching never changes a
result.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dense import DimensionError, rank_one_bias, relu, softmax_cols

__all__ = [
    "RowLayout",
    "PromptMatrix",
    "AttentionHead",
    "ReluNetwork",
    "ExactOracle",
    "TransformerLayer",
    "NlafPipeline",
    "ProbeSpec",
    "Trajectory",
    "attn",
    "head_output",
    "ffn_apply",
    "tf_layer",
    "run_layers",
    "nlaf_run",
    "linear_relu_network",
]


@dataclass(frozen=True)
class RowLayout:
    """Named, disjoint row bands of a prompt matrix.

    ``bands`` maps a band name to ``(start, length)``.  The positional band,
    when present, is named ``"positional"`` and holds one-hot columns.
    """

    bands: Mapping[str, tuple[int, int]]
    height: int
    width: int

    def __post_init__(self):
        taken = np.zeros(self.height, dtype=bool)
        for name, (start, length) in self.bands.items():
            if start < 0 or length < 0 or start + length > self.height:
                raise DimensionError(f"band {name!r}={start, length} outside height {self.height}")
            if taken[start:start + length].any():
                raise DimensionError(f"band {name!r} overlaps another band")
            taken[start:start + length] = True

    @classmethod
    def stack(cls, spec: Sequence[tuple[str, int]], width: int) -> "RowLayout":
        """Build a layout from bands listed top to bottom."""
        bands, row = {}, 0
        for name, length in spec:
            bands[name] = (row, length)
            row += length
        return cls(bands, row, width)

    def __contains__(self, name: str) -> bool:
        return name in self.bands

    def rows(self, name: str) -> slice:
        start, length = self.bands[name]
        return slice(start, start + length)

    def row(self, name: str, offset: int = 0) -> int:
        start, length = self.bands[name]
        if not 0 <= offset < length:
            raise IndexError(f"offset {offset} outside band {name!r} of length {length}")
        return start + offset

    def selector(self, name: str) -> np.ndarray:
        """``(length, height)`` 0/1 matrix reading band ``name`` out of a column."""
        start, length = self.bands[name]
        sel = np.zeros((length, self.height))
        sel[np.arange(length), start + np.arange(length)] = 1.0
        return sel

    def zeros(self) -> np.ndarray:
        p = np.zeros((self.height, self.width))
        if "positional" in self:
            p[self.rows("positional")] = np.eye(self.bands["positional"][1], self.width)
        return p


@dataclass(frozen=True)
class PromptMatrix:
    p: np.ndarray
    layout: RowLayout

    def __post_init__(self):
        if self.p.shape[-2:] != (self.layout.height, self.layout.width):
            raise DimensionError(
                f"prompt shape {self.p.shape} does not match layout "
                f"{(self.layout.height, self.layout.width)}"
            )

    def band(self, name: str) -> np.ndarray:
        return self.p[..., self.layout.rows(name), :]


@dataclass(frozen=True)
class AttentionHead:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        if self.w_q.shape != self.w_k.shape:
            raise DimensionError(f"w_q {self.w_q.shape} and w_k {self.w_k.shape} differ")
        if self.w_v.shape[0] != self.w_v.shape[1] or self.w_v.shape[1] != self.w_q.shape[1]:
            raise DimensionError(
                f"w_v {self.w_v.shape} must be square over token dimension {self.w_q.shape[1]}"
            )

    @property
    def dim(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def zero(cls, dim: int, head_dim: int = 1) -> "AttentionHead":
        return cls(np.zeros((head_dim, dim)), np.zeros((head_dim, dim)), np.zeros((dim, dim)))


@dataclass(frozen=True)
class ReluNetwork:
    """Column map ``W_L ReLU(... ReLU(W_1 u + b_1) ...) + b_L``.

    With two affine maps this is exactly the FFN of a standard layer.  Deeper
    stacks are only used for hand-built scalar division.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise DimensionError("ReluNetwork needs at least two affine maps with one bias each")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"weight {w.shape} / bias {b.shape} mismatch")
        for w_prev, w in zip(self.weights, self.weights[1:]):
            if w.shape[1] != w_prev.shape[0]:
                raise DimensionError(f"affine maps {w_prev.shape} -> {w.shape} not composable")
        if self.weights[0].shape[1] != self.weights[-1].shape[0]:
            raise DimensionError("ReluNetwork must map prompt height to prompt height")

    kind = "relu"
    trainable = True

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    def __call__(self, u: np.ndarray) -> np.ndarray:
        h = u
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = w @ h + rank_one_bias(b, u.shape[-1])
            if i < last:
                h = relu(h)
        return h

    @classmethod
    def zero(cls, dim: int, hidden: int = 1) -> "ReluNetwork":
        return cls(
            (np.zeros((hidden, dim)), np.zeros((dim, hidden))),
            (np.zeros(hidden), np.zeros(dim)),
        )


@dataclass(frozen=True)
class ExactOracle:
    """A named deterministic map applied to every column independently.

    ``fn`` receives one column of length ``dim`` and returns the FFN output
    for that column.  Oracles are frozen: they are never trained.
    """

    name: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    kind = "exact"
    trainable = False

    def __call__(self, u: np.ndarray) -> np.ndarray:
        cols = np.moveaxis(u, -1, 0)  # (N, ..., D)
        flat = cols.reshape(-1, u.shape[-2])
        out = np.stack([np.asarray(self.fn(col.copy()), dtype=np.float64) for col in flat])
        return np.moveaxis(out.reshape(cols.shape), 0, -1)


def linear_relu_network(linear: np.ndarray) -> ReluNetwork:
    """Realise the linear column map ``u -> L u`` exactly, via ``x = ReLU(x) - ReLU(-x)``."""
    m, d = linear.shape
    if m != d:
        raise DimensionError(f"linear FFN map must be square, got {linear.shape}")
    w1 = np.vstack([linear, -linear])
    w2 = np.hstack([np.eye(d), -np.eye(d)])
    return ReluNetwork((w1, w2), (np.zeros(2 * d), np.zeros(d)))


@dataclass(frozen=True)
class TransformerLayer:
    heads: tuple[AttentionHead, ...]
    ffn: ReluNetwork | ExactOracle

    def __post_init__(self):
        if len(self.heads) < 1:
            raise DimensionError("a layer needs at least one head")
        dims = {h.dim for h in self.heads} | {self.ffn.dim}
        if len(dims) != 1:
            raise DimensionError(f"heads and FFN disagree on prompt height: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.ffn.dim

    @property
    def n_heads(self) -> int:
        return len(self.heads)


def _check_height(p: np.ndarray, dim: int) -> None:
    if p.ndim not in (2, 3) or p.shape[-2] != dim:
        raise DimensionError(f"prompt of shape {p.shape} does not fit token dimension {dim}")


def head_output(p: np.ndarray, head: AttentionHead) -> np.ndarray:
    """One head's contribution ``W_V P softmax(P^T W_K^T W_Q P)``."""
    _check_height(p, head.dim)
    q = head.w_q @ p
    k = head.w_k @ p
    z = np.swapaxes(k, -1, -2) @ q
    s = softmax_cols(z)
    return (head.w_v @ p) @ s


def attn(p: np.ndarray, heads: Sequence[AttentionHead]) -> np.ndarray:
    acc = None
    for head in heads:
        h = head_output(p, head)
        acc = h if acc is None else acc + h
    return p + acc


def ffn_apply(p: np.ndarray, f: ReluNetwork | ExactOracle) -> np.ndarray:
    _check_height(p, f.dim)
    return f(p)


def tf_layer(p: np.ndarray, layer: TransformerLayer) -> np.ndarray:
    a = attn(p, layer.heads)
    return a + ffn_apply(a, layer.ffn)


def run_layers(p: np.ndarray, layers: Sequence[TransformerLayer]) -> np.ndarray:
    for layer in layers:
        p = tf_layer(p, layer)
    return p


@dataclass(frozen=True)
class ProbeSpec:
    """Fixed row reads of the last prompt column.

    ``x_rows`` index the iterate; ``in_rows`` index the residual rows followed
    by the direction rows.  Indices refer to the readout output when the
    pipeline has a readout map, otherwise to prompt rows.
    """

    x_rows: np.ndarray
    in_rows: np.ndarray

    @classmethod
    def from_layout(cls, layout: RowLayout) -> "ProbeSpec":
        r = np.arange(*_band_range(layout, "r_band"))
        d = np.arange(*_band_range(layout, "d_band"))
        x = np.arange(*_band_range(layout, "x_band"))
        return cls(x, np.concatenate([r, d]))

    def read(self, column: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return column[..., self.x_rows], column[..., self.in_rows]


def _band_range(layout: RowLayout, name: str) -> tuple[int, int]:
    start, length = layout.bands[name]
    return start, start + length


@dataclass(frozen=True)
class NlafPipeline:
    """Pre block, a shared-weight loop block, a post block, and the loop count.

    With a non-empty post block, ``P_0 = pre(P)``, ``P_t = loop(P_{t-1})`` for
    ``1 <= t <= T-1`` and ``P_T = post(P_{T-1})``.  With an empty post block the
    loop block runs ``T`` times.  ``embed`` (optional) maps raw prompts to the
    model width before the pre block; ``readout`` (optional) maps the last
    column before probing.
    """

    pre: tuple[TransformerLayer, ...]
    loop: tuple[TransformerLayer, ...]
    post: tuple[TransformerLayer, ...]
    loop_count: int
    embed: np.ndarray | None = None
    readout: np.ndarray | None = None

    def __post_init__(self):
        if self.loop_count < 0:
            raise ValueError("loop_count must be >= 0")

    @property
    def convention(self) -> str:
        return "distinct-post" if self.post else "collapsed-post"

    def block_for_step(self, t: int) -> tuple[TransformerLayer, ...]:
        """Layers producing ``P_t`` from ``P_{t-1}`` (``t >= 1``)."""
        if self.post and t == self.loop_count:
            return self.post
        return self.loop

    def layers(self):
        yield from self.pre
        yield from self.loop
        yield from self.post


@dataclass
class Trajectory:
    prompts: list[np.ndarray]
    x: np.ndarray  # (..., T+1, n)
    inner: np.ndarray  # (..., T+1, 2n)


def _probe(p: np.ndarray, pipe: NlafPipeline, probes: ProbeSpec):
    # keep the column 2-D so batched and single prompts hit the same kernel
    col = p[..., :, -1:]
    if pipe.readout is not None:
        col = pipe.readout @ col
    return probes.read(col[..., 0])


def nlaf_run(p0: np.ndarray, pipe: NlafPipeline, probes: ProbeSpec) -> Trajectory:
    p = np.asarray(p0, dtype=np.float64)
    if pipe.embed is not None:
        p = pipe.embed @ p
    p = run_layers(p, pipe.pre)
    prompts = [p]
    for t in range(1, pipe.loop_count + 1):
        p = run_layers(p, pipe.block_for_step(t))
        prompts.append(p)
    xs, ins = zip(*(_probe(q, pipe, probes) for q in prompts))
    return Trajectory(prompts, np.stack(xs, axis=-2), np.stack(ins, axis=-2))
