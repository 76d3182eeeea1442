"""Reverse-mode differentiation for the transformer forward pass.

A :class:`Tape` records every primitive applied to a batch of prompts,
together with its value.  Each primitive evaluates the same numpy expression
the engine uses, so recorded values equal :func:`nlaformer.engine.nlaf_run`
bitwise.  :meth:`Tape.backward` propagates seed gradients to the named
parameter leaves; a parameter used several times (loop weights) accumulates
one contribution per use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dense import rank_one_bias, relu, softmax_cols
from ..engine import ExactOracle, NlafPipeline, ProbeSpec, TransformerLayer

__all__ = ["Tape", "NonDifferentiableError", "TapedTrajectory", "forward_tape", "pipeline_params",
           "pipeline_from_params"]


class NonDifferentiableError(TypeError):
    """The pipeline contains a map the tape cannot differentiate."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _fwd(kind, v, aux):
    if kind == "matmul":
        return v[0] @ v[1]
    if kind == "add":
        return v[0] + v[1]
    if kind == "swap":
        return np.swapaxes(v[0], -1, -2)
    if kind == "softmax":
        return softmax_cols(v[0])
    if kind == "relu":
        return relu(v[0])
    if kind == "bias":
        return rank_one_bias(v[0], aux)
    if kind == "lastcol":
        return v[0][..., :, -1:]
    if kind == "squeeze":
        return v[0][..., 0]
    if kind == "take":
        return v[0][..., aux]
    raise ValueError(kind)


class Tape:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.ops: list[tuple[str, tuple[int, ...], object]] = []
        self.params: dict[str, int] = {}

    def _push(self, kind, inputs=(), aux=None, value=None) -> int:
        if value is None:
            value = _fwd(kind, [self.values[i] for i in inputs], aux)
        self.values.append(value)
        self.ops.append((kind, tuple(inputs), aux))
        return len(self.values) - 1

    def leaf(self, value) -> int:
        return self._push("leaf", value=np.asarray(value, dtype=np.float64))

    def param(self, name: str, value) -> int:
        if name not in self.params:
            self.params[name] = self.leaf(value)
        return self.params[name]

    def matmul(self, a, b):
        return self._push("matmul", (a, b))

    def add(self, a, b):
        return self._push("add", (a, b))

    def swap(self, a):
        return self._push("swap", (a,))

    def softmax(self, a):
        return self._push("softmax", (a,))

    def relu(self, a):
        return self._push("relu", (a,))

    def bias(self, b, ncols: int):
        return self._push("bias", (b,), ncols)

    def lastcol(self, a):
        return self._push("lastcol", (a,))

    def squeeze(self, a):
        return self._push("squeeze", (a,))

    def take(self, a, idx):
        return self._push("take", (a,), np.asarray(idx))

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves."""
        vals: list[np.ndarray] = []
        for (kind, inputs, aux), rec in zip(self.ops, self.values):
            vals.append(rec if kind == "leaf" else _fwd(kind, [vals[i] for i in inputs], aux))
        return vals

    def first_nonfinite(self) -> int | None:
        for i, v in enumerate(self.values):
            if not np.all(np.isfinite(v)):
                return i
        return None

    def backward(self, seeds: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        """Gradients of ``sum_i <seed_i, value_i>`` with respect to every parameter."""
        grads: dict[int, np.ndarray] = {}
        for node, g in seeds.items():
            grads[node] = grads[node] + g if node in grads else np.array(g, dtype=np.float64)
        for node in range(len(self.ops) - 1, -1, -1):
            g = grads.pop(node, None) if self.ops[node][0] != "leaf" else None
            if g is None:
                continue
            kind, inputs, aux = self.ops[node]
            v = [self.values[i] for i in inputs]
            for i, gi in zip(inputs, self._vjp(kind, v, aux, g, self.values[node])):
                if gi is not None:
                    grads[i] = grads[i] + gi if i in grads else gi
        return {name: grads.get(i, np.zeros_like(self.values[i])) for name, i in self.params.items()}

    @staticmethod
    def _vjp(kind, v, aux, g, out):
        if kind == "matmul":
            a, b = v
            return (_unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape),
                    _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape))
        if kind == "add":
            return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)
        if kind == "swap":
            return (np.swapaxes(g, -1, -2),)
        if kind == "softmax":
            return (out * (g - np.sum(out * g, axis=-2, keepdims=True)),)
        if kind == "relu":
            return (g * (v[0] > 0),)
        if kind == "bias":
            return (g.reshape(-1, *g.shape[-2:]).sum(axis=(0, 2)),)
        if kind == "lastcol":
            full = np.zeros_like(v[0])
            full[..., :, -1:] = g
            return (full,)
        if kind == "squeeze":
            return (g[..., None],)
        if kind == "take":
            full = np.zeros_like(v[0])
            np.add.at(full, (Ellipsis, aux), g)
            return (full,)
        raise ValueError(kind)


# ---------------------------------------------------------------------------
# pipelines <-> named parameters
# ---------------------------------------------------------------------------

def _layer_names(pipe: NlafPipeline):
    for block in ("pre", "loop", "post"):
        for j, layer in enumerate(getattr(pipe, block)):
            yield f"{block}{j}", layer


def pipeline_params(pipe: NlafPipeline) -> dict[str, np.ndarray]:
    """Flat ``name -> array`` view of every trainable tensor (copies)."""
    out = {}
    if pipe.embed is not None:
        out["embed"] = pipe.embed.copy()
    for prefix, layer in _layer_names(pipe):
        if isinstance(layer.ffn, ExactOracle):
            raise NonDifferentiableError(f"layer {prefix} uses the frozen map {layer.ffn.name!r}")
        for h, head in enumerate(layer.heads):
            out[f"{prefix}.h{h}.wq"] = head.w_q.copy()
            out[f"{prefix}.h{h}.wk"] = head.w_k.copy()
            out[f"{prefix}.h{h}.wv"] = head.w_v.copy()
        for i, (w, b) in enumerate(zip(layer.ffn.weights, layer.ffn.biases)):
            out[f"{prefix}.ffn.w{i}"] = w.copy()
            out[f"{prefix}.ffn.b{i}"] = b.copy()
    if pipe.readout is not None:
        out["readout"] = pipe.readout.copy()
    return out


def pipeline_from_params(template: NlafPipeline, params: dict[str, np.ndarray]) -> NlafPipeline:
    from ..engine import AttentionHead, ReluNetwork

    def rebuild(block):
        layers = []
        for j, layer in enumerate(getattr(template, block)):
            prefix = f"{block}{j}"
            heads = tuple(
                AttentionHead(params[f"{prefix}.h{h}.wq"], params[f"{prefix}.h{h}.wk"], params[f"{prefix}.h{h}.wv"])
                for h in range(layer.n_heads))
            depth = len(layer.ffn.weights)
            ffn = ReluNetwork(tuple(params[f"{prefix}.ffn.w{i}"] for i in range(depth)),
                              tuple(params[f"{prefix}.ffn.b{i}"] for i in range(depth)))
            layers.append(TransformerLayer(heads, ffn))
        return tuple(layers)

    return NlafPipeline(rebuild("pre"), rebuild("loop"), rebuild("post"), template.loop_count,
                        params.get("embed"), params.get("readout"))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass
class TapedTrajectory:
    x_nodes: list[int]
    in_nodes: list[int]
    tape: Tape

    @property
    def x(self) -> np.ndarray:
        return np.stack([self.tape.value(i) for i in self.x_nodes], axis=-2)

    @property
    def inner(self) -> np.ndarray:
        return np.stack([self.tape.value(i) for i in self.in_nodes], axis=-2)

    def seeds(self, grad_x: np.ndarray, grad_in: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Map loss gradients shaped like ``x``/``inner`` onto the probe nodes."""
        out = {node: grad_x[..., t, :] for t, node in enumerate(self.x_nodes)}
        if grad_in is not None:
            out.update({node: grad_in[..., t, :] for t, node in enumerate(self.in_nodes)})
        return out


def _tape_layer(tape: Tape, p: int, layer: TransformerLayer, prefix: str) -> int:
    ncols = tape.value(p).shape[-1]
    acc = None
    for h, head in enumerate(layer.heads):
        wq = tape.param(f"{prefix}.h{h}.wq", head.w_q)
        wk = tape.param(f"{prefix}.h{h}.wk", head.w_k)
        wv = tape.param(f"{prefix}.h{h}.wv", head.w_v)
        q = tape.matmul(wq, p)
        k = tape.matmul(wk, p)
        s = tape.softmax(tape.matmul(tape.swap(k), q))
        out = tape.matmul(tape.matmul(wv, p), s)
        acc = out if acc is None else tape.add(acc, out)
    a = tape.add(p, acc)
    ffn = layer.ffn
    hid = a
    last = len(ffn.weights) - 1
    for i in range(len(ffn.weights)):
        w = tape.param(f"{prefix}.ffn.w{i}", ffn.weights[i])
        b = tape.param(f"{prefix}.ffn.b{i}", ffn.biases[i])
        hid = tape.add(tape.matmul(w, hid), tape.bias(b, ncols))
        if i < last:
            hid = tape.relu(hid)
    return tape.add(a, hid)


def forward_tape(pipe: NlafPipeline, prompts: np.ndarray, probes: ProbeSpec) -> TapedTrajectory:
    """Record the full NLAF trajectory of a batch ``(B, D, N)`` of prompts."""
    pipeline_params(pipe)  # raises on frozen maps
    tape = Tape()
    p = tape.leaf(prompts)
    if pipe.embed is not None:
        p = tape.matmul(tape.param("embed", pipe.embed), p)
    for j, layer in enumerate(pipe.pre):
        p = _tape_layer(tape, p, layer, f"pre{j}")
    states = [p]
    for t in range(1, pipe.loop_count + 1):
        block = "post" if pipe.post and t == pipe.loop_count else "loop"
        for j, layer in enumerate(getattr(pipe, block)):
            p = _tape_layer(tape, p, layer, f"{block}{j}")
        states.append(p)
    x_nodes, in_nodes = [], []
    readout = tape.param("readout", pipe.readout) if pipe.readout is not None else None
    for p in states:
        col = tape.lastcol(p)
        if readout is not None:
            col = tape.matmul(readout, col)
        col = tape.squeeze(col)
        x_nodes.append(tape.take(col, probes.x_rows))
        in_nodes.append(tape.take(col, probes.in_rows))
    return TapedTrajectory(x_nodes, in_nodes, tape)
