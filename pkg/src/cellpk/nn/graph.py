"""Model graphs and reverse-mode differentiation over them.

A :class:`ModelGraph` is an ordered DAG of :class:`LayerNode` objects. Nodes
are added in topological order (every input must already exist), so the
insertion order doubles as the evaluation order and its reverse as the
backward order.
"""

from __future__ import annotations

import copy
import math
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import layers

__all__ = [
    "Tensor",
    "LayerNode",
    "ModelGraph",
    "GraphError",
    "ShapeError",
    "LAYER_KINDS",
    "forward",
    "forward_all",
    "backward",
    "mse_loss",
    "node_rng",
]

LAYER_KINDS = (
    "input",
    "conv2d",
    "maxpool",
    "concat",
    "dense",
    "relu",
    "sigmoid",
    "dropout",
    "global_avg_pool",
    "flatten",
)
PARAM_KINDS = ("conv2d", "dense")


class GraphError(ValueError):
    pass


class ShapeError(GraphError):
    pass


@dataclass
class Tensor:
    values: np.ndarray
    grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class LayerNode:
    name: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    params: dict[str, Any] = field(default_factory=dict)


def node_rng(seed, name: str) -> np.random.Generator:
    """Generator keyed by (seed, node name) so streams never depend on graph order.

    ``seed`` is an int or a tuple of ints.
    """
    parts = seed if isinstance(seed, (tuple, list)) else (seed,)
    return np.random.default_rng([*(int(s) & 0xFFFFFFFF for s in parts), zlib.crc32(name.encode())])


class ModelGraph:
    def __init__(self, input_shape: tuple[int, int, int], input_node: str = "input", dtype=np.float32):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        self.nodes: dict[str, LayerNode] = {}
        self.weights: dict[str, Tensor] = {}
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.input_node = input_node
        self.output_node: str | None = None
        self.penultimate_node: str | None = None
        self._tape = None
        self.add(input_node, "input")

    # --- construction ------------------------------------------------------

    def add(self, name: str, kind: str, inputs: list[str] | str = (), **params) -> str:
        if kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {kind!r}")
        if name in self.nodes:
            raise GraphError(f"duplicate node name {name!r}")
        inputs = [inputs] if isinstance(inputs, str) else list(inputs)
        for src in inputs:
            if src not in self.nodes:
                raise GraphError(f"node {name!r}: unknown input {src!r}")
        if kind == "input" and self.nodes:
            raise GraphError("a graph has exactly one input node")
        node = LayerNode(name, kind, inputs, dict(params))
        self.shapes[name] = self._infer_shape(node)
        self.nodes[name] = node
        return name

    def _infer_shape(self, node: LayerNode) -> tuple[int, ...]:
        kind, p = node.kind, node.params
        if kind == "input":
            return self.input_shape
        ins = [self.shapes[i] for i in node.inputs]
        expected_inputs = None if kind == "concat" else 1
        if expected_inputs is not None and len(ins) != expected_inputs:
            raise ShapeError(f"node {node.name!r}: {kind} takes exactly one input")
        if kind == "concat":
            if len(ins) < 2:
                raise ShapeError(f"node {node.name!r}: concat needs at least two inputs")
            rest = {s[1:] for s in ins}
            if len({len(s) for s in ins}) != 1 or len(rest) != 1:
                raise ShapeError(f"node {node.name!r}: concat inputs disagree on non-channel dims {ins}")
            return (sum(s[0] for s in ins),) + ins[0][1:]
        (s,) = ins
        if kind == "conv2d":
            if len(s) != 3:
                raise ShapeError(f"node {node.name!r}: conv2d needs a CHW input, got {s}")
            k, stride = p["kernel"], p.setdefault("stride", 1)
            pad = p.setdefault("padding", k // 2)
            ho = (s[1] + 2 * pad - k) // stride + 1
            wo = (s[2] + 2 * pad - k) // stride + 1
            if ho < 1 or wo < 1:
                raise ShapeError(f"node {node.name!r}: input {s} too small for kernel {k}")
            return (p["filters"], ho, wo)
        if kind == "maxpool":
            size = p.setdefault("size", 2)
            if len(s) != 3 or s[1] < size or s[2] < size:
                raise ShapeError(f"node {node.name!r}: input {s} too small for {size}x{size} pooling")
            return (s[0], s[1] // size, s[2] // size)
        if kind == "dense":
            if len(s) != 1:
                raise ShapeError(f"node {node.name!r}: dense needs a flat input, got {s}")
            return (p["units"],)
        if kind == "global_avg_pool":
            if len(s) != 3:
                raise ShapeError(f"node {node.name!r}: global_avg_pool needs a CHW input, got {s}")
            return (s[0],)
        if kind == "flatten":
            return (math.prod(s),)
        if kind == "dropout":
            if not 0.0 <= p.get("p", 0.5) < 1.0:
                raise GraphError(f"node {node.name!r}: drop probability must be in [0, 1)")
            p.setdefault("p", 0.5)
        return s  # relu, sigmoid, dropout

    def param_shapes(self, name: str) -> dict[str, tuple[int, ...]]:
        node = self.nodes[name]
        if node.kind == "conv2d":
            c = self.shapes[node.inputs[0]][0]
            k = node.params["kernel"]
            return {"weight": (node.params["filters"], c, k, k), "bias": (node.params["filters"],)}
        if node.kind == "dense":
            d = self.shapes[node.inputs[0]][0]
            return {"weight": (d, node.params["units"]), "bias": (node.params["units"],)}
        return {}

    def init_weights(self, seed: int, names: list[str] | None = None) -> None:
        """Glorot-uniform kernels and zero biases for parametrised nodes."""
        for name in names if names is not None else list(self.nodes):
            shapes = self.param_shapes(name)
            if not shapes:
                continue
            wshape = shapes["weight"]
            if len(wshape) == 4:
                rf = wshape[2] * wshape[3]
                fan_in, fan_out = wshape[1] * rf, wshape[0] * rf
            else:
                fan_in, fan_out = wshape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = node_rng(seed, name).uniform(-limit, limit, size=wshape)
            self.weights[f"{name}.weight"] = Tensor(w.astype(self.dtype))
            self.weights[f"{name}.bias"] = Tensor(np.zeros(shapes["bias"], dtype=self.dtype))

    # --- queries -----------------------------------------------------------

    def conv_layers(self) -> list[str]:
        return [n for n, node in self.nodes.items() if node.kind == "conv2d"]

    def consumers(self, name: str) -> list[str]:
        return [n for n, node in self.nodes.items() if name in node.inputs]

    def ancestors(self, name: str) -> set[str]:
        seen, stack = set(), [name]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(self.nodes[cur].inputs)
        return seen

    def weight_names(self) -> list[str]:
        return list(self.weights)

    def copy(self) -> "ModelGraph":
        new = copy.copy(self)
        new.nodes = copy.deepcopy(self.nodes)
        new.shapes = dict(self.shapes)
        new.weights = {k: Tensor(t.values.copy()) for k, t in self.weights.items()}
        new._tape = None
        return new

    def astype(self, dtype) -> "ModelGraph":
        new = self.copy()
        new.dtype = np.dtype(dtype)
        for t in new.weights.values():
            t.values = t.values.astype(new.dtype)
        return new

    def get_state(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.weights.items()}

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.weights[k].values = v.copy()

    def validate(self) -> None:
        if self.output_node is None or self.output_node not in self.nodes:
            raise GraphError("graph has no output node")
        if self.penultimate_node is not None and self.penultimate_node not in self.ancestors(self.output_node):
            raise GraphError("penultimate node does not feed the output node")

    def __repr__(self) -> str:
        return f"ModelGraph(input={self.input_shape}, nodes={len(self.nodes)}, weights={len(self.weights)})"


# --- evaluation ------------------------------------------------------------


def _run(graph: ModelGraph, batch: np.ndarray, mode: str, seed: int, record: bool):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != graph.input_shape:
        raise ShapeError(
            f"node {graph.input_node!r}: batch shape {batch.shape} does not match input {graph.input_shape}"
        )
    acts: dict[str, np.ndarray] = {}
    caches: dict[str, Any] = {}
    w = graph.weights
    for name, node in graph.nodes.items():
        kind, p = node.kind, node.params
        xs = [acts[i] for i in node.inputs]
        if kind == "input":
            out, cache = batch.astype(graph.dtype, copy=False), None
        elif kind == "conv2d":
            out, cache = layers.conv2d_forward(
                xs[0], w[f"{name}.weight"].values, w[f"{name}.bias"].values, p["stride"], p["padding"]
            )
        elif kind == "dense":
            out, cache = layers.dense_forward(xs[0], w[f"{name}.weight"].values, w[f"{name}.bias"].values)
        elif kind == "maxpool":
            out, cache = layers.maxpool_forward(xs[0], p["size"])
        elif kind == "relu":
            out, cache = layers.relu_forward(xs[0])
        elif kind == "sigmoid":
            out, cache = layers.sigmoid_forward(xs[0])
        elif kind == "dropout":
            if mode == "train" and p["p"] > 0:
                out, cache = layers.dropout_forward(xs[0], p["p"], node_rng(seed, name))
            else:
                out, cache = xs[0], None
        elif kind == "global_avg_pool":
            out, cache = layers.global_avg_pool_forward(xs[0])
        elif kind == "flatten":
            out, cache = layers.flatten_forward(xs[0])
        elif kind == "concat":
            out, cache = layers.concat_forward(xs)
        else:  # pragma: no cover - guarded by LAYER_KINDS
            raise GraphError(f"unhandled kind {kind}")
        acts[name] = out
        if record:
            caches[name] = cache
    return acts, caches


def forward_all(graph: ModelGraph, batch: np.ndarray, mode: str = "eval", seed: int = 0) -> dict[str, np.ndarray]:
    """Activations of every node, keyed by node name."""
    acts, _ = _run(graph, batch, mode, seed, record=False)
    return acts


def forward(graph: ModelGraph, batch: np.ndarray, mode: str = "eval", seed: int = 0) -> np.ndarray:
    """Run the graph; returns the output node activation, shape (N, 1).

    In train mode the tape needed by :func:`backward` is kept on the graph.
    Dropout is active only in train mode, with masks drawn from ``seed``.
    """
    if graph.output_node is None:
        raise GraphError("graph has no output node")
    record = mode == "train"
    acts, caches = _run(graph, batch, mode, seed, record)
    graph._tape = (batch, acts, caches) if record else None
    return acts[graph.output_node]


def mse_loss(pred: np.ndarray, targets: np.ndarray) -> float:
    diff = pred.reshape(-1).astype(np.float64) - np.asarray(targets, dtype=np.float64).reshape(-1)
    return float(np.mean(diff * diff))


_BACKWARD = {
    "conv2d": layers.conv2d_backward,
    "dense": layers.dense_backward,
    "maxpool": layers.maxpool_backward,
    "relu": layers.relu_backward,
    "sigmoid": layers.sigmoid_backward,
    "dropout": layers.dropout_backward,
    "global_avg_pool": layers.global_avg_pool_backward,
    "flatten": layers.flatten_backward,
    "concat": layers.concat_backward,
}


def backward(
    graph: ModelGraph,
    batch: np.ndarray,
    targets: np.ndarray,
    loss_scale: float = 1.0,
    output_grad: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of ``loss_scale * MSE(output, targets)`` for every weight.

    Needs the tape from a train-mode :func:`forward` on the same ``batch``.
    ``output_grad`` overrides the MSE seed gradient (used by gradient checks).
    Gradients are also stored on each weight's ``Tensor.grad``.
    """
    if graph._tape is None:
        raise GraphError("no forward context: run forward(..., mode='train') first")
    tape_batch, acts, caches = graph._tape
    if tape_batch is not batch and not np.array_equal(tape_batch, batch):
        raise GraphError("backward called with a different batch than the recorded forward pass")
    out = acts[graph.output_node]
    if output_grad is None:
        t = np.asarray(targets, dtype=out.dtype).reshape(out.shape)
        output_grad = (2.0 * loss_scale / out.size) * (out - t)
    grads_at: dict[str, np.ndarray] = {graph.output_node: np.asarray(output_grad, dtype=out.dtype)}
    wgrads: dict[str, np.ndarray] = {}
    for name in reversed(list(graph.nodes)):
        node = graph.nodes[name]
        g = grads_at.pop(name, None)
        if g is None or node.kind == "input":
            continue
        if node.kind == "dropout" and caches[name] is None:
            ins, pgrads = [g], {}
        else:
            ins, pgrads = _BACKWARD[node.kind](g, caches[name])
        for pname, pg in pgrads.items():
            wgrads[f"{name}.{pname}"] = pg
        for src, gi in zip(node.inputs, ins):
            if src in grads_at:
                grads_at[src] = grads_at[src] + gi
            else:
                grads_at[src] = gi
    for key, tensor in graph.weights.items():
        tensor.grad = wgrads.get(key, np.zeros_like(tensor.values))
        wgrads.setdefault(key, tensor.grad)
    return wgrads
