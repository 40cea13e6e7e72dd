"""Desk-scale network analogs, parallel fusion and the training presets.

``tiny-shallow`` is a plain conv stack with two dense layers; ``tiny-deep`` has
a stem plus two inception-style blocks with parallel 1x1/3x3/5x5 branches.
:func:`fuse` joins two trained models behind one shared input and concatenates
their last fully connected layers into a fresh single-unit output head.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .nn.graph import GraphError, ModelGraph, Tensor
from .nn.train import TrainConfig

__all__ = [
    "MODEL_NAMES",
    "build_tiny_shallow",
    "build_tiny_deep",
    "build_model",
    "fuse",
    "presets",
    "identify_architecture",
    "build_for_weights",
    "HEAD_NODES",
]

MODEL_NAMES = ("tiny-shallow", "tiny-deep", "fused")
DROPOUT_P = 0.8
HEAD_NODES = ("head_concat", "head", "head_sigmoid")


def _check_input(input_shape, what: str) -> tuple[int, int, int]:
    c, h, w = (int(d) for d in input_shape)
    if c != 3:
        raise ValueError(f"{what}: expected 3 input channels, got {c}")
    if h < 16 or w < 16:
        raise ValueError(f"{what}: input {h}x{w} too small, need at least 16x16")
    return c, h, w


def build_tiny_shallow(input_shape=(3, 64, 64), seed: int = 0) -> ModelGraph:
    g = ModelGraph(_check_input(input_shape, "tiny-shallow"))
    x = g.input_node
    for i in range(1, 5):
        x = g.add(f"conv{i}", "conv2d", x, filters=8, kernel=3)
        x = g.add(f"relu{i}", "relu", x)
        if i % 2 == 0:
            x = g.add(f"pool{i // 2}", "maxpool", x, size=2)
    x = g.add("flatten", "flatten", x)
    x = g.add("fc1", "dense", x, units=32)
    x = g.add("fc1_relu", "relu", x)
    x = g.add("fc1_drop", "dropout", x, p=DROPOUT_P)
    x = g.add("fc2", "dense", x, units=16)
    g.penultimate_node = x = g.add("fc2_relu", "relu", x)
    x = g.add("fc2_drop", "dropout", x, p=DROPOUT_P)
    x = g.add("out", "dense", x, units=1)
    g.output_node = g.add("out_sigmoid", "sigmoid", x)
    g.validate()
    g.init_weights(seed)
    return g


def build_tiny_deep(input_shape=(3, 64, 64), seed: int = 0) -> ModelGraph:
    g = ModelGraph(_check_input(input_shape, "tiny-deep"))
    x = g.add("stem", "conv2d", g.input_node, filters=8, kernel=3)
    x = g.add("stem_relu", "relu", x)
    x = g.add("stem_pool", "maxpool", x, size=2)
    for b in (1, 2):
        branches = [g.add(f"block{b}_k{k}", "conv2d", x, filters=8, kernel=k) for k in (1, 3, 5)]
        x = g.add(f"block{b}_concat", "concat", branches)
        x = g.add(f"block{b}_relu", "relu", x)
        x = g.add(f"block{b}_pool", "maxpool", x, size=2)
    x = g.add("gap", "global_avg_pool", x)
    x = g.add("fc", "dense", x, units=32)
    g.penultimate_node = x = g.add("fc_relu", "relu", x)
    x = g.add("fc_drop", "dropout", x, p=DROPOUT_P)
    x = g.add("out", "dense", x, units=1)
    g.output_node = g.add("out_sigmoid", "sigmoid", x)
    g.validate()
    g.init_weights(seed)
    return g


def fuse(model_a: ModelGraph, model_b: ModelGraph, seed: int = 0) -> ModelGraph:
    """Parallel architecture: shared input -> both trunks -> concat -> dense(1) -> sigmoid.

    Each model keeps every node up to its penultimate layer (renamed ``a.<name>``
    / ``b.<name>``, weights copied verbatim); its dropout/output head is dropped.
    Only the new head is freshly initialised from ``seed``.
    """
    if model_a.input_shape != model_b.input_shape:
        raise ValueError(f"input shapes differ: {model_a.input_shape} vs {model_b.input_shape}")
    for m, label in ((model_a, "model_a"), (model_b, "model_b")):
        if m.penultimate_node is None:
            raise GraphError(f"{label} has no penultimate node to fuse at")
    fused = ModelGraph(model_a.input_shape, dtype=np.result_type(model_a.dtype, model_b.dtype))
    taken = set(HEAD_NODES) | {fused.input_node}
    for prefix, model in (("a.", model_a), ("b.", model_b)):
        keep = model.ancestors(model.penultimate_node)
        rename = {model.input_node: fused.input_node}
        for name, node in model.nodes.items():
            if name not in keep or node.kind == "input":
                continue
            new = prefix + name
            if new in taken:
                raise GraphError(f"node name collision after prefixing: {new!r}")
            taken.add(new)
            rename[name] = new
            fused.add(new, node.kind, [rename[i] for i in node.inputs], **node.params)
            for pname in ("weight", "bias"):
                key = f"{name}.{pname}"
                if key in model.weights:
                    fused.weights[f"{new}.{pname}"] = Tensor(model.weights[key].values.astype(fused.dtype))
    fused.add("head_concat", "concat", ["a." + model_a.penultimate_node, "b." + model_b.penultimate_node])
    fused.penultimate_node = "head_concat"
    fused.add("head", "dense", "head_concat", units=1)
    fused.output_node = fused.add("head_sigmoid", "sigmoid", "head")
    fused.validate()
    fused.init_weights(seed, names=["head"])
    return fused


def build_model(name: str, input_shape=(3, 64, 64), seed: int = 0) -> ModelGraph:
    if name == "tiny-shallow":
        return build_tiny_shallow(input_shape, seed)
    if name == "tiny-deep":
        return build_tiny_deep(input_shape, seed)
    raise ValueError(f"unknown model {name!r}; choose tiny-shallow or tiny-deep (fused graphs come from fuse)")


def identify_architecture(weight_names: Iterable[str]) -> str:
    """Name of the built-in architecture that owns this set of weight names."""
    names = {n for n in weight_names if not n.startswith("__")}
    if "head.weight" in names and any(n.startswith("a.") for n in names):
        return "fused"
    if "conv1.weight" in names:
        return "tiny-shallow"
    if "stem.weight" in names:
        return "tiny-deep"
    raise ValueError("weights do not belong to any built-in architecture")


def build_for_weights(weight_names: Iterable[str], input_shape, seed: int = 0) -> ModelGraph:
    """Construct an (untrained) graph whose topology matches the given weight names."""
    names = list(weight_names)
    arch = identify_architecture(names)
    if arch != "fused":
        return build_model(arch, input_shape, seed)
    branch = {}
    for prefix in ("a.", "b."):
        sub = [n[len(prefix) :] for n in names if n.startswith(prefix)]
        branch[prefix] = build_model(identify_architecture(sub), input_shape, seed)
    return fuse(branch["a."], branch["b."], seed)


def presets() -> dict[str, TrainConfig]:
    """Training regimens per network: deep, shallow and the combined model."""
    return {
        "deep": TrainConfig(learning_rate=1e-3, max_epochs=2000, batch_size=16, early_stop_patience=10, train_fraction=0.80),
        "shallow": TrainConfig(learning_rate=1e-5, max_epochs=2000, batch_size=16, early_stop_patience=10, train_fraction=0.80),
        "combined": TrainConfig(learning_rate=1e-5, max_epochs=50, batch_size=14, early_stop_patience=5, train_fraction=0.95),
    }
