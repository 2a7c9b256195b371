"""Model documents used by the demos, the CLI examples and the tests.

The Alexnet configuration is a reconstruction: eleven-by-eleven stride-4
``same`` convolution, 3x3 stride-2 pooling and the usual 192/384/256/256
channel ladder reproduce every shape and parameter count of the reference
Keras summary (61,100,840 parameters).
"""

from __future__ import annotations

import json

ALEXNET_CONVS = (
    # name, filters, kernel, stride, pool after
    ("conv2d", 64, 11, 4, "max_pooling2d"),
    ("conv2d_1", 192, 5, 1, "max_pooling2d_1"),
    ("conv2d_2", 384, 3, 1, None),
    ("conv2d_3", 256, 3, 1, None),
    ("conv2d_4", 256, 3, 1, "max_pooling2d_2"),
)
ALEXNET_DENSE = (("dense", 4096, True), ("dense_1", 4096, True), ("dense_2", 1000, False))
ALEXNET_PARAMS = 61_100_840


def _input(name, canonical_shape, dynamic, dialect, dtype="f32"):
    shape = list(canonical_shape)
    if dialect == "dla" and len(shape) == 4:
        shape = [shape[0], shape[3], shape[1], shape[2]]
    seed = list(shape)
    spec = {"name": name, "dtype": dtype, "shape": [None if i in dynamic else d for i, d in enumerate(shape)]}
    if dynamic:
        spec["seed_shape"] = seed
    return spec


def alexnet_document(dialect: str = "dlb", batch: int = 1, dynamic=(0,), seed: int = 0) -> dict:
    """Alexnet in either dialect. ``dynamic`` lists document-order input axes given as null."""
    nodes = []
    prev = "input_1"
    for name, filters, k, s, pool in ALEXNET_CONVS:
        if dialect == "dlb":
            nodes.append({"name": name, "op": "conv2d", "inputs": [prev],
                          "attrs": {"filters": filters, "kernel_size": [k, k], "strides": [s, s],
                                    "padding": "same", "activation": "relu"}})
            prev = name
        else:
            nodes.append({"name": name, "op": "conv2d", "inputs": [prev],
                          "attrs": {"out_channels": filters, "kernel_size": k, "stride": s, "padding": "same"}})
            nodes.append({"name": f"{name}_relu", "op": "relu", "inputs": [name]})
            prev = f"{name}_relu"
        if pool:
            if dialect == "dlb":
                nodes.append({"name": pool, "op": "max_pooling2d", "inputs": [prev],
                              "attrs": {"pool_size": [3, 3], "strides": [2, 2]}})
            else:
                nodes.append({"name": pool, "op": "max_pool2d", "inputs": [prev],
                              "attrs": {"kernel_size": 3, "stride": 2}})
            prev = pool
    nodes.append({"name": "flatten", "op": "flatten", "inputs": [prev]})
    prev = "flatten"
    for name, units, relu in ALEXNET_DENSE:
        if dialect == "dlb":
            attrs = {"units": units}
            if relu:
                attrs["activation"] = "relu"
            nodes.append({"name": name, "op": "dense", "inputs": [prev], "attrs": attrs})
            prev = name
        else:
            nodes.append({"name": name, "op": "linear", "inputs": [prev], "attrs": {"out_features": units}})
            prev = name
            if relu:
                nodes.append({"name": f"{name}_relu", "op": "relu", "inputs": [name]})
                prev = f"{name}_relu"
    return {
        "dialect": dialect,
        "seed": seed,
        "inputs": [_input("input_1", (batch, 224, 224, 3), tuple(dynamic), dialect)],
        "outputs": [prev],
        "nodes": nodes,
    }


def branchy_document(seed_shape=(2, 9, 11, 3)) -> dict:
    """Three-branch model with dynamic batch, height and width.

    ``A`` passes the input through, ``B`` and ``C`` pool it adaptively to
    3x3 and 5x7, so only ``A`` keeps the spatial symbols.
    """
    n, h, w, c = seed_shape
    return {
        "dialect": "dla",
        "seed": 0,
        "inputs": [{"name": "in_0", "dtype": "f32", "shape": [None, c, None, None],
                    "seed_shape": [n, c, h, w]}],
        "outputs": ["A", "B", "C"],
        "nodes": [
            {"name": "A", "op": "identity", "inputs": ["in_0"]},
            {"name": "B", "op": "adaptive_avg_pool2d", "inputs": ["in_0"], "attrs": {"output_size": [3, 3]}},
            {"name": "C", "op": "adaptive_avg_pool2d", "inputs": ["in_0"], "attrs": {"output_size": [5, 7]}},
        ],
    }


def linear1_document(dtype: str = "f32", batch: int = 8) -> dict:
    """A single Dense(1 -> 1) layer, the smallest trainable model."""
    return {
        "dialect": "dlb",
        "seed": 0,
        "inputs": [{"name": "x", "dtype": dtype, "shape": [None, 1], "seed_shape": [batch, 1]}],
        "outputs": ["fc"],
        "nodes": [{"name": "fc", "op": "dense", "inputs": ["x"], "attrs": {"units": 1}}],
    }


def small_cnn_document(dialect: str = "dlb", batch: int = 2, seed: int = 0) -> dict:
    """A little conv net touching every layer kind, in either dialect."""
    canonical = (batch, 8, 8, 3)
    if dialect == "dlb":
        nodes = [
            {"name": "conv", "op": "conv2d", "inputs": ["x"],
             "attrs": {"filters": 4, "kernel_size": 3, "padding": "same", "activation": "relu"}},
            {"name": "pool", "op": "max_pooling2d", "inputs": ["conv"], "attrs": {"pool_size": 2}},
            {"name": "gap", "op": "global_avg_pool2d", "inputs": ["pool"]},
            {"name": "flat", "op": "flatten", "inputs": ["gap"]},
            {"name": "fc", "op": "dense", "inputs": ["flat"], "attrs": {"units": 5}},
        ]
    else:
        nodes = [
            {"name": "conv", "op": "conv2d", "inputs": ["x"],
             "attrs": {"out_channels": 4, "kernel_size": 3, "padding": 1}},
            {"name": "conv/relu", "op": "relu", "inputs": ["conv"]},
            {"name": "pool", "op": "max_pool2d", "inputs": ["conv/relu"], "attrs": {"kernel_size": 2}},
            {"name": "gap", "op": "adaptive_avg_pool2d", "inputs": ["pool"], "attrs": {"output_size": 1}},
            {"name": "flat", "op": "flatten", "inputs": ["gap"]},
            {"name": "fc", "op": "linear", "inputs": ["flat"], "attrs": {"out_features": 5}},
        ]
    return {"dialect": dialect, "seed": seed, "inputs": [_input("x", canonical, (0,), dialect)],
            "outputs": ["fc"], "nodes": nodes}


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1) + "\n"
