import pathlib

import numpy as np
import pytest

from minisol import hlir, ingest, zoo
from minisol.backends import BackendId, Injected
from minisol.hlir import Graph, Node, Shape, Sym, TensorType

ROOT = pathlib.Path(__file__).resolve().parents[1]
GOLDEN = ROOT / "tests" / "golden"
MODELS = ROOT / "models"


def ref_costs():
    """Every node on REF, deterministic."""
    return Injected({}, strict=False)


def random_costs(graph, seed):
    rng = np.random.default_rng(seed)
    return Injected({(n.name, b): float(rng.random()) for n in graph.nodes for b in BackendId}, strict=False)


def tt(dims, dtype="f32", layout=None):
    return TensorType(Shape(tuple(dims), layout or hlir.default_layout(len(dims))), dtype)


def dense_relu_graph(dtype="f32", batch=1):
    """Input[1,4] -> Dense(4->8) -> ReLU, weights fixed."""
    np_dtype = hlir.DTYPES[dtype]
    inits = {
        "fc/kernel": (np.arange(32).reshape(4, 8) / 10 - 1.5).astype(np_dtype),
        "fc/bias": np.linspace(-1, 1, 8).astype(np_dtype),
    }
    return Graph(
        nodes=[Node("x", hlir.Input()),
               Node("fc", hlir.Dense(8), ("x",), weights={"kernel": "fc/kernel", "bias": "fc/bias"}),
               Node("act", hlir.ReLU(), ("fc",))],
        inputs=[("x", tt((batch, 4), dtype))],
        outputs=["act"],
        initializers=inits,
        dtype=dtype,
    )


def single_op_graph(op, in_dims, dtype="f64", seed=0, n_inputs=None):
    """One node of ``op`` reading fresh graph inputs, random weights."""
    rng = np.random.default_rng(seed)
    n_inputs = op.arity if n_inputs is None else n_inputs
    names = [f"in{i}" for i in range(n_inputs)]
    nodes = [Node(n, hlir.Input()) for n in names]
    inits, weights = {}, {}
    for role in op.required_weights():
        if isinstance(op, hlir.Conv2D):
            shape = (*op.kernel_hw, in_dims[3], op.out_channels) if role == "kernel" else (op.out_channels,)
        else:
            shape = (in_dims[1], op.out_features) if role == "kernel" else (op.out_features,)
        inits[f"op/{role}"] = rng.standard_normal(shape).astype(hlir.DTYPES[dtype])
        weights[role] = f"op/{role}"
    inputs = names if n_inputs == op.arity else [names[0]] * op.arity
    nodes.append(Node("op", op, tuple(inputs), weights=weights))
    return Graph(nodes=nodes, inputs=[(n, tt(in_dims, dtype)) for n in names], outputs=["op"],
                 initializers=inits, dtype=dtype)


@pytest.fixture(scope="session")
def alexnet_doc():
    return zoo.alexnet_document()


@pytest.fixture(scope="session")
def alexnet_lazy(alexnet_doc):
    """Alexnet with placeholder (zero) weights: cheap, for shapes and memory."""
    return ingest.parse_model(alexnet_doc, materialize=False)


@pytest.fixture(scope="session")
def branchy():
    return ingest.parse_model(zoo.branchy_document())


def sym_input_graph(dims, op=None):
    op = op or hlir.ReLU()
    return Graph(nodes=[Node("x", hlir.Input()), Node("y", op, ("x",))],
                 inputs=[("x", tt(dims))], outputs=["y"])



def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)


__all__ = ["Sym"]
