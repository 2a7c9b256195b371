"""The graph generator and the oracles that back the property suites."""

import ast
import collections
import hashlib
import pathlib

import numpy as np
import pytest

from conftest import dense_relu_graph, ref_costs
from minisol import compile_version, hlir, passes, schedule, testing

# the operators a model may contain; gradient operators only appear in derived versions
MODEL_OPS = ["Input", "Const", "Conv2D", "MaxPool2D", "AdaptiveAvgPool2D", "Dense", "ReLU", "Flatten", "Add", "Mul",
             "CumSum", "Identity"]
GEN_GRAPH_0 = "d8b844f1f122dca3cade8a12c5865792d1132a553d1a58eaf0a2c59c8612ba82"


def _digest(g):
    h = hashlib.sha256()
    h.update(repr([(n.name, repr(n.op), n.inputs, sorted(n.weights.items())) for n in g.nodes]).encode())
    h.update(repr([(k, t.shape.render(), t.dtype) for k, t in g.inputs]).encode())
    h.update(repr(g.outputs).encode())
    for k in sorted(g.initializers):
        h.update(k.encode())
        h.update(g.initializers[k].tobytes())
    return h.hexdigest()


def test_seed_zero_is_hash_stable():
    assert _digest(testing.gen_graph(0)) == GEN_GRAPH_0
    assert _digest(testing.gen_graph(0)) == _digest(testing.gen_graph(0))


def test_thousand_seeds_are_valid_and_cover_every_op():
    seen = collections.Counter()
    for seed in range(1000):
        g = testing.gen_graph(seed)
        assert hlir.validate(g) == [], seed
        assert len(g.nodes) <= 10
        for _, t in g.inputs:
            assert t.shape.rank <= 4 and max(t.shape.dims) <= 8
            assert not any(hlir.is_sym(d) for d in t.shape.dims)
        seen.update(n.op.kind for n in g.nodes)
    assert set(seen) == set(testing.OP_FREQ) == set(MODEL_OPS)


def test_exact_op_budget():
    for seed in range(50):
        g = testing.gen_graph(seed, n_ops=6)
        assert sum(not isinstance(n.op, hlir.Input) for n in g.nodes) == 6


def test_oracles_import_only_hlir():
    src = pathlib.Path(testing.__file__).read_text()
    mods = set()
    for node in ast.walk(ast.parse(src)):
        if isinstance(node, ast.Import):
            mods.update(a.name for a in node.names)
        elif isinstance(node, ast.ImportFrom):
            mods.add(node.module)
    assert {m for m in mods if m.startswith("minisol")} <= {"minisol", "minisol.hlir"}
    tree = ast.parse(src)
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom) and node.module == "minisol":
            assert [a.name for a in node.names] == ["hlir"]


def test_oracle_memory_on_dense_relu():
    plan = compile_version(passes.infer_shapes(dense_relu_graph()), ref_costs()).plan
    assert testing.oracle_memory(schedule.build_schedule(plan, align=1)) == 224


def test_oracle_memory_rejects_bad_replays():
    E = schedule.MemoryEvent
    with pytest.raises(AssertionError):
        testing.oracle_memory([E(0, "alloc", "a", 4, "input"), E(1, "alloc", "a", 4, "input")])
    with pytest.raises(AssertionError):
        testing.oracle_memory([E(0, "free", "a", 4, "input")])


def test_oracle_eval_hand_example():
    g = dense_relu_graph("f64")
    x = np.array([[1.0, 0.0, -1.0, 2.0]])
    k, b = g.initializers["fc/kernel"], g.initializers["fc/bias"]
    out = testing.oracle_eval(g, {"x": x})
    np.testing.assert_allclose(out["act"], np.maximum(x @ k + b, 0), rtol=1e-14)


def test_oracle_vdims_on_a_pooling_chain():
    from conftest import sym_input_graph

    dims = (hlir.Sym(0, 2), hlir.Sym(1, 4), hlir.Sym(2, 4), 3)
    g = sym_input_graph(dims, hlir.MaxPool2D((2, 2), (2, 2)))
    assert testing.oracle_vdims(g, {"x": [0, 1, 2]}) == {("x", 0), ("x", 1), ("x", 2)}


def test_oracle_vdims_dense_after_flatten_pins_spatial_axes():
    from minisol.hlir import Graph, Node
    from conftest import tt

    g = Graph(nodes=[Node("x", hlir.Input()), Node("f", hlir.Flatten(), ("x",)),
                     Node("d", hlir.Dense(2), ("f",), weights={"kernel": "d/k", "bias": "d/b"})],
              inputs=[("x", tt((hlir.Sym(0, 2), hlir.Sym(1, 4), hlir.Sym(2, 4), 3)))], outputs=["d"],
              initializers={"d/k": np.zeros((48, 2), np.float32), "d/b": np.zeros(2, np.float32)})
    assert testing.oracle_vdims(g, {"x": [0, 1, 2]}) == {("x", 0)}


def test_oracle_groups_counts_a_chain():
    from minisol.backends import BackendId
    from minisol.hlir import Graph, Node
    from conftest import tt

    g = Graph(nodes=[Node("x", hlir.Input()), Node("a", hlir.ReLU(), ("x",)), Node("b", hlir.ReLU(), ("a",)),
                     Node("c", hlir.ReLU(), ("b",))], inputs=[("x", tt((2,)))], outputs=["c"])
    asg = dict.fromkeys("abc", BackendId.FUSED_EW)
    # partitions of a 3-chain into contiguous runs: 2^(3-1)
    assert len(testing.oracle_groups(g, asg)) == 4
    assert testing.oracle_is_maximal(g, asg, [{"a", "b", "c"}])
    assert not testing.oracle_is_maximal(g, asg, [{"a"}, {"b", "c"}])
