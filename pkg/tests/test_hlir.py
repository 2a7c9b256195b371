import pytest
from hypothesis import given, settings, strategies as st

from conftest import tt
from minisol import hlir, passes, testing
from minisol.hlir import Graph, Node, Shape, Sym


def test_empty_graph_is_valid():
    assert hlir.validate(Graph()) == []


def test_unknown_input_is_reported():
    g = Graph(nodes=[Node("r", hlir.ReLU(), ("x",))], outputs=["r"])
    diags = hlir.validate(g)
    assert [(d.node, d.rule) for d in diags] == [("r", "unknown input x")]


def test_two_node_cycle_is_reported():
    g = Graph(nodes=[Node("a", hlir.ReLU(), ("b",)), Node("b", hlir.ReLU(), ("a",))], outputs=["b"])
    assert "cycle detected" in [d.rule for d in hlir.validate(g)]
    with pytest.raises(hlir.CycleError):
        hlir.topo_order(g)


def test_validate_flags_structural_errors():
    g = Graph(
        nodes=[Node("x", hlir.Input()), Node("d", hlir.Dense(2), ("x",), weights={"kernel": "nope"}),
               Node("d", hlir.Add(), ("x",))],
        inputs=[("x", tt((1, 3)))],
        outputs=["d", "ghost"],
    )
    rules = {d.rule for d in hlir.validate(g)}
    assert "duplicate node name" in rules
    assert "unknown initializer nope" in rules
    assert "missing weight bias" in rules
    assert "expected 2 inputs, got 1" in rules
    assert "graph output ghost is never produced" in rules


def test_topo_order_chain():
    g = Graph(nodes=[Node("in", hlir.Input()), Node("conv_relu", hlir.ReLU(), ("conv",)),
                     Node("conv", hlir.Identity(), ("in",))],
              inputs=[("in", tt((1, 2)))], outputs=["conv_relu"])
    assert hlir.topo_order(g) == ["in", "conv", "conv_relu"]


def test_topo_order_diamond_tie_break_by_insertion():
    g = Graph(nodes=[Node("in", hlir.Input()), Node("a", hlir.ReLU(), ("in",)),
                     Node("b", hlir.Identity(), ("in",)), Node("add", hlir.Add(), ("a", "b"))],
              inputs=[("in", tt((2,)))], outputs=["add"])
    assert hlir.topo_order(g) == ["in", "a", "b", "add"]


def test_alexnet_layers_in_summary_order(alexnet_lazy):
    order = [n for n in hlir.topo_order(alexnet_lazy)
             if "activation_of" not in alexnet_lazy.node(n).meta and n != "input_1"]
    assert order == ["conv2d", "max_pooling2d", "conv2d_1", "max_pooling2d_1", "conv2d_2", "conv2d_3",
                     "conv2d_4", "max_pooling2d_2", "flatten", "dense", "dense_1", "dense_2"]


@pytest.mark.parametrize("seed", range(200))
def test_topo_order_respects_every_edge(seed):
    g = testing.gen_graph(seed)
    pos = {n: i for i, n in enumerate(hlir.topo_order(g))}
    prod = g.producers()
    for n in g.nodes:
        for v in n.inputs:
            assert pos[prod[v].name] < pos[n.name]


PASSES = [passes.canonicalize, passes.eliminate_dead, passes.fold_constants, passes.infer_shapes]


@pytest.mark.parametrize("seed", range(100))
def test_passes_preserve_wellformedness(seed):
    g = testing.gen_graph(seed)
    for p in PASSES:
        g = p(g)
        assert hlir.validate(g) == []


dims = st.one_of(st.integers(1, 10_000), st.builds(Sym, st.integers(0, 15)))


@settings(max_examples=200, deadline=None)
@given(st.lists(dims, max_size=8))
def test_shape_render_round_trip(ds):
    s = Shape(tuple(ds))
    assert hlir.parse_shape(s.render()) == s


def test_sym_equality_ignores_seed():
    assert Sym(3, 7) == Sym(3, 9)
    assert Sym(3) != Sym(4)
    assert str(Shape((Sym(0), 5, Sym(1)))) == "[#0, 5, #1]"


@pytest.mark.parametrize("bad", [0, -2])
def test_shape_rejects_non_positive_extent(bad):
    with pytest.raises(ValueError):
        Shape((1, bad))


def test_op_attribute_checks():
    assert hlir.Conv2D(4, (3, 3), (1, 1), "diagonal").check()
    assert hlir.Conv2D(0, (3, 3)).check()
    assert hlir.Conv2D(4, (3, 3)).check() == []
    with pytest.raises(hlir.HLIRError):
        hlir.make_op("Softmax")
