import numpy as np
import pytest

from conftest import single_op_graph, tt
from minisol import autodiff, hlir, ingest, passes, testing, zoo
from minisol.backends import evaluate
from minisol.backends import reference
from minisol.hlir import Graph, Node, Sym


def _backward(graph, inputs, out_grad, wrt_inputs=True):
    vs = autodiff.derive_versions(passes.infer_shapes(graph), wrt_inputs=wrt_inputs)
    fwd = evaluate(vs.train_fwd, inputs, keep_all=True)
    grads = {v: np.asarray(out_grad, dtype=fwd[v].dtype).reshape(fwd[v].shape) for v in graph.outputs}
    return vs, evaluate(vs.train_bwd, autodiff.backward_feed(vs, fwd, grads))


def test_dense_hand_example():
    g = single_op_graph(hlir.Dense(2), (1, 2))
    g.initializers["op/kernel"] = np.array([[1.0, 2.0], [3.0, 4.0]])
    g.initializers["op/bias"] = np.zeros(2)
    vs, out = _backward(g, {"in0": np.array([[1.0, 1.0]])}, [1, 0])
    np.testing.assert_array_equal(out[vs.input_grads["in0"]], [[1, 3]])
    np.testing.assert_array_equal(out[vs.grads["op/kernel"]], [[1, 0], [1, 0]])
    np.testing.assert_array_equal(out[vs.grads["op/bias"]], [1, 0])


def test_relu_mask_example():
    g = single_op_graph(hlir.ReLU(), (2,))
    vs, out = _backward(g, {"in0": np.array([-1.0, 2.0])}, [5, 7])
    np.testing.assert_array_equal(out[vs.input_grads["in0"]], [0, 7])


def test_cumsum_example():
    g = single_op_graph(hlir.CumSum(0), (3,))
    vs, out = _backward(g, {"in0": np.array([0.3, -1.0, 2.0])}, [1, 1, 1])
    np.testing.assert_array_equal(out[vs.input_grads["in0"]], [3, 2, 1])


def test_grad_check_dense_and_conv_examples():
    assert autodiff.grad_check(single_op_graph(hlir.Dense(2), (4, 3))) < 1e-6
    assert autodiff.grad_check(single_op_graph(hlir.Conv2D(2, (3, 3), (1, 1), "same"), (1, 5, 5, 1))) < 1e-5


def test_maxpool_tie_goes_to_first_in_scan_order():
    op = hlir.MaxPool2D((2, 2), (2, 2))
    x = np.array([[1.0, 5.0], [5.0, 0.0]]).reshape(1, 2, 2, 1)
    arg = reference.max_pool_argmax(op, x)
    g = reference.max_pool_grad(hlir.MaxPoolGrad((2, 2), (2, 2), (2, 2)), np.ones((1, 1, 1, 1)), arg)
    np.testing.assert_array_equal(g.reshape(2, 2), [[0, 1], [0, 0]])


ISOLATED = [
    (hlir.Conv2D(3, (3, 3), (1, 1), "same"), (2, 5, 5, 2)),
    (hlir.Conv2D(2, (2, 3), (2, 1), "valid", has_bias=False), (1, 6, 5, 3)),
    (hlir.Conv2D(2, (3, 3), (2, 2), "same"), (1, 5, 6, 1)),
    (hlir.MaxPool2D((2, 2), (2, 2)), (2, 4, 4, 2)),
    (hlir.MaxPool2D((3, 2), (1, 2)), (1, 5, 5, 2)),
    (hlir.AdaptiveAvgPool2D((2, 3)), (2, 5, 7, 2)),
    (hlir.AdaptiveAvgPool2D((1, 1)), (1, 3, 4, 3)),
    (hlir.Dense(3), (4, 5)),
    (hlir.Dense(2, has_bias=False), (3, 4)),
    (hlir.ReLU(), (3, 4)),
    (hlir.Flatten(), (2, 3, 2, 2)),
    (hlir.Add(), (3, 4)),
    (hlir.Mul(), (3, 4)),
    (hlir.Identity(), (2, 3)),
] + [(hlir.CumSum(ax, ex, rv), (2, 3, 4)) for ax in (0, -1) for ex in (False, True) for rv in (False, True)]


@pytest.mark.parametrize("op,dims", ISOLATED, ids=lambda v: str(v) if not isinstance(v, tuple) else "x")
def test_every_op_in_isolation(op, dims):
    g = single_op_graph(op, dims)
    for seed in range(10):
        feed = None
        if isinstance(op, hlir.MaxPool2D):
            # distinct values 0.01 apart: no window holds a tie within the step size
            rng = np.random.default_rng(seed)
            feed = {"in0": rng.permutation(np.arange(np.prod(dims)) * 0.01 - 1).reshape(dims)}
        assert autodiff.grad_check(g, seed=seed, inputs=feed) < 1e-4


@pytest.mark.parametrize("op", [hlir.Add(), hlir.Mul()])
def test_binary_op_with_shared_operand(op):
    g = single_op_graph(op, (3, 2), n_inputs=1)
    assert autodiff.grad_check(g) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_grads_agree_with_the_naive_oracle(seed):
    g = testing.gen_graph(2000 + seed, max_nodes=6)
    g = passes.infer_shapes(g)
    rng = np.random.default_rng(seed)
    x = testing.random_inputs(g, seed)
    targets = {v: rng.standard_normal(g.value_type(v).shape.seed_dims()) for v in g.outputs}
    vs = autodiff.derive_versions(g, wrt_inputs=True)
    fwd = evaluate(vs.train_fwd, x, keep_all=True)
    og = {v: np.sign(fwd[v] - targets[v]) for v in g.outputs}
    ana = evaluate(vs.train_bwd, autodiff.backward_feed(vs, fwd, og))
    wrt = list(vs.grads) + list(vs.input_grads)
    num = testing.oracle_grad(g, x, targets, wrt=wrt)
    names = {**vs.grads, **vs.input_grads}
    for k in wrt:
        err = np.abs(ana[names[k]] - num[k]) / np.maximum(np.maximum(np.abs(num[k]), np.abs(ana[names[k]])), 1e-3)
        assert err.max(initial=0) < 1e-4, k


def test_oracle_grad_dense_example():
    g = single_op_graph(hlir.Dense(2), (4, 3))
    rng = np.random.default_rng(1)
    x = {"in0": rng.standard_normal((4, 3))}
    t = {"op": rng.standard_normal((4, 2))}
    vs = autodiff.derive_versions(passes.infer_shapes(g))
    fwd = evaluate(vs.train_fwd, x, keep_all=True)
    ana = evaluate(vs.train_bwd, autodiff.backward_feed(vs, fwd, {"op": np.sign(fwd["op"] - t["op"])}))
    num = testing.oracle_grad(g, x, t)
    for w, gname in vs.grads.items():
        np.testing.assert_allclose(ana[gname], num[w], rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_inference_version_matches_the_input_graph_bitwise(seed):
    g, _ = passes.run_pipeline(testing.gen_graph(seed))
    vs = autodiff.derive_versions(g)
    x = testing.random_inputs(g, seed)
    a, b = evaluate(g, x), evaluate(vs.inference, x)
    for v in g.outputs:
        assert a[v].tobytes() == b[v].tobytes()


@pytest.mark.parametrize("ax,ex,rv", [(a, e, r) for a in (0, 1) for e in (False, True) for r in (False, True)])
def test_cumsum_adjoint_is_the_reversed_scan(ax, ex, rv):
    op = hlir.CumSum(ax, ex, rv)
    g = single_op_graph(op, (3, 4))
    rng = np.random.default_rng(0)
    x = {"in0": rng.standard_normal((3, 4))}
    gy = rng.standard_normal((3, 4))
    vs, out = _backward(g, x, gy)
    np.testing.assert_allclose(out[vs.input_grads["in0"]], reference.cumsum(hlir.CumSum(ax, ex, not rv), gy),
                               rtol=0, atol=1e-12)


@pytest.mark.parametrize("doc", [zoo.small_cnn_document("dlb"), zoo.small_cnn_document("dla")])
def test_saveset_is_minimal(doc):
    g, _ = passes.run_pipeline(ingest.parse_model(doc))
    vs = autodiff.derive_versions(g)
    assert vs.saved_names
    for s in vs.saved_names:
        broken = vs.train_bwd.copy(inputs=[(n, t) for n, t in vs.train_bwd.inputs if n != s])
        assert hlir.validate(broken), s


def test_train_fwd_exposes_saved_tensors_and_taps():
    g, _ = passes.run_pipeline(ingest.parse_model(zoo.small_cnn_document()))
    vs = autodiff.derive_versions(g)
    assert vs.train_fwd.outputs[: len(g.outputs)] == g.outputs
    assert set(vs.saved_names) <= set(vs.train_fwd.outputs)
    assert "pool/argmax" in vs.saved_names
    assert sorted(vs.grads) == sorted(autodiff.trainable(g))
    assert all(v.startswith("grad/") for v in vs.train_bwd.outputs)


def test_trainable_excludes_folded_constants():
    g = Graph(nodes=[Node("x", hlir.Input()), Node("c", hlir.Const(), weights={"value": "c/v"}),
                     Node("m", hlir.Mul(), ("x", "c")),
                     Node("d", hlir.Dense(1), ("m",), weights={"kernel": "d/k", "bias": "d/b"})],
              inputs=[("x", tt((1, 2), "f64"))], outputs=["d"], dtype="f64",
              initializers={"c/v": np.ones((1, 2)), "d/k": np.ones((2, 1)), "d/b": np.zeros(1)})
    assert autodiff.trainable(g) == ["d/k", "d/b"]
    assert autodiff.grad_check(g) < 1e-6


def test_symbolic_spatial_dims_are_not_differentiable(branchy):
    with pytest.raises(autodiff.NonDifferentiable):
        autodiff.derive_versions(branchy)


def test_symbolic_batch_is_differentiable():
    g = ingest.parse_model(zoo.small_cnn_document())
    assert hlir.is_sym(g.inputs[0][1].shape.dims[0])
    vs = autodiff.derive_versions(g)
    assert hlir.is_sym(vs.train_bwd.value_type(vs.grads["conv/kernel"]).shape.dims[0]) is False


def test_grad_check_needs_f64():
    with pytest.raises(ValueError):
        autodiff.grad_check(single_op_graph(hlir.ReLU(), (2,), dtype="f32"))


def test_unused_symbol_input_gets_no_gradient():
    g = Graph(nodes=[Node("x", hlir.Input()), Node("y", hlir.Input()), Node("r", hlir.ReLU(), ("x",))],
              inputs=[("x", tt((Sym(0, 2),), "f64")), ("y", tt((2,), "f64"))], outputs=["r"], dtype="f64")
    vs = autodiff.derive_versions(passes.infer_shapes(g), wrt_inputs=True)
    assert list(vs.input_grads) == ["x"]
