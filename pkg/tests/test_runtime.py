import numpy as np
import pytest

from conftest import dense_relu_graph, random_costs, ref_costs, tt
from minisol import hlir, optimize, passes, testing, zoo
from minisol.backends.plan import ShapeMismatch, UnboundVdim
from minisol.hlir import Graph, Node
from minisol.runtime import (
    ExecutionContext, HostModel, MissingGrad, OffloadDevice, execute, l1_loss, sgd_step, sync_stats,
)
from minisol.schedule import aligned


def _linear1(dtype="f32"):
    return optimize(zoo.linear1_document(dtype), cost=ref_costs(), training=True)


def _regression_data():
    x = np.linspace(-1, 1, 8).reshape(8, 1)
    return x, 2 * x


def test_identity_plan_runs():
    g = Graph(nodes=[Node("x", hlir.Input()), Node("y", hlir.Identity(), ("x",))],
              inputs=[("x", tt((3,)))], outputs=["y"])
    m = optimize(g, cost=ref_costs(), training=False)
    np.testing.assert_array_equal(m(np.array([1.0, 2.0, 3.0]))["y"], [1, 2, 3])


def test_alexnet_batch_one_output_shape():
    m = optimize(zoo.alexnet_document(seed=2), cost=ref_costs(), training=False)
    x = np.random.default_rng(0).standard_normal((1, 224, 224, 3))
    assert m(x)["dense_2"].shape == (1, 1000)


def test_l1_loss_examples():
    loss, g = l1_loss(np.array([1.0, -2.0]), np.array([1.0, -2.0]))
    assert loss == 0 and not g.any()
    loss, g = l1_loss(np.array([2.0]), np.array([0.0]))
    assert loss == 2 and g.tolist() == [1.0]


def test_l1_loss_matches_finite_differences():
    rng = np.random.default_rng(0)
    p, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    _, g = l1_loss(p, t)
    h = 1e-7
    num = np.zeros_like(p)
    for i in np.ndindex(p.shape):
        e = np.zeros_like(p)
        e[i] = h
        num[i] = (l1_loss(p + e, t)[0] - l1_loss(p - e, t)[0]) / (2 * h)
    np.testing.assert_allclose(g, num, atol=1e-6)


def test_l1_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        l1_loss(np.zeros(2), np.zeros(3))


def test_sgd_examples():
    m = HostModel({"w": np.array([1.0])})
    sgd_step(m, {"w": np.array([2.0])}, 0.5)
    assert m["w"].tolist() == [0.0] and m.version("w") == 1
    sgd_step(m, {"w": np.array([2.0])}, 0.0)
    assert m["w"].tolist() == [0.0] and m.version("w") == 2


def test_sgd_is_linear_in_steps():
    g = {"w": np.array([0.25, -1.0])}
    a = HostModel({"w": np.array([1.0, 2.0])})
    b = HostModel({"w": np.array([1.0, 2.0])})
    sgd_step(sgd_step(a, g, 0.5), g, 0.5)
    sgd_step(b, {"w": 2 * g["w"]}, 0.5)
    np.testing.assert_array_equal(a["w"], b["w"])


def test_sgd_missing_grad():
    with pytest.raises(MissingGrad):
        sgd_step(HostModel({"w": np.ones(1), "v": np.ones(1)}), {"w": np.ones(1)}, 0.1)


def test_fresh_device_counters_are_zero():
    s = sync_stats(OffloadDevice())
    assert (s.h2d_bytes, s.d2h_bytes, s.weight_bytes, s.transfers) == (0, 0, 0, {})


def test_offload_sync_protocol():
    m = optimize(dense_relu_graph(), cost=ref_costs(), training=False)
    dev = OffloadDevice()
    x = np.ones((1, 4), np.float32)
    m(x, device=dev)
    first = sync_stats(dev, reset=True).weight_bytes
    assert first == aligned(128) + aligned(32)
    m(x, device=dev)
    assert sync_stats(dev, reset=True).weight_bytes == 0
    m.model.set("fc/bias", m.model["fc/bias"] + 1)
    m(x, device=dev)
    s = sync_stats(dev)
    assert s.weight_bytes == aligned(32) and s.transfers == {"fc/bias": 1}
    assert sync_stats(dev).weight_bytes == aligned(32)  # reading does not reset


def test_sync_minimality_over_training():
    m = _linear1()
    dev = OffloadDevice(align=1)
    x, y = _regression_data()
    for _ in range(5):
        m.train_step((x, y), 0.1, device=dev)
    # initial copy plus one copy of each updated tensor per step after the first
    assert sync_stats(dev).weight_bytes == 5 * (4 + 4)
    assert sync_stats(dev).transfers == {"fc/kernel": 5, "fc/bias": 5}


@pytest.mark.parametrize("seed", range(30))
def test_offload_is_bitwise_transparent(seed):
    g, _ = passes.run_pipeline(testing.gen_graph(seed))
    m = optimize(g, cost=random_costs(g, seed), training=False)
    x = testing.random_inputs(m.graph, seed)
    host = m(x)
    dev = m(x, device=OffloadDevice())
    for k in host:
        assert host[k].tobytes() == dev[k].tobytes()


def test_execute_errors():
    m = optimize(zoo.small_cnn_document(), vdims={0: True}, cost=ref_costs(), training=False)
    with pytest.raises(ShapeMismatch):
        m(np.zeros((2, 8, 8, 4), np.float32))
    with pytest.raises(UnboundVdim):
        execute(m.inference, {}, m.model)


def test_live_bytes_after_a_plan_are_parameters_and_outputs():
    m = optimize(dense_relu_graph(), cost=ref_costs(), training=False)
    ctx = ExecutionContext(align=1)
    ctx.run(m.inference, {"x": np.ones((1, 4), np.float32)}, m.model)
    assert ctx.current == 128 + 32 + 32
    assert ctx.high_water == 224


def test_train_step_trace_and_returned_loss():
    m = _linear1("f64")
    x, y = _regression_data()
    trace = []
    expected = l1_loss(m(x)["fc"], y)[0]
    r = m.train_step((x, y), 0.1, trace=trace)
    assert trace == ["forward", "loss", "backward", "update"]
    assert r.loss == expected
    assert set(r.grads) == {"fc/kernel", "fc/bias"}


def test_zero_learning_rate_keeps_the_loss():
    m = _linear1()
    x, y = _regression_data()
    losses = {m.train_step((x, y), 0.0).loss for _ in range(3)}
    assert len(losses) == 1


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_dense_regression_reaches_small_loss(dtype):
    m = _linear1(dtype)
    x, y = _regression_data()
    losses = [m.train_step((x, y), 0.1).loss for _ in range(100)]
    assert min(losses) < 0.01


@pytest.mark.xfail(strict=True, reason="fixed-step L1 subgradient descent oscillates near the optimum")
def test_dense_regression_final_loss():
    m = _linear1()
    x, y = _regression_data()
    losses = [m.train_step((x, y), 0.1).loss for _ in range(100)]
    assert losses[-1] < 0.01


@pytest.mark.xfail(strict=True, reason="L1 subgradient steps rise on about a quarter of the steps")
def test_dense_regression_mostly_non_increasing():
    m = _linear1()
    x, y = _regression_data()
    losses = [m.train_step((x, y), 0.1).loss for _ in range(101)]
    assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 90
