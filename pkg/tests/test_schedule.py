import numpy as np
import pytest

from conftest import GOLDEN, dense_relu_graph, random_costs, ref_costs, tt
from minisol import compile_version, hlir, ingest, optimize, passes, schedule, testing, zoo
from minisol.backends import BackendId, Injected
from minisol.hlir import Graph, Node
from minisol.runtime import ExecutionContext, HostModel
from minisol.schedule import MemCategory, build_schedule, estimate_peak, memory_report, timeline

GEMM, EW = BackendId.GEMM_TILED, BackendId.FUSED_EW


def _plan(graph, cost=None):
    return compile_version(passes.infer_shapes(graph), cost or ref_costs()).plan


def _identity():
    return Graph(nodes=[Node("x", hlir.Input()), Node("y", hlir.Identity(), ("x",))],
                 inputs=[("x", tt((1,)))], outputs=["y"])


def test_dense_relu_running_totals_at_align_1():
    tl = timeline(_plan(dense_relu_graph()), align=1)
    assert tl.series[-5:] == [176, 208, 192, 224, 192]
    assert tl.peak == 224


def test_dense_relu_at_align_64():
    assert timeline(_plan(dense_relu_graph()), align=64).peak == 320


def test_identity_peak():
    assert timeline(_plan(_identity()), align=1).peak == 8


def test_identity_training_peak_adds_only_gradient_buffers():
    m = optimize(_identity(), cost=ref_costs(), training=True, wrt_inputs=True)
    assert not m.train_fwd.saved
    inf, train = m.estimate_peak(align=1)
    # no weights, so no weight-gradient buffers; grad/y replaces y, grad/x replaces x
    assert train == inf == 8


def test_events_replayed_by_the_oracle():
    ev = build_schedule(_plan(dense_relu_graph()), align=1)
    assert testing.oracle_memory(ev) == 224
    assert [(e.step, e.kind, e.name) for e in ev if e.category != MemCategory.PARAMETER] == [
        (0, "alloc", "x"), (1, "alloc", "fc"), (1, "free", "x"), (2, "alloc", "act"), (2, "free", "fc")]


def test_csv_report():
    # Dense on the GEMM backend, ReLU on the fused one: two groups plus setup
    split = Injected({("fc", GEMM): 0, ("act", EW): 0}, strict=False)
    tl = timeline(_plan(dense_relu_graph(), split), align=1)
    rows = memory_report(tl, "csv").splitlines()
    assert rows[0] == ",".join(schedule.CSV_COLUMNS)
    assert len(rows) == 4
    assert max(int(r.split(",")[-1]) for r in rows[1:]) == 224


def test_empty_timeline_is_header_only():
    tl = schedule.MemoryTimeline.from_events([])
    assert memory_report(tl, "csv") == ",".join(schedule.CSV_COLUMNS) + "\n"


def test_text_report_has_one_row_per_group():
    g = Graph(nodes=[Node("x", hlir.Input()), Node("a", hlir.ReLU(), ("x",)), Node("b", hlir.ReLU(), ("a",)),
                     Node("c", hlir.Mul(), ("a", "b"))],
              inputs=[("x", tt((2, 2)))], outputs=["c"])
    plan = _plan(g, Injected({(n, b): int(b != BackendId.FUSED_EW) for n in "abc" for b in BackendId}, strict=False))
    text = memory_report(timeline(plan, align=1))
    assert len(text.splitlines()) - 1 < 3
    assert "FUSED_EW" in text


def test_unknown_report_format():
    with pytest.raises(ValueError):
        memory_report(timeline(_plan(_identity())), "xml")


def test_peak_block_format_golden():
    assert schedule.format_peak(15 * schedule.MB + 1, 25 * schedule.MB - 1) == \
        (GOLDEN / "peak_block.txt").read_text()


def test_peak_block_rounds_half_up():
    assert "~2MB" in schedule.format_peak(schedule.MB + schedule.MB // 2, 0)
    assert "~1MB" in schedule.format_peak(schedule.MB + schedule.MB // 2 - 1, 0)


def _used_plans(seed):
    g, _ = passes.run_pipeline(testing.gen_graph(seed))
    return optimize(g, cost=random_costs(g, seed), training=True, wrt_inputs=True)


@pytest.mark.parametrize("seed", range(60))
def test_conservation_and_oracle_agreement(seed):
    m = _used_plans(seed)
    for align in (1, 64):
        ev = build_schedule(m.inference, align)
        alloc = sum(e.bytes for e in ev if e.kind == "alloc")
        free = sum(e.bytes for e in ev if e.kind == "free")
        live = {e.name: e.bytes for e in ev if e.kind == "alloc"}
        for e in ev:
            if e.kind == "free":
                live.pop(e.name)
        assert all(e.category in (MemCategory.PARAMETER, MemCategory.OUTPUT) for e in ev
                   if e.kind == "alloc" and e.name in live)
        assert alloc == free + sum(live.values())
        assert testing.oracle_memory(ev) == timeline(m.inference, align).peak
        if m.trainable:
            tev = schedule.training_events(m.train_fwd, m.train_bwd, align)
            assert testing.oracle_memory(tev) == schedule.training_timeline(m.train_fwd, m.train_bwd, align).peak


def _access_lists(plan):
    names = [v.name for v in plan.values]
    return [([names[s] for s in k.inputs], [names[s] for s in k.outputs]) for _, k in schedule.kernel_steps(plan)]


@pytest.mark.parametrize("seed", range(60))
def test_liveness_oracle_and_free_after_last_use(seed):
    m = _used_plans(seed)
    plan = m.inference
    shapes, _ = plan.resolve_shapes()
    item = np.dtype(hlir.DTYPES[plan.dtype]).itemsize
    sizes = {v.name: int(np.prod(shapes[i], dtype=np.int64)) * item for i, v in enumerate(plan.values)}
    resident = set(plan.weights) | set(plan.output_names)
    steps = _access_lists(plan)
    for align in (1, 64):
        assert testing.oracle_liveness_peak(steps, sizes, resident, plan.input_names, align) == \
            timeline(plan, align).peak
    ev = build_schedule(plan, 1)
    live = set()
    for t in range(len(steps) + 1):
        live |= {e.name for e in ev if e.step == t and e.kind == "alloc"}
        if t:
            reads, writes = steps[t - 1]
            assert set(reads) | set(writes) <= live
        live -= {e.name for e in ev if e.step == t and e.kind == "free"}


def _run_high_water(plan, inputs, model, align):
    ctx = ExecutionContext(align)
    ctx.run(plan, inputs, model)
    return ctx.high_water


@pytest.mark.parametrize("seed", range(40))
def test_estimate_equals_runtime_high_water(seed):
    m = _used_plans(seed)
    x = testing.random_inputs(m.graph, seed)
    for align in (1, 64):
        inf, train = m.estimate_peak(align)
        assert _run_high_water(m.inference, x, HostModel(dict(m.model.weights)), align) == inf
        if m.trainable:
            out = m.train_fwd.output_names[0]
            ref = m(x)[out]
            r = m.train_step((x, np.zeros_like(ref)), lr=0.0, align=align)
            assert r.high_water == train


@pytest.mark.parametrize("align", [1, 64])
def test_batch_monotonicity(align):
    m = optimize(zoo.small_cnn_document(), vdims={0: True}, cost=ref_costs(), training=True)
    last = (0, 0)
    for b in range(1, 9):
        cur = m.estimate_peak(align, {0: b})
        assert cur[0] >= last[0] and cur[1] >= last[1]
        last = cur


def test_alexnet_estimate_matches_the_replay_oracle(alexnet_lazy):
    m = optimize(alexnet_lazy, cost=ref_costs(), training=True)
    inf, train = m.estimate_peak(align=1)
    assert testing.oracle_memory(build_schedule(m.inference, 1)) == inf
    assert testing.oracle_memory(schedule.training_events(m.train_fwd, m.train_bwd, 1)) == train
    assert train >= inf
    block = m.memory_block(align=1)
    assert block.startswith("Estimated Peak Memory Consumption:\nInference: ~")


def test_unbound_vdim_warns_and_uses_seed(caplog):
    m = optimize(zoo.small_cnn_document(), vdims={0: True}, cost=ref_costs(), training=True)
    with caplog.at_level("WARNING"):
        seeded = estimate_peak(m, 64)
    assert "no extent" in caplog.text
    k, seed, _ = m.inference.vdims[0]
    assert seeded == estimate_peak(m, 64, {k: seed})


def test_alexnet_runtime_matches_estimate():
    m = optimize(ingest.parse_model(zoo.alexnet_document(seed=1)), cost=ref_costs(), training=False)
    x = np.random.default_rng(0).standard_normal((1, 224, 224, 3)).astype(np.float32)
    ctx = ExecutionContext(64)
    out = ctx.run(m.inference, {"input_1": x}, m.model)
    assert out["dense_2"].shape == (1, 1000)
    assert ctx.high_water == m.estimate_peak(64)[0]
