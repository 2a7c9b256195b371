"""Random graph generator and brute-force oracles for property tests.

The oracles are deliberately naive and self-contained: they import only the
IR types from :mod:`minisol.hlir` and numpy, and re-derive what they check
(evaluation, vdim closure, convex partitions, liveness, finite
differences) without touching the production passes, backends or schedule.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from minisol import hlir
from minisol.hlir import Graph, Node, TensorType

# relative pick weights; Input and Const are created as needed as well
OP_FREQ = {
    "Conv2D": 3, "MaxPool2D": 2, "AdaptiveAvgPool2D": 2, "Dense": 3, "ReLU": 3, "Flatten": 2,
    "Add": 2, "Mul": 2, "CumSum": 2, "Identity": 2, "Const": 1, "Input": 1,
}


# ---------------------------------------------------------------------------
# generator


def gen_graph(seed: int, max_nodes: int = 10, dtype: str = "f64", max_extent: int = 8,
              n_ops: int | None = None) -> Graph:
    """A deterministic, valid, fixed-shape graph of at most ``max_nodes`` nodes.

    With ``n_ops`` the graph gets exactly that many non-input nodes instead
    (``max_nodes`` is then ignored).
    """
    rng = np.random.default_rng(seed)
    np_dtype = hlir.DTYPES[dtype]
    nodes, inputs, inits = [], [], {}
    pool: dict = {}  # value -> shape tuple

    def new_input():
        name = f"in{len(inputs)}"
        if rng.random() < 0.6:
            shape = (int(rng.integers(1, 3)), int(rng.integers(2, max_extent + 1)),
                     int(rng.integers(2, max_extent + 1)), int(rng.integers(1, 4)))
        else:
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, max_extent + 1)))
        inputs.append((name, TensorType(shape, dtype)))
        nodes.append(Node(name, hlir.Input()))
        pool[name] = shape

    def weight(name, shape, scale=0.5):
        inits[name] = (rng.standard_normal(shape) * scale).astype(np_dtype)
        return name

    new_input()
    kinds = list(OP_FREQ)
    probs = np.array([OP_FREQ[k] for k in kinds], dtype=float)
    probs /= probs.sum()
    budget = int(rng.integers(2, max_nodes + 1))
    attempts = 0

    def room():
        if n_ops is not None:
            return len(nodes) - len(inputs) < n_ops
        return len(nodes) < budget

    while room() and attempts < 500:
        attempts += 1
        kind = kinds[rng.choice(len(kinds), p=probs)]
        values = list(pool)
        x = values[int(rng.integers(len(values)))]
        shape = pool[x]
        name = f"n{len(nodes)}"
        if kind == "Input":
            if len(inputs) < 2 and (n_ops is not None or len(nodes) < budget - 1):
                new_input()
            continue
        if kind == "Const":
            nodes.append(Node(name, hlir.Const(), (), (name,), {"value": weight(f"{name}/value", shape, 1.0)}))
            pool[name] = shape
            continue
        if kind in ("ReLU", "Identity"):
            op = hlir.make_op(kind)
            out = shape
        elif kind == "CumSum":
            axis = int(rng.integers(-len(shape), len(shape)))
            op = hlir.CumSum(axis, bool(rng.integers(2)), bool(rng.integers(2)))
            out = shape
        elif kind in ("Add", "Mul"):
            same = [v for v in values if pool[v] == shape]
            y = same[int(rng.integers(len(same)))]
            nodes.append(Node(name, hlir.make_op(kind), (x, y)))
            pool[name] = shape
            continue
        elif kind == "Flatten":
            op = hlir.Flatten()
            out = (shape[0], int(np.prod(shape[1:])))
        elif kind == "Dense":
            if len(shape) != 2:
                continue
            units = int(rng.integers(1, max_extent + 1))
            bias = bool(rng.integers(2))
            op = hlir.Dense(units, bias)
            w = {"kernel": weight(f"{name}/kernel", (shape[1], units))}
            if bias:
                w["bias"] = weight(f"{name}/bias", (units,))
            nodes.append(Node(name, op, (x,), (name,), w))
            pool[name] = (shape[0], units)
            continue
        elif kind in ("Conv2D", "MaxPool2D"):
            if len(shape) != 4:
                continue
            n, h, wd, c = shape
            k = (int(rng.integers(1, min(3, h) + 1)), int(rng.integers(1, min(3, wd) + 1)))
            s = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
            if kind == "MaxPool2D":
                op = hlir.MaxPool2D(k, s)
                out = (n, (h - k[0]) // s[0] + 1, (wd - k[1]) // s[1] + 1, c)
            else:
                pad = "same" if rng.random() < 0.5 else "valid"
                co = int(rng.integers(1, 5))
                bias = bool(rng.integers(2))
                op = hlir.Conv2D(co, k, s, pad, bias)
                if pad == "same":
                    out = (n, -(-h // s[0]), -(-wd // s[1]), co)
                else:
                    out = (n, (h - k[0]) // s[0] + 1, (wd - k[1]) // s[1] + 1, co)
                w = {"kernel": weight(f"{name}/kernel", (*k, c, co))}
                if bias:
                    w["bias"] = weight(f"{name}/bias", (co,))
                nodes.append(Node(name, op, (x,), (name,), w))
                pool[name] = out
                continue
        elif kind == "AdaptiveAvgPool2D":
            if len(shape) != 4:
                continue
            oh, ow = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            op = hlir.AdaptiveAvgPool2D((oh, ow))
            out = (shape[0], oh, ow, shape[3])
        else:  # pragma: no cover
            raise AssertionError(kind)
        nodes.append(Node(name, op, (x,)))
        pool[name] = out

    produced = [n.name for n in nodes if not isinstance(n.op, hlir.Input)] or [inputs[0][0]]
    outputs = [produced[-1]]
    if len(produced) > 2 and rng.random() < 0.4:
        extra = produced[int(rng.integers(len(produced) - 1))]
        outputs.append(extra)
    return Graph(nodes=nodes, inputs=inputs, outputs=outputs, initializers=inits, dtype=dtype)


def random_inputs(graph: Graph, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    dt = hlir.DTYPES[graph.dtype]
    return {name: rng.standard_normal(t.shape.seed_dims()).astype(dt) for name, t in graph.inputs}


# ---------------------------------------------------------------------------
# naive evaluator


def _pads(n, k, s, padding):
    if padding == "valid":
        return 0, (n - k) // s + 1
    out = math.ceil(n / s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, out


def _naive(node: Node, ins: list, w: dict):
    op = node.op
    k = op.kind
    if k == "Const":
        return w["value"].copy()
    if k == "Identity":
        return ins[0].copy()
    if k == "ReLU":
        return np.where(ins[0] > 0, ins[0], 0.0).astype(ins[0].dtype)
    if k == "Add":
        return ins[0] + ins[1]
    if k == "Mul":
        return ins[0] * ins[1]
    if k == "Flatten":
        x = ins[0]
        out = np.empty((x.shape[0], x[0].size), dtype=x.dtype)
        for b in range(x.shape[0]):
            out[b] = [v for v in x[b].flat]
        return out
    if k == "CumSum":
        x = np.moveaxis(ins[0], op.axis, -1)
        out = np.zeros_like(x)
        n = x.shape[-1]
        for idx in np.ndindex(x.shape[:-1]):
            row = x[idx]
            for i in range(n):
                js = range(i, n) if op.reverse else range(0, i + 1)
                out[idx + (i,)] = sum(row[j] for j in js if not (op.exclusive and j == i))
        return np.moveaxis(out, -1, op.axis)
    if k == "Dense":
        x = ins[0]
        out = np.zeros((x.shape[0], op.out_features), dtype=x.dtype)
        for b in range(x.shape[0]):
            for o in range(op.out_features):
                acc = sum(x[b, i] * w["kernel"][i, o] for i in range(x.shape[1]))
                out[b, o] = acc + (w["bias"][o] if op.has_bias else 0)
        return out
    if k in ("Conv2D", "MaxPool2D"):
        x = ins[0]
        n, h, wd, c = x.shape
        (kh, kw), (sh, sw) = op.kernel_hw, op.stride_hw
        padding = op.padding if k == "Conv2D" else "valid"
        ph, oh = _pads(h, kh, sh, padding)
        pw, ow = _pads(wd, kw, sw, padding)
        co = op.out_channels if k == "Conv2D" else c
        out = np.zeros((n, oh, ow, co), dtype=x.dtype)
        for b, i, j in itertools.product(range(n), range(oh), range(ow)):
            for o in range(co):
                vals = []
                for di, dj in itertools.product(range(kh), range(kw)):
                    r, q = i * sh + di - ph, j * sw + dj - pw
                    inside = 0 <= r < h and 0 <= q < wd
                    if k == "MaxPool2D":
                        vals.append(x[b, r, q, o])
                    elif inside:
                        vals.append(sum(x[b, r, q, ci] * w["kernel"][di, dj, ci, o] for ci in range(c)))
                if k == "MaxPool2D":
                    out[b, i, j, o] = max(vals)
                else:
                    out[b, i, j, o] = sum(vals) + (w["bias"][o] if op.has_bias else 0)
        return out
    if k == "AdaptiveAvgPool2D":
        x = ins[0]
        n, h, wd, c = x.shape
        oh, ow = op.out_hw
        out = np.zeros((n, oh, ow, c), dtype=x.dtype)
        for i, j in itertools.product(range(oh), range(ow)):
            h0, h1 = (i * h) // oh, math.ceil((i + 1) * h / oh)
            w0, w1 = (j * wd) // ow, math.ceil((j + 1) * wd / ow)
            out[:, i, j, :] = x[:, h0:h1, w0:w1, :].sum(axis=(1, 2)) / ((h1 - h0) * (w1 - w0))
        return out
    raise NotImplementedError(k)


def oracle_eval(graph: Graph, inputs: dict, keep_all: bool = False) -> dict:
    """Evaluate forward operators by explicit loops, in a naive dependency order."""
    values = {k: np.asarray(v) for k, v in inputs.items()}
    values.update(graph.initializers)
    pending = [n for n in graph.nodes if not isinstance(n.op, hlir.Input)]
    while pending:
        for n in pending:
            if all(v in values for v in n.inputs):
                w = {r: graph.initializers[v] for r, v in n.weights.items()}
                values[n.outputs[0]] = _naive(n, [values[v] for v in n.inputs], w)
                pending.remove(n)
                break
        else:
            raise ValueError("graph cannot be evaluated (cycle or missing value)")
    return values if keep_all else {v: values[v] for v in graph.outputs}


# ---------------------------------------------------------------------------
# vdim closure


def oracle_vdims(graph: Graph, dynamic: dict) -> set:
    """Free dynamic input axes as ``{(input name, axis)}``.

    ``dynamic`` maps input names to the axes to treat as variable. Symbolic
    extents are propagated with the shape rules written out here; pins and
    derivation links are collected and the fixed set is grown to a fixpoint.
    """
    counter = itertools.count()
    origin = {}  # sym -> (input, axis)
    shapes = {}
    for name, t in graph.inputs:
        dims = []
        for axis, d in enumerate(t.shape.seed_dims()):
            if axis in dynamic.get(name, ()):
                s = ("sym", next(counter), d)
                origin[s[1]] = (name, axis)
                dims.append(s)
            else:
                dims.append(d)
        shapes[name] = dims
    for v, a in graph.initializers.items():
        shapes[v] = list(a.shape)

    links, pinned = [], set()

    def issym(d):
        return isinstance(d, tuple)

    def val(d):
        return d[2] if issym(d) else d

    def derive(d, new_val, keep):
        if not issym(d):
            return new_val
        if keep:
            return d
        s = ("sym", next(counter), new_val)
        links.append((s[1], d[1]))
        return s

    def need(d, n):
        if issym(d):
            pinned.add(d[1])

    def same(a, b):
        if issym(a) and issym(b):
            links.append((a[1], b[1]))
            return a
        if issym(a):
            pinned.add(a[1])
            return b
        if issym(b):
            pinned.add(b[1])
        return a

    pending = [n for n in graph.nodes if not isinstance(n.op, hlir.Input)]
    while pending:
        node = next(n for n in pending if all(v in shapes for v in n.inputs))
        pending.remove(node)
        op, k = node.op, node.op.kind
        x = shapes[node.inputs[0]] if node.inputs else None
        if k == "Const":
            out = list(graph.initializers[node.weights["value"]].shape)
        elif k in ("ReLU", "Identity", "CumSum"):
            out = list(x)
        elif k in ("Add", "Mul"):
            out = [same(a, b) for a, b in zip(x, shapes[node.inputs[1]])]
        elif k == "Flatten":
            rest = x[1:]
            total = int(np.prod([val(d) for d in rest]))
            syms = [d for d in rest if issym(d)]
            if len(rest) == 1:
                out = [x[0], rest[0]]
            elif syms:
                s = ("sym", next(counter), total)
                for d in syms:
                    links.append((s[1], d[1]))
                out = [x[0], s]
            else:
                out = [x[0], total]
        elif k == "Dense":
            need(x[1], graph.initializers[node.weights["kernel"]].shape[0])
            out = [x[0], op.out_features]
        elif k == "AdaptiveAvgPool2D":
            out = [x[0], *op.out_hw, x[3]]
        elif k in ("Conv2D", "MaxPool2D"):
            (kh, kw), (sh, sw) = op.kernel_hw, op.stride_hw
            padding = op.padding if k == "Conv2D" else "valid"
            dims = []
            for d, kk, ss in ((x[1], kh, sh), (x[2], kw, sw)):
                _, o = _pads(val(d), kk, ss, padding)
                keep = (padding == "same" and ss == 1) or (kk == 1 and ss == 1)
                dims.append(derive(d, o, keep))
            if k == "Conv2D":
                need(x[3], graph.initializers[node.weights["kernel"]].shape[2])
                out = [x[0], *dims, op.out_channels]
            else:
                out = [x[0], *dims, x[3]]
        else:
            raise NotImplementedError(k)
        shapes[node.outputs[0]] = out

    fixed = set(pinned)
    changed = True
    while changed:
        changed = False
        for a, b in links:
            if (a in fixed) != (b in fixed):
                fixed |= {a, b}
                changed = True
    return {origin[s] for s in origin if s not in fixed}


# ---------------------------------------------------------------------------
# convex partitions


def _edges(graph: Graph):
    names = [n.name for n in graph.nodes if not isinstance(n.op, (hlir.Input, hlir.Const))]
    prod = {n.outputs[0]: n.name for n in graph.nodes if n.name in names}
    succ = {a: set() for a in names}
    for n in graph.nodes:
        if n.name in succ:
            for v in n.inputs:
                if v in prod:
                    succ[prod[v]].add(n.name)
    return names, succ


def _reachable(succ, a):
    seen, todo = set(), [a]
    while todo:
        for y in succ[todo.pop()]:
            if y not in seen:
                seen.add(y)
                todo.append(y)
    return seen


def oracle_valid_partition(graph: Graph, assignment: dict, blocks) -> bool:
    names, succ = _edges(graph)
    reach = {a: _reachable(succ, a) for a in names}
    blocks = [set(b) for b in blocks]
    if sorted(m for b in blocks for m in b) != sorted(names):
        return False
    block_of = {m: i for i, b in enumerate(blocks) for m in b}
    for b in blocks:
        if len({assignment[m] for m in b}) != 1:
            return False
        # connected through dataflow edges taken undirected
        start = next(iter(b))
        seen, todo = {start}, [start]
        while todo:
            a = todo.pop()
            for y in b:
                if y not in seen and (y in succ[a] or a in succ[y]):
                    seen.add(y)
                    todo.append(y)
        if seen != b:
            return False
        # convex: no path a -> outside -> b between members
        for a in b:
            for mid in reach[a] - b:
                if reach[mid] & b:
                    return False
    # the groups themselves must be orderable
    gsucc = {i: {block_of[y] for a in b for y in succ[a]} - {i} for i, b in enumerate(blocks)}
    for i in gsucc:
        if i in _reachable(gsucc, i):
            return False
    return True


def oracle_groups(graph: Graph, assignment: dict) -> list:
    """All valid partitions (connected, convex, same-backend, orderable)."""
    names, _ = _edges(graph)
    results = []

    def place(i, blocks):
        if i == len(names):
            if oracle_valid_partition(graph, assignment, blocks):
                results.append([set(b) for b in blocks])
            return
        n = names[i]
        for b in blocks:
            if assignment[next(iter(b))] == assignment[n]:
                b.add(n)
                place(i + 1, blocks)
                b.remove(n)
        blocks.append({n})
        place(i + 1, blocks)
        blocks.pop()

    place(0, [])
    return results


def oracle_is_maximal(graph: Graph, assignment: dict, blocks) -> bool:
    """No two blocks can be merged into another valid partition."""
    blocks = [set(b) for b in blocks]
    for i, j in itertools.combinations(range(len(blocks)), 2):
        merged = [b for k, b in enumerate(blocks) if k not in (i, j)] + [blocks[i] | blocks[j]]
        if oracle_valid_partition(graph, assignment, merged):
            return False
    return True


# ---------------------------------------------------------------------------
# memory


def oracle_memory(events) -> int:
    """Replay alloc/free events step by step and return the peak total.

    Within a step all allocations happen before the frees. Raises on
    double allocation or on freeing something not live.
    """
    live = {}
    peak = 0
    steps = sorted({e.step for e in events})
    for t in steps:
        here = [e for e in events if e.step == t]
        for e in here:
            if e.kind == "alloc":
                if e.name in live:
                    raise AssertionError(f"{e.name} allocated twice")
                live[e.name] = e.bytes
        peak = max(peak, sum(live.values()))
        for e in here:
            if e.kind == "free":
                if live.pop(e.name, None) is None:
                    raise AssertionError(f"{e.name} freed while not live")
    return peak


def oracle_liveness_peak(steps, sizes: dict, resident, first_inputs, align: int = 64) -> int:
    """Peak from per-step access lists by direct interval reasoning.

    ``steps`` is a list of (reads, writes) name lists, one per kernel;
    ``sizes`` maps names to byte sizes; ``resident`` are never freed
    (parameters, outputs, saved); ``first_inputs`` are live from step 0.
    A value is live from the step that writes it (or 0) through its last
    access; the peak is the largest sum over steps.
    """
    def al(n):
        return -(-n // align) * align

    start, end = {}, {}
    for v in first_inputs:
        start[v] = 0
        end[v] = 0
    for t, (reads, writes) in enumerate(steps, start=1):
        for v in writes:
            start.setdefault(v, t)
            end[v] = t
        for v in reads:
            end[v] = max(end.get(v, 0), t)
    last = len(steps)
    best = 0
    for t in range(0, last + 1):
        total = 0
        for v, s in start.items():
            e = last if v in resident else end[v]
            if s <= t <= e:
                total += al(sizes[v])
        for v in resident:
            if v not in start:
                total += al(sizes[v])
        best = max(best, total)
    return best


# ---------------------------------------------------------------------------
# finite differences


def oracle_grad(graph: Graph, inputs: dict, targets: dict, h: float = 1e-5, wrt=None) -> dict:
    """Central differences of ``sum |y - t|`` with the naive evaluator.

    ``wrt`` lists initializer or input names (default: every initializer).
    """
    wrt = list(graph.initializers) if wrt is None else list(wrt)

    def terms(inits, ins):
        g = Graph(nodes=graph.nodes, inputs=graph.inputs, outputs=graph.outputs,
                  initializers=inits, dtype=graph.dtype)
        out = oracle_eval(g, ins)
        return [np.abs(out[v] - targets[v]) for v in graph.outputs]

    grads = {}
    for name in wrt:
        is_init = name in graph.initializers
        base = graph.initializers[name] if is_init else inputs[name]
        num = np.zeros(base.shape, dtype=np.float64)
        for idx in np.ndindex(base.shape):
            vals = []
            for sgn in (1.0, -1.0):
                pert = np.array(base, dtype=np.float64)
                pert[idx] += sgn * h
                if is_init:
                    vals.append(terms({**graph.initializers, name: pert}, inputs))
                else:
                    vals.append(terms(graph.initializers, {**inputs, name: pert}))
            num[idx] = sum(float((a - b).sum()) for a, b in zip(*vals)) / (2 * h)
        grads[name] = num
    return grads
