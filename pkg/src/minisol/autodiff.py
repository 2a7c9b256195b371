"""Reverse-mode differentiation: inference, training-forward and
training-backward versions of a graph.

The backward graph receives one gradient per forward output (named
``grad/<output>``) plus the forward tensors it needs (the save set), and
produces ``grad/<initializer>`` for every trainable weight. Intermediates
are always stored, never recomputed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from minisol import hlir
from minisol.hlir import Graph, Node
from minisol.passes import eliminate_dead, ensure_shapes, infer_shapes


class NonDifferentiable(Exception):
    def __init__(self, node, why=""):
        super().__init__(f"{node}: cannot differentiate {why}".rstrip())
        self.node = node


GRAD_PREFIX = "grad/"


def grad_name(value: str) -> str:
    return GRAD_PREFIX + value


@dataclass
class VersionSet:
    inference: Graph
    train_fwd: Graph
    train_bwd: Graph
    saved: list = field(default_factory=list)         # [(name, TensorType)]
    grads: dict = field(default_factory=dict)         # initializer -> gradient value
    output_grads: dict = field(default_factory=dict)  # forward output -> backward input
    input_grads: dict = field(default_factory=dict)   # graph input -> gradient value

    @property
    def saved_names(self) -> list:
        return [n for n, _ in self.saved]


def trainable(graph: Graph) -> list:
    """Initializers used as layer weights (folded constants are not trainable)."""
    out = []
    for n in graph.nodes:
        if isinstance(n.op, (hlir.Conv2D, hlir.Dense)):
            for role in n.op.required_weights():
                if n.weights[role] not in out:
                    out.append(n.weights[role])
    return out


def _static_hw(node: Node, shape, what: str) -> tuple:
    hw = shape.dims[1:3]
    if any(hlir.is_sym(d) for d in hw):
        raise NonDifferentiable(node.name, f"({what} needs fixed spatial extents, got {shape.render()})")
    return tuple(hw)


class _Builder:
    def __init__(self, fwd: Graph):
        self.fwd = fwd
        self.nodes: list = []
        self.contrib: dict = {}   # forward value -> [gradient value names]
        self.taps: dict = {}      # argmax value -> MaxPoolArgmax node
        self.alias = {n.output: n.weights["value"] for n in fwd.nodes if isinstance(n.op, hlir.Const)}

    def ref(self, v: str) -> str:
        """Name under which forward value ``v`` is visible in the backward graph."""
        return self.alias.get(v, v)

    def emit(self, name, op, inputs, weights=None) -> str:
        self.nodes.append(Node(name, op, tuple(inputs), (name,), dict(weights or {})))
        return name

    def give(self, value: str, g: str):
        self.contrib.setdefault(value, []).append(g)

    def total(self, value: str, final: str | None = None):
        """Sum of all contributions to d(loss)/d(value), or None."""
        parts = self.contrib.get(value, [])
        if not parts:
            return None
        acc = parts[0]
        for i, p in enumerate(parts[1:], start=1):
            name = final if (final and i == len(parts) - 1) else f"{grad_name(value)}/sum{i}"
            acc = self.emit(name, hlir.Add(), (acc, p))
        if final and acc != final:
            # Terminal gradients: rename the producing node instead of copying.
            idx = next((i for i, n in enumerate(self.nodes) if n.output == acc), None)
            consumed = any(acc in n.inputs for n in self.nodes)
            if idx is not None and not consumed:
                n = self.nodes[idx]
                self.nodes[idx] = Node(final, n.op, n.inputs, (final,), dict(n.weights))
                acc = final
            else:
                acc = self.emit(final, hlir.Identity(), (acc,))
        return acc

    def vjp(self, node: Node, g: str):
        op = node.op
        k = op.kind
        x = node.inputs[0] if node.inputs else None
        b = f"bwd/{node.name}"
        types = self.fwd.types
        if k in ("Identity",):
            self.give(x, g)
        elif k == "ReLU":
            self.give(x, self.emit(f"{b}/dx", hlir.ReluGrad(), (g, self.ref(x))))
        elif k == "Add":
            self.give(node.inputs[0], g)
            self.give(node.inputs[1], g)
        elif k == "Mul":
            a, c = node.inputs
            self.give(a, self.emit(f"{b}/da", hlir.Mul(), (g, self.ref(c))))
            self.give(c, self.emit(f"{b}/db", hlir.Mul(), (g, self.ref(a))))
        elif k == "CumSum":
            adj = hlir.CumSum(op.axis, op.exclusive, not op.reverse)
            self.give(x, self.emit(f"{b}/dx", adj, (g,)))
        elif k == "Flatten":
            shape = types[x].shape
            rest = shape.dims[1:]
            if any(hlir.is_sym(d) for d in rest):
                raise NonDifferentiable(node.name, f"(reshape needs fixed extents, got {shape.render()})")
            self.give(x, self.emit(f"{b}/dx", hlir.Reshape(tuple(rest)), (g,)))
        elif k == "AdaptiveAvgPool2D":
            in_hw = _static_hw(node, types[x].shape, "pooling gradient")
            self.give(x, self.emit(f"{b}/dx", hlir.AvgPoolGrad(op.out_hw, in_hw), (g,)))
        elif k == "MaxPool2D":
            in_hw = _static_hw(node, types[x].shape, "pooling gradient")
            am = f"{node.name}/argmax"
            self.taps[am] = Node(am, hlir.MaxPoolArgmax(op.kernel_hw, op.stride_hw), (x,), (am,))
            self.give(x, self.emit(f"{b}/dx", hlir.MaxPoolGrad(op.kernel_hw, op.stride_hw, in_hw), (g, am)))
        elif k == "Dense":
            w = node.weights["kernel"]
            self.give(x, self.emit(f"{b}/dx", hlir.DenseGradInput(), (g,), {"kernel": w}))
            self.give(w, self.emit(f"{b}/dW", hlir.DenseGradWeight(), (self.ref(x), g)))
            if op.has_bias:
                self.give(node.weights["bias"], self.emit(f"{b}/db", hlir.BiasGrad(), (g,)))
        elif k == "Conv2D":
            w = node.weights["kernel"]
            geo = dict(kernel_hw=op.kernel_hw, stride_hw=op.stride_hw, padding=op.padding)
            self.give(x, self.emit(f"{b}/dx", hlir.Conv2DGradInput(**geo), (g, self.ref(x)), {"kernel": w}))
            self.give(w, self.emit(f"{b}/dW", hlir.Conv2DGradWeight(**geo), (self.ref(x), g)))
            if op.has_bias:
                self.give(node.weights["bias"], self.emit(f"{b}/db", hlir.BiasGrad(), (g,)))
        else:
            raise NonDifferentiable(node.name, f"(no rule for {k})")


def derive_versions(graph: Graph, wrt_inputs: bool = False) -> VersionSet:
    """Build the three versions of an optimized, shape-inferred graph."""
    fwd = ensure_shapes(graph)
    bld = _Builder(fwd)
    out_grads = {}
    for v in fwd.outputs:
        if v not in out_grads:
            out_grads[v] = grad_name(v)
            bld.give(v, out_grads[v])

    for node in reversed(hlir.sorted_nodes(fwd)):
        if not hlir.is_compute(node):
            continue
        g = bld.total(node.output)
        if g is None:
            continue
        bld.vjp(node, g)

    weights = trainable(fwd)
    grads = {}
    for w in weights:
        if bld.total(w, final=grad_name(w)) is not None:
            grads[w] = grad_name(w)
    input_grads = {}
    if wrt_inputs:
        for v in fwd.input_names:
            if bld.total(v, final=grad_name(v)) is not None:
                input_grads[v] = grad_name(v)

    # Everything the backward nodes read that the forward pass produced.
    produced_bwd = {n.output for n in bld.nodes}
    grad_inputs = set(out_grads.values())
    reads = [v for n in bld.nodes for v in n.reads()]
    bwd_inits = {v: fwd.initializers[v] for v in reads if v in fwd.initializers}
    candidates = [v for v in dict.fromkeys(reads)
                  if v not in produced_bwd and v not in grad_inputs and v not in bwd_inits]

    def bwd_graph(save):
        return Graph(
            nodes=list(bld.nodes),
            inputs=[(out_grads[v], fwd.value_type(v)) for v in out_grads] + [(s, save[s]) for s in save],
            outputs=list(grads.values()) + list(input_grads.values()),
            initializers=bwd_inits,
            dtype=fwd.dtype,
        )

    # Forward graph with argmax taps, so saved tensors get their real types.
    taps_needed = [bld.taps[v] for v in candidates if v in bld.taps]
    fwd_nodes = list(fwd.nodes) + taps_needed
    train_fwd = infer_shapes(fwd.copy(nodes=fwd_nodes))
    order = {v: i for i, n in enumerate(hlir.sorted_nodes(train_fwd)) for v in n.outputs}
    for i, v in enumerate(train_fwd.input_names):
        order.setdefault(v, -len(train_fwd.input_names) + i)
    save = {v: train_fwd.value_type(v) for v in sorted(candidates, key=lambda v: order[v])}

    bwd = eliminate_dead(bwd_graph(save))
    used = {v for n in bwd.nodes for v in n.reads()} | set(bwd.outputs)
    save = {v: t for v, t in save.items() if v in used}
    bwd = bwd.copy(inputs=[(n, t) for n, t in bwd.inputs if n in used or n in out_grads.values()])
    bwd = infer_shapes(bwd)

    taps = [t for t in taps_needed if t.output in save]
    train_fwd = fwd.copy(nodes=list(fwd.nodes) + taps,
                         outputs=list(fwd.outputs) + [v for v in save if v not in fwd.outputs])
    train_fwd = infer_shapes(train_fwd)
    return VersionSet(
        inference=fwd,
        train_fwd=train_fwd,
        train_bwd=bwd,
        saved=list(save.items()),
        grads=grads,
        output_grads=out_grads,
        input_grads=input_grads,
    )


def backward_feed(versions: VersionSet, fwd_values: dict, output_grads: dict) -> dict:
    """Inputs for the backward graph from forward results and output gradients."""
    feed = {versions.output_grads[v]: output_grads[v] for v in versions.output_grads}
    for name, _ in versions.saved:
        feed[name] = fwd_values[name]
    return {k: feed[k] for k in versions.train_bwd.input_names}


def grad_check(graph: Graph, seed: int = 0, h: float = 1e-5, wrt_inputs: bool = True,
               floor: float = 1e-3, inputs: dict | None = None) -> float:
    """Largest relative error between backward-graph gradients and central
    finite differences of ``sum |y - t|`` over every output.

    Checks every trainable initializer and, with ``wrt_inputs``, every graph
    input. Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor
    sits well above the rounding noise of a central difference at this
    ``h`` (about 1e-10 for unit-sized activations), which would otherwise
    dominate entries whose exact gradient is zero. Targets are drawn as the
    outputs plus an offset of magnitude at least 1e-2, so no loss term sits
    on its kink. ``inputs`` overrides the random draws (max pooling needs
    inputs without near-ties, for one).
    """
    from minisol.backends.reference import evaluate

    g = ensure_shapes(graph)
    if g.dtype != "f64":
        raise ValueError("grad_check needs an f64 graph")
    rng = np.random.default_rng(seed)
    drawn = {name: rng.standard_normal(t.shape.seed_dims()) for name, t in g.inputs}
    inputs = {**drawn, **(inputs or {})}
    # targets sit at least 1e-2 from the outputs: a step of h must not cross the kink of |y - t|
    outs = evaluate(g, inputs)
    targets = {}
    for v in g.outputs:
        r = rng.standard_normal(outs[v].shape)
        targets[v] = outs[v] + np.where(r < 0, -1.0, 1.0) * np.maximum(np.abs(r), 1e-2)

    def terms(graph_, feed):
        out = evaluate(graph_, feed)
        return [np.abs(out[v] - targets[v]) for v in graph_.outputs]

    def central(plus, minus):
        # difference the per-element terms so untouched elements cancel exactly
        return sum(float((a - b).sum()) for a, b in zip(plus, minus)) / (2 * h)

    vs = derive_versions(g, wrt_inputs=wrt_inputs)
    fwd_vals = evaluate(vs.train_fwd, inputs, keep_all=True)
    out_grads = {v: np.sign(fwd_vals[v] - targets[v]) for v in g.outputs}
    analytic = evaluate(vs.train_bwd, backward_feed(vs, fwd_vals, out_grads))

    worst = 0.0

    def compare(a, n):
        nonlocal worst
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if err.size:
            worst = max(worst, float(err.max()))

    for w, gname in vs.grads.items():
        base = g.initializers[w]
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sgn in (1.0, -1.0):
                pert = base.copy()
                pert[idx] += sgn * h
                vals.append(terms(g.copy(initializers={**g.initializers, w: pert}), inputs))
            num[idx] = central(*vals)
        compare(analytic[gname], num)
    for x, gname in vs.input_grads.items():
        base = inputs[x]
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sgn in (1.0, -1.0):
                pert = base.copy()
                pert[idx] += sgn * h
                vals.append(terms(g, {**inputs, x: pert}))
            num[idx] = central(*vals)
        compare(analytic[gname], num)
    return worst
