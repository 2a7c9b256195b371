"""Graph passes: shape and vdim inference, vdim binding, dead-layer
elimination, constant folding and canonicalization.

All passes are pure: they return a new :class:`~minisol.hlir.Graph` and leave
their argument untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from minisol import hlir
from minisol.hlir import (
    Graph, Node, Shape, Sym, TensorType, default_layout, is_sym, seed_of,
)

log = logging.getLogger(__name__)


class ShapeError(Exception):
    pass


class RankError(ShapeError):
    def __init__(self, node, msg=""):
        super().__init__(f"{node}: rank error {msg}".rstrip())
        self.node = node


class ExtentMismatch(ShapeError):
    def __init__(self, node, axis, msg=""):
        super().__init__(f"{node}: extent mismatch on axis {axis} {msg}".rstrip())
        self.node = node
        self.axis = axis


class UnknownSymbol(ValueError):
    pass


class IllegalOverride(ValueError):
    pass


# ---------------------------------------------------------------------------
# constraints


@dataclass(frozen=True)
class EqConst:
    sym: int
    value: int


@dataclass(frozen=True)
class EqSym:
    a: int
    b: int


@dataclass(frozen=True)
class Opaque:
    syms: frozenset


def constraint_syms(c) -> set:
    if isinstance(c, EqConst):
        return {c.sym}
    if isinstance(c, EqSym):
        return {c.a, c.b}
    return set(c.syms)


# ---------------------------------------------------------------------------
# shape rules


def window_out(n: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-n // s)
    return (n - k) // s + 1


def same_pad(n: int, k: int, s: int) -> tuple:
    """(before, after) padding for TF-style ``same`` windows."""
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


class _Ctx:
    def __init__(self, next_id: int):
        self.next_id = next_id
        self.constraints: list = []
        self.products: dict = {}

    def fresh(self, seed: int, sources=()) -> Sym:
        s = Sym(self.next_id, seed)
        self.next_id += 1
        for src in sources:
            self.constraints.append(EqSym(s.id, src.id))
        return s

    def pin(self, node, axis, d, value: int):
        """Require dimension ``d`` to equal ``value``."""
        if is_sym(d):
            if d.seed != value:
                raise ExtentMismatch(node, axis, f"({d} seeded {d.seed}, needs {value})")
            factors = self.products.get(d.id)
            if factors:
                self.constraints.append(Opaque(frozenset({d.id, *factors})))
            else:
                self.constraints.append(EqConst(d.id, value))
            return value
        if d != value:
            raise ExtentMismatch(node, axis, f"({d} != {value})")
        return d

    def unify(self, node, axis, a, b):
        if is_sym(a) and is_sym(b):
            if a.id != b.id:
                if a.seed != b.seed:
                    raise ExtentMismatch(node, axis, f"({a} seeded {a.seed}, {b} seeded {b.seed})")
                self.constraints.append(EqSym(a.id, b.id))
            return a
        if is_sym(a):
            return self.pin(node, axis, a, b)
        if is_sym(b):
            return self.pin(node, axis, b, a)
        if a != b:
            raise ExtentMismatch(node, axis, f"({a} != {b})")
        return a


def _window_dim(ctx, node, axis, d, k, s, padding):
    if (padding == "same" and s == 1) or (padding == "valid" and k == 1 and s == 1):
        return d
    out = window_out(seed_of(d), k, s, padding)
    if out < 1:
        raise ExtentMismatch(node, axis, f"(window {k} does not fit extent {seed_of(d)})")
    return ctx.fresh(out, [d]) if is_sym(d) else out


def _shape(dims) -> Shape:
    dims = tuple(dims)
    return Shape(dims, default_layout(len(dims)))


def _rank(node, t: TensorType, *ranks):
    if t.shape.rank not in ranks:
        raise RankError(node.name, f"(expected rank {'/'.join(map(str, ranks))}, got {t.shape.rank})")


def infer_node(node: Node, ins: list, wts: dict, ctx: _Ctx) -> Shape:
    """Output shape of ``node`` given input types and weight types."""
    op = node.op
    name = node.name
    k = op.kind
    if k in ("ReLU", "Identity"):
        return ins[0].shape
    if k == "CumSum":
        if not -ins[0].shape.rank <= op.axis < ins[0].shape.rank:
            raise RankError(name, f"(axis {op.axis} out of range)")
        return ins[0].shape
    if k in ("Add", "Mul", "ReluGrad"):
        a, b = ins[0].shape, ins[1].shape
        if a.rank != b.rank:
            raise RankError(name, f"(operands have ranks {a.rank} and {b.rank})")
        return _shape(ctx.unify(name, i, x, y) for i, (x, y) in enumerate(zip(a, b)))
    if k == "Conv2D":
        _rank(node, ins[0], 4)
        n, h, w, c = ins[0].shape
        kern = wts["kernel"].shape
        kh, kw = op.kernel_hw
        if kern.dims != (kh, kw, kern[2], op.out_channels):
            raise ExtentMismatch(name, "kernel", f"(kernel {kern.render()} vs attrs)")
        if op.has_bias and wts["bias"].shape.dims != (op.out_channels,):
            raise ExtentMismatch(name, "bias", f"(bias {wts['bias'].shape.render()})")
        ctx.pin(name, 3, c, kern[2])
        sh, sw = op.stride_hw
        return _shape((n, _window_dim(ctx, name, 1, h, kh, sh, op.padding),
                       _window_dim(ctx, name, 2, w, kw, sw, op.padding), op.out_channels))
    if k in ("MaxPool2D", "MaxPoolArgmax"):
        _rank(node, ins[0], 4)
        n, h, w, c = ins[0].shape
        (kh, kw), (sh, sw) = op.kernel_hw, op.stride_hw
        return _shape((n, _window_dim(ctx, name, 1, h, kh, sh, "valid"),
                       _window_dim(ctx, name, 2, w, kw, sw, "valid"), c))
    if k == "AdaptiveAvgPool2D":
        _rank(node, ins[0], 4)
        n, _, _, c = ins[0].shape
        return _shape((n, *op.out_hw, c))
    if k == "Dense":
        _rank(node, ins[0], 2)
        n, f = ins[0].shape
        kern = wts["kernel"].shape
        if kern.rank != 2 or kern[1] != op.out_features:
            raise ExtentMismatch(name, "kernel", f"(kernel {kern.render()} vs out_features {op.out_features})")
        if op.has_bias and wts["bias"].shape.dims != (op.out_features,):
            raise ExtentMismatch(name, "bias", f"(bias {wts['bias'].shape.render()})")
        ctx.pin(name, 1, f, kern[0])
        return _shape((n, op.out_features))
    if k == "Flatten":
        _rank(node, ins[0], *range(2, 9))
        dims = ins[0].shape.dims
        rest = dims[1:]
        if len(rest) == 1:
            return _shape((dims[0], rest[0]))
        syms = [d for d in rest if is_sym(d)]
        prod = int(np.prod([seed_of(d) for d in rest], dtype=np.int64))
        if not syms:
            return _shape((dims[0], prod))
        s = ctx.fresh(prod, syms)
        if len(syms) > 1:
            ctx.products[s.id] = frozenset(d.id for d in syms)
        return _shape((dims[0], s))
    # operators of derived training graphs
    if k == "DenseGradInput":
        _rank(node, ins[0], 2)
        kern = wts["kernel"].shape
        ctx.pin(name, 1, ins[0].shape[1], kern[1])
        return _shape((ins[0].shape[0], kern[0]))
    if k == "DenseGradWeight":
        x, g = ins[0].shape, ins[1].shape
        _rank(node, ins[0], 2)
        _rank(node, ins[1], 2)
        ctx.unify(name, 0, x[0], g[0])
        return _shape((x[1], g[1]))
    if k == "BiasGrad":
        return _shape((ins[0].shape[-1],))
    if k == "Conv2DGradInput":
        _rank(node, ins[0], 4)
        _rank(node, ins[1], 4)
        return ins[1].shape
    if k == "Conv2DGradWeight":
        x, g = ins[0].shape, ins[1].shape
        _rank(node, ins[0], 4)
        _rank(node, ins[1], 4)
        return _shape((*op.kernel_hw, x[3], g[3]))
    if k == "MaxPoolGrad":
        _rank(node, ins[0], 4)
        g = ins[0].shape
        return _shape((g[0], *op.in_hw, g[3]))
    if k == "AvgPoolGrad":
        _rank(node, ins[0], 4)
        g = ins[0].shape
        return _shape((g[0], *op.in_hw, g[3]))
    if k == "Reshape":
        src = ins[0].shape
        want = int(np.prod(op.shape, dtype=np.int64))
        have = int(np.prod(src.seed_dims()[1:], dtype=np.int64))
        if want != have:
            raise ExtentMismatch(name, 1, f"(cannot reshape {src.render()} to {op.shape})")
        return _shape((src[0], *op.shape))
    raise ValueError(f"no shape rule for {k}")


def concrete_shape(node: Node, in_shapes: list, weight_shapes: dict, dtype: str = "f32") -> tuple:
    """Shape rule evaluated on plain integer shapes (used by the runtime)."""
    ins = [TensorType(tuple(s), dtype) for s in in_shapes]
    wts = {r: TensorType(tuple(s), dtype) for r, s in weight_shapes.items()}
    return infer_node(node, ins, wts, _Ctx(0)).seed_dims()


def infer_shapes(graph: Graph) -> Graph:
    """Annotate every value with a TensorType and record symbol constraints."""
    g = graph.copy()
    types = {}
    for name, t in g.inputs:
        types[name] = t
    for name in g.initializers:
        types[name] = g.value_type(name)
    ctx = _Ctx(max([d.id for _, t in g.inputs for d in t.shape.syms()], default=-1) + 1)
    for node in hlir.sorted_nodes(g):
        if isinstance(node.op, hlir.Input):
            types[node.output] = g.input_type(node.output)
            continue
        if isinstance(node.op, hlir.Const):
            types[node.output] = types[node.weights["value"]]
            continue
        ins = [types[v] for v in node.inputs]
        wts = {r: types[v] for r, v in node.weights.items()}
        shape = infer_node(node, ins, wts, ctx)
        types[node.output] = TensorType(shape, g.dtype)
    g.types = types
    g.constraints = ctx.constraints
    return g


def ensure_shapes(graph: Graph) -> Graph:
    needed = {v for n in graph.nodes for v in n.outputs}
    if needed <= set(graph.types):
        return graph
    return infer_shapes(graph)


# ---------------------------------------------------------------------------
# vdims


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def fixed_symbols(constraints) -> set:
    """Symbol ids pinned by the constraint set (union-find closure)."""
    uf = _UnionFind()
    pinned = set()
    for c in constraints:
        if isinstance(c, EqSym):
            uf.union(c.a, c.b)
        else:
            pinned |= constraint_syms(c)
    for s in pinned:
        uf.find(s)
    roots = {uf.find(s) for s in pinned}
    return {s for s in uf.parent if uf.find(s) in roots}


@dataclass
class VdimReport:
    inputs: list
    outputs: list
    free: dict
    display: dict = field(default_factory=dict)

    def render(self) -> str:
        lines = []
        for i, (name, shape) in enumerate(self.inputs):
            prefix = "Inputs:  " if i == 0 else "         "
            lines.append(f"{prefix}{name} {shape.render()}")
        if not self.inputs:
            lines.append("Inputs:")
        lines.append("Outputs: out_0  {")
        for name, shape in self.outputs:
            lines.append(f'    "{name}": {shape.render()},')
        lines.append("}")
        return "\n".join(lines) + "\n"

    __str__ = render

    @property
    def free_ids(self) -> list:
        return sorted(self.free)


def infer_vdims(graph: Graph) -> VdimReport:
    g = ensure_shapes(graph)
    fixed = fixed_symbols(g.constraints)
    display: dict = {}

    def show(shape: Shape) -> Shape:
        dims = []
        for d in shape:
            if is_sym(d) and d.id not in fixed:
                if d.id not in display:
                    display[d.id] = len(display)
                dims.append(Sym(display[d.id], d.seed))
            else:
                dims.append(seed_of(d))
        return Shape(tuple(dims), shape.layout)

    inputs = [(name, show(t.shape)) for name, t in g.inputs]
    free = {}
    for _, t in g.inputs:
        for d in t.shape.syms():
            if d.id in display:
                free[display[d.id]] = d.seed
    outputs = [(name, show(g.value_type(name).shape)) for name in g.outputs]
    # display id -> internal id
    inverse = {v: k for k, v in display.items()}
    return VdimReport(inputs, outputs, free, inverse)


def bind_vdims(graph: Graph, report: VdimReport, binding: dict | None = None) -> Graph:
    """Resolve symbols: ``True`` keeps one dynamic, ``False`` or absent uses
    its seed, a positive int overrides its extent."""
    binding = dict(binding or {})
    for k, v in binding.items():
        if k not in report.free:
            raise UnknownSymbol(f"#{k} is not a free symbol (free: {report.free_ids})")
        if not isinstance(v, bool) and (not isinstance(v, (int, np.integer)) or v < 1):
            raise IllegalOverride(f"#{k}: override must be a positive integer, got {v!r}")
    internal = {report.display[k]: v for k, v in binding.items()}
    enabled = [report.display[k] for k in sorted(binding) if binding[k] is True]
    renumber = {old: new for new, old in enumerate(enabled)}

    def bind(t: TensorType) -> TensorType:
        dims = []
        for d in t.shape:
            if not is_sym(d):
                dims.append(d)
            elif d.id in renumber:
                dims.append(Sym(renumber[d.id], d.seed))
            else:
                v = internal.get(d.id, False)
                dims.append(d.seed if isinstance(v, bool) else int(v))
        return TensorType(Shape(tuple(dims), t.shape.layout), t.dtype)

    g = graph.copy(inputs=[(name, bind(t)) for name, t in graph.inputs])
    try:
        return infer_shapes(g)
    except ShapeError as e:
        overrides = {k: v for k, v in binding.items() if not isinstance(v, bool)}
        if overrides:
            raise IllegalOverride(f"override {overrides} is inconsistent with the network: {e}") from e
        raise


# ---------------------------------------------------------------------------
# structural passes


def _prune_initializers(g: Graph) -> Graph:
    used = {v for n in g.nodes for v in n.reads()} | set(g.outputs)
    g.initializers = {k: v for k, v in g.initializers.items() if k in used}
    return g


def eliminate_dead(graph: Graph) -> Graph:
    """Keep only nodes that some graph output depends on."""
    producers = graph.producers()
    live = set()
    stack = [v for v in graph.outputs]
    while stack:
        v = stack.pop()
        n = producers.get(v)
        if n is None or n.name in live:
            continue
        live.add(n.name)
        stack.extend(n.reads())
    g = graph.copy(nodes=[n for n in graph.nodes if n.name in live])
    return _reinfer(_prune_initializers(g), graph)


def _reinfer(g: Graph, original: Graph) -> Graph:
    if original.types:
        return infer_shapes(g)
    return g


def _rename_inputs(node: Node, mapping: dict) -> Node:
    if not any(v in mapping for v in node.inputs):
        return node
    return Node(node.name, node.op, tuple(mapping.get(v, v) for v in node.inputs),
                node.outputs, dict(node.weights), dict(node.meta))


def canonicalize(graph: Graph) -> Graph:
    """Splice out Identity nodes and collapse Flatten chains."""
    nodes = list(graph.nodes)
    outputs = list(graph.outputs)
    protected = set(graph.input_names) | set(graph.initializers)

    changed = True
    while changed:
        changed = False
        producers = {v: n for n in nodes for v in n.outputs}
        consumers: dict = {}
        for n in nodes:
            for v in n.inputs:
                consumers.setdefault(v, []).append(n)
        for node in nodes:
            if isinstance(node.op, hlir.Identity):
                src, dst = node.inputs[0], node.output
                if dst not in outputs:
                    nodes = [_rename_inputs(n, {dst: src}) for n in nodes if n is not node]
                    changed = True
                    break
                # graph output: let the producer write the output name directly
                prod = producers.get(src)
                if (prod is not None and src not in outputs and src not in protected
                        and not isinstance(prod.op, (hlir.Input, hlir.Const))):
                    renamed = Node(prod.name, prod.op, prod.inputs, (dst,), dict(prod.weights), dict(prod.meta))
                    nodes = [renamed if n is prod else _rename_inputs(n, {src: dst})
                             for n in nodes if n is not node]
                    changed = True
                    break
            if isinstance(node.op, hlir.Flatten):
                inner = producers.get(node.inputs[0])
                if inner is not None and isinstance(inner.op, hlir.Flatten):
                    nodes = [_rename_inputs(n, {node.inputs[0]: inner.inputs[0]}) if n is node else n
                             for n in nodes]
                    if len(consumers.get(inner.output, [])) == 1 and inner.output not in outputs:
                        nodes = [n for n in nodes if n is not inner]
                    changed = True
                    break
    g = graph.copy(nodes=nodes, outputs=outputs)
    return _reinfer(g, graph)


def _materializes_output(node: Node, g: Graph) -> bool:
    if not isinstance(node.op, hlir.Identity) or node.output not in g.outputs:
        return False
    src = g.producers().get(node.inputs[0])
    return src is not None and isinstance(src.op, hlir.Const)


def fold_constants(graph: Graph, evaluate=None) -> Graph:
    """Evaluate every node whose inputs are all constant and replace the
    maximal constant regions by Const nodes. A graph output that turns
    constant becomes an Identity of a Const, so plans still produce it."""
    if evaluate is None:
        from minisol.backends.reference import run_node as evaluate
    g = ensure_shapes(graph)
    inits = dict(g.initializers)
    values = {}
    const_nodes = set()
    for node in hlir.sorted_nodes(g):
        if isinstance(node.op, hlir.Input):
            continue
        if isinstance(node.op, hlir.Const):
            values[node.output] = inits[node.weights["value"]]
            const_nodes.add(node.name)
            continue
        if not g.types[node.output].shape.is_static:
            continue
        if _materializes_output(node, g):
            continue
        srcs = []
        for v in node.inputs:
            if v in values:
                srcs.append(values[v])
            elif v in inits:
                srcs.append(inits[v])
            else:
                break
        else:
            weights = {r: inits[v] for r, v in node.weights.items()}
            values[node.output] = evaluate(node, srcs, weights)
            const_nodes.add(node.name)

    producers = g.producers()
    needed = set(g.outputs)
    for node in g.nodes:
        if node.name not in const_nodes:
            needed |= set(node.reads())
    taken = set(inits) | set(producers) | {n.name for n in g.nodes}

    def fresh(base):
        while base in taken:
            base += "_"
        taken.add(base)
        return base

    new_nodes = []
    for node in g.nodes:
        if node.name not in const_nodes:
            new_nodes.append(node)
            continue
        if node.output not in needed:
            continue
        if isinstance(node.op, hlir.Const):
            const = node
        else:
            init = fresh(f"{node.name}/folded")
            inits[init] = np.ascontiguousarray(values[node.output], dtype=hlir.DTYPES[g.dtype])
            const = Node(node.name, hlir.Const(), (), node.outputs, {"value": init}, dict(node.meta))
        if node.output in g.outputs:
            # a plan output must be computed, so keep an explicit copy of the constant
            inner = fresh(f"{node.name}/const")
            new_nodes.append(Node(inner, hlir.Const(), (), (inner,), dict(const.weights)))
            new_nodes.append(Node(node.name, hlir.Identity(), (inner,), node.outputs, {}, dict(node.meta)))
        else:
            new_nodes.append(const)
    out = g.copy(nodes=new_nodes, initializers=inits)
    return infer_shapes(_prune_initializers(out))


PIPELINE = ("canonicalize", "eliminate_dead", "fold_constants", "infer_shapes", "infer_vdims", "bind_vdims")


def run_pipeline(graph: Graph, binding: dict | None = None):
    """The standard optimization pipeline; returns (bound graph, report)."""
    g = canonicalize(graph)
    g = eliminate_dead(g)
    g = fold_constants(g)
    g = infer_shapes(g)
    report = infer_vdims(g)
    return bind_vdims(g, report, binding), report
