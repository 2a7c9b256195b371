"""High-level intermediate representation.

Tensors are described by :class:`TensorType` (a :class:`Shape` plus dtype).
A dimension is either a plain ``int`` (fixed extent) or a :class:`Sym`, a
variable dimension that remembers the extent it had at ingest time (its
*seed*) so that anything needing concrete numbers can still evaluate it.

Operators are small frozen dataclasses; a :class:`Node` applies one operator
to named values and a :class:`Graph` holds nodes, interface and initializers.
"""

from __future__ import annotations

import dataclasses
import heapq
import re
from dataclasses import dataclass, field
from typing import ClassVar, Union

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
LAYOUTS = ("NHWC", "FLAT", "SCALAR", "RAW")


class HLIRError(Exception):
    pass


class CycleError(HLIRError):
    pass


# ---------------------------------------------------------------------------
# dimensions and types


@dataclass(frozen=True)
class Sym:
    """A variable dimension ``#id``; equality and hashing use the id only."""

    id: int
    seed: int = field(default=1, compare=False)

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"symbol id must be non-negative, got {self.id}")
        if self.seed < 1:
            raise ValueError(f"seed extent must be >= 1, got {self.seed}")

    def __str__(self):
        return f"#{self.id}"


Dim = Union[int, Sym]


def is_sym(d) -> bool:
    return isinstance(d, Sym)


def seed_of(d: Dim) -> int:
    return d.seed if isinstance(d, Sym) else int(d)


@dataclass(frozen=True)
class Shape:
    dims: tuple = ()
    layout: str = field(default="RAW", compare=False)

    def __post_init__(self):
        dims = tuple(d if isinstance(d, Sym) else int(d) for d in self.dims)
        for d in dims:
            if not isinstance(d, Sym) and d < 1:
                raise ValueError(f"fixed extents must be >= 1, got {d}")
        object.__setattr__(self, "dims", dims)
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def is_static(self) -> bool:
        return not any(isinstance(d, Sym) for d in self.dims)

    def seed_dims(self) -> tuple:
        return tuple(seed_of(d) for d in self.dims)

    def syms(self) -> list:
        return [d for d in self.dims if isinstance(d, Sym)]

    def __len__(self):
        return len(self.dims)

    def __getitem__(self, i):
        return self.dims[i]

    def __iter__(self):
        return iter(self.dims)

    def render(self) -> str:
        return "[" + ", ".join(str(d) for d in self.dims) + "]"

    __str__ = render


_DIM_RE = re.compile(r"^\s*(?:#(\d+)|(\d+))\s*$")


def parse_shape(text: str, layout: str = "RAW") -> Shape:
    """Inverse of :meth:`Shape.render`. Parsed symbols get seed 1."""
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise ValueError(f"not a shape: {text!r}")
    body = text[1:-1].strip()
    if not body:
        return Shape((), layout)
    dims = []
    for tok in body.split(","):
        m = _DIM_RE.match(tok)
        if not m:
            raise ValueError(f"bad dimension {tok!r} in {text!r}")
        dims.append(Sym(int(m.group(1))) if m.group(1) is not None else int(m.group(2)))
    return Shape(tuple(dims), layout)


def default_layout(rank: int) -> str:
    return {0: "SCALAR", 2: "FLAT", 4: "NHWC"}.get(rank, "RAW")


@dataclass(frozen=True)
class TensorType:
    shape: Shape
    dtype: str = "f32"

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if not isinstance(self.shape, Shape):
            dims = tuple(self.shape)
            object.__setattr__(self, "shape", Shape(dims, default_layout(len(dims))))

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def itemsize(self) -> int:
        return np.dtype(self.np_dtype).itemsize

    def nbytes(self) -> int:
        """Byte size with every symbol evaluated at its seed."""
        return int(np.prod(self.shape.seed_dims(), dtype=np.int64)) * self.itemsize


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, t in DTYPES.items():
        if np.dtype(t) == dtype:
            return name
    raise ValueError(f"unsupported dtype {dtype}")


# ---------------------------------------------------------------------------
# operators


OPS: dict = {}


def _register(cls):
    OPS[cls.kind] = cls
    return cls


@dataclass(frozen=True)
class Op:
    kind: ClassVar[str] = "?"
    arity: ClassVar[int] = 1
    weight_roles: ClassVar[tuple] = ()
    elementwise: ClassVar[bool] = False

    def attrs(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def required_weights(self) -> tuple:
        return self.weight_roles

    def check(self) -> list:
        """Attribute problems as a list of messages."""
        problems = []
        for name, value in self.attrs().items():
            if isinstance(value, tuple) and any(int(v) < 1 for v in value):
                problems.append(f"attribute {name} must be positive, got {value}")
            if isinstance(value, int) and not isinstance(value, bool) and name != "axis" and value < 1:
                problems.append(f"attribute {name} must be positive, got {value}")
        return problems


def _pair(v):
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v}")
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


@_register
@dataclass(frozen=True)
class Input(Op):
    kind: ClassVar[str] = "Input"
    arity: ClassVar[int] = 0


@_register
@dataclass(frozen=True)
class Const(Op):
    kind: ClassVar[str] = "Const"
    arity: ClassVar[int] = 0
    weight_roles: ClassVar[tuple] = ("value",)


@_register
@dataclass(frozen=True)
class Conv2D(Op):
    kind: ClassVar[str] = "Conv2D"
    out_channels: int = 1
    kernel_hw: tuple = (1, 1)
    stride_hw: tuple = (1, 1)
    padding: str = "valid"
    has_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel_hw", _pair(self.kernel_hw))
        object.__setattr__(self, "stride_hw", _pair(self.stride_hw))

    def required_weights(self):
        return ("kernel", "bias") if self.has_bias else ("kernel",)

    def check(self):
        problems = super().check()
        if self.padding not in ("same", "valid"):
            problems.append(f"padding must be same or valid, got {self.padding!r}")
        return problems


@_register
@dataclass(frozen=True)
class MaxPool2D(Op):
    kind: ClassVar[str] = "MaxPool2D"
    kernel_hw: tuple = (2, 2)
    stride_hw: tuple = (2, 2)

    def __post_init__(self):
        object.__setattr__(self, "kernel_hw", _pair(self.kernel_hw))
        object.__setattr__(self, "stride_hw", _pair(self.stride_hw))


@_register
@dataclass(frozen=True)
class AdaptiveAvgPool2D(Op):
    kind: ClassVar[str] = "AdaptiveAvgPool2D"
    out_hw: tuple = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "out_hw", _pair(self.out_hw))


@_register
@dataclass(frozen=True)
class Dense(Op):
    kind: ClassVar[str] = "Dense"
    out_features: int = 1
    has_bias: bool = True

    def required_weights(self):
        return ("kernel", "bias") if self.has_bias else ("kernel",)


@_register
@dataclass(frozen=True)
class ReLU(Op):
    kind: ClassVar[str] = "ReLU"
    elementwise: ClassVar[bool] = True


@_register
@dataclass(frozen=True)
class Flatten(Op):
    kind: ClassVar[str] = "Flatten"


@_register
@dataclass(frozen=True)
class Add(Op):
    kind: ClassVar[str] = "Add"
    arity: ClassVar[int] = 2
    elementwise: ClassVar[bool] = True


@_register
@dataclass(frozen=True)
class Mul(Op):
    kind: ClassVar[str] = "Mul"
    arity: ClassVar[int] = 2
    elementwise: ClassVar[bool] = True


@_register
@dataclass(frozen=True)
class CumSum(Op):
    kind: ClassVar[str] = "CumSum"
    axis: int = 0
    exclusive: bool = False
    reverse: bool = False


@_register
@dataclass(frozen=True)
class Identity(Op):
    kind: ClassVar[str] = "Identity"
    elementwise: ClassVar[bool] = True


# Operators below appear only in derived training graphs.


@_register
@dataclass(frozen=True)
class DenseGradInput(Op):
    """``g @ W.T``; inputs (g,)."""

    kind: ClassVar[str] = "DenseGradInput"
    weight_roles: ClassVar[tuple] = ("kernel",)


@_register
@dataclass(frozen=True)
class DenseGradWeight(Op):
    """``x.T @ g``; inputs (x, g)."""

    kind: ClassVar[str] = "DenseGradWeight"
    arity: ClassVar[int] = 2


@_register
@dataclass(frozen=True)
class BiasGrad(Op):
    """Sum over every axis except the last; inputs (g,)."""

    kind: ClassVar[str] = "BiasGrad"


@_register
@dataclass(frozen=True)
class Conv2DGradInput(Op):
    """Transposed correlation of g with the kernel; inputs (g, x), x gives the shape."""

    kind: ClassVar[str] = "Conv2DGradInput"
    arity: ClassVar[int] = 2
    weight_roles: ClassVar[tuple] = ("kernel",)
    kernel_hw: tuple = (1, 1)
    stride_hw: tuple = (1, 1)
    padding: str = "valid"

    def __post_init__(self):
        object.__setattr__(self, "kernel_hw", _pair(self.kernel_hw))
        object.__setattr__(self, "stride_hw", _pair(self.stride_hw))


@_register
@dataclass(frozen=True)
class Conv2DGradWeight(Op):
    """Correlation of x with g; inputs (x, g)."""

    kind: ClassVar[str] = "Conv2DGradWeight"
    arity: ClassVar[int] = 2
    kernel_hw: tuple = (1, 1)
    stride_hw: tuple = (1, 1)
    padding: str = "valid"

    def __post_init__(self):
        object.__setattr__(self, "kernel_hw", _pair(self.kernel_hw))
        object.__setattr__(self, "stride_hw", _pair(self.stride_hw))


@_register
@dataclass(frozen=True)
class ReluGrad(Op):
    """``g * (x > 0)``; inputs (g, x)."""

    kind: ClassVar[str] = "ReluGrad"
    arity: ClassVar[int] = 2


@_register
@dataclass(frozen=True)
class MaxPoolArgmax(Op):
    """Window-local offset of each pooled maximum, first in scan order on ties."""

    kind: ClassVar[str] = "MaxPoolArgmax"
    kernel_hw: tuple = (2, 2)
    stride_hw: tuple = (2, 2)

    def __post_init__(self):
        object.__setattr__(self, "kernel_hw", _pair(self.kernel_hw))
        object.__setattr__(self, "stride_hw", _pair(self.stride_hw))


@_register
@dataclass(frozen=True)
class MaxPoolGrad(Op):
    """Scatter g to the saved argmax; inputs (g, argmax)."""

    kind: ClassVar[str] = "MaxPoolGrad"
    arity: ClassVar[int] = 2
    kernel_hw: tuple = (2, 2)
    stride_hw: tuple = (2, 2)
    in_hw: tuple = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "kernel_hw", _pair(self.kernel_hw))
        object.__setattr__(self, "stride_hw", _pair(self.stride_hw))
        object.__setattr__(self, "in_hw", _pair(self.in_hw))


@_register
@dataclass(frozen=True)
class AvgPoolGrad(Op):
    kind: ClassVar[str] = "AvgPoolGrad"
    out_hw: tuple = (1, 1)
    in_hw: tuple = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "out_hw", _pair(self.out_hw))
        object.__setattr__(self, "in_hw", _pair(self.in_hw))


@_register
@dataclass(frozen=True)
class Reshape(Op):
    """Reshape keeping dim 0; ``shape`` lists the remaining extents."""

    kind: ClassVar[str] = "Reshape"
    shape: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))


FORWARD_KINDS = (
    "Input", "Const", "Conv2D", "MaxPool2D", "AdaptiveAvgPool2D", "Dense",
    "ReLU", "Flatten", "Add", "Mul", "CumSum", "Identity",
)


def make_op(kind: str, attrs: dict | None = None) -> Op:
    try:
        cls = OPS[kind]
    except KeyError:
        raise HLIRError(f"unknown operator kind {kind!r}") from None
    attrs = dict(attrs or {})
    for k, v in attrs.items():
        if isinstance(v, list):
            attrs[k] = tuple(v)
    return cls(**attrs)


# ---------------------------------------------------------------------------
# nodes and graphs


@dataclass(frozen=True)
class Node:
    name: str
    op: Op
    inputs: tuple = ()
    outputs: tuple = ()
    weights: dict = field(default_factory=dict, hash=False)
    meta: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs) or (self.name,))

    @property
    def output(self) -> str:
        return self.outputs[0]

    def reads(self) -> tuple:
        """Every value name the node touches: data inputs then weights."""
        return self.inputs + tuple(self.weights[r] for r in sorted(self.weights))


@dataclass
class Graph:
    """The HLIR container.

    ``initializers`` maps names to numpy arrays (type and values together).
    ``types`` and ``constraints`` are filled in by shape inference.
    """

    nodes: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    initializers: dict = field(default_factory=dict)
    dtype: str = "f32"
    types: dict = field(default_factory=dict)
    constraints: list = field(default_factory=list)

    def copy(self, **changes) -> "Graph":
        base = dict(
            nodes=list(self.nodes),
            inputs=list(self.inputs),
            outputs=list(self.outputs),
            initializers=dict(self.initializers),
            dtype=self.dtype,
            types={},
            constraints=[],
        )
        base.update(changes)
        return Graph(**base)

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    @property
    def input_names(self) -> list:
        return [name for name, _ in self.inputs]

    def input_type(self, name: str) -> TensorType:
        for n, t in self.inputs:
            if n == name:
                return t
        raise KeyError(name)

    def producers(self) -> dict:
        """value name -> producing node."""
        return {v: n for n in self.nodes for v in n.outputs}

    def consumers(self) -> dict:
        """value name -> list of consuming nodes (in node order, repeats removed)."""
        out: dict = {}
        for n in self.nodes:
            for v in dict.fromkeys(n.reads()):
                out.setdefault(v, []).append(n)
        return out

    def value_type(self, name: str) -> TensorType:
        if name in self.types:
            return self.types[name]
        if name in self.initializers:
            a = self.initializers[name]
            return TensorType(Shape(a.shape, default_layout(a.ndim)), dtype_name(a.dtype))
        for n, t in self.inputs:
            if n == name:
                return t
        raise KeyError(f"no type known for value {name!r}")

    def max_sym_id(self) -> int:
        ids = [d.id for _, t in self.inputs for d in t.shape.syms()]
        ids += [d.id for t in self.types.values() for d in t.shape.syms()]
        return max(ids, default=-1)


@dataclass(frozen=True)
class Diagnostic:
    node: str | None
    rule: str

    def __str__(self):
        return f"{self.node}: {self.rule}" if self.node else self.rule


def validate(graph: Graph) -> list:
    """Check structural well-formedness; never raises."""
    diags = []
    names = set()
    for n in graph.nodes:
        if n.name in names:
            diags.append(Diagnostic(n.name, "duplicate node name"))
        names.add(n.name)

    graph_inputs = set(graph.input_names)
    if len(graph_inputs) != len(graph.inputs):
        diags.append(Diagnostic(None, "duplicate graph input"))

    produced: dict = {}
    for n in graph.nodes:
        for v in n.outputs:
            if v in produced:
                diags.append(Diagnostic(n.name, f"value {v} produced more than once"))
            produced[v] = n
            if v in graph.initializers:
                diags.append(Diagnostic(n.name, f"value {v} shadows an initializer"))
            if v in graph_inputs and not isinstance(n.op, Input):
                diags.append(Diagnostic(n.name, f"value {v} shadows a graph input"))
        if isinstance(n.op, Input) and n.outputs[0] not in graph_inputs:
            diags.append(Diagnostic(n.name, f"input node output {n.outputs[0]} is not a graph input"))

    known = set(produced) | graph_inputs | set(graph.initializers)
    for n in graph.nodes:
        if len(n.inputs) != n.op.arity:
            diags.append(Diagnostic(n.name, f"expected {n.op.arity} inputs, got {len(n.inputs)}"))
        if len(n.outputs) != 1:
            diags.append(Diagnostic(n.name, f"expected 1 output, got {len(n.outputs)}"))
        for v in n.inputs:
            if v not in known:
                diags.append(Diagnostic(n.name, f"unknown input {v}"))
        for role in n.op.required_weights():
            ref = n.weights.get(role)
            if ref is None:
                diags.append(Diagnostic(n.name, f"missing weight {role}"))
            elif ref not in graph.initializers:
                diags.append(Diagnostic(n.name, f"unknown initializer {ref}"))
        for role in n.weights:
            if role not in n.op.required_weights():
                diags.append(Diagnostic(n.name, f"unexpected weight {role}"))
        for msg in n.op.check():
            diags.append(Diagnostic(n.name, msg))
        if isinstance(n.op, CumSum):
            src = n.inputs[0] if n.inputs else None
            t = graph.types.get(src) if src else None
            if t is None and src in graph_inputs:
                t = graph.input_type(src)
            if t is not None and not -t.shape.rank <= n.op.axis < t.shape.rank:
                diags.append(Diagnostic(n.name, f"axis {n.op.axis} out of range for rank {t.shape.rank}"))

    for v in graph.outputs:
        if v not in known:
            diags.append(Diagnostic(None, f"graph output {v} is never produced"))

    try:
        topo_order(graph)
    except CycleError:
        diags.append(Diagnostic(None, "cycle detected"))
    return diags


def topo_order(graph: Graph) -> list:
    """Node names in dependency order, ties broken by insertion index."""
    producer_idx = {}
    for i, n in enumerate(graph.nodes):
        for v in n.outputs:
            producer_idx.setdefault(v, i)
    indeg = [0] * len(graph.nodes)
    succ: list = [[] for _ in graph.nodes]
    for i, n in enumerate(graph.nodes):
        deps = {producer_idx[v] for v in n.inputs if v in producer_idx}
        for j in deps:
            succ[j].append(i)
        indeg[i] = len(deps)
    ready = [i for i, d in enumerate(indeg) if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(ready, j)
    if len(order) != len(graph.nodes):
        raise CycleError("graph contains a cycle")
    return [graph.nodes[i].name for i in order]


def sorted_nodes(graph: Graph) -> list:
    by_name = {n.name: n for n in graph.nodes}
    return [by_name[name] for name in topo_order(graph)]


def is_compute(node: Node) -> bool:
    return not isinstance(node.op, (Input, Const))
