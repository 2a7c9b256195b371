"""Model ingestion: two JSON dialects and a binary weight container.

``dla`` is torch-like (NCHW, conv kernels ``[O, I, kh, kw]``, linear weights
``[out, in]``, ``adaptive_avg_pool2d``, inclusive forward ``cumsum``).
``dlb`` is keras-like (NHWC, kernels ``[kh, kw, I, O]``, dense weights
``[in, out]``, ``global_avg_pool2d``, ``cumsum`` with exclusive/reverse).
Both lower to the same canonical NHWC HLIR.

Weights are looked up in the store as ``<node>/kernel`` and ``<node>/bias``
in the dialect's own layout. Missing weights are drawn from a 64-bit LCG
(see :class:`Lcg`), uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, in
canonical layout and in document order.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from minisol import hlir
from minisol.hlir import Graph, Node, Shape, Sym, TensorType
from minisol.passes import _Ctx, infer_node, infer_shapes


class IngestError(ValueError):
    pass


class UnknownOp(IngestError):
    def __init__(self, name, dialect):
        super().__init__(f"unknown op {name!r} in dialect {dialect}")
        self.name, self.dialect = name, dialect


class ShapeMismatch(IngestError):
    def __init__(self, name, expected, got):
        super().__init__(f"weight {name}: expected shape {tuple(expected)}, got {tuple(got)}")
        self.name, self.expected, self.got = name, tuple(expected), tuple(got)


class MissingSeed(IngestError):
    def __init__(self, input_name, axis):
        super().__init__(f"input {input_name}: axis {axis} is dynamic but has no seed_shape extent")
        self.input, self.axis = input_name, axis


class LayoutError(IngestError):
    pass


class WeightFormatError(ValueError):
    pass


class BadMagic(WeightFormatError):
    pass


class TruncatedTensor(WeightFormatError):
    def __init__(self, name):
        super().__init__(f"tensor {name!r} is truncated")
        self.name = name


class DuplicateName(WeightFormatError):
    def __init__(self, name):
        super().__init__(f"tensor {name!r} appears twice")
        self.name = name


# ---------------------------------------------------------------------------
# deterministic random initialization

LCG_MUL = 6364136223846793005
LCG_INC = 1442695040888963407
_M64 = (1 << 64) - 1


class Lcg:
    """``state = state * 6364136223846793005 + 1442695040888963407 (mod 2**64)``.

    Each draw advances the state once and yields ``(state >> 11) / 2**53``.
    Blocks of draws are computed with jump-ahead coefficients so large
    tensors stay cheap.
    """

    BLOCK = 1 << 16

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _M64
        a = np.empty(self.BLOCK, dtype=np.uint64)
        c = np.empty(self.BLOCK, dtype=np.uint64)
        a[0], c[0] = LCG_MUL, LCG_INC
        n = 1
        with np.errstate(over="ignore"):
            while n < self.BLOCK:
                m = min(n, self.BLOCK - n)
                a[n:n + m] = a[:m] * a[n - 1]
                c[n:n + m] = a[:m] * c[n - 1] + c[:m]
                n += m
        self._a, self._c = a, c

    def next_u64(self) -> int:
        self.state = (self.state * LCG_MUL + LCG_INC) & _M64
        return self.state

    def uniform(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        pos = 0
        with np.errstate(over="ignore"):
            while pos < n:
                m = min(self.BLOCK, n - pos)
                states = self._a[:m] * np.uint64(self.state) + self._c[:m]
                out[pos:pos + m] = (states >> np.uint64(11)).astype(np.float64) / float(1 << 53)
                self.state = int(states[-1])
                pos += m
        return out


def random_weight(rng: Lcg, shape, fan_in: int, dtype) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    bound = 1.0 / math.sqrt(fan_in)
    return ((2.0 * rng.uniform(n) - 1.0) * bound).astype(dtype).reshape(shape)


# ---------------------------------------------------------------------------
# weight container

WEIGHT_MAGIC = b"SOLW"
WEIGHT_VERSION = 1
_DTYPE_CODES = {"f32": 0, "f64": 1}


class WeightStore(dict):
    """name -> numpy array (f32 or f64), in insertion order."""


def save_weights(store: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(WEIGHT_MAGIC)
    buf.write(struct.pack("<III", WEIGHT_VERSION, len(store), 0))
    for name, arr in store.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES[hlir.dtype_name(arr.dtype)]
        b = name.encode("utf-8")
        buf.write(struct.pack("<I", len(b)))
        buf.write(b)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return buf.getvalue()


def load_weights(data: bytes) -> WeightStore:
    view = memoryview(data)
    if len(view) < 16 or bytes(view[:4]) != WEIGHT_MAGIC:
        raise BadMagic("not a weight container (bad magic)")
    version, count, reserved = struct.unpack_from("<III", view, 4)
    if version != WEIGHT_VERSION:
        raise BadMagic(f"unsupported weight container version {version}")
    if reserved != 0:
        raise WeightFormatError("reserved header field must be 0")
    pos = 16
    store = WeightStore()
    codes = {v: k for k, v in _DTYPE_CODES.items()}
    for i in range(count):
        name = f"#{i}"
        try:
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            if pos + nlen > len(view):
                raise TruncatedTensor(name)
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BI", view, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
        except struct.error:
            raise TruncatedTensor(name) from None
        if code not in codes:
            raise WeightFormatError(f"tensor {name!r}: unknown dtype code {code}")
        if name in store:
            raise DuplicateName(name)
        dtype = np.dtype(hlir.DTYPES[codes[code]]).newbyteorder("<")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(view):
            raise TruncatedTensor(name)
        arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(dims)
        store[name] = arr.astype(arr.dtype.newbyteorder("="))
        pos += nbytes
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes after the last tensor")
    return store


# ---------------------------------------------------------------------------
# dialect tables


@dataclass(frozen=True)
class Lowering:
    """How one dialect op maps to a canonical operator."""

    kind: str
    summary_type: str


DIALECTS = {
    "dla": {
        "conv2d": Lowering("Conv2D", "Conv2D"),
        "max_pool2d": Lowering("MaxPool2D", "MaxPooling2D"),
        "adaptive_avg_pool2d": Lowering("AdaptiveAvgPool2D", "AdaptiveAvgPool2D"),
        "linear": Lowering("Dense", "Dense"),
        "relu": Lowering("ReLU", "ReLU"),
        "flatten": Lowering("Flatten", "Flatten"),
        "add": Lowering("Add", "Add"),
        "mul": Lowering("Mul", "Multiply"),
        "cumsum": Lowering("CumSum", "CumSum"),
        "identity": Lowering("Identity", "Identity"),
    },
    "dlb": {
        "conv2d": Lowering("Conv2D", "Conv2D"),
        "max_pooling2d": Lowering("MaxPool2D", "MaxPooling2D"),
        "global_avg_pool2d": Lowering("AdaptiveAvgPool2D", "GlobalAveragePooling2D"),
        "dense": Lowering("Dense", "Dense"),
        "relu": Lowering("ReLU", "ReLU"),
        "flatten": Lowering("Flatten", "Flatten"),
        "add": Lowering("Add", "Add"),
        "multiply": Lowering("Mul", "Multiply"),
        "cumsum": Lowering("CumSum", "CumSum"),
        "identity": Lowering("Identity", "Identity"),
    },
}

# canonical rank-4 axis of each NCHW axis
NCHW_TO_NHWC_AXIS = {0: 0, 1: 3, 2: 1, 3: 2}


def _pair(v):
    return hlir._pair(v)


def _dla_padding(pad, kernel_hw, stride_hw):
    if pad in ("same", "valid"):
        return pad
    p = _pair(pad)
    if p == (0, 0):
        return "valid"
    if stride_hw == (1, 1) and all(k % 2 == 1 and q == (k - 1) // 2 for k, q in zip(kernel_hw, p)):
        return "same"
    raise IngestError(f"padding {pad!r} has no canonical equivalent")


def _attrs(dialect: str, op: str, a: dict, rank: int):
    """(canonical attrs, activation) for a dialect op."""
    act = None
    if dialect == "dlb":
        if op == "conv2d":
            k = _pair(a["kernel_size"])
            s = _pair(a.get("strides", 1))
            act = a.get("activation")
            return dict(out_channels=int(a["filters"]), kernel_hw=k, stride_hw=s,
                        padding=a.get("padding", "valid"), has_bias=bool(a.get("use_bias", True))), act
        if op == "max_pooling2d":
            k = _pair(a.get("pool_size", 2))
            return dict(kernel_hw=k, stride_hw=_pair(a.get("strides") or k)), None
        if op == "global_avg_pool2d":
            return dict(out_hw=(1, 1)), None
        if op == "dense":
            return dict(out_features=int(a["units"]), has_bias=bool(a.get("use_bias", True))), a.get("activation")
        if op == "cumsum":
            return dict(axis=int(a.get("axis", 0)), exclusive=bool(a.get("exclusive", False)),
                        reverse=bool(a.get("reverse", False))), None
        return {}, None
    if op == "conv2d":
        k = _pair(a["kernel_size"])
        s = _pair(a.get("stride", 1))
        return dict(out_channels=int(a["out_channels"]), kernel_hw=k, stride_hw=s,
                    padding=_dla_padding(a.get("padding", 0), k, s), has_bias=bool(a.get("bias", True))), None
    if op == "max_pool2d":
        k = _pair(a["kernel_size"])
        return dict(kernel_hw=k, stride_hw=_pair(a.get("stride") or k)), None
    if op == "adaptive_avg_pool2d":
        return dict(out_hw=_pair(a["output_size"])), None
    if op == "linear":
        return dict(out_features=int(a["out_features"]), has_bias=bool(a.get("bias", True))), None
    if op == "cumsum":
        dim = int(a["dim"])
        if not -rank <= dim < rank:
            raise IngestError(f"cumsum dim {dim} out of range for rank {rank}")
        dim %= rank
        return dict(axis=NCHW_TO_NHWC_AXIS[dim] if rank == 4 else dim), None
    return {}, None


def _native_shape(dialect, kind, role, canonical):
    """Shape a weight has in the dialect's own layout."""
    if dialect == "dla" and role == "kernel":
        if kind == "Conv2D":
            kh, kw, i, o = canonical
            return (o, i, kh, kw)
        if kind == "Dense":
            return tuple(reversed(canonical))
    return tuple(canonical)


def _to_canonical(dialect, kind, role, arr, flat_hwc=None):
    if dialect == "dla" and role == "kernel":
        if kind == "Conv2D":
            return np.ascontiguousarray(arr.transpose(2, 3, 1, 0))
        if kind == "Dense":
            w = arr.T
            if flat_hwc is not None:
                h, wd, c = flat_hwc
                # rows come in (c, h, w) order from an NCHW flatten
                w = w.reshape(c, h, wd, -1).transpose(1, 2, 0, 3).reshape(h * wd * c, -1)
            return np.ascontiguousarray(w)
    return arr


def to_native(dialect: str, kind: str, role: str, arr, flat_hwc=None):
    """Inverse of the ingest layout conversion (used to author dialect weights)."""
    if dialect == "dla" and role == "kernel":
        if kind == "Conv2D":
            return np.ascontiguousarray(arr.transpose(3, 2, 0, 1))
        if kind == "Dense":
            w = arr
            if flat_hwc is not None:
                h, wd, c = flat_hwc
                w = w.reshape(h, wd, c, -1).transpose(2, 0, 1, 3).reshape(h * wd * c, -1)
            return np.ascontiguousarray(w.T)
    return arr


def input_to_canonical(dialect: str, arr):
    """Convert a dialect-layout input tensor to canonical NHWC."""
    arr = np.asarray(arr)
    if dialect == "dla" and arr.ndim == 4:
        return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))
    return arr


# ---------------------------------------------------------------------------
# parsing


def _topo_doc_nodes(doc_nodes, available):
    pending = list(doc_nodes)
    have = set(available)
    out = []
    while pending:
        progressed = False
        for nd in list(pending):
            if all(v in have for v in nd.get("inputs", [])):
                out.append(nd)
                have.add(nd["name"])
                pending.remove(nd)
                progressed = True
        if not progressed:
            missing = sorted({v for nd in pending for v in nd.get("inputs", []) if v not in have})
            raise IngestError(f"unresolvable node inputs {missing} (undefined value or cycle)")
    return out


def parse_model(document, weights: dict | None = None, materialize: bool = True) -> Graph:
    """Lower a model document (JSON text, bytes or a parsed dict) to HLIR.

    With ``materialize=False`` missing weights are zero-size broadcast views
    of the right shape instead of random values; enough for summaries.
    """
    doc = json.loads(document) if isinstance(document, (str, bytes, bytearray)) else dict(document)
    dialect = doc.get("dialect")
    if dialect not in DIALECTS:
        raise IngestError(f"unknown or missing dialect tag {dialect!r}")
    table = DIALECTS[dialect]
    weights = weights or {}
    rng = Lcg(int(doc.get("seed", 0)))

    dtypes = {i.get("dtype", "f32") for i in doc.get("inputs", [])} or {"f32"}
    if len(dtypes) != 1:
        raise IngestError(f"inputs mix dtypes {sorted(dtypes)}")
    dtype = dtypes.pop()
    np_dtype = hlir.DTYPES[dtype]

    next_sym = 0
    graph_inputs = []
    nodes = []
    types: dict = {}
    for spec in doc.get("inputs", []):
        name = spec["name"]
        shape = list(spec["shape"])
        seed_shape = spec.get("seed_shape")
        dims = []
        for axis, d in enumerate(shape):
            if d is None:
                if not seed_shape or axis >= len(seed_shape) or seed_shape[axis] is None:
                    raise MissingSeed(name, axis)
                dims.append((None, int(seed_shape[axis])))
            else:
                dims.append(int(d))
        if dialect == "dla" and len(dims) == 4:
            dims = [dims[0], dims[2], dims[3], dims[1]]
        canon = []
        for d in dims:
            if isinstance(d, tuple):
                canon.append(Sym(next_sym, d[1]))
                next_sym += 1
            else:
                canon.append(d)
        t = TensorType(Shape(tuple(canon), hlir.default_layout(len(canon))), dtype)
        graph_inputs.append((name, t))
        types[name] = t
        nodes.append(Node(name, hlir.Input(), (), (name,), meta={"summary_type": "InputLayer"}))

    ctx = _Ctx(next_sym)
    initializers: dict = {}
    resolve = {name: name for name, _ in graph_inputs}
    flat_hwc: dict = {}  # DLA values holding an NCHW-order flatten: value -> (h, w, c)
    seen = set(resolve)
    for nd in _topo_doc_nodes(doc.get("nodes", []), resolve):
        name, op_name = nd["name"], nd["op"]
        if name in seen:
            raise IngestError(f"duplicate node or value name {name!r}")
        seen.add(name)
        if op_name not in table:
            raise UnknownOp(op_name, dialect)
        low = table[op_name]
        ins = [resolve[v] for v in nd.get("inputs", [])]
        rank = types[ins[0]].shape.rank if ins else 0
        attrs, act = _attrs(dialect, op_name, nd.get("attrs", {}), rank)
        op = hlir.make_op(low.kind, attrs)
        if len(ins) != op.arity:
            raise IngestError(f"{name}: {op_name} takes {op.arity} inputs, got {len(ins)}")

        for v in ins:
            if v in flat_hwc and low.kind not in ("Dense", "ReLU", "Identity", "Add", "Mul"):
                raise LayoutError(f"{name}: NCHW-ordered flatten output {v} feeds {op_name}; "
                                  "element order would differ from canonical layout")

        node_weights = {}
        wtypes = {}
        for role in op.required_weights():
            canon_shape, fan_in = _weight_shape(op, role, types[ins[0]].shape)
            wname = f"{name}/{role}"
            native = _native_shape(dialect, low.kind, role, canon_shape)
            if wname in weights:
                arr = np.asarray(weights[wname])
                if tuple(arr.shape) != native:
                    raise ShapeMismatch(wname, native, arr.shape)
                hwc = flat_hwc.get(ins[0]) if low.kind == "Dense" else None
                arr = _to_canonical(dialect, low.kind, role, arr.astype(np_dtype, copy=False), hwc)
            elif materialize:
                arr = random_weight(rng, canon_shape, fan_in, np_dtype)
            else:
                arr = np.broadcast_to(np.zeros((), np_dtype), canon_shape)
            initializers[wname] = arr
            node_weights[role] = wname
            wtypes[role] = TensorType(Shape(canon_shape), dtype)

        meta = {"summary_type": low.summary_type, "dialect_op": op_name}
        node = Node(name, op, tuple(ins), (name,), node_weights, meta)
        types[name] = TensorType(infer_node(node, [types[v] for v in ins], wtypes, ctx), dtype)
        nodes.append(node)
        out_value = name
        if dialect == "dla" and low.kind == "Flatten" and types[ins[0]].shape.rank == 4:
            h, w, c = (hlir.seed_of(d) for d in types[ins[0]].shape.dims[1:])
            flat_hwc[name] = (h, w, c)
        elif low.kind in ("ReLU", "Identity") and ins[0] in flat_hwc:
            flat_hwc[name] = flat_hwc[ins[0]]
        elif low.kind in ("Add", "Mul") and any(v in flat_hwc for v in ins):
            if ins[0] not in flat_hwc or ins[1] not in flat_hwc:
                raise LayoutError(f"{name}: mixes NCHW-ordered flatten output with another layout")
            flat_hwc[name] = flat_hwc[ins[0]]
        if act:
            if act != "relu":
                raise UnknownOp(f"activation {act}", dialect)
            rname = f"{name}/relu"
            if rname in seen:
                raise IngestError(f"duplicate node or value name {rname!r}")
            seen.add(rname)
            nodes.append(Node(rname, hlir.ReLU(), (name,), (rname,), meta={"activation_of": name}))
            types[rname] = types[name]
            out_value = rname
        resolve[name] = out_value

    outputs = []
    for v in doc.get("outputs", []):
        if v not in resolve:
            raise IngestError(f"graph output {v!r} is never produced")
        if v in flat_hwc:
            raise LayoutError(f"output {v} is an NCHW-ordered flatten; canonical order would differ")
        outputs.append(resolve[v])

    g = Graph(nodes=nodes, inputs=graph_inputs, outputs=outputs, initializers=initializers, dtype=dtype)
    diags = hlir.validate(g)
    if diags:
        raise IngestError("invalid model: " + "; ".join(map(str, diags)))
    return infer_shapes(g)


def _weight_shape(op, role, in_shape: Shape):
    """(canonical shape, fan_in) of a weight, from the op and its input shape."""
    if isinstance(op, hlir.Conv2D):
        cin = hlir.seed_of(in_shape.dims[3])
        kh, kw = op.kernel_hw
        fan_in = kh * kw * cin
        return ((kh, kw, cin, op.out_channels) if role == "kernel" else (op.out_channels,)), fan_in
    if isinstance(op, hlir.Dense):
        fin = hlir.seed_of(in_shape.dims[1])
        return ((fin, op.out_features) if role == "kernel" else (op.out_features,)), fin
    raise IngestError(f"{op.kind} has no weight {role}")


def load_model(path, materialize: bool = True) -> Graph:
    """Read a model document and, if it names one, its weight container."""
    with open(path, "rb") as f:
        doc = json.loads(f.read())
    weights = None
    wf = doc.get("weights_file")
    if wf:
        wpath = wf if os.path.isabs(wf) else os.path.join(os.path.dirname(os.path.abspath(path)), wf)
        with open(wpath, "rb") as f:
            weights = load_weights(f.read())
    return parse_model(doc, weights, materialize=materialize)


# ---------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class SummaryRow:
    name: str
    type: str
    shape: str
    params: int


def _shape_text(shape: Shape, is_input: bool) -> str:
    dims = ["None" if i == 0 or hlir.is_sym(d) else str(d) for i, d in enumerate(shape.dims)]
    body = "(" + ", ".join(dims) + ("," if len(dims) == 1 else "") + ")"
    return f"[{body}]" if is_input else body


def count_params(graph: Graph):
    """Summary rows (topological order, activations folded into their layer)
    and the total initializer element count."""
    g = graph if graph.types else infer_shapes(graph)
    rows = []
    for node in hlir.sorted_nodes(g):
        if "activation_of" in node.meta:
            continue
        n_params = sum(int(np.prod(g.initializers[v].shape, dtype=np.int64)) for v in node.weights.values())
        kind = node.meta.get("summary_type", node.op.kind)
        rows.append(SummaryRow(node.name, kind, _shape_text(g.value_type(node.output).shape,
                                                            isinstance(node.op, hlir.Input)), n_params))
    total = sum(int(np.prod(a.shape, dtype=np.int64)) for a in g.initializers.values())
    return rows, total


def _row(fields, positions=(29, 55, 65)) -> str:
    line = ""
    for i, f in enumerate(fields):
        if i > 0:
            line = line[:-1] + " "
        line += str(f)
        line = line[:positions[i]]
        line += " " * (positions[i] - len(line))
    return line.rstrip()


def format_summary(graph: Graph, name: str = "model") -> str:
    from minisol.autodiff import trainable

    rows, total = count_params(graph)
    trainable_n = sum(int(np.prod(graph.initializers[w].shape, dtype=np.int64)) for w in trainable(graph))
    width = 65
    lines = [f'Model: "{name}"', "_" * width, _row(("Layer (type)", "Output Shape", "Param #")), "=" * width]
    for r in rows:
        lines.append(_row((f"{r.name} ({r.type})", r.shape, r.params)))
    lines += [
        "=" * width,
        f"Total params: {total:,}",
        f"Trainable params: {trainable_n:,}",
        f"Non-trainable params: {total - trainable_n:,}",
        "_" * width,
    ]
    return "\n".join(lines) + "\n"
