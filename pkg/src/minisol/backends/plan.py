"""Execution plans: compiled groups, value table and embedded static schedule."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

from minisol import hlir
from minisol.backends import BackendId, lower_group
from minisol.backends.kernels import OPCODES, Kernel
from minisol.passes import _rename_inputs, concrete_shape, ensure_shapes, window_out
from minisol.schedule import MemCategory

MAGIC = b"SOLP"
VERSION = 1
VDIM_SENTINEL = 0xFFFFFFFF
ROLES = ("inference", "train_fwd", "train_bwd")


class PlanFormatError(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class UnboundVdim(KeyError):
    pass


@dataclass(frozen=True)
class ValueInfo:
    name: str
    category: MemCategory
    dims: tuple

    def seed_dims(self) -> tuple:
        return tuple(hlir.seed_of(d) for d in self.dims)


@dataclass
class CompiledGroup:
    id: int
    backend: BackendId
    label: str
    members: tuple
    kernels: list


@dataclass
class ExecutionPlan:
    role: str
    dtype: str
    values: list
    groups: list
    inputs: list
    outputs: list
    frees: list = field(default_factory=list)
    saved: list = field(default_factory=list)

    # -- lookups -----------------------------------------------------------

    @property
    def slot(self) -> dict:
        return {v.name: i for i, v in enumerate(self.values)}

    @property
    def weights(self) -> list:
        return [v.name for v in self.values if v.category == MemCategory.PARAMETER]

    @property
    def input_names(self) -> list:
        return [self.values[i].name for i in self.inputs]

    @property
    def output_names(self) -> list:
        return [self.values[i].name for i in self.outputs]

    @property
    def vdims(self) -> list:
        """(symbol id, seed, bindable) for every symbol in the value table."""
        syms = {}
        bindable = set()
        for i, v in enumerate(self.values):
            for d in v.dims:
                if hlir.is_sym(d):
                    syms.setdefault(d.id, d.seed)
                    if i in self.inputs:
                        bindable.add(d.id)
        return [(k, syms[k], k in bindable) for k in sorted(syms)]

    @property
    def free_vdims(self) -> list:
        return [k for k, _, b in self.vdims if b]

    def retained(self) -> set:
        """Slots that are never freed during this plan."""
        keep = {MemCategory.PARAMETER, MemCategory.OUTPUT}
        out = {i for i, v in enumerate(self.values) if v.category in keep}
        if self.role == "train_fwd":
            out |= {i for i, v in enumerate(self.values) if v.name in set(self.saved)}
        out |= set(self.outputs)
        return out

    def kernels(self):
        for g in self.groups:
            yield from g.kernels

    def intermediates(self) -> list:
        return [v.name for v in self.values if v.category == MemCategory.INTERMEDIATE]

    # -- shapes --------------------------------------------------------------

    def resolve_shapes(self, input_shapes: dict | None = None, extents: dict | None = None):
        """Concrete shape of every slot, plus the symbol extents they imply.

        Input shapes, when given, are checked against the value table; any
        input not given is evaluated from ``extents`` (falling back to seeds).
        """
        extents = dict(extents or {})
        shapes: list = [None] * len(self.values)
        for i, v in enumerate(self.values):
            if v.category == MemCategory.PARAMETER:
                shapes[i] = v.seed_dims()
        for i in self.inputs:
            v = self.values[i]
            given = (input_shapes or {}).get(v.name)
            if given is None:
                shapes[i] = tuple(extents.get(d.id, d.seed) if hlir.is_sym(d) else d for d in v.dims)
            else:
                shapes[i] = self._bind(v, tuple(given), extents)
            for d, n in zip(v.dims, shapes[i]):
                if hlir.is_sym(d):
                    extents.setdefault(d.id, n)
        for k in self.kernels():
            ins = [shapes[s] for s in k.inputs]
            outs = kernel_shapes(k, ins, self.dtype)
            for s, shp in zip(k.outputs, outs):
                shapes[s] = self._bind(self.values[s], shp, extents)
        return shapes, extents

    @staticmethod
    def _bind(v: ValueInfo, shape: tuple, extents: dict) -> tuple:
        if len(shape) != len(v.dims):
            raise ShapeMismatch(f"{v.name}: expected rank {len(v.dims)}, got shape {shape}")
        for axis, (d, n) in enumerate(zip(v.dims, shape)):
            if hlir.is_sym(d):
                if extents.setdefault(d.id, n) != n:
                    raise ShapeMismatch(f"{v.name}: axis {axis} is {d}={extents[d.id]} elsewhere, got {n}")
            elif d != n:
                raise ShapeMismatch(f"{v.name}: axis {axis} expected {d}, got {n}")
        return shape

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        w = _Writer()
        w.raw(MAGIC)
        w.u32(VERSION)
        w.u8(0 if self.dtype == "f32" else 1)
        w.string(self.role)
        vd = self.vdims
        slot_of_sym = {k: i for i, (k, _, _) in enumerate(vd)}
        w.u32(len(vd))
        for k, seed, bindable in vd:
            w.u32(k)
            w.u32(seed)
            w.u8(int(bindable))
        w.u32(len(self.values))
        for v in self.values:
            w.string(v.name)
            w.u8(list(MemCategory).index(v.category))
            w.u32(len(v.dims))
            for d in v.dims:
                if hlir.is_sym(d):
                    w.u32(VDIM_SENTINEL)
                    w.u32(slot_of_sym[d.id])
                else:
                    w.u32(d)
        w.u32s(self.inputs)
        w.u32s(self.outputs)
        w.u32(len(self.groups))
        for g in self.groups:
            w.u8(int(g.backend))
            w.u32(g.id)
            w.string(g.label)
            w.u32(len(g.members))
            for m in g.members:
                w.string(m)
            w.u32(len(g.kernels))
            for k in g.kernels:
                w.u8(OPCODES.index(k.op))
                w.string(k.attrs_json())
                w.u32(len(k.roles))
                for r in k.roles:
                    w.string(r)
                w.u32s(k.inputs)
                w.u32s(k.outputs)
        w.u32(len(self.frees))
        for step in self.frees:
            w.u32s(step)
        w.u32(len(self.saved))
        for s in self.saved:
            w.string(s)
        names = self.weights
        w.u32(len(names))
        for s in names:
            w.string(s)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ExecutionPlan":
        r = _Reader(data)
        try:
            if r.raw(4) != MAGIC:
                raise PlanFormatError("bad magic (not a plan file)")
            version = r.u32()
            if version != VERSION:
                raise PlanFormatError(f"unsupported plan version {version}")
            dtype = ("f32", "f64")[r.u8()]
            role = r.string()
            if role not in ROLES:
                raise PlanFormatError(f"unknown plan role {role!r}")
            syms = []
            for _ in range(r.u32()):
                k, seed = r.u32(), r.u32()
                r.u8()
                syms.append(hlir.Sym(k, seed))
            cats = list(MemCategory)
            values = []
            for _ in range(r.u32()):
                name = r.string()
                cat = cats[r.u8()]
                dims = []
                for _ in range(r.u32()):
                    d = r.u32()
                    dims.append(syms[r.u32()] if d == VDIM_SENTINEL else d)
                values.append(ValueInfo(name, cat, tuple(dims)))
            inputs, outputs = r.u32s(), r.u32s()
            groups = []
            for _ in range(r.u32()):
                backend = BackendId(r.u8())
                gid = r.u32()
                label = r.string()
                members = tuple(r.string() for _ in range(r.u32()))
                kernels = []
                for _ in range(r.u32()):
                    op = OPCODES[r.u8()]
                    attrs = json.loads(r.string())
                    roles = tuple(r.string() for _ in range(r.u32()))
                    kernels.append(Kernel(op, attrs, tuple(r.u32s()), tuple(r.u32s()), roles))
                groups.append(CompiledGroup(gid, backend, label, members, kernels))
            frees = [r.u32s() for _ in range(r.u32())]
            saved = [r.string() for _ in range(r.u32())]
            weights = [r.string() for _ in range(r.u32())]
        except (struct.error, IndexError, ValueError, UnicodeDecodeError) as e:
            if isinstance(e, PlanFormatError):
                raise
            raise PlanFormatError(f"corrupt plan: {e}") from e
        if r.remaining():
            raise PlanFormatError(f"{r.remaining()} trailing bytes")
        plan = cls(role, dtype, values, groups, inputs, outputs, frees, saved)
        plan._check(weights)
        return plan

    def _check(self, weights=None):
        n = len(self.values)
        refs = list(self.inputs) + list(self.outputs)
        for k in self.kernels():
            refs += list(k.inputs) + list(k.outputs)
        for step in self.frees:
            refs += list(step)
        if any(not 0 <= s < n for s in refs):
            raise PlanFormatError("slot reference out of range")
        if len(self.frees) != sum(len(g.kernels) for g in self.groups) + 1:
            raise PlanFormatError("schedule does not match group count")
        if weights is not None and weights != self.weights:
            raise PlanFormatError("weight reference list does not match the value table")
        names = [v.name for v in self.values]
        if len(set(names)) != len(names):
            raise PlanFormatError("duplicate value names")


def kernel_shapes(k: Kernel, ins: list, dtype: str = "f32") -> list:
    if k.op == "FusedEW":
        return [ins[0]] * len(k.outputs)
    if k.op == "MatMulTiled":
        return [tuple(ins[0][:-1]) + (ins[1][-1],)]
    if k.op == "Im2Col":
        (kh, kw), (sh, sw) = k.attrs["kernel_hw"], k.attrs["stride_hw"]
        n, h, w, c = ins[0]
        pad = k.attrs["padding"]
        return [(n, window_out(h, kh, sh, pad), window_out(w, kw, sw, pad), kh * kw * c)]
    n_data = len(ins) - len(k.roles)
    node = hlir.Node("_", hlir.make_op(k.op, k.attrs), ("_",) * n_data)
    return [concrete_shape(node, ins[:n_data], dict(zip(k.roles, ins[n_data:])), dtype)]


# ---------------------------------------------------------------------------
# compilation


def compile_plan(graph: hlir.Graph, groups: list, role: str = "inference", saved=()) -> ExecutionPlan:
    """Lower every group with its backend and build the value table and schedule.

    ``saved`` names the tensors a training forward plan keeps for the
    backward plan (and that a backward plan receives).
    """
    from minisol.schedule import static_frees

    if role not in ROLES:
        raise ValueError(f"unknown plan role {role!r}")
    g = ensure_shapes(graph)
    saved = list(saved)
    alias = {n.output: n.weights["value"] for n in g.nodes if isinstance(n.op, hlir.Const)}
    nodes = {n.name: _rename_inputs(n, alias) for n in g.nodes}
    graph_outputs = [alias.get(v, v) for v in g.outputs]

    member_of = {m: grp.id for grp in groups for m in grp.members}
    compute = [n for n in g.nodes if hlir.is_compute(n)]
    missing = [n.name for n in compute if n.name not in member_of]
    if missing:
        raise ValueError(f"nodes not covered by any group: {missing}")

    used_outside: dict = {}
    for n in compute:
        for v in nodes[n.name].inputs:
            used_outside.setdefault(v, set()).add(member_of[n.name])

    lowered = []
    for grp in groups:
        members = [nodes[m] for m in grp.members]
        ext = [n.output for n in members
               if n.output in graph_outputs or used_outside.get(n.output, set()) - {grp.id}]
        lowered.append((grp, lower_group(grp.backend, members, ext)))

    types = dict(g.types)
    for grp, kernels in lowered:
        for k in kernels:
            if k.op == "Im2Col":
                conv = nodes[k.outputs[0][:-len("/cols")]]
                out = types[conv.output].shape.dims
                cin = g.initializers[conv.weights["kernel"]].shape[2]
                kh, kw = conv.op.kernel_hw
                types[k.outputs[0]] = hlir.TensorType(hlir.Shape(out[:3] + (kh * kw * cin,), "NHWC"), g.dtype)

    order: list = []
    seen = set()

    def add(v):
        if v not in seen:
            seen.add(v)
            order.append(v)

    for _, kernels in lowered:
        for k in kernels:
            for v in k.inputs:
                if v in g.initializers:
                    add(v)
    for v in graph_outputs:
        if v in g.initializers:
            add(v)
    for v in g.input_names:
        add(v)
    for _, kernels in lowered:
        for k in kernels:
            for v in k.outputs:
                add(v)

    saved_set = set(saved)
    input_set = set(g.input_names)

    def category(v):
        if v in g.initializers:
            return MemCategory.PARAMETER
        if v in input_set:
            return MemCategory.SAVED if role == "train_bwd" and v in saved_set else MemCategory.INPUT
        if v in saved_set:
            return MemCategory.SAVED
        if v in graph_outputs:
            return MemCategory.OUTPUT
        return MemCategory.INTERMEDIATE

    values = [ValueInfo(v, category(v), types[v].shape.dims if v in types else g.value_type(v).shape.dims)
              for v in order]
    slot = {v: i for i, v in enumerate(order)}
    cgroups = [CompiledGroup(grp.id, grp.backend, grp.label, grp.members,
                             [k.remap(slot.__getitem__) for k in kernels])
               for grp, kernels in lowered]
    plan = ExecutionPlan(role, g.dtype, values, cgroups,
                         [slot[v] for v in g.input_names], [slot[v] for v in graph_outputs],
                         saved=saved)
    plan.frees = static_frees(plan)
    plan._check()
    return plan


# ---------------------------------------------------------------------------
# binary helpers


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def raw(self, b):
        self.buf.write(b)

    def u8(self, v):
        self.buf.write(struct.pack("<B", v))

    def u32(self, v):
        self.buf.write(struct.pack("<I", v))

    def u32s(self, vs):
        vs = list(vs)
        self.u32(len(vs))
        self.buf.write(struct.pack(f"<{len(vs)}I", *vs))

    def string(self, s):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.buf.write(b)

    def getvalue(self):
        return self.buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise PlanFormatError("unexpected end of plan data")
        b = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return b

    def u8(self):
        return struct.unpack("<B", self.raw(1))[0]

    def u32(self):
        return struct.unpack("<I", self.raw(4))[0]

    def u32s(self):
        n = self.u32()
        return list(struct.unpack(f"<{n}I", self.raw(4 * n)))

    def string(self):
        return self.raw(self.u32()).decode("utf-8")

    def remaining(self):
        return len(self.data) - self.pos
