"""Backends, layer-by-layer tuning, grouping and plan compilation.

Three backends are built in:

``REF``
    direct numpy loops, supports every operator;
``FUSED_EW``
    elementwise chains (ReLU/Add/Mul/Identity) streamed in one pass;
``GEMM_TILED``
    Dense and Conv2D through im2col and a 32x32 blocked matmul.
"""

from __future__ import annotations

import enum

from minisol import hlir
from minisol.backends import fused
from minisol.backends.kernels import Kernel, from_node


class BackendId(enum.IntEnum):
    REF = 0
    FUSED_EW = 1
    GEMM_TILED = 2


_SUPPORT = {
    BackendId.FUSED_EW: frozenset(fused.FUSABLE),
    BackendId.GEMM_TILED: frozenset({"Dense", "Conv2D"}),
}


def supports(backend: BackendId, op) -> bool:
    kind = op if isinstance(op, str) else op.kind
    if backend == BackendId.REF:
        return kind in hlir.OPS
    return kind in _SUPPORT[backend]


def supporting(op) -> list:
    return [b for b in BackendId if supports(b, op)]


class UnsupportedInGroup(Exception):
    pass


def lower_group(backend: BackendId, nodes: list, external_outputs) -> list:
    """Kernels (name-addressed) implementing ``nodes`` on ``backend``.

    ``external_outputs`` are member outputs visible outside the group; only
    FUSED_EW uses it, since it is the one backend that keeps intermediates
    in registers.
    """
    for n in nodes:
        if not supports(backend, n.op):
            raise UnsupportedInGroup(f"{n.name} ({n.op.kind}) on {backend.name}")
    if backend == BackendId.FUSED_EW:
        produced = {n.output for n in nodes}
        ext_in = []
        for n in nodes:
            for v in n.inputs:
                if v not in produced and v not in ext_in:
                    ext_in.append(v)
        outs = [n.output for n in nodes if n.output in set(external_outputs)]
        program, out_regs = fused.build_program(nodes, ext_in, outs)
        attrs = {"program": [[k, d, list(s)] for k, d, s in program], "out_regs": out_regs}
        return [Kernel("FusedEW", attrs, tuple(ext_in), tuple(outs))]
    if backend == BackendId.GEMM_TILED:
        kernels = []
        for n in nodes:
            w = (n.weights["kernel"],) + ((n.weights["bias"],) if n.op.has_bias else ())
            if n.op.kind == "Dense":
                kernels.append(Kernel("MatMulTiled", {"tile": 32}, (n.inputs[0],) + w, (n.output,)))
            else:
                cols = f"{n.name}/cols"
                attrs = {"kernel_hw": list(n.op.kernel_hw), "stride_hw": list(n.op.stride_hw),
                         "padding": n.op.padding}
                kernels.append(Kernel("Im2Col", attrs, (n.inputs[0],), (cols,)))
                kernels.append(Kernel("MatMulTiled", {"tile": 32}, (cols,) + w, (n.output,)))
        return kernels
    return [from_node(n) for n in nodes]


from minisol.backends.grouping import FusionGroup, group_layers, is_convex  # noqa: E402
from minisol.backends.plan import ExecutionPlan, PlanFormatError, ValueInfo, compile_plan  # noqa: E402
from minisol.backends.reference import evaluate  # noqa: E402
from minisol.backends.tuning import (  # noqa: E402
    BackendAssignment, Injected, Measured, NoBackend, load_cost_csv, tune,
)

__all__ = [
    "BackendId", "supports", "supporting", "lower_group", "Kernel",
    "FusionGroup", "group_layers", "is_convex",
    "ExecutionPlan", "PlanFormatError", "ValueInfo", "compile_plan", "evaluate",
    "BackendAssignment", "Injected", "Measured", "NoBackend", "load_cost_csv", "tune",
]
