"""Compiled kernel steps and their dispatch."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from minisol import hlir
from minisol.backends import fused, gemm, reference

# Opcodes beyond the HLIR operator kinds.
EXTRA_OPCODES = ("Im2Col", "MatMulTiled", "FusedEW")
OPCODES = tuple(sorted(hlir.OPS)) + EXTRA_OPCODES


@dataclass(frozen=True)
class Kernel:
    """One step of a compiled group.

    ``inputs``/``outputs`` are value references (names while lowering,
    table slots inside a plan). The trailing ``len(roles)`` inputs are
    weights, bound to the operator's weight roles in order.
    """

    op: str
    attrs: dict = field(default_factory=dict, hash=False)
    inputs: tuple = ()
    outputs: tuple = ()
    roles: tuple = ()

    def attrs_json(self) -> str:
        return json.dumps(self.attrs, sort_keys=True, separators=(",", ":"))

    def remap(self, fn) -> "Kernel":
        return Kernel(self.op, self.attrs, tuple(fn(v) for v in self.inputs),
                      tuple(fn(v) for v in self.outputs), self.roles)


def _jsonable(attrs: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in attrs.items()}


def from_node(node: hlir.Node) -> Kernel:
    roles = tuple(r for r in node.op.required_weights() if r in node.weights)
    return Kernel(node.op.kind, _jsonable(node.op.attrs()),
                  node.inputs + tuple(node.weights[r] for r in roles), node.outputs, roles)


def run_kernel(kernel: Kernel, args: list) -> list:
    """Execute ``kernel`` on numpy arrays; returns its outputs."""
    op = kernel.op
    if op == "FusedEW":
        return fused.run_program(kernel.attrs["program"], kernel.attrs["out_regs"], args)
    if op == "Im2Col":
        conv = hlir.make_op("Conv2D", {k: kernel.attrs[k] for k in ("kernel_hw", "stride_hw", "padding")})
        return [gemm.im2col(conv, args[0])]
    if op == "MatMulTiled":
        bias = args[2] if len(args) > 2 else None
        return [gemm.gemm(args[0], args[1], bias, kernel.attrs.get("tile", gemm.TILE))]
    n_data = len(args) - len(kernel.roles)
    node = hlir.Node("_", hlir.make_op(op, kernel.attrs), ("_",) * n_data)
    weights = dict(zip(kernel.roles, args[n_data:]))
    return [reference.run_node(node, args[:n_data], weights)]


def run_local(kernels, env: dict) -> dict:
    """Run name-addressed kernels against ``env`` (mutated and returned)."""
    for k in kernels:
        outs = run_kernel(k, [env[v] for v in k.inputs])
        for name, arr in zip(k.outputs, outs):
            env[name] = arr
    return env
