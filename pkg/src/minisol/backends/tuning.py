"""Layer-by-layer autotuning.

Each compute node is evaluated alone on every backend that supports it and
gets the cheapest one. Costs either come from wall-clock measurement
(1 warmup + 5 trials, median) or are injected from a table, which is what
reproducible tests and CI use.
"""

from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from minisol import hlir
from minisol.passes import ensure_shapes
from minisol.backends import BackendId, lower_group, supporting
from minisol.backends.kernels import run_local

log = logging.getLogger(__name__)


class NoBackend(Exception):
    pass


@dataclass(frozen=True)
class Measured:
    warmup: int = 1
    trials: int = 5
    seed: int = 0


@dataclass(frozen=True)
class Injected:
    """Costs from a table keyed by ``(node name, BackendId)``.

    With ``strict=False`` a missing entry costs infinity, so nodes absent
    from the table (derived training nodes, say) fall back to REF by the
    tie-break.
    """

    costs: dict = field(default_factory=dict, hash=False)
    strict: bool = True

    def cost(self, node: str, backend: BackendId) -> float:
        try:
            return float(self.costs[(node, backend)])
        except KeyError:
            if not self.strict:
                return float("inf")
            raise KeyError(f"injected cost table has no entry for ({node}, {backend.name})") from None


class BackendAssignment(dict):
    """node name -> BackendId, with the per-candidate cost table kept in ``costs``."""

    def __init__(self, *args, costs=None, **kw):
        super().__init__(*args, **kw)
        self.costs = costs or {}

    def report(self) -> str:
        lines = [f"{'node':<24} {'chosen':<11} candidates"]
        for node, backend in self.items():
            cands = " ".join(f"{b.name}={c:.6g}" for b, c in self.costs.get(node, {}).items())
            lines.append(f"{node:<24} {backend.name:<11} {cands}".rstrip())
        return "\n".join(lines) + "\n"

    def report_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "backend", "cost", "chosen"])
        for node, backend in self.items():
            for b, c in self.costs.get(node, {}).items():
                w.writerow([node, b.name, repr(float(c)), int(b == backend)])
        return buf.getvalue()


def load_cost_csv(text: str) -> Injected:
    """Parse ``node,backend,cost`` rows (a header line is optional)."""
    costs = {}
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0].strip().startswith("#"):
            continue
        if row[0].strip() == "node":
            continue
        if len(row) < 3:
            raise ValueError(f"bad cost row {row!r}")
        node, backend, cost = (c.strip() for c in row[:3])
        costs[(node, BackendId[backend])] = float(cost)
    return Injected(costs)


def _measure(node: hlir.Node, graph: hlir.Graph, backend: BackendId, cfg: Measured, rng) -> float:
    dtype = hlir.DTYPES[graph.dtype]
    env = {}
    for v in node.inputs:
        shape = graph.value_type(v).shape.seed_dims()
        env[v] = rng.standard_normal(shape).astype(dtype)
    for v in node.weights.values():
        env[v] = graph.initializers[v]
    kernels = lower_group(backend, [node], [node.output])
    samples = []
    for i in range(cfg.warmup + cfg.trials):
        local = dict(env)
        t0 = time.perf_counter()
        run_local(kernels, local)
        dt = time.perf_counter() - t0
        if i >= cfg.warmup:
            samples.append(dt)
    return statistics.median(samples)


def tune(graph: hlir.Graph, cost=None) -> BackendAssignment:
    """Pick the cheapest supporting backend for every node independently.

    Input and Const nodes compute nothing and are pinned to REF. Ties go to
    the lowest BackendId.
    """
    cost = cost if cost is not None else Measured()
    graph = ensure_shapes(graph)
    rng = np.random.default_rng(getattr(cost, "seed", 0))
    assignment = BackendAssignment()
    for node in hlir.sorted_nodes(graph):
        if not hlir.is_compute(node):
            assignment[node.name] = BackendId.REF
            continue
        cands = supporting(node.op)
        if not cands:
            raise NoBackend(node.name)
        table = {}
        for b in cands:
            if isinstance(cost, Injected):
                table[b] = cost.cost(node.name, b)
            else:
                table[b] = _measure(node, graph, b, cost, rng)
        best = min(cands, key=lambda b: (table[b], int(b)))
        assignment[node.name] = best
        assignment.costs[node.name] = table
        log.debug("tune %s: %s -> %s", node.name, table, best.name)
    return assignment
