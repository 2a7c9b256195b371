"""Static memory schedule, peak estimation and memory reports.

A plan runs its groups in a fixed order, one step per compiled kernel.
Step 0 makes parameters and inputs resident; at each later step the
kernel's outputs are allocated, then every value whose last use was that
kernel is freed. Parameters, outputs and (in a training forward plan) saved
tensors are never freed. Sizes are rounded up to the alignment ``A``
(64 bytes by default). Reports aggregate steps per fusion group.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from minisol import hlir

log = logging.getLogger(__name__)

MB = 1 << 20


class MemCategory(str, enum.Enum):
    PARAMETER = "parameter"
    INPUT = "input"
    OUTPUT = "output"
    INTERMEDIATE = "intermediate"
    SAVED = "saved"


CATEGORIES = tuple(MemCategory)


@dataclass(frozen=True)
class MemoryEvent:
    step: int
    kind: str  # "alloc" | "free"
    name: str
    bytes: int
    category: MemCategory


def aligned(nbytes: int, align: int = 64) -> int:
    if align < 1:
        raise ValueError("alignment must be >= 1")
    return -(-int(nbytes) // align) * align


def kernel_steps(plan) -> list:
    """(group index, kernel) pairs; kernel ``i`` of this list runs at step ``i + 1``."""
    return [(gi, k) for gi, g in enumerate(plan.groups) for k in g.kernels]


def static_frees(plan) -> list:
    """Per step (0 = setup, then one per kernel), the slots last used there."""
    retained = plan.retained()
    steps = kernel_steps(plan)
    last = {}
    for s in plan.inputs:
        last[s] = 0
    for step, (_, k) in enumerate(steps, start=1):
        for s in (*k.inputs, *k.outputs):
            last[s] = step
    frees = [[] for _ in range(len(steps) + 1)]
    for s, step in sorted(last.items()):
        if s not in retained and plan.values[s].category != MemCategory.PARAMETER:
            frees[step].append(s)
    return frees


def build_schedule(plan, align: int = 64, extents: dict | None = None, input_shapes: dict | None = None,
                   resident=(), step_offset: int = 0) -> list:
    """Alloc/free events of one plan, one step per kernel.

    ``resident`` names values that are already live (they are neither
    allocated here nor double counted); their frees are still emitted.
    """
    shapes, _ = plan.resolve_shapes(input_shapes, extents)
    itemsize = np.dtype(hlir.DTYPES[plan.dtype]).itemsize
    resident = set(resident)

    def size(s):
        return aligned(int(np.prod(shapes[s], dtype=np.int64)) * itemsize, align)

    def ev(step, kind, s):
        v = plan.values[s]
        return MemoryEvent(step + step_offset, kind, v.name, size(s), v.category)

    events = []
    for s, v in enumerate(plan.values):
        if v.category == MemCategory.PARAMETER and v.name not in resident:
            events.append(ev(0, "alloc", s))
    for s in plan.inputs:
        if plan.values[s].name not in resident:
            events.append(ev(0, "alloc", s))
    for s in plan.frees[0]:
        events.append(ev(0, "free", s))
    for step, (_, k) in enumerate(kernel_steps(plan), start=1):
        for s in dict.fromkeys(k.outputs):
            events.append(ev(step, "alloc", s))
        for s in plan.frees[step]:
            events.append(ev(step, "free", s))
    return events


def training_events(fwd, bwd, align: int = 64, extents: dict | None = None) -> list:
    """Forward events, the loss boundary, then backward events, as one timeline.

    At the boundary step the loss writes the output gradients while the
    forward outputs are still live, then the outputs are released; saved
    tensors and weight gradients stay live across it.
    """
    fwd_events = build_schedule(fwd, align, extents)
    _, ext = fwd.resolve_shapes(None, extents)
    boundary = len(kernel_steps(fwd)) + 1
    saved = set(fwd.saved)
    events = list(fwd_events)
    shapes, _ = fwd.resolve_shapes(None, ext)
    itemsize = np.dtype(hlir.DTYPES[fwd.dtype]).itemsize
    for s in dict.fromkeys(fwd.outputs):
        v = fwd.values[s]
        if v.name not in saved:
            nbytes = aligned(int(np.prod(shapes[s], dtype=np.int64)) * itemsize, align)
            events.append(MemoryEvent(boundary, "free", v.name, nbytes, v.category))
    bshapes, _ = bwd.resolve_shapes(None, ext)
    for s in bwd.inputs:
        v = bwd.values[s]
        if v.name not in saved:
            nbytes = aligned(int(np.prod(bshapes[s], dtype=np.int64)) * itemsize, align)
            events.append(MemoryEvent(boundary, "alloc", v.name, nbytes, v.category))
    resident = set(fwd.weights) | set(bwd.weights) | {bwd.values[s].name for s in bwd.inputs}
    # a tensor keeps the category it was allocated under
    category = {}
    for e in events:
        if e.kind == "alloc":
            category[e.name] = e.category
    for e in build_schedule(bwd, align, ext, resident=resident, step_offset=boundary + 1):
        if e.kind == "free" and e.name in category:
            e = MemoryEvent(e.step, e.kind, e.name, e.bytes, category[e.name])
        events.append(e)
    return events


@dataclass
class StepRow:
    """Memory at the high point of one group (or of setup)."""

    step: int
    label: str
    by_category: dict
    total: int


@dataclass
class MemoryTimeline:
    events: list
    rows: list = field(default_factory=list)
    series: list = field(default_factory=list)
    peak: int = 0
    peak_step: int = 0

    @classmethod
    def from_events(cls, events, labels: dict | None = None) -> "MemoryTimeline":
        labels = labels or {}
        live = {c: 0 for c in CATEGORIES}
        series, rows = [], []
        peak, peak_step = 0, 0
        steps = sorted({e.step for e in events})
        by_step: dict = {}
        for e in events:
            by_step.setdefault(e.step, []).append(e)
        for step in steps:
            evs = by_step[step]
            for e in evs:
                if e.kind == "alloc":
                    live[e.category] += e.bytes
                    series.append(sum(live.values()))
            snapshot = dict(live)
            total = sum(snapshot.values())
            label = labels.get(step, f"step{step}")
            if rows and rows[-1].label == label:
                if total > rows[-1].total:
                    rows[-1].by_category, rows[-1].total = snapshot, total
            else:
                rows.append(StepRow(len(rows), label, snapshot, total))
            if total > peak:
                peak, peak_step = total, step
            for e in evs:
                if e.kind == "free":
                    live[e.category] -= e.bytes
                    series.append(sum(live.values()))
        return cls(list(events), rows, series, peak, peak_step)


def plan_labels(plan, step_offset: int = 0, prefix: str = "") -> dict:
    """step -> label of the group that step belongs to."""
    labels = {step_offset: f"{prefix}<setup>"}
    for i, (gi, _) in enumerate(kernel_steps(plan), start=1):
        g = plan.groups[gi]
        labels[i + step_offset] = f"{prefix}g{g.id} {g.label} [{g.backend.name}]"
    return labels


def timeline(plan, align: int = 64, extents: dict | None = None) -> MemoryTimeline:
    return MemoryTimeline.from_events(build_schedule(plan, align, extents), plan_labels(plan))


def training_timeline(fwd, bwd, align: int = 64, extents: dict | None = None) -> MemoryTimeline:
    labels = plan_labels(fwd)
    boundary = len(kernel_steps(fwd)) + 1
    labels[boundary] = "<loss>"
    labels.update({k: f"bwd {v}" for k, v in plan_labels(bwd, boundary + 1).items()})
    return MemoryTimeline.from_events(training_events(fwd, bwd, align, extents), labels)


def _check_extents(plans, extents):
    for plan in plans:
        for k, seed, bindable in plan.vdims:
            if bindable and (extents is None or k not in extents):
                log.warning("vdim #%d has no extent; using its seed %d", k, seed)


def estimate_peak(plans, align: int = 64, extents: dict | None = None) -> tuple:
    """(inference peak, joint forward+backward training peak) in bytes.

    ``plans`` is anything with ``inference``, ``train_fwd`` and ``train_bwd``
    plan attributes (an optimized model, for instance).
    """
    _check_extents([plans.inference], extents)
    inf = timeline(plans.inference, align, extents).peak
    train = training_timeline(plans.train_fwd, plans.train_bwd, align, extents).peak
    return inf, train


def format_peak(inference: int, training: int) -> str:
    def mb(n):
        return (int(n) + MB // 2) // MB

    return (
        "Estimated Peak Memory Consumption:\n"
        f"Inference: ~{mb(inference)}MB\n"
        f"Training:  ~{mb(training)}MB\n"
    )


_SHORT = {
    MemCategory.PARAMETER: "param",
    MemCategory.INPUT: "in",
    MemCategory.OUTPUT: "out",
    MemCategory.INTERMEDIATE: "tmp",
    MemCategory.SAVED: "saved",
}

CSV_COLUMNS = ("step", "group", "parameter", "input", "output", "intermediate", "saved", "total")


def memory_report(tl: MemoryTimeline, fmt: str = "text", width: int = 40) -> str:
    """One row per step (one per group, not per layer)."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in tl.rows:
            w.writerow([r.step, r.label, *(r.by_category[c] for c in CATEGORIES), r.total])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [f"Memory timeline (peak {tl.peak} bytes at step {tl.peak_step})"]
    label_w = max([len(r.label) for r in tl.rows] + [5])
    for r in tl.rows:
        bar = "#" * (round(width * r.total / tl.peak) if tl.peak else 0)
        cats = " ".join(f"{_SHORT[c]}={r.by_category[c]}" for c in CATEGORIES if r.by_category[c])
        lines.append(f"{r.step:>4} {r.label:<{label_w}} {r.total:>12} |{bar:<{width}}| {cats}".rstrip())
    return "\n".join(lines) + "\n"
