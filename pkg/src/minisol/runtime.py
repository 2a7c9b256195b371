"""Plan execution on the host or a simulated offload device.

The runtime frees values by reference counting over the kernels it actually
runs; it does not replay the static schedule. Its arena counts every
allocation at the same alignment as the schedule, so the high-water mark it
observes is an independent measurement of the estimated peak.

The loss and optimizer kernels live here rather than in the compiler: an
L1 loss (mean absolute error, ``sign(0) = 0``) and plain SGD.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from minisol import hlir
from minisol.backends.kernels import run_kernel
from minisol.backends.plan import ShapeMismatch, UnboundVdim
from minisol.schedule import MemCategory, aligned

log = logging.getLogger(__name__)


class ArenaOverflow(RuntimeError):
    pass


class MissingGrad(KeyError):
    pass


# ---------------------------------------------------------------------------
# host model and offload device


class HostModel:
    """Host-resident weights with a version stamp per tensor."""

    def __init__(self, weights: dict, trainable=None):
        self.weights = {k: np.array(v) for k, v in weights.items()}
        self.versions = {k: 0 for k in self.weights}
        self.trainable = list(trainable) if trainable is not None else list(self.weights)

    def __getitem__(self, name):
        return self.weights[name]

    def set(self, name: str, value):
        old = self.weights[name]
        self.weights[name] = np.asarray(value, dtype=old.dtype).reshape(old.shape)
        self.versions[name] += 1

    def version(self, name: str) -> int:
        return self.versions[name]


@dataclass
class SyncStats:
    h2d_bytes: int
    d2h_bytes: int
    weight_bytes: int
    transfers: dict


class OffloadDevice:
    """A separate memory space; every copy in or out is counted (aligned)."""

    def __init__(self, align: int = 64):
        self.align = align
        self.store: dict = {}
        self.cache: dict = {}  # weight name -> version stamp of the device copy
        self.h2d_bytes = 0
        self.d2h_bytes = 0
        self.weight_bytes = 0
        self.transfers: dict = {}

    def _h2d(self, arr):
        self.h2d_bytes += aligned(arr.nbytes, self.align)
        return np.array(arr, copy=True)

    def sync_weights(self, model: HostModel, names) -> int:
        """Copy every weight whose host version differs from the cached stamp."""
        moved = 0
        for name in names:
            stamp = model.version(name)
            if self.cache.get(name) == stamp and name in self.store:
                continue
            self.store[name] = self._h2d(model[name])
            self.cache[name] = stamp
            n = aligned(model[name].nbytes, self.align)
            self.weight_bytes += n
            moved += n
            self.transfers[name] = self.transfers.get(name, 0) + 1
        return moved

    def upload(self, arr):
        return self._h2d(arr)

    def download(self, arr):
        self.d2h_bytes += aligned(arr.nbytes, self.align)
        return np.array(arr, copy=True)

    def reset(self):
        self.h2d_bytes = self.d2h_bytes = self.weight_bytes = 0
        self.transfers = {}


def sync_stats(device: OffloadDevice, reset: bool = False) -> SyncStats:
    s = SyncStats(device.h2d_bytes, device.d2h_bytes, device.weight_bytes, dict(device.transfers))
    if reset:
        device.reset()
    return s


# ---------------------------------------------------------------------------
# arena and execution context


class Arena:
    """Byte accounting for live tensors: current and high-water totals."""

    def __init__(self, capacity: int | None = None, align: int = 64):
        self.capacity = capacity
        self.align = align
        self.live: dict = {}  # name -> (bytes, category)
        self.current = 0
        self.high_water = 0

    def alloc(self, name: str, nbytes: int, category: MemCategory):
        if name in self.live:
            raise RuntimeError(f"{name} allocated twice")
        size = aligned(nbytes, self.align)
        self.live[name] = (size, category)
        self.current += size
        self.high_water = max(self.high_water, self.current)
        if self.capacity is not None and self.current > self.capacity:
            raise ArenaOverflow(f"{self.current} bytes live exceeds arena capacity {self.capacity}")

    def free(self, name: str):
        size, _ = self.live.pop(name)
        self.current -= size

    def by_category(self) -> dict:
        out = {c: 0 for c in MemCategory}
        for size, cat in self.live.values():
            out[cat] += size
        return out


class ExecutionContext:
    """Mutable state of running plans: live tensors, arena and counters.

    One context may run several plans in sequence (a training forward then
    its backward plan); values still live from an earlier plan are reused
    when a later plan names them as inputs.
    """

    def __init__(self, align: int = 64, capacity: int | None = None):
        self.align = align
        self.arena = Arena(capacity, align)
        self.values: dict = {}
        self.bindings: dict = {}
        self.step = 0
        self.trace: list = []

    @property
    def high_water(self) -> int:
        return self.arena.high_water

    @property
    def current(self) -> int:
        return self.arena.current

    def _put(self, name, arr, category):
        self.arena.alloc(name, arr.nbytes, category)
        self.values[name] = arr

    def release(self, names):
        for name in names:
            if name in self.values:
                del self.values[name]
                self.arena.free(name)

    def run(self, plan, inputs: dict, model: HostModel, device: OffloadDevice | None = None,
            bindings: dict | None = None) -> dict:
        dtype = hlir.DTYPES[plan.dtype]
        given = {}
        for name in plan.input_names:
            if name in self.values:
                given[name] = self.values[name]
            elif name in inputs:
                given[name] = np.asarray(inputs[name], dtype=dtype)
            else:
                syms = [d for d in plan.values[plan.slot[name]].dims if hlir.is_sym(d)]
                unbound = [d for d in syms if d.id not in (bindings or {})]
                if unbound:
                    raise UnboundVdim(f"input {name} missing; cannot bind {unbound[0]}")
                raise ShapeMismatch(f"input {name} missing")
        _, extents = plan.resolve_shapes({k: v.shape for k, v in given.items()}, bindings)
        self.bindings = extents

        weights = plan.weights
        if device is not None:
            device.sync_weights(model, weights)
        for name in weights:
            if name not in self.values:
                src = device.store[name] if device is not None else model[name]
                self._put(name, src, MemCategory.PARAMETER)
        for s in plan.inputs:
            name = plan.values[s].name
            if name not in self.values:
                arr = given[name]
                if device is not None:
                    arr = device.upload(arr)
                self._put(name, arr, plan.values[s].category)

        retained = plan.retained()
        reads: dict = {}
        for k in plan.kernels():
            for s in k.inputs:
                reads[s] = reads.get(s, 0) + 1

        def maybe_free(s):
            v = plan.values[s]
            if s not in retained and v.category != MemCategory.PARAMETER and reads.get(s, 0) == 0:
                self.release([v.name])

        for s in plan.inputs:
            maybe_free(s)
        names = [v.name for v in plan.values]
        for k in plan.kernels():
            self.step += 1
            args = [self.values[names[s]] for s in k.inputs]
            outs = run_kernel(k, args)
            for s, arr in zip(k.outputs, outs):
                arr = np.asarray(arr, dtype=dtype)
                self._put(names[s], arr, plan.values[s].category)
            for s in k.inputs:
                reads[s] -= 1
            for s in dict.fromkeys((*k.inputs, *k.outputs)):
                maybe_free(s)

        result = {}
        for s in plan.outputs:
            arr = self.values[names[s]]
            result[names[s]] = device.download(arr) if device is not None else arr
        return result


def execute(plan, inputs: dict, model: HostModel, device: OffloadDevice | None = None,
            bindings: dict | None = None, ctx: ExecutionContext | None = None,
            align: int = 64) -> dict:
    """Run ``plan`` once; the arena is sized to the plan's estimated peak."""
    from minisol.schedule import MemoryTimeline, build_schedule

    if ctx is None:
        dtype = hlir.DTYPES[plan.dtype]
        shapes = {k: np.shape(v) for k, v in inputs.items() if k in plan.input_names}
        peak = MemoryTimeline.from_events(build_schedule(plan, align, bindings, shapes)).peak
        ctx = ExecutionContext(align, capacity=peak)
        inputs = {k: np.asarray(v, dtype=dtype) for k, v in inputs.items()}
    return ctx.run(plan, inputs, model, device, bindings)


# ---------------------------------------------------------------------------
# loss, optimizer, training


def l1_loss(pred, target):
    """Mean absolute error and its gradient ``sign(pred - target) / N``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = diff.size
    loss = float(np.abs(diff).sum() / n)
    return loss, (np.sign(diff) / n).astype(pred.dtype)


def sgd_step(model: HostModel, grads: dict, lr: float) -> HostModel:
    """``w -= lr * g`` for every trainable weight; each stamp moves by one."""
    for name in model.trainable:
        if name not in grads:
            raise MissingGrad(name)
    for name in model.trainable:
        w = model[name]
        model.set(name, w - np.asarray(lr, dtype=w.dtype) * np.asarray(grads[name], dtype=w.dtype))
    return model


@dataclass
class StepResult:
    loss: float
    grads: dict
    high_water: int
    trace: list = field(default_factory=list)


def train_step(fwd, bwd, batch, model: HostModel, lr: float, device: OffloadDevice | None = None,
               align: int = 64, trace: list | None = None, output: str | None = None) -> StepResult:
    """Forward, loss, backward, update, in that order.

    ``batch`` is ``(inputs, target)``: a dict or a single array for the one
    graph input, and the target for ``output`` (the first output by default).
    Saved tensors stay live in the context between the two plans.
    """
    from minisol.autodiff import grad_name

    inputs, target = batch
    if not isinstance(inputs, dict):
        inputs = {fwd.input_names[0]: inputs}
    saved = set(fwd.saved)
    fwd_outputs = [n for n in fwd.output_names if n not in saved]
    output = output or fwd_outputs[0]
    trace = trace if trace is not None else []
    ctx = ExecutionContext(align)

    outs = ctx.run(fwd, inputs, model, device)
    trace.append("forward")
    loss, g = l1_loss(outs[output], target)
    trace.append("loss")

    # the loss writes the output gradients while the outputs are still live
    feed = {}
    for name in bwd.input_names:
        if name == grad_name(output):
            feed[name] = g
        elif name.startswith("grad/") and name[5:] in fwd.output_names:
            feed[name] = np.zeros_like(outs[name[5:]])
    for name, arr in feed.items():
        ctx._put(name, device.upload(arr) if device is not None else arr, MemCategory.INPUT)
    ctx.release(fwd_outputs)
    results = ctx.run(bwd, {}, model, device)
    trace.append("backward")
    grads = {}
    for name, arr in results.items():
        if name.startswith("grad/"):
            grads[name[5:]] = arr
    sgd_step(model, grads, lr)
    ctx.release(list(results))
    trace.append("update")
    return StepResult(loss, grads, ctx.high_water, trace)
