"""minisol: a small neural-network compiler and runtime.

Models from two dialects are lowered into one graph IR, optimized, tuned
layer by layer across three backends, grouped into fused steps and compiled
into serializable execution plans for inference, training forward and
training backward. Plans come with a static memory schedule whose peak the
runtime reproduces exactly.

The one-call entry point is :func:`optimize`.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

from minisol import autodiff, hlir, ingest, passes, schedule
from minisol.backends import (
    BackendId, ExecutionPlan, Injected, Measured, compile_plan, group_layers, tune,
)
from minisol.runtime import HostModel, OffloadDevice, execute, train_step

log = logging.getLogger(__name__)

__version__ = "0.1.0"


@dataclass
class CompiledVersion:
    graph: hlir.Graph
    assignment: dict
    groups: list
    plan: ExecutionPlan


@dataclass
class OptimizedModel:
    """Result of :func:`optimize`: the three compiled versions plus weights."""

    graph: hlir.Graph
    report: passes.VdimReport
    versions: autodiff.VersionSet | None
    compiled: dict
    model: HostModel

    @property
    def inference(self) -> ExecutionPlan:
        return self.compiled["inference"].plan

    @property
    def train_fwd(self) -> ExecutionPlan:
        return self.compiled["train_fwd"].plan

    @property
    def train_bwd(self) -> ExecutionPlan:
        return self.compiled["train_bwd"].plan

    @property
    def trainable(self) -> bool:
        return "train_fwd" in self.compiled

    def __call__(self, inputs, device: OffloadDevice | None = None, bindings=None, align: int = 64):
        if not isinstance(inputs, dict):
            inputs = {self.inference.input_names[0]: inputs}
        return execute(self.inference, inputs, self.model, device, bindings, align=align)

    def train_step(self, batch, lr: float, device: OffloadDevice | None = None, trace=None, align: int = 64):
        if not self.trainable:
            raise RuntimeError("this model has no training versions")
        return train_step(self.train_fwd, self.train_bwd, batch, self.model, lr, device, align, trace)

    def estimate_peak(self, align: int = 64, extents: dict | None = None) -> tuple:
        if not self.trainable:
            inf = schedule.timeline(self.inference, align, extents).peak
            return inf, None
        return schedule.estimate_peak(self, align, extents)

    def memory_block(self, align: int = 64, extents: dict | None = None) -> str:
        inf, train = self.estimate_peak(align, extents)
        return schedule.format_peak(inf, train if train is not None else inf)

    def weight_store(self) -> ingest.WeightStore:
        return ingest.WeightStore((k, self.model[k]) for k in self.inference.weights)


def _as_graph(model, materialize=True) -> hlir.Graph:
    if isinstance(model, hlir.Graph):
        return model
    if isinstance(model, dict):
        return ingest.parse_model(model, materialize=materialize)
    if isinstance(model, (str, os.PathLike)):
        return ingest.load_model(model, materialize=materialize)
    raise TypeError(f"cannot optimize a {type(model).__name__}")


def compile_version(graph: hlir.Graph, cost, role: str = "inference", saved=()) -> CompiledVersion:
    """Tune, group and compile one graph."""
    assignment = tune(graph, cost)
    groups = group_layers(graph, assignment)
    return CompiledVersion(graph, assignment, groups, compile_plan(graph, groups, role, saved))


def optimize(model, vdims: dict | None = None, cost=None, training: bool = True,
             wrt_inputs: bool = False) -> OptimizedModel:
    """Run the whole pipeline on a graph, a model document or a model file.

    ``vdims`` maps free symbol ids (as shown in the report) to ``True``
    (keep dynamic), ``False`` (use the seed extent) or an integer override;
    unmentioned symbols are fixed at their seeds. ``cost`` is a tuning cost
    model; wall-clock measurement is the default. Training versions are
    derived when ``training`` is set and the graph allows it.
    """
    graph = _as_graph(model)
    bound, report = passes.run_pipeline(graph, vdims)
    cost = cost if cost is not None else Measured()
    compiled = {"inference": compile_version(bound, cost)}
    versions = None
    if training:
        try:
            versions = autodiff.derive_versions(bound, wrt_inputs=wrt_inputs)
        except autodiff.NonDifferentiable as e:
            log.warning("no training versions: %s", e)
    if versions is not None:
        derived = cost
        if isinstance(cost, Injected):
            derived = Injected(cost.costs, strict=False)
        saved = versions.saved_names
        compiled["train_fwd"] = compile_version(versions.train_fwd, derived, "train_fwd", saved)
        compiled["train_bwd"] = compile_version(versions.train_bwd, derived, "train_bwd", saved)
    host = HostModel(bound.initializers, trainable=autodiff.trainable(bound))
    return OptimizedModel(bound, report, versions, compiled, host)


__all__ = [
    "optimize", "OptimizedModel", "CompiledVersion", "compile_version",
    "BackendId", "Injected", "Measured", "HostModel", "OffloadDevice",
    "autodiff", "hlir", "ingest", "passes", "schedule",
]
