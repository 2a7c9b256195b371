"""Grouping of connected same-backend layers into fusion groups.

Groups must be connected (undirected adjacency along dataflow edges) and
convex: no dataflow path may leave a group and re-enter it, otherwise the
group could not run as one step. The quotient graph of groups is kept
acyclic as well.
"""

from __future__ import annotations

from dataclasses import dataclass

from minisol import hlir


@dataclass(frozen=True)
class FusionGroup:
    id: int
    backend: object
    members: tuple

    @property
    def label(self) -> str:
        if len(self.members) == 1:
            return self.members[0]
        return f"{self.members[0]}..{self.members[-1]}"


def dataflow(graph: hlir.Graph):
    """(ordered compute node names, successor map, predecessor map)."""
    order = [n for n in hlir.sorted_nodes(graph) if hlir.is_compute(n)]
    names = {n.name for n in order}
    producer = {v: n.name for n in order for v in n.outputs}
    succ = {n.name: set() for n in order}
    pred = {n.name: set() for n in order}
    for n in order:
        for v in n.inputs:
            p = producer.get(v)
            if p is not None and p in names:
                succ[p].add(n.name)
                pred[n.name].add(p)
    return [n.name for n in order], succ, pred


def _reach(start, edges):
    seen = set()
    stack = list(start)
    while stack:
        x = stack.pop()
        for y in edges[x]:
            if y not in seen:
                seen.add(y)
                stack.append(y)
    return seen


def is_convex(members, succ, pred) -> bool:
    members = set(members)
    down = _reach(members, succ) - members
    up = _reach(members, pred) - members
    return not (down & up)


def _quotient_acyclic(group_of: dict, succ) -> bool:
    gsucc: dict = {}
    for a, bs in succ.items():
        if a not in group_of:
            continue
        for b in bs:
            if b in group_of and group_of[a] != group_of[b]:
                gsucc.setdefault(group_of[a], set()).add(group_of[b])
    state: dict = {}

    def visit(g):
        state[g] = 1
        for h in gsucc.get(g, ()):
            s = state.get(h)
            if s == 1 or (s is None and not visit(h)):
                return False
        state[g] = 2
        return True

    return all(visit(g) for g in set(group_of.values()) if g not in state)


def group_layers(graph: hlir.Graph, assignment: dict) -> list:
    """Partition compute nodes into maximal connected convex same-backend groups.

    Nodes are visited in topological order and join the most recently
    created eligible predecessor group; afterwards adjacent groups with the
    same backend are merged while the result stays convex, so the final
    partition is maximal.
    """
    order, succ, pred = dataflow(graph)
    group_of: dict = {}
    groups: dict = {}
    for name in order:
        backend = assignment[name]
        cands = sorted({group_of[p] for p in pred[name] if assignment[p] == backend}, reverse=True)
        placed = False
        for gid in cands:
            trial = groups[gid] | {name}
            group_of[name] = gid
            if is_convex(trial, succ, pred) and _quotient_acyclic(group_of, succ):
                groups[gid] = trial
                placed = True
                break
            del group_of[name]
        if not placed:
            gid = len(groups)
            groups[gid] = {name}
            group_of[name] = gid

    merged = True
    while merged:
        merged = False
        ids = sorted(groups)
        for i in ids:
            for j in ids:
                if j <= i or assignment[next(iter(groups[i]))] != assignment[next(iter(groups[j]))]:
                    continue
                adjacent = any(succ[a] & groups[j] or pred[a] & groups[j] for a in groups[i])
                if not adjacent:
                    continue
                union = groups[i] | groups[j]
                trial = {k: (i if v == j else v) for k, v in group_of.items()}
                if is_convex(union, succ, pred) and _quotient_acyclic(trial, succ):
                    groups[i] = union
                    del groups[j]
                    group_of = trial
                    merged = True
                    break
            if merged:
                break

    rank = {name: i for i, name in enumerate(order)}
    # order groups topologically over the quotient graph, ties by first member
    gsucc = {g: set() for g in groups}
    indeg = {g: 0 for g in groups}
    for a, bs in succ.items():
        for b in bs:
            ga, gb = group_of[a], group_of[b]
            if ga != gb and gb not in gsucc[ga]:
                gsucc[ga].add(gb)
                indeg[gb] += 1
    first = {g: min(rank[m] for m in ms) for g, ms in groups.items()}
    ready = sorted((g for g in groups if indeg[g] == 0), key=first.get)
    ordered = []
    while ready:
        g = ready.pop(0)
        ordered.append(g)
        for h in gsucc[g]:
            indeg[h] -= 1
            if indeg[h] == 0:
                ready.append(h)
        ready.sort(key=first.get)
    return [
        FusionGroup(new_id, assignment[next(iter(groups[g]))], tuple(sorted(groups[g], key=rank.get)))
        for new_id, g in enumerate(ordered)
    ]
