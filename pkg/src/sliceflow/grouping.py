"""Operator grouping and the static peak-memory model.

The grouping pass partitions a graph into maximal chains of consecutive
homogeneous operators (all spatial or all temporal), each with a slice plan,
plus the ungrouped remainder (boundary ops and junctions). A grouped chain
executes slice by slice with intermediates sized per slice.

Memory accounting for a group models a caching allocator: each stage
boundary gets one slice-sized buffer slot, acquired on first touch and
retained until the group finishes. A sequential for-loop run and a pipelined
run of the same group therefore reserve exactly the same bytes; the
for-loop simply leaves most slots idle at any instant. Attention stages also
reserve a slot for their token-squared score buffer. See
docs/memory-model.md.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidParam, ShapeInferenceFailure
from .graph import Graph, OpNode, infer_shapes
from .kernels import KIND_INFO, Domain, OpKind, WeightBundle, apply_kernel, scratch_bytes
from .ledger import MemoryLedger
from .slicer import (
    SliceMode,
    SlicePlan,
    extract_slice,
    plan_spatial,
    plan_temporal,
    validate_lossless,
)
from .tensor import Shape5, Tensor5D, resolve_dtype


# ---------------------------------------------------------------------------
# buffer pool
# ---------------------------------------------------------------------------

class BufferPool:
    """Slot accounting for one group execution.

    A slot is charged to the ledger when first acquired and every slot is
    released together when the group completes; re-acquiring an existing
    slot (the next slice reusing a stage buffer) is free. Slots are sized by
    their first occupant, which is the largest slice by construction
    (remainders come last).
    """

    def __init__(self, ledger: MemoryLedger | None, label: str):
        self.ledger = ledger
        self.label = label
        self.sizes: dict[str, int] = {}

    def acquire(self, key: str, nbytes: int) -> None:
        if key in self.sizes:
            if nbytes > self.sizes[key]:
                raise AssertionError(
                    f"{self.label}:{key} grew from {self.sizes[key]} to {nbytes} bytes")
            return
        self.sizes[key] = nbytes
        if self.ledger is not None:
            self.ledger.alloc(nbytes, f"{self.label}:{key}")

    @property
    def slot_count(self) -> int:
        return len([k for k in self.sizes if k.startswith("slot")])

    def release_all(self) -> None:
        if self.ledger is not None:
            for key, nbytes in self.sizes.items():
                self.ledger.free(nbytes, f"{self.label}:{key}")
        self.sizes.clear()


# ---------------------------------------------------------------------------
# groups
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatorGroup:
    ops: tuple[OpNode, ...]
    domain: Domain
    plan: SlicePlan
    label: str

    @property
    def nodes(self) -> tuple[str, ...]:
        return tuple(op.id for op in self.ops)

    @property
    def head_input(self) -> str:
        return self.ops[0].inputs[0]

    @property
    def tail(self) -> str:
        return self.ops[-1].id


@dataclass(frozen=True)
class GroupedGraph:
    graph: Graph
    groups: tuple[OperatorGroup, ...]
    ungrouped: tuple[str, ...]
    # topologically valid execution order; items are ("group", index) or ("node", id)
    schedule: tuple[tuple[str, object], ...]

    def unit_outputs(self) -> dict[str, tuple[str, object]]:
        """Map from the node id a unit's result is stored under to the unit."""
        out = {}
        for unit in self.schedule:
            kind, ref = unit
            out[self.groups[ref].tail if kind == "group" else ref] = unit
        return out


def _make_plan(domain: Domain, in_shape: Shape5, spatial_k: int,
               temporal_cfg: tuple[int, int]) -> SlicePlan:
    if domain is Domain.SPATIAL:
        bt = in_shape.b * in_shape.t
        return plan_spatial(bt, min(spatial_k, bt))
    k_h, k_w = temporal_cfg
    return plan_temporal(in_shape.h, in_shape.w, min(k_h, in_shape.h), min(k_w, in_shape.w))


def group_operators(graph: Graph, spatial_k: int, temporal_cfg: tuple[int, int]) -> GroupedGraph:
    """Greedy maximal chains of homogeneous, losslessly sliceable operators.

    A chain extends while the next node is the sole consumer of the current
    tail, takes exactly one input, shares the group's domain, and the
    extended chain still passes validate_lossless under the group's plan.
    Boundary ops and multi-input junctions stay ungrouped. Slice counts are
    clamped to each group's input extents.
    """
    if spatial_k < 1:
        raise InvalidParam(f"spatial_k must be >= 1, got {spatial_k}")
    if temporal_cfg[0] < 1 or temporal_cfg[1] < 1:
        raise InvalidParam(f"temporal slice counts must be >= 1, got {temporal_cfg}")
    shapes = infer_shapes(graph)
    consumers = graph.consumers()
    topo = graph.topo_order()
    position = {nid: i for i, nid in enumerate(topo)}

    assigned: set[str] = set()
    groups: list[OperatorGroup] = []
    ungrouped: list[str] = []
    units: list[tuple[int, tuple[str, object]]] = []

    for nid in topo:
        if nid in assigned:
            continue
        node = graph.nodes[nid]
        if node.domain is Domain.BOUNDARY or len(node.inputs) != 1:
            assigned.add(nid)
            ungrouped.append(nid)
            units.append((position[nid], ("node", nid)))
            continue
        plan = _make_plan(node.domain, shapes[node.inputs[0]], spatial_k, temporal_cfg)
        chain = [nid]
        if not validate_lossless(graph, chain, plan):
            # no single-node fallback plan is attempted; run it unsliced
            assigned.add(nid)
            ungrouped.append(nid)
            units.append((position[nid], ("node", nid)))
            continue
        while True:
            tail = chain[-1]
            cons = consumers.get(tail, [])
            if len(cons) != 1:
                break
            nxt = graph.nodes[cons[0]]
            if (nxt.id in assigned or len(nxt.inputs) != 1
                    or nxt.domain is not node.domain
                    or not validate_lossless(graph, chain + [nxt.id], plan)):
                break
            chain.append(nxt.id)
        assigned.update(chain)
        ops = tuple(graph.nodes[c] for c in chain)
        label = f"group[{ops[0].label}->{ops[-1].label}]" if len(ops) > 1 else f"group[{ops[0].label}]"
        groups.append(OperatorGroup(ops=ops, domain=node.domain, plan=plan, label=label))
        units.append((position[chain[0]], ("group", len(groups) - 1)))

    # soundness: the pass must never emit an illegal group
    for grp in groups:
        assert validate_lossless(graph, list(grp.nodes), grp.plan), grp.label
    grouped_ids = {nid for grp in groups for nid in grp.nodes}
    assert not (grouped_ids & set(ungrouped))
    assert grouped_ids | set(ungrouped) == set(graph.nodes)

    units.sort(key=lambda item: item[0])
    return GroupedGraph(
        graph=graph,
        groups=tuple(groups),
        ungrouped=tuple(ungrouped),
        schedule=tuple(unit for _, unit in units),
    )


# ---------------------------------------------------------------------------
# group execution (sequential for-loop form)
# ---------------------------------------------------------------------------

def _slice_region_write(out: np.ndarray, part_shape: Shape5, plan: SlicePlan,
                        index: int, data: np.ndarray) -> None:
    """Write one slice's chain output into the full output buffer."""
    if plan.mode is SliceMode.SPATIAL_BT:
        start = sum(plan.extents[:index])
        n = plan.extents[index]
        merged = out.reshape(part_shape.b * part_shape.t, *out.shape[2:])
        merged[start:start + n] = data.reshape(n, *data.shape[2:])
    else:
        cols = len(plan.col_extents)
        ri, ci = divmod(index, cols)
        r0 = sum(plan.row_extents[:ri])
        c0 = sum(plan.col_extents[:ci])
        out[:, :, :, r0:r0 + data.shape[3], c0:c0 + data.shape[4]] = data


def execute_group(group: OperatorGroup, x: Tensor5D, weights: WeightBundle,
                  ledger: MemoryLedger | None = None) -> Tensor5D:
    """Run a group slice by slice and reassemble the output.

    Numerically equal to running the chain unsliced: bit-exact in float64,
    within 1e-5 normalized error in float32. The ledger sees the output
    buffer, then one slot per stage boundary plus one per attention score
    buffer, all released when the group completes.
    """
    plan = group.plan
    n = plan.n_slices
    # output extents: run shape bookkeeping via the first slice lazily; we
    # need the full output shape up front, so derive it from the chain.
    out_shape = _group_output_shape(group, x.shape)
    out = np.empty(tuple(out_shape), dtype=x.data.dtype)
    if ledger is not None:
        ledger.alloc(out.nbytes, group.ops[-1].label)
    pool = BufferPool(ledger, group.label)
    for i in range(n):
        part = extract_slice(x, plan, i)
        pool.acquire("slot0", part.data.nbytes)
        cur = part.data
        for j, op in enumerate(group.ops):
            sb = scratch_bytes(op.kind, cur.shape, cur.data.dtype.itemsize)
            if sb:
                pool.acquire(f"scratch{j}", sb)
            params = weights.get(op.param_ref) if op.param_ref else None
            cur = apply_kernel(op.kind, [cur], params, op.attrs)
            pool.acquire(f"slot{j + 1}", cur.nbytes)
        _slice_region_write(out, out_shape, plan, i, cur.data)
    pool.release_all()
    return Tensor5D(out)


def _group_output_shape(group: OperatorGroup, in_shape: Shape5) -> Shape5:
    from .kernels import output_shape
    shape = in_shape
    for op in group.ops:
        shape = output_shape(op.kind, [shape], op.attrs)
    return shape


def _sliced_shape(full: Shape5, plan: SlicePlan, index: int = 0) -> Shape5:
    """Shape of slice `index` of a stage tensor under the group's plan."""
    if plan.mode is SliceMode.SPATIAL_BT:
        return Shape5(1, plan.extents[index], full.c, full.h, full.w)
    cols = len(plan.col_extents)
    ri, ci = divmod(index, cols)
    return Shape5(full.b, full.t, full.c, plan.row_extents[ri], plan.col_extents[ci])


def group_slot_sizes(group: OperatorGroup, in_shape: Shape5, itemsize: int) -> dict[str, int]:
    """Slot sizes the pool will reserve, keyed like BufferPool keys."""
    from .kernels import output_shape
    plan = group.plan
    sizes: dict[str, int] = {}
    full = in_shape
    sizes["slot0"] = _sliced_shape(full, plan).nbytes(itemsize)
    for j, op in enumerate(group.ops):
        sb = scratch_bytes(op.kind, _sliced_shape(full, plan), itemsize)
        if sb:
            sizes[f"scratch{j}"] = sb
        full = output_shape(op.kind, [full], op.attrs)
        sizes[f"slot{j + 1}"] = _sliced_shape(full, plan).nbytes(itemsize)
    return sizes


def group_working_set_bytes(group: OperatorGroup, in_shape: Shape5, itemsize: int) -> int:
    """Reserved bytes while the group runs: all slots plus the output buffer."""
    slots = sum(group_slot_sizes(group, in_shape, itemsize).values())
    return slots + _group_output_shape(group, in_shape).nbytes(itemsize)


# ---------------------------------------------------------------------------
# static peak-memory model
# ---------------------------------------------------------------------------

class _StaticSim:
    """Liveness walk over shapes mirroring the executor's event protocol."""

    def __init__(self, itemsize: int):
        self.itemsize = itemsize
        self.current = 0
        self.peak = 0
        self.live: dict[str, int] = {}

    def alloc(self, key: str, nbytes: int) -> None:
        self.live[key] = nbytes
        self.current += nbytes
        self.peak = max(self.peak, self.current)

    def free(self, key: str) -> None:
        self.current -= self.live.pop(key)

    def bump(self, nbytes: int) -> int:
        """Transient allocation without a key; returns nbytes for later release."""
        self.current += nbytes
        self.peak = max(self.peak, self.current)
        return nbytes

    def drop(self, nbytes: int) -> None:
        self.current -= nbytes


def _unit_consumed_refs(unit, grouped: GroupedGraph) -> list[str]:
    kind, ref = unit
    if kind == "node":
        return list(dict.fromkeys(grouped.graph.nodes[ref].inputs))
    return [grouped.groups[ref].head_input]


def estimate_peak_memory(g: Graph | GroupedGraph, mode, dtype="float32",
                         naive_chunk: int | None = None) -> int:
    """Static liveness-based peak for a single network evaluation.

    Walks the execution order, allocating outputs and freeing tensors after
    their last consumer, with grouped execution charged as its reserved slot
    working set. Mirrors the executor's ledger protocol; transient
    kernel-internal copies are not modeled on either side.
    """
    from .executor import ExecMode  # local import to avoid a cycle
    mode = ExecMode(mode)
    itemsize = np.dtype(resolve_dtype(dtype)).itemsize

    if isinstance(g, GroupedGraph):
        graph = g.graph
        grouped = g
    else:
        graph = g
        grouped = None

    if mode in (ExecMode.SLICED_LOOP, ExecMode.PIPELINED):
        if grouped is None:
            raise ShapeInferenceFailure(f"{mode.value} requires a GroupedGraph")
        return _estimate_grouped(grouped, itemsize)
    if mode is ExecMode.REFERENCE:
        return _estimate_reference(graph, itemsize, graph.inputs)
    if mode is ExecMode.NAIVE_CLIP:
        if naive_chunk is None:
            raise InvalidParam("naive_chunk required for naiveclip estimates")
        return _estimate_naive(graph, itemsize, naive_chunk)
    raise InvalidParam(f"unknown mode {mode}")


def _estimate_reference(graph: Graph, itemsize: int, input_shapes: Mapping[str, Shape5],
                        charge_inputs: bool = True) -> int:
    shapes = infer_shapes(graph, input_shapes)
    sim = _StaticSim(itemsize)
    refcount: dict[str, int] = {}
    for node in graph.nodes.values():
        for ref in dict.fromkeys(node.inputs):
            refcount[ref] = refcount.get(ref, 0) + 1
    for out in graph.outputs:
        refcount[out] = refcount.get(out, 0) + 1
    if charge_inputs:
        for name in input_shapes:
            sim.alloc(name, Shape5(*input_shapes[name]).nbytes(itemsize))
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        sb = scratch_bytes(node.kind, shapes[node.inputs[0]], itemsize)
        tr = sim.bump(sb) if sb else 0
        sim.alloc(nid, shapes[nid].nbytes(itemsize))
        if tr:
            sim.drop(tr)
        for ref in dict.fromkeys(node.inputs):
            refcount[ref] -= 1
            if refcount[ref] == 0 and ref in sim.live:
                sim.free(ref)
    return sim.peak


def _estimate_grouped(grouped: GroupedGraph, itemsize: int) -> int:
    graph = grouped.graph
    shapes = infer_shapes(graph)
    sim = _StaticSim(itemsize)
    refcount: dict[str, int] = {}
    for unit in grouped.schedule:
        for ref in _unit_consumed_refs(unit, grouped):
            refcount[ref] = refcount.get(ref, 0) + 1
    for out in graph.outputs:
        refcount[out] = refcount.get(out, 0) + 1
    for name, shape in graph.inputs.items():
        sim.alloc(name, shape.nbytes(itemsize))
    for unit in grouped.schedule:
        kind, ref = unit
        if kind == "node":
            node = graph.nodes[ref]
            sb = scratch_bytes(node.kind, shapes[node.inputs[0]], itemsize)
            tr = sim.bump(sb) if sb else 0
            sim.alloc(ref, shapes[ref].nbytes(itemsize))
            if tr:
                sim.drop(tr)
            consumed = dict.fromkeys(node.inputs)
        else:
            grp = grouped.groups[ref]
            in_shape = shapes[grp.head_input]
            sim.alloc(grp.tail, shapes[grp.tail].nbytes(itemsize))
            slots = sum(group_slot_sizes(grp, in_shape, itemsize).values())
            tr = sim.bump(slots)
            sim.drop(tr)
            consumed = {grp.head_input: None}
        for r in consumed:
            refcount[r] -= 1
            if refcount[r] == 0 and r in sim.live:
                sim.free(r)
    return sim.peak


def _estimate_naive(graph: Graph, itemsize: int, chunk: int) -> int:
    x_shape = graph.inputs["x"]
    t = x_shape.t
    if not 1 <= chunk < t:
        raise InvalidParam(f"naive chunk must be in [1, {t}), got {chunk}")
    sim = _StaticSim(itemsize)
    for name, shape in graph.inputs.items():
        sim.alloc(name, shape.nbytes(itemsize))
    out_shape = infer_shapes(graph)[graph.outputs[0]]
    sim.alloc("out", out_shape.nbytes(itemsize))
    peak = sim.peak
    held = sim.current
    off = 0
    while off < t:
        ct = min(chunk, t - off)
        chunk_inputs = {name: shape.replace(t=ct) for name, shape in graph.inputs.items()}
        inner = _estimate_reference(graph, itemsize, chunk_inputs, charge_inputs=True)
        peak = max(peak, held + inner)
        off += ct
    return peak


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def grouped_graph_report(grouped: GroupedGraph, dtype="float32") -> dict:
    """JSON-ready summary: per-group label, nodes, domain, plan, working set."""
    itemsize = np.dtype(resolve_dtype(dtype)).itemsize
    shapes = infer_shapes(grouped.graph)
    rows = []
    for grp in grouped.groups:
        rows.append({
            "label": grp.label,
            "nodes": list(grp.nodes),
            "node_count": len(grp.nodes),
            "domain": grp.domain.value,
            "plan": grp.plan.to_json_dict(),
            "working_set_bytes": group_working_set_bytes(grp, shapes[grp.head_input], itemsize),
        })
    return {
        "groups": rows,
        "ungrouped": list(grouped.ungrouped),
        "group_count": len(rows),
        "ungrouped_count": len(grouped.ungrouped),
    }
