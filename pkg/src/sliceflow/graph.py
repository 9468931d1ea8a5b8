"""DAG representation of the denoising network.

Nodes are tagged operators with a domain (spatial / temporal / boundary) and
human-readable labels. Graph inputs are named placeholders with declared
shapes; node inputs may reference either node ids or input names.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import InvalidGraph, NotAChain, ShapeInferenceFailure
from .kernels import KIND_INFO, Domain, OpKind, output_shape
from .tensor import Shape5


@dataclass(frozen=True)
class OpNode:
    id: str
    kind: OpKind
    domain: Domain
    inputs: tuple[str, ...]
    param_ref: str | None = None
    label: str = ""
    attrs: Mapping = field(default_factory=dict)


class Graph:
    """Immutable after construction; safe for concurrent read."""

    def __init__(self, nodes: Iterable[OpNode], inputs: Mapping[str, Shape5],
                 outputs: Sequence[str]):
        self.nodes: dict[str, OpNode] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise InvalidGraph(f"duplicate node id {node.id!r}")
            self.nodes[node.id] = node
        self.inputs: dict[str, Shape5] = {name: Shape5(*shape) for name, shape in inputs.items()}
        self.outputs: list[str] = list(outputs)
        self._topo: list[str] | None = None
        self._consumers: dict[str, list[str]] | None = None
        self.validate()

    # -- structure ----------------------------------------------------------

    def validate(self) -> None:
        for name in self.inputs:
            if name in self.nodes:
                raise InvalidGraph(f"input name {name!r} collides with a node id")
        for node in self.nodes.values():
            info = KIND_INFO[node.kind]
            if node.domain not in info.domains:
                raise InvalidGraph(
                    f"node {node.id!r}: domain {node.domain.value} not allowed for {node.kind.value}")
            if info.arity is not None and len(node.inputs) != info.arity:
                raise InvalidGraph(
                    f"node {node.id!r}: {node.kind.value} takes {info.arity} input(s), got {len(node.inputs)}")
            for ref in node.inputs:
                if ref not in self.nodes and ref not in self.inputs:
                    raise InvalidGraph(f"node {node.id!r} references unknown input {ref!r}")
        for out in self.outputs:
            if out not in self.nodes:
                raise InvalidGraph(f"output {out!r} is not a node")
        self.topo_order()  # raises on cycles
        reachable = self._reachable_from_outputs()
        unreachable = set(self.nodes) - reachable
        if unreachable:
            raise InvalidGraph(f"nodes unreachable from outputs: {sorted(unreachable)}")

    def _reachable_from_outputs(self) -> set[str]:
        seen: set[str] = set()
        stack = list(self.outputs)
        while stack:
            nid = stack.pop()
            if nid in seen or nid not in self.nodes:
                continue
            seen.add(nid)
            stack.extend(self.nodes[nid].inputs)
        return seen

    def topo_order(self) -> list[str]:
        """Deterministic topological order (Kahn, insertion-stable)."""
        if self._topo is not None:
            return self._topo
        indeg = {nid: 0 for nid in self.nodes}
        for node in self.nodes.values():
            for ref in node.inputs:
                if ref in self.nodes:
                    indeg[node.id] += 1
        ready = [nid for nid in self.nodes if indeg[nid] == 0]
        order: list[str] = []
        consumers = self.consumers()
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for cons in consumers.get(nid, ()):
                indeg[cons] -= 1
                if indeg[cons] == 0:
                    ready.append(cons)
        if len(order) != len(self.nodes):
            raise InvalidGraph("graph contains a cycle")
        self._topo = order
        return order

    def consumers(self) -> dict[str, list[str]]:
        """Map from node id / input name to the node ids that consume it."""
        if self._consumers is not None:
            return self._consumers
        cons: dict[str, list[str]] = {}
        for node in self.nodes.values():
            for ref in node.inputs:
                cons.setdefault(ref, []).append(node.id)
        self._consumers = cons
        return cons

    def node_by_label(self, label: str) -> OpNode:
        for node in self.nodes.values():
            if node.label == label:
                return node
        raise InvalidGraph(f"no node labeled {label!r}")

    # -- serialization --------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "inputs": {name: list(shape) for name, shape in self.inputs.items()},
            "outputs": list(self.outputs),
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind.value,
                    "domain": n.domain.value,
                    "inputs": list(n.inputs),
                    "param_ref": n.param_ref,
                    "label": n.label,
                    "attrs": dict(n.attrs),
                }
                for n in (self.nodes[nid] for nid in self.topo_order())
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "Graph":
        nodes = [
            OpNode(
                id=nd["id"],
                kind=OpKind(nd["kind"]),
                domain=Domain(nd["domain"]),
                inputs=tuple(nd["inputs"]),
                param_ref=nd.get("param_ref"),
                label=nd.get("label", ""),
                attrs=nd.get("attrs", {}),
            )
            for nd in doc["nodes"]
        ]
        inputs = {name: Shape5(*shape) for name, shape in doc["inputs"].items()}
        return cls(nodes, inputs, doc["outputs"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "Graph":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


# ---------------------------------------------------------------------------
# shape inference
# ---------------------------------------------------------------------------

def infer_shapes(graph: Graph, input_shapes: Mapping[str, Shape5] | None = None) -> dict[str, Shape5]:
    """Output shape of every node plus the graph inputs.

    ``input_shapes`` overrides the graph's declared input shapes (used for
    chunked evaluation).
    """
    shapes: dict[str, Shape5] = {name: Shape5(*s) for name, s in (input_shapes or graph.inputs).items()}
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        try:
            in_shapes = [shapes[ref] for ref in node.inputs]
            shapes[nid] = output_shape(node.kind, in_shapes, node.attrs)
        except KeyError as exc:
            raise ShapeInferenceFailure(f"node {nid!r}: missing input shape {exc}") from exc
        except Exception as exc:
            raise ShapeInferenceFailure(f"node {nid!r}: {exc}") from exc
    return shapes


# ---------------------------------------------------------------------------
# receptive fields
# ---------------------------------------------------------------------------

def check_chain(graph: Graph, segment: Sequence[str]) -> list[OpNode]:
    """Validate that segment is a connected single-input chain; return nodes."""
    if not segment:
        raise NotAChain("empty segment")
    nodes = []
    for i, nid in enumerate(segment):
        if nid not in graph.nodes:
            raise NotAChain(f"unknown node {nid!r}")
        node = graph.nodes[nid]
        if len(node.inputs) != 1:
            raise NotAChain(f"node {nid!r} has {len(node.inputs)} inputs; chains are single-input")
        if i > 0 and node.inputs[0] != segment[i - 1]:
            raise NotAChain(f"node {nid!r} does not consume {segment[i - 1]!r}")
        nodes.append(node)
    return nodes


def _compose_rf(nodes: Sequence[OpNode], axis: str) -> float:
    rf = 1.0
    jump = 1.0
    for node in nodes:
        info = KIND_INFO[node.kind]
        extent = info.rf[axis]
        if math.isinf(extent) or math.isinf(rf):
            return math.inf
        rf += (extent - 1) * jump
        jump *= info.stride.get(axis, 1)
    return rf


def receptive_field(graph: Graph, segment: Sequence[str], axis: str):
    """Composed receptive-field extent of a chain along bt, h, or w.

    1 means element-independent along that axis. Returns math.inf for
    globally-coupled chains (norms over the axis, attention).
    """
    nodes = check_chain(graph, segment)
    if axis == "bt":
        rf_b = _compose_rf(nodes, "b")
        if rf_b != 1:
            return math.inf
        rf = _compose_rf(nodes, "t")
    elif axis in ("h", "w"):
        rf = _compose_rf(nodes, axis)
    else:
        raise NotAChain(f"unknown axis {axis!r}; expected bt, h, or w")
    if math.isinf(rf):
        return math.inf
    return int(math.ceil(rf))
