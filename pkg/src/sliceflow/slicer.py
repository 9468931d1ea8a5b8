"""Lossless feature slicing.

Two modes:

* spatial: slice over the merged batch x frames axis into ``k`` pieces of
  ``ceil(bt / k)`` samples, the remainder riding in the last (shorter)
  slice. Legal for chains whose receptive field along both batch and
  frames is 1.
* temporal: keep frames intact and tile the h x w grid into a
  ``k_h x k_w`` grid of ``ceil(H / k_h) x ceil(W / k_w)`` tiles (boundary
  tiles shorter). Legal for chains that are per-pixel along h and w.

Slices are materialized copies, never views, so the memory ledger's
accounting stays unambiguous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import (
    BadSliceCount,
    IncompleteCover,
    NotAChain,
    OverlappingRegions,
    PlanShapeMismatch,
)
from .graph import Graph, check_chain, receptive_field
from .kernels import KIND_INFO
from .tensor import Shape5, Tensor5D


class SliceMode(str, Enum):
    SPATIAL_BT = "spatial_bt"
    TEMPORAL_HW = "temporal_hw"


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------

def _ceil_chunks(extent: int, k: int, what: str) -> list[int]:
    """Chunk sizes of ceil(extent / k), remainder last, empties dropped."""
    if not 1 <= k <= extent:
        raise BadSliceCount(f"{what}: slice count {k} outside [1, {extent}]")
    step = math.ceil(extent / k)
    chunks = []
    off = 0
    while off < extent:
        chunks.append(min(step, extent - off))
        off += step
    return chunks


@dataclass(frozen=True)
class SlicePlan:
    mode: SliceMode
    k: int | None = None                       # spatial slice count
    k_h: int | None = None                     # temporal tile grid
    k_w: int | None = None
    extents: tuple[int, ...] = ()              # spatial: per-slice sample counts
    row_extents: tuple[int, ...] = ()          # temporal: per-tile-row heights
    col_extents: tuple[int, ...] = ()          # temporal: per-tile-col widths

    @property
    def n_slices(self) -> int:
        if self.mode is SliceMode.SPATIAL_BT:
            return len(self.extents)
        return len(self.row_extents) * len(self.col_extents)

    def to_json_dict(self) -> dict:
        if self.mode is SliceMode.SPATIAL_BT:
            return {"mode": self.mode.value, "k": self.k, "extents": list(self.extents)}
        return {
            "mode": self.mode.value,
            "k_h": self.k_h,
            "k_w": self.k_w,
            "extents": [list(self.row_extents), list(self.col_extents)],
        }


def plan_spatial(bt: int, k: int) -> SlicePlan:
    """Slice the merged batch x frames extent into k ceil-sized pieces.

    When ceil rounding covers the extent in fewer pieces, the realized
    slice count is smaller than k (every non-final slice still has
    ceil(bt / k) samples and the final one holds the remainder).
    """
    extents = _ceil_chunks(bt, k, "plan_spatial")
    assert sum(extents) == bt
    return SlicePlan(mode=SliceMode.SPATIAL_BT, k=k, extents=tuple(extents))


def plan_temporal(h: int, w: int, k_h: int, k_w: int) -> SlicePlan:
    """Tile the h x w grid into a ceil-sized k_h x k_w grid."""
    rows = _ceil_chunks(h, k_h, "plan_temporal rows")
    cols = _ceil_chunks(w, k_w, "plan_temporal cols")
    assert sum(rows) == h and sum(cols) == w
    return SlicePlan(mode=SliceMode.TEMPORAL_HW, k_h=k_h, k_w=k_w,
                     row_extents=tuple(rows), col_extents=tuple(cols))


def default_temporal_config(h: int, w: int) -> tuple[int, int]:
    """Default tile grid: at most 16 tiles per axis, never more than the extent."""
    return (min(h, 16), min(w, 16))


def paper_literal_temporal_config(h: int, w: int) -> tuple[int, int]:
    """Alternate preset taking max(extent, 16) per axis, clamped to the extent.

    For extents >= 16 this degenerates to one-pixel tiles; it is shipped for
    comparison only, not as the default.
    """
    return (min(max(h, 16), h), min(max(w, 16), w))

TEMPORAL_PRESETS = {
    "capped16": default_temporal_config,
    "paper-literal": paper_literal_temporal_config,
}


# ---------------------------------------------------------------------------
# sub-features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    """Axis-aligned index range inside the parent.

    Spatial slices address the merged bt axis; temporal tiles address the
    (h, w) grid and span all of b, t, c.
    """
    mode: SliceMode
    bt: tuple[int, int] | None = None
    rows: tuple[int, int] | None = None
    cols: tuple[int, int] | None = None


@dataclass(frozen=True)
class SubFeature:
    parent_shape: Shape5
    region: Region
    data: Tensor5D

    def __post_init__(self):
        p = self.parent_shape
        d = self.data.shape
        if self.region.mode is SliceMode.SPATIAL_BT:
            s, e = self.region.bt
            if not (0 <= s < e <= p.b * p.t):
                raise PlanShapeMismatch(f"bt range [{s}, {e}) outside parent bt={p.b * p.t}")
            if d != Shape5(1, e - s, p.c, p.h, p.w):
                raise PlanShapeMismatch(f"slice data shape {tuple(d)} does not match range [{s}, {e})")
        else:
            r0, r1 = self.region.rows
            c0, c1 = self.region.cols
            if not (0 <= r0 < r1 <= p.h and 0 <= c0 < c1 <= p.w):
                raise PlanShapeMismatch("tile region outside parent grid")
            if d != Shape5(p.b, p.t, p.c, r1 - r0, c1 - c0):
                raise PlanShapeMismatch(f"tile data shape {tuple(d)} does not match region")


def _plan_regions(shape: Shape5, plan: SlicePlan) -> list[Region]:
    if plan.mode is SliceMode.SPATIAL_BT:
        if sum(plan.extents) != shape.b * shape.t:
            raise PlanShapeMismatch(
                f"plan covers bt={sum(plan.extents)}, tensor has bt={shape.b * shape.t}")
        regions = []
        off = 0
        for n in plan.extents:
            regions.append(Region(mode=plan.mode, bt=(off, off + n)))
            off += n
        return regions
    if sum(plan.row_extents) != shape.h or sum(plan.col_extents) != shape.w:
        raise PlanShapeMismatch(
            f"plan tiles {sum(plan.row_extents)}x{sum(plan.col_extents)}, tensor is {shape.h}x{shape.w}")
    regions = []
    r0 = 0
    for rh in plan.row_extents:
        c0 = 0
        for cw in plan.col_extents:
            regions.append(Region(mode=plan.mode, rows=(r0, r0 + rh), cols=(c0, c0 + cw)))
            c0 += cw
        r0 += rh
    return regions


def extract_slice(x: Tensor5D, plan: SlicePlan, index: int) -> SubFeature:
    """Materialize one sub-feature (a copy, never a view)."""
    regions = _plan_regions(x.shape, plan)
    region = regions[index]
    shape = x.shape
    if plan.mode is SliceMode.SPATIAL_BT:
        s, e = region.bt
        merged = x.data.reshape(shape.b * shape.t, shape.c, shape.h, shape.w)
        data = merged[s:e].copy().reshape(1, e - s, shape.c, shape.h, shape.w)
    else:
        r0, r1 = region.rows
        c0, c1 = region.cols
        data = np.ascontiguousarray(x.data[:, :, :, r0:r1, c0:c1])
    return SubFeature(parent_shape=shape, region=region, data=Tensor5D(data))


def slice_tensor(x: Tensor5D, plan: SlicePlan) -> list[SubFeature]:
    """Split a tensor into disjoint sub-features covering it exactly."""
    return [extract_slice(x, plan, i) for i in range(len(_plan_regions(x.shape, plan)))]


def unslice(parts: Sequence[SubFeature]) -> Tensor5D:
    """Reassemble sub-features; exact inverse of slice_tensor, bit for bit."""
    if not parts:
        raise IncompleteCover("no sub-features to reassemble")
    parent = parts[0].parent_shape
    mode = parts[0].region.mode
    for p in parts:
        if p.parent_shape != parent or p.region.mode is not mode:
            raise PlanShapeMismatch("sub-features disagree on parent shape or mode")
    dtype = parts[0].data.dtype
    if mode is SliceMode.SPATIAL_BT:
        ranges = sorted((p.region.bt for p in parts))
        off = 0
        for s, e in ranges:
            if s < off:
                raise OverlappingRegions(f"bt ranges overlap at {s}")
            if s > off:
                raise IncompleteCover(f"bt range [{off}, {s}) uncovered")
            off = e
        if off != parent.b * parent.t:
            raise IncompleteCover(f"bt range [{off}, {parent.b * parent.t}) uncovered")
        out = np.empty(tuple(parent), dtype=dtype)
        merged = out.reshape(parent.b * parent.t, parent.c, parent.h, parent.w)
        for p in parts:
            s, e = p.region.bt
            merged[s:e] = p.data.data.reshape(e - s, parent.c, parent.h, parent.w)
        return Tensor5D(out)
    # temporal tiles: verify exact grid cover
    covered = np.zeros((parent.h, parent.w), dtype=np.int32)
    for p in parts:
        r0, r1 = p.region.rows
        c0, c1 = p.region.cols
        covered[r0:r1, c0:c1] += 1
    if (covered > 1).any():
        raise OverlappingRegions("tile regions overlap")
    if (covered == 0).any():
        raise IncompleteCover("tile regions leave gaps")
    out = np.empty(tuple(parent), dtype=dtype)
    for p in parts:
        r0, r1 = p.region.rows
        c0, c1 = p.region.cols
        out[:, :, :, r0:r1, c0:c1] = p.data.data
    return Tensor5D(out)


# ---------------------------------------------------------------------------
# legality
# ---------------------------------------------------------------------------

def validate_lossless(graph: Graph, segment: Sequence[str], plan: SlicePlan) -> bool:
    """True iff per-slice execution of the chain is exact.

    Spatial plans require receptive field 1 along the merged batch x frames
    axis. Temporal plans require receptive field 1 along both h and w plus
    extent preservation (stride 1) so tile regions stay valid through the
    chain. Raises NotAChain for segments that are not single-input chains.
    """
    nodes = check_chain(graph, segment)
    if plan.mode is SliceMode.SPATIAL_BT:
        return receptive_field(graph, segment, "bt") == 1
    for axis in ("h", "w"):
        if receptive_field(graph, segment, axis) != 1:
            return False
        for node in nodes:
            if KIND_INFO[node.kind].stride.get(axis, 1) != 1:
                return False
    return True
