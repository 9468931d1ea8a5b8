"""Operator kernels for the toy video U-Net.

Every kernel is a pure function: inputs are never mutated and identical
inputs produce bit-identical outputs. Beyond purity, the kernels guarantee a
stronger property that makes lossless slicing checkable at the bit level:
the value computed for one sample (a (b, t) frame for spatial operators, an
(h, w) pixel column for temporal operators) does not depend on how many
other samples share the batch. This is achieved by routing every channel
contraction through batched matmuls whose per-sample GEMM shape is fixed,
and every normalization through per-sample axis reductions.

Each kind declares its domain(s), per-axis receptive field, per-axis stride,
arity, and whether it could be computed in place. The receptive-field table
is the legality basis for slicing: extent 1 along an axis means the operator
is element-independent along that axis.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidParam, ShapeMismatch, ZeroNorm
from .tensor import Shape5, Tensor5D, resolve_dtype

FULL = math.inf  # receptive field covering the whole axis


class Domain(str, Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"
    BOUNDARY = "boundary"


class OpKind(str, Enum):
    CONV2D = "conv2d"                      # 3x3, stride 1, zero pad 1
    TEMPORAL_CONV = "temporal_conv"        # kernel 3 along t, pad 1, spatial extent 1
    GROUP_NORM = "group_norm"
    LAYER_NORM = "layer_norm"              # per-position channel normalization
    SILU = "silu"
    LINEAR = "linear"                      # per-position channel mixing
    SPATIAL_ATTENTION = "spatial_attention"    # per-frame token attention over h*w
    TEMPORAL_ATTENTION = "temporal_attention"  # per-pixel attention over t
    DOWNSAMPLE2X = "downsample2x"          # 2x2 mean pool
    UPSAMPLE2X = "upsample2x"              # nearest neighbor
    ADD = "add"
    CONCAT = "concat"                      # channel axis
    SPLIT = "split"                        # channel axis


@dataclass(frozen=True)
class KindInfo:
    """Static metadata every kind declares."""

    domains: frozenset
    arity: int | None          # None = variadic (>= 2)
    rf: Mapping[str, float]    # receptive-field extent along b, t, h, w
    stride: Mapping[str, float] = field(default_factory=lambda: {"h": 1, "w": 1})
    inplace: bool = False


def _rf(b=1, t=1, h=1, w=1):
    return {"b": b, "t": t, "h": h, "w": w}


KIND_INFO: dict[OpKind, KindInfo] = {
    OpKind.CONV2D: KindInfo(frozenset({Domain.SPATIAL}), 1, _rf(h=3, w=3)),
    OpKind.TEMPORAL_CONV: KindInfo(frozenset({Domain.TEMPORAL}), 1, _rf(t=3)),
    OpKind.GROUP_NORM: KindInfo(frozenset({Domain.SPATIAL}), 1, _rf(h=FULL, w=FULL), inplace=True),
    OpKind.LAYER_NORM: KindInfo(frozenset({Domain.SPATIAL, Domain.TEMPORAL}), 1, _rf(), inplace=True),
    OpKind.SILU: KindInfo(frozenset({Domain.SPATIAL, Domain.TEMPORAL}), 1, _rf(), inplace=True),
    OpKind.LINEAR: KindInfo(frozenset({Domain.SPATIAL, Domain.TEMPORAL}), 1, _rf()),
    OpKind.SPATIAL_ATTENTION: KindInfo(frozenset({Domain.SPATIAL}), 1, _rf(h=FULL, w=FULL)),
    OpKind.TEMPORAL_ATTENTION: KindInfo(frozenset({Domain.TEMPORAL}), 1, _rf(t=FULL)),
    OpKind.DOWNSAMPLE2X: KindInfo(frozenset({Domain.SPATIAL}), 1, _rf(h=2, w=2), stride={"h": 2, "w": 2}),
    OpKind.UPSAMPLE2X: KindInfo(frozenset({Domain.SPATIAL}), 1, _rf(), stride={"h": 0.5, "w": 0.5}),
    OpKind.ADD: KindInfo(frozenset({Domain.BOUNDARY}), 2, _rf(), inplace=True),
    OpKind.CONCAT: KindInfo(frozenset({Domain.BOUNDARY}), None, _rf()),
    OpKind.SPLIT: KindInfo(frozenset({Domain.BOUNDARY}), 1, _rf()),
}


def scratch_bytes(kind: OpKind, in_shape: Shape5, itemsize: int) -> int:
    """Payload bytes of the kernel's dominant working buffer.

    Attention kernels materialize a token-squared score matrix; that buffer
    is the quadratic-memory term the slicer targets, so it is modeled as
    first-class working memory. Linear-factor scratch (padding copies,
    layout transposes) is an implementation detail and is not charged.
    """
    b, t, c, h, w = in_shape
    if kind is OpKind.SPATIAL_ATTENTION:
        return b * t * (h * w) ** 2 * itemsize
    if kind is OpKind.TEMPORAL_ATTENTION:
        return b * h * w * t * t * itemsize
    return 0


# ---------------------------------------------------------------------------
# shape rules
# ---------------------------------------------------------------------------

def output_shape(kind: OpKind, in_shapes: Sequence[Shape5], attrs: Mapping | None = None) -> Shape5:
    """Static output shape for a kind, without touching weights."""
    attrs = attrs or {}
    info = KIND_INFO[kind]
    if info.arity is not None and len(in_shapes) != info.arity:
        raise ShapeMismatch(f"{kind.value} takes {info.arity} input(s), got {len(in_shapes)}")
    if info.arity is None and len(in_shapes) < 2:
        raise ShapeMismatch(f"{kind.value} takes at least 2 inputs")
    s = in_shapes[0]
    if kind is OpKind.CONV2D:
        return s.replace(c=int(attrs["out_channels"]))
    if kind is OpKind.TEMPORAL_CONV:
        return s.replace(c=int(attrs["out_channels"]))
    if kind is OpKind.LINEAR:
        return s.replace(c=int(attrs["out_features"]))
    if kind is OpKind.GROUP_NORM:
        g = int(attrs.get("groups", 1))
        if g < 1 or s.c % g != 0:
            raise InvalidParam(f"group_norm groups={g} does not divide channels={s.c}")
        return s
    if kind in (OpKind.LAYER_NORM, OpKind.SILU, OpKind.SPATIAL_ATTENTION, OpKind.TEMPORAL_ATTENTION):
        return s
    if kind is OpKind.DOWNSAMPLE2X:
        if s.h % 2 or s.w % 2:
            raise ShapeMismatch(f"downsample2x needs even h, w; got {s.h}x{s.w}")
        return s.replace(h=s.h // 2, w=s.w // 2)
    if kind is OpKind.UPSAMPLE2X:
        return s.replace(h=2 * s.h, w=2 * s.w)
    if kind is OpKind.ADD:
        a, b2 = in_shapes
        if a == b2:
            return a
        # bias form: one operand may collapse h and w to 1
        if a[:3] == b2[:3] and b2.h == 1 and b2.w == 1:
            return a
        if a[:3] == b2[:3] and a.h == 1 and a.w == 1:
            return b2
        raise ShapeMismatch(f"add operands incompatible: {tuple(a)} vs {tuple(b2)}")
    if kind is OpKind.CONCAT:
        base = s.replace(c=0)
        total = 0
        for sh in in_shapes:
            if sh.replace(c=0) != base:
                raise ShapeMismatch(f"concat operands differ outside channel axis: {tuple(sh)} vs {tuple(s)}")
            total += sh.c
        return s.replace(c=total)
    if kind is OpKind.SPLIT:
        sizes = list(attrs["sizes"])
        index = int(attrs["index"])
        if sum(sizes) != s.c:
            raise InvalidParam(f"split sizes {sizes} do not sum to channels={s.c}")
        if not 0 <= index < len(sizes):
            raise InvalidParam(f"split index {index} out of range for {len(sizes)} parts")
        return s.replace(c=sizes[index])
    raise InvalidParam(f"unknown kind {kind}")


# ---------------------------------------------------------------------------
# kernel implementations
# ---------------------------------------------------------------------------

# 3x3 tap offsets in fixed row-major order; the accumulation order over taps
# is part of the bit-level contract.
_CONV_TAPS = [(dy, dx) for dy in range(3) for dx in range(3)]


def _require(params: Mapping, name: str, kind: OpKind) -> np.ndarray:
    if params is None or name not in params:
        raise InvalidParam(f"{kind.value} requires parameter {name!r}")
    return params[name]


def _conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, t, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c or (kh, kw) != (3, 3):
        raise InvalidParam(f"conv2d weight shape {weight.shape} incompatible with input channels {c}")
    bt = b * t
    frames = x.reshape(bt, c, h, w)
    padded = np.zeros((bt, h + 2, w + 2, c), dtype=x.dtype)
    padded[:, 1:h + 1, 1:w + 1, :] = frames.transpose(0, 2, 3, 1)
    acc = None
    for dy, dx in _CONV_TAPS:
        win = padded[:, dy:dy + h, dx:dx + w, :].reshape(bt, h * w, c)
        tap = np.ascontiguousarray(weight[:, :, dy, dx].T)  # (c, co)
        term = np.matmul(win, tap)  # per-frame GEMM (h*w, c) @ (c, co)
        if acc is None:
            acc = term
        else:
            acc += term
    acc += bias.astype(x.dtype)
    out = acc.reshape(bt, h, w, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out).reshape(b, t, co, h, w)


def _temporal_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, t, c, h, w = x.shape
    co, ci, kt = weight.shape
    if ci != c or kt != 3:
        raise InvalidParam(f"temporal_conv weight shape {weight.shape} incompatible with input channels {c}")
    # pixel-major layout: (b, h, w, t+2, c); slicing never changes the
    # per-pixel GEMM shape (t, c) @ (c, co)
    padded = np.zeros((b, h, w, t + 2, c), dtype=x.dtype)
    padded[:, :, :, 1:t + 1, :] = x.transpose(0, 3, 4, 1, 2)
    pix = b * h * w
    acc = None
    for off in range(3):
        win = padded[:, :, :, off:off + t, :].reshape(pix, t, c)
        tap = np.ascontiguousarray(weight[:, :, off].T)  # (c, co)
        term = np.matmul(win, tap)
        if acc is None:
            acc = term
        else:
            acc += term
    acc += bias.astype(x.dtype)
    out = acc.reshape(b, h, w, t, co).transpose(0, 3, 4, 1, 2)
    return np.ascontiguousarray(out)


def _group_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int, eps: float) -> np.ndarray:
    b, t, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise InvalidParam(f"group_norm groups={groups} does not divide channels={c}")
    xg = x.reshape(b, t, groups, c // groups, h, w)
    mu = xg.mean(axis=(3, 4, 5), keepdims=True)
    var = np.square(xg - mu).mean(axis=(3, 4, 5), keepdims=True)
    y = (xg - mu) / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    y = y.reshape(b, t, c, h, w)
    return y * gamma.astype(x.dtype)[None, None, :, None, None] + beta.astype(x.dtype)[None, None, :, None, None]


def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=2, keepdims=True)
    var = np.square(x - mu).mean(axis=2, keepdims=True)
    y = (x - mu) / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    return y * gamma.astype(x.dtype)[None, None, :, None, None] + beta.astype(x.dtype)[None, None, :, None, None]


def _silu(x: np.ndarray) -> np.ndarray:
    # numerically safe logistic: never exponentiates a positive argument
    pos = x >= 0
    z = np.where(pos, -x, x)
    ez = np.exp(z)
    sig = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return (x * sig).astype(x.dtype, copy=False)


def _linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, t, c, h, w = x.shape
    f, ci = weight.shape
    if ci != c:
        raise InvalidParam(f"linear weight shape {weight.shape} incompatible with input channels {c}")
    # per-token GEMM (1, c) @ (c, f): stable under slicing along any axis
    tok = np.ascontiguousarray(x.transpose(0, 1, 3, 4, 2)).reshape(b * t * h * w, 1, c)
    y = np.matmul(tok, np.ascontiguousarray(weight.T))
    y += bias.astype(x.dtype)
    out = y.reshape(b, t, h, w, f).transpose(0, 1, 4, 2, 3)
    return np.ascontiguousarray(out)


def _softmax_last(scores: np.ndarray) -> np.ndarray:
    scores = scores - scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def _attention(tokens: np.ndarray, params: Mapping, dtype) -> np.ndarray:
    """Single-head dense attention over token stacks (batch, n, c)."""
    wq = params["wq"].astype(dtype)
    wk = params["wk"].astype(dtype)
    wv = params["wv"].astype(dtype)
    wo = params["wo"].astype(dtype)
    c = tokens.shape[-1]
    if wq.shape != (c, c):
        raise InvalidParam(f"attention weights must be ({c}, {c}), got {wq.shape}")
    q = np.matmul(tokens, wq)
    k = np.matmul(tokens, wk)
    v = np.matmul(tokens, wv)
    scores = np.matmul(q, k.transpose(0, 2, 1))
    scores *= np.asarray(1.0 / math.sqrt(c), dtype=dtype)
    weights = _softmax_last(scores)
    ctx = np.matmul(weights, v)
    return np.matmul(ctx, wo)


def _spatial_attention(x: np.ndarray, params: Mapping) -> np.ndarray:
    b, t, c, h, w = x.shape
    tokens = np.ascontiguousarray(x.reshape(b * t, c, h * w).transpose(0, 2, 1))
    out = _attention(tokens, params, x.dtype)
    out = out.transpose(0, 2, 1).reshape(b, t, c, h, w)
    return np.ascontiguousarray(out)


def _temporal_attention(x: np.ndarray, params: Mapping) -> np.ndarray:
    b, t, c, h, w = x.shape
    tokens = np.ascontiguousarray(x.transpose(0, 3, 4, 1, 2)).reshape(b * h * w, t, c)
    out = _attention(tokens, params, x.dtype)
    out = out.reshape(b, h, w, t, c).transpose(0, 3, 4, 1, 2)
    return np.ascontiguousarray(out)


def _downsample2x(x: np.ndarray) -> np.ndarray:
    b, t, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"downsample2x needs even h, w; got {h}x{w}")
    s = (x[..., 0::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 0::2] + x[..., 1::2, 1::2])
    return (s * np.asarray(0.25, dtype=x.dtype)).astype(x.dtype, copy=False)


def _upsample2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=3).repeat(2, axis=4)


def apply_kernel(kind: OpKind, inputs: Sequence[Tensor5D], params: Mapping | None = None,
                 attrs: Mapping | None = None) -> Tensor5D:
    """Apply one operator kernel. Pure: inputs are never mutated."""
    attrs = attrs or {}
    shapes = [x.shape for x in inputs]
    output_shape(kind, shapes, attrs)  # validates arity and extents up front
    arrays = [x.data for x in inputs]
    x = arrays[0]

    if kind is OpKind.CONV2D:
        out = _conv2d(x, _require(params, "weight", kind), _require(params, "bias", kind))
    elif kind is OpKind.TEMPORAL_CONV:
        out = _temporal_conv(x, _require(params, "weight", kind), _require(params, "bias", kind))
    elif kind is OpKind.GROUP_NORM:
        out = _group_norm(x, _require(params, "gamma", kind), _require(params, "beta", kind),
                          int(attrs.get("groups", 1)), float(attrs.get("eps", 1e-5)))
    elif kind is OpKind.LAYER_NORM:
        out = _layer_norm(x, _require(params, "gamma", kind), _require(params, "beta", kind),
                          float(attrs.get("eps", 1e-5)))
    elif kind is OpKind.SILU:
        out = _silu(x)
    elif kind is OpKind.LINEAR:
        out = _linear(x, _require(params, "weight", kind), _require(params, "bias", kind))
    elif kind is OpKind.SPATIAL_ATTENTION:
        out = _spatial_attention(x, params or {})
    elif kind is OpKind.TEMPORAL_ATTENTION:
        out = _temporal_attention(x, params or {})
    elif kind is OpKind.DOWNSAMPLE2X:
        out = _downsample2x(x)
    elif kind is OpKind.UPSAMPLE2X:
        out = _upsample2x(x)
    elif kind is OpKind.ADD:
        a, b2 = arrays
        if a.shape[3:] == (1, 1) and b2.shape[3:] != (1, 1):
            a, b2 = b2, a
        out = a + b2
    elif kind is OpKind.CONCAT:
        out = np.concatenate(arrays, axis=2)
    elif kind is OpKind.SPLIT:
        sizes = list(attrs["sizes"])
        index = int(attrs["index"])
        off = sum(sizes[:index])
        out = np.ascontiguousarray(x[:, :, off:off + sizes[index]])
    else:
        raise InvalidParam(f"unknown kind {kind}")
    return Tensor5D(np.ascontiguousarray(out))


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------

def cosine_similarity(a: Tensor5D, b: Tensor5D) -> float:
    """Cosine of the angle between two feature maps, flattened.

    Accumulated in float64 regardless of input dtype; the result is clipped
    into [-1, 1] to absorb last-ulp rounding.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    af = a.data.ravel().astype(np.float64)
    bf = b.data.ravel().astype(np.float64)
    daa = float(np.dot(af, af))
    dbb = float(np.dot(bf, bf))
    if daa == 0.0 or dbb == 0.0:
        raise ZeroNorm("cosine similarity undefined for an identically-zero tensor")
    dab = float(np.dot(af, bf))
    return min(1.0, max(-1.0, dab / math.sqrt(daa * dbb)))


# ---------------------------------------------------------------------------
# weight bundle
# ---------------------------------------------------------------------------

_BUNDLE_MAGIC = b"SLFW"


class WeightBundle:
    """Named parameter arrays per operator, keyed by param_ref.

    Serialized form: a 4-byte magic, a JSON header (entry order, shapes,
    byte offsets) length-prefixed with a little-endian uint32, then the raw
    little-endian float32 payload. See docs/formats.md.
    """

    def __init__(self, entries: dict[str, dict[str, np.ndarray]] | None = None):
        self.entries: dict[str, dict[str, np.ndarray]] = entries or {}

    def add(self, key: str, **arrays: np.ndarray) -> None:
        self.entries[key] = {name: np.asarray(arr) for name, arr in arrays.items()}

    def get(self, key: str) -> dict[str, np.ndarray]:
        if key not in self.entries:
            raise InvalidParam(f"weight bundle has no entry {key!r}")
        return self.entries[key]

    def astype(self, dtype) -> "WeightBundle":
        dt = resolve_dtype(dtype)
        return WeightBundle({
            key: {name: arr.astype(dt) for name, arr in group.items()}
            for key, group in self.entries.items()
        })

    def nbytes(self) -> int:
        return sum(arr.nbytes for group in self.entries.values() for arr in group.values())

    def save(self, path) -> None:
        header = []
        payload = bytearray()
        for key in sorted(self.entries):
            for name in sorted(self.entries[key]):
                arr = np.ascontiguousarray(self.entries[key][name], dtype="<f4")
                header.append({
                    "op": key,
                    "name": name,
                    "shape": list(arr.shape),
                    "offset": len(payload),
                })
                payload.extend(arr.tobytes())
        head = json.dumps({"entries": header}).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_BUNDLE_MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            fh.write(bytes(payload))

    @classmethod
    def load(cls, path) -> "WeightBundle":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _BUNDLE_MAGIC:
                raise InvalidParam(f"not a weight bundle: bad magic {magic!r}")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            payload = fh.read()
        bundle = cls()
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            off = entry["offset"]
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape)
            bundle.entries.setdefault(entry["op"], {})[entry["name"]] = arr.astype(np.float32)
        return bundle
