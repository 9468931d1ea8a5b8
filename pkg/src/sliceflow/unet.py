"""Builder for the toy video U-Net.

The network mirrors the common video-diffusion layout at desk scale: four
down-sampling blocks, a mid block, and four up-sampling blocks. Every block
holds a spatial residual block and a spatial attention layer, and a temporal
layer follows every spatial layer (temporal convolution after the residual
block, temporal attention after the attention layer). Up block ``b``
consumes the concatenation of the matching down-block output and the
previous up-block output.

The denoising step index enters through a sinusoidal embedding that each
residual block projects with its own Linear and adds as a bias after its
first convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig
from .graph import Graph, OpNode
from .kernels import Domain, OpKind, WeightBundle
from .tensor import Shape5, Tensor5D, resolve_dtype

# Label of the temporal layer whose output is cached and reused by skipped
# steps: the temporal layer following the residual block of the last
# up-sampling block. Everything strictly downstream of it (the attention
# layer, its temporal layer, and the output head) is recomputed on skipped
# steps; see rehash.compute_tail.
PROBE_LABEL = "up_blocks.3.temporal.0"

# Deepest temporal layer; used as the contrast probe in similarity analysis.
MID_PROBE_LABEL = "mid.temporal.0"

NORM_EPS = 1e-5


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 8
    channel_multipliers: tuple[int, int, int, int] = (1, 2, 4, 4)
    frames: int = 8
    height: int = 32
    width: int = 32
    batch: int = 1
    channels: int = 8            # latent channels in and out
    steps: int = 25
    cfg_doubling: bool = False   # guidance twin batch: doubles the executor input batch
    seed: int = 0
    norm_groups: int = 4
    init_gain: float = 2.5       # multiplier on the 1/sqrt(fan_in) weight scale
    emb_scale: float = 1.0       # magnitude of the sinusoidal step embedding

    @property
    def emb_channels(self) -> int:
        return 4 * self.base_channels

    @property
    def effective_batch(self) -> int:
        return 2 * self.batch if self.cfg_doubling else self.batch

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    def validate(self) -> "UNetConfig":
        if len(self.channel_multipliers) != 4:
            raise InvalidConfig("channel_multipliers must have length 4")
        for name in ("base_channels", "frames", "height", "width", "batch", "channels", "steps"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.height % 8 or self.width % 8:
            raise InvalidConfig("height and width must be divisible by 8 (three 2x downsamples)")
        for width in self.widths:
            if width % self.norm_groups:
                raise InvalidConfig(f"norm_groups={self.norm_groups} must divide block width {width}")
        # concat widths on the up path must stay divisible too
        w = self.widths
        for cat in (w[3] + w[3], w[2] + w[3], w[1] + w[2], w[0] + w[1]):
            if cat % self.norm_groups:
                raise InvalidConfig(f"norm_groups={self.norm_groups} must divide concat width {cat}")
        return self

    def input_shape(self) -> Shape5:
        return Shape5(self.effective_batch, self.frames, self.channels, self.height, self.width)

    def emb_shape(self) -> Shape5:
        return Shape5(self.effective_batch, self.frames, self.emb_channels, 1, 1)


def sinusoidal_step_embedding(step: int, dim: int, scale: float = 1.0) -> np.ndarray:
    """Smooth, deterministic embedding of the step index (float64)."""
    half = dim // 2
    denom = max(half - 1, 1)
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / denom)
    ang = step * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if emb.size < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.size)])
    return scale * emb


def step_embedding_tensor(cfg: UNetConfig, step: int, dtype="float32") -> Tensor5D:
    dt = resolve_dtype(dtype)
    emb = sinusoidal_step_embedding(step, cfg.emb_channels, cfg.emb_scale).astype(dt)
    out = np.broadcast_to(
        emb[None, None, :, None, None],
        tuple(cfg.emb_shape()),
    )
    return Tensor5D(np.ascontiguousarray(out))


class _Builder:
    def __init__(self, cfg: UNetConfig):
        self.cfg = cfg
        self.nodes: list[OpNode] = []
        self.rng = np.random.default_rng(cfg.seed)
        self.weights = WeightBundle()

    def _uniform(self, shape, fan_in: int) -> np.ndarray:
        scale = self.cfg.init_gain / math.sqrt(fan_in)
        return self.rng.uniform(-0.2, 0.2, size=shape) * scale

    def emit(self, label: str, kind: OpKind, domain: Domain, inputs: tuple[str, ...],
             attrs: dict | None = None, params: dict | None = None) -> str:
        param_ref = label if params else None
        self.nodes.append(OpNode(id=label, kind=kind, domain=domain, inputs=inputs,
                                 param_ref=param_ref, label=label, attrs=attrs or {}))
        if params:
            self.weights.add(label, **params)
        return label

    # -- layer helpers ------------------------------------------------------

    def conv2d(self, label, x, c_in, c_out):
        return self.emit(label, OpKind.CONV2D, Domain.SPATIAL, (x,),
                         attrs={"out_channels": c_out},
                         params={"weight": self._uniform((c_out, c_in, 3, 3), c_in * 9),
                                 "bias": np.zeros(c_out)})

    def temporal_conv(self, label, x, c):
        return self.emit(label, OpKind.TEMPORAL_CONV, Domain.TEMPORAL, (x,),
                         attrs={"out_channels": c},
                         params={"weight": self._uniform((c, c, 3), c * 3),
                                 "bias": np.zeros(c)})

    def group_norm(self, label, x, c):
        return self.emit(label, OpKind.GROUP_NORM, Domain.SPATIAL, (x,),
                         attrs={"groups": self.cfg.norm_groups, "eps": NORM_EPS},
                         params={"gamma": np.ones(c), "beta": np.zeros(c)})

    def layer_norm(self, label, x, c, domain):
        return self.emit(label, OpKind.LAYER_NORM, domain, (x,),
                         attrs={"eps": NORM_EPS},
                         params={"gamma": np.ones(c), "beta": np.zeros(c)})

    def linear(self, label, x, c_in, c_out, domain=Domain.SPATIAL):
        return self.emit(label, OpKind.LINEAR, domain, (x,),
                         attrs={"out_features": c_out},
                         params={"weight": self._uniform((c_out, c_in), c_in),
                                 "bias": np.zeros(c_out)})

    def attention(self, label, x, c, kind, domain):
        return self.emit(label, kind, domain, (x,),
                         params={name: self._uniform((c, c), c) for name in ("wq", "wk", "wv", "wo")})

    # -- composite layers ---------------------------------------------------

    def res_block(self, prefix, x, c_in, c_out) -> str:
        h = self.group_norm(f"{prefix}.res.norm1", x, c_in)
        h = self.emit(f"{prefix}.res.act1", OpKind.SILU, Domain.SPATIAL, (h,))
        h = self.conv2d(f"{prefix}.res.conv1", h, c_in, c_out)
        emb = self.linear(f"{prefix}.res.emb_proj", "step_emb", self.cfg.emb_channels, c_out)
        h = self.emit(f"{prefix}.res.emb_add", OpKind.ADD, Domain.BOUNDARY, (h, emb))
        h = self.group_norm(f"{prefix}.res.norm2", h, c_out)
        h = self.emit(f"{prefix}.res.act2", OpKind.SILU, Domain.SPATIAL, (h,))
        h = self.conv2d(f"{prefix}.res.conv2", h, c_out, c_out)
        shortcut = x
        if c_in != c_out:
            shortcut = self.linear(f"{prefix}.res.shortcut", x, c_in, c_out)
        return self.emit(f"{prefix}.res", OpKind.ADD, Domain.BOUNDARY, (h, shortcut))

    def temporal_conv_layer(self, base, x, c) -> str:
        h = self.layer_norm(f"{base}.ln", x, c, Domain.TEMPORAL)
        h = self.temporal_conv(f"{base}.conv1", h, c)
        h = self.emit(f"{base}.act", OpKind.SILU, Domain.TEMPORAL, (h,))
        h = self.temporal_conv(f"{base}.conv2", h, c)
        return self.emit(base, OpKind.ADD, Domain.BOUNDARY, (h, x))

    def spatial_attn_layer(self, base, x, c) -> str:
        h = self.layer_norm(f"{base}.ln", x, c, Domain.SPATIAL)
        h = self.attention(f"{base}.attn", h, c, OpKind.SPATIAL_ATTENTION, Domain.SPATIAL)
        return self.emit(base, OpKind.ADD, Domain.BOUNDARY, (h, x))

    def temporal_attn_layer(self, base, x, c) -> str:
        h = self.layer_norm(f"{base}.ln", x, c, Domain.TEMPORAL)
        h = self.attention(f"{base}.attn", h, c, OpKind.TEMPORAL_ATTENTION, Domain.TEMPORAL)
        return self.emit(base, OpKind.ADD, Domain.BOUNDARY, (h, x))

    def block(self, prefix, x, c_in, c_out) -> str:
        h = self.res_block(prefix, x, c_in, c_out)
        h = self.temporal_conv_layer(f"{prefix}.temporal.0", h, c_out)
        h = self.spatial_attn_layer(f"{prefix}.attn", h, c_out)
        h = self.temporal_attn_layer(f"{prefix}.temporal.1", h, c_out)
        return h


def build_toy_unet(cfg: UNetConfig) -> tuple[Graph, WeightBundle]:
    """Deterministic graph plus seeded weights for the given config.

    Building the same config twice yields identical graphs and bit-identical
    weights. Weights are generated in float64; cast per run dtype.
    """
    cfg.validate()
    b = _Builder(cfg)
    widths = cfg.widths

    x = b.conv2d("in_conv", "x", cfg.channels, widths[0])
    cur_c = widths[0]

    skips: list[tuple[str, int]] = []
    for i in range(4):
        x = b.block(f"down_blocks.{i}", x, cur_c, widths[i])
        cur_c = widths[i]
        skips.append((x, cur_c))
        if i < 3:
            x = b.emit(f"down_blocks.{i}.downsample", OpKind.DOWNSAMPLE2X, Domain.SPATIAL, (x,))

    x = b.res_block("mid", x, cur_c, widths[3])
    x = b.temporal_conv_layer("mid.temporal.0", x, widths[3])
    cur_c = widths[3]

    for i in range(4):
        skip_id, skip_c = skips[3 - i]
        x = b.emit(f"up_blocks.{i}.concat", OpKind.CONCAT, Domain.BOUNDARY, (skip_id, x))
        x = b.block(f"up_blocks.{i}", x, skip_c + cur_c, widths[3 - i])
        cur_c = widths[3 - i]
        if i < 3:
            x = b.emit(f"up_blocks.{i}.upsample", OpKind.UPSAMPLE2X, Domain.SPATIAL, (x,))

    x = b.group_norm("out_norm", x, cur_c)
    x = b.emit("out_act", OpKind.SILU, Domain.SPATIAL, (x,))
    x = b.conv2d("out_conv", x, cur_c, cfg.channels)

    graph = Graph(
        b.nodes,
        inputs={"x": cfg.input_shape(), "step_emb": cfg.emb_shape()},
        outputs=[x],
    )
    return graph, b.weights
