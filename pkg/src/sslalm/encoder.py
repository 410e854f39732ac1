"""Hierarchical state-space audio encoder and the audio-token bridge.

Four groups of selective state-space blocks over spectrogram patches, with
spatial downsampling (and channel doubling) between the first three groups.
The bridge turns the final feature map into a short sequence of soft audio
tokens in the language model's embedding space via a stride-2 conv and a
linear projection. A weight-free shape calculator traces the same
arithmetic for the CLI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .block import BlockWeights, block_forward
from .errors import ConfigError
from .tensor import Tensor

__all__ = [
    "Spectrogram", "EncoderConfig", "EncoderWeights",
    "patch_embed", "group_forward", "downsample", "encoder_forward",
    "mean_pool", "bridge_forward", "shape_calculator",
    "count_encoder_params",
]


@dataclass
class Spectrogram:
    """Time-frequency input: frames (T, F) plus frame-rate metadata."""

    frames: np.ndarray
    frame_rate: float = 100.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ConfigError("Spectrogram: frames must be 2-d, got %r"
                              % (self.frames.shape,))
        if not np.all(np.isfinite(self.frames)):
            raise ConfigError("Spectrogram: non-finite values")


@dataclass
class EncoderConfig:
    stem_patch: int = 4
    group_depths: tuple = (2, 2, 6, 2)
    group_dims: tuple = (96, 192, 384, 768)
    bridge_out_dim: int = 2560
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4

    def __post_init__(self):
        if len(self.group_depths) != 4 or len(self.group_dims) != 4:
            raise ConfigError("EncoderConfig: exactly four groups required")
        for a, b in zip(self.group_dims, self.group_dims[1:]):
            if b != 2 * a:
                raise ConfigError("EncoderConfig: dims must double per group, got %r"
                                  % (self.group_dims,))

    @property
    def total_downsample(self) -> int:
        return self.stem_patch * 8  # three 2x transitions after the stem


@dataclass
class EncoderWeights:
    stem_w: Tensor                      # (patch*patch, dim0)
    stem_b: Tensor                      # (dim0,)
    groups: list                        # 4 lists of BlockWeights
    down_w: list                        # 3 Tensors (4*D, 2*D)
    down_b: list                        # 3 Tensors (2*D,)
    bridge_conv_w: Tensor               # (3, 3, D3, D3)
    bridge_conv_b: Tensor               # (D3,)
    bridge_lin_w: Tensor                # (D3, out_dim)
    bridge_lin_b: Tensor                # (out_dim,)
    config: EncoderConfig = field(default=None)

    @staticmethod
    def init(cfg: EncoderConfig, rng: np.random.Generator | None = None) -> "EncoderWeights":
        rng = rng or np.random.default_rng(0)

        def w(*shape, scale=0.02):
            return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        p = cfg.stem_patch
        dims = cfg.group_dims
        groups = [[BlockWeights.init(d, expand=cfg.expand, d_state=cfg.d_state,
                                     conv_width=cfg.conv_width, rng=rng)
                   for _ in range(depth)]
                  for d, depth in zip(dims, cfg.group_depths)]
        return EncoderWeights(
            stem_w=w(p * p, dims[0]), stem_b=zeros(dims[0]),
            groups=groups,
            down_w=[w(4 * d, 2 * d) for d in dims[:3]],
            down_b=[zeros(2 * d) for d in dims[:3]],
            bridge_conv_w=w(3, 3, dims[3], dims[3]),
            bridge_conv_b=zeros(dims[3]),
            bridge_lin_w=w(dims[3], cfg.bridge_out_dim),
            bridge_lin_b=zeros(cfg.bridge_out_dim),
            config=cfg,
        )

    def params(self) -> dict[str, Tensor]:
        out = {"stem.w": self.stem_w, "stem.b": self.stem_b}
        for gi, blocks in enumerate(self.groups):
            for bi, blk in enumerate(blocks):
                for name, t in blk.params().items():
                    out["group%d.block%d.%s" % (gi, bi, name)] = t
        for i, (dw, db) in enumerate(zip(self.down_w, self.down_b)):
            out["down%d.w" % i] = dw
            out["down%d.b" % i] = db
        out.update({"bridge.conv_w": self.bridge_conv_w,
                    "bridge.conv_b": self.bridge_conv_b,
                    "bridge.lin_w": self.bridge_lin_w,
                    "bridge.lin_b": self.bridge_lin_b})
        return out


def patch_embed(s: Spectrogram, weights: EncoderWeights) -> Tensor:
    """Non-overlapping patch projection: (T, F) -> (T/p, F/p, dim0)."""
    cfg = weights.config
    p = cfg.stem_patch
    t, f = s.frames.shape
    if t % p or f % p:
        raise ConfigError("patch_embed: %dx%d not divisible by patch %d" % (t, f, p))
    h0, w0 = t // p, f // p
    x = Tensor(s.frames)
    x = T.reshape(x, (h0, p, w0, p))
    x = T.transpose(x, (0, 2, 1, 3))
    x = T.reshape(x, (h0 * w0, p * p))
    x = T.add(T.matmul(x, weights.stem_w), weights.stem_b)
    return T.reshape(x, (h0, w0, cfg.group_dims[0]))


def group_forward(grid: Tensor, blocks: list) -> Tensor:
    """Run a group's blocks over the flattened raster sequence, bidirectionally.

    Each block is applied to the sequence in forward raster order and to its
    reversal (shared weights); the two outputs are averaged.
    """
    if not blocks:
        raise ConfigError("group_forward: depth must be >= 1")
    h, w, d = grid.data.shape
    x = T.reshape(grid, (h * w, d))
    rev = (slice(None, None, -1), slice(None))
    for blk in blocks:
        fwd = block_forward(blk, x)
        bwd = T.tslice(block_forward(blk, T.tslice(x, rev)), rev)
        x = T.mul(T.add(fwd, bwd), Tensor(0.5))
    return T.reshape(x, (h, w, d))


def downsample(grid: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """2x2 neighborhood concat followed by a linear 4D -> 2D projection."""
    h, ww, d = grid.data.shape
    if h % 2 or ww % 2:
        raise ConfigError("downsample: odd grid %dx%d" % (h, ww))
    x = T.reshape(grid, (h // 2, 2, ww // 2, 2, d))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    x = T.reshape(x, (h // 2 * (ww // 2), 4 * d))
    x = T.add(T.matmul(x, w), b)
    return T.reshape(x, (h // 2, ww // 2, 2 * d))


def encoder_forward(s: Spectrogram, weights: EncoderWeights) -> Tensor:
    """patch_embed -> (group, downsample) x3 -> group -> feature map."""
    grid = patch_embed(s, weights)
    for i in range(3):
        grid = group_forward(grid, weights.groups[i])
        grid = downsample(grid, weights.down_w[i], weights.down_b[i])
    return group_forward(grid, weights.groups[3])


def mean_pool(feature_map: Tensor) -> Tensor:
    """Mean over the spatial grid; classification-mode summary embedding."""
    h, w, d = feature_map.data.shape
    return T.mean(T.reshape(feature_map, (h * w, d)), axis=0)


def bridge_forward(feature_map: Tensor, weights: EncoderWeights) -> Tensor:
    """Feature map (H, W, D) -> (K, out_dim) audio tokens.

    Stride-2 conv (kernel 3, padding 1, channels preserved), raster flatten,
    then the linear map into the LM embedding size.
    """
    conv = T.conv2d(feature_map, weights.bridge_conv_w, weights.bridge_conv_b,
                    stride=2, pad=1)
    ho, wo, d = conv.data.shape
    flat = T.reshape(conv, (ho * wo, d))
    return T.add(T.matmul(flat, weights.bridge_lin_w), weights.bridge_lin_b)


def shape_calculator(cfg: EncoderConfig, input_shape: tuple) -> list[dict]:
    """Weight-free arithmetic trace of every stage; raises ConfigError with
    the failing stage name on indivisibility."""
    t, f = input_shape
    p = cfg.stem_patch
    if t % p or f % p:
        raise ConfigError("stem: input %dx%d not divisible by patch %d" % (t, f, p))
    h, w = t // p, f // p
    stages = [{"stage": "stem", "shape": (h, w, cfg.group_dims[0])}]
    for i in range(4):
        stages.append({"stage": "group%d" % i, "shape": (h, w, cfg.group_dims[i])})
        if i < 3:
            if h % 2 or w % 2:
                raise ConfigError("down%d: odd grid %dx%d" % (i, h, w))
            h, w = h // 2, w // 2
            stages.append({"stage": "down%d" % i, "shape": (h, w, cfg.group_dims[i + 1])})
    ho = (h + 2 - 3) // 2 + 1
    wo = (w + 2 - 3) // 2 + 1
    stages.append({"stage": "bridge_conv", "shape": (ho, wo, cfg.group_dims[3])})
    stages.append({"stage": "audio_tokens", "shape": (ho * wo, cfg.bridge_out_dim)})
    return stages


def _block_param_count(d: int, expand: int, d_state: int, conv_width: int) -> int:
    e = expand * d
    r = max(1, math.ceil(d / 16))
    return (d * 2 * e                    # in_proj
            + conv_width * e + e         # depthwise conv + bias
            + e * (r + 2 * d_state)      # x_proj
            + r * e + e                  # delta_proj + bias
            + e * d_state                # A_log
            + e                          # skip
            + e * d                      # out_proj
            + d)                         # norm scale


def count_encoder_params(cfg: EncoderConfig) -> dict[str, int]:
    """Exact parameter counts by group, matching EncoderWeights.init."""
    p = cfg.stem_patch
    dims = cfg.group_dims
    stem = p * p * dims[0] + dims[0]
    blocks = sum(depth * _block_param_count(d, cfg.expand, cfg.d_state, cfg.conv_width)
                 for d, depth in zip(dims, cfg.group_depths))
    down = sum(4 * d * 2 * d + 2 * d for d in dims[:3])
    bridge = (3 * 3 * dims[3] * dims[3] + dims[3]
              + dims[3] * cfg.bridge_out_dim + cfg.bridge_out_dim)
    return {"stem": stem, "blocks": blocks, "downsample": down, "bridge": bridge,
            "encoder_total": stem + blocks + down,
            "total": stem + blocks + down + bridge}
