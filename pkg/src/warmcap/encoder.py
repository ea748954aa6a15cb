"""Image encoders producing an S x F grid of visual features.

Three variants share one output contract:

* ``cvt-mini``: multi-stage convolutional token embedding with attention whose
  Q/K/V come from depthwise 3x3 convolutions followed by a pointwise linear map.
* ``vit-mini``: one non-overlapping patch embedding, learned absolute position
  embeddings, and plain linear-projection attention.
* ``cnn-mini``: strided 3x3 convolutions only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import (
    MLP,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    fan_in_std,
    init_normal,
    merge_heads,
    scaled_dot_attention,
    split_heads,
)

VARIANTS = ("cvt-mini", "vit-mini", "cnn-mini")


class ConfigError(ValueError):
    """An encoder or decoder configuration is internally inconsistent."""


@dataclass(frozen=True)
class StageConfig:
    width: int
    depth: int
    heads: int
    kernel: int
    stride: int
    padding: int
    kv_stride: int = 1


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = "cvt-mini"
    image_width: int = 64
    channels: int = 3
    stages: Tuple[StageConfig, ...] = (
        StageConfig(32, 1, 1, 7, 4, 2),
        StageConfig(64, 2, 2, 3, 2, 1),
        StageConfig(96, 2, 3, 3, 2, 1),
    )
    mlp_ratio: int = 4
    channel_mean: Tuple[float, ...] = (0.5, 0.5, 0.5)
    channel_std: Tuple[float, ...] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(StageConfig(**s) if isinstance(s, dict) else s for s in self.stages))
        object.__setattr__(self, "channel_mean", tuple(self.channel_mean))
        object.__setattr__(self, "channel_std", tuple(self.channel_std))
        self.validate()

    @property
    def feature_dim(self) -> int:
        return self.stages[-1].width

    @property
    def grid_sizes(self) -> List[int]:
        sizes, size = [], self.image_width
        for st in self.stages:
            size = ad.conv_output_size(size, st.kernel, st.stride, st.padding)
            sizes.append(size)
        return sizes

    @property
    def grid(self) -> Tuple[int, int]:
        side = self.grid_sizes[-1]
        return side, side

    @property
    def num_positions(self) -> int:
        rows, cols = self.grid
        return rows * cols

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}; choose from {VARIANTS}")
        if not self.stages:
            raise ConfigError("encoder needs at least one stage")
        if len(self.channel_mean) != self.channels or len(self.channel_std) != self.channels:
            raise ConfigError("channel_mean/channel_std must have one entry per channel")
        factor = int(np.prod([s.stride for s in self.stages]))
        if self.image_width % factor:
            raise ConfigError(f"stage strides multiply to {factor}, which does not divide W={self.image_width}")
        size = self.image_width
        for i, st in enumerate(self.stages):
            expected = size // st.stride
            got = ad.conv_output_size(size, st.kernel, st.stride, st.padding)
            if got != expected or size % st.stride:
                raise ConfigError(
                    f"stage {i}: kernel {st.kernel}/stride {st.stride}/padding {st.padding} maps "
                    f"{size}x{size} to {got}x{got}, expected {expected}x{expected}"
                )
            if self.variant != "cnn-mini" and st.width % st.heads:
                raise ConfigError(f"stage {i}: width {st.width} not divisible by {st.heads} heads")
            if st.kv_stride < 1:
                raise ConfigError(f"stage {i}: kv_stride must be >= 1")
            size = expected

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["stages"] = tuple(StageConfig(**s) for s in d.get("stages", ()))
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "EncoderConfig":
        return replace(PRESETS[name], **overrides)


PRESETS = {
    "cvt-mini": EncoderConfig(),
    "vit-mini": EncoderConfig(variant="vit-mini", stages=(StageConfig(96, 4, 3, 16, 16, 0),)),
    "cnn-mini": EncoderConfig(
        variant="cnn-mini",
        stages=(
            StageConfig(24, 0, 1, 3, 2, 1),
            StageConfig(48, 0, 1, 3, 2, 1),
            StageConfig(72, 1, 1, 3, 2, 1),
            StageConfig(96, 1, 1, 3, 2, 1),
        ),
    ),
    # patch-8 token embedding then one strided stage; sized for repeated CPU experiments
    "cvt-tiny": EncoderConfig(
        stages=(StageConfig(32, 1, 2, 8, 8, 0), StageConfig(64, 1, 2, 3, 2, 1)),
    ),
    # the three-stage depth profile of CvT-21 at its published width; not a default
    "cvt-21": EncoderConfig(
        image_width=384,
        stages=(
            StageConfig(64, 1, 1, 7, 4, 2, 2),
            StageConfig(192, 4, 3, 3, 2, 1, 2),
            StageConfig(384, 16, 6, 3, 2, 1, 2),
        ),
    ),
    # small enough for exhaustive finite-difference checks
    "micro": EncoderConfig(
        image_width=8,
        stages=(StageConfig(8, 1, 1, 3, 2, 1), StageConfig(8, 1, 2, 3, 2, 1)),
        mlp_ratio=2,
    ),
}


@dataclass
class VisualFeatures:
    """Positions-major feature grid of one image."""

    grid: np.ndarray
    spatial_extent: Tuple[int, int]

    def __post_init__(self):
        rows, cols = self.spatial_extent
        if self.grid.ndim != 2 or self.grid.shape[0] != rows * cols:
            raise ShapeError(f"feature grid {self.grid.shape} does not match extent {self.spatial_extent}")

    @property
    def num_positions(self) -> int:
        return self.grid.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.grid.shape[1]

    @classmethod
    def from_channels_first(cls, grid: np.ndarray, spatial_extent) -> "VisualFeatures":
        """Accept an F x S producer output; transposes to S x F."""
        return cls(np.ascontiguousarray(np.asarray(grid).T), tuple(spatial_extent))


def tokens_to_grid(tokens: Tensor, hw: Tuple[int, int]) -> Tensor:
    b, t, c = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(b, c, hw[0], hw[1])


def grid_to_tokens(grid: Tensor) -> Tensor:
    b, c, h, w = grid.shape
    return grid.reshape(b, c, h * w).transpose(0, 2, 1)


class ConvProjection(Module):
    """Depthwise k x k convolution over the token grid followed by a pointwise linear map."""

    def __init__(self, width: int, rng: np.random.Generator, stride: int = 1, kernel: int = 3):
        self.depthwise = Conv2d(width, width, kernel, rng, stride=stride, padding=kernel // 2, groups=width, bias=False)
        self.linear = Linear(width, width, rng, std=fan_in_std(width))

    def forward(self, grid: Tensor) -> Tensor:
        return self.linear(grid_to_tokens(self.depthwise(grid)))

    def set_delta(self) -> None:
        """Make the depthwise stage the identity so only the linear map acts."""
        k = self.depthwise.weight.shape[-1]
        w = np.zeros_like(self.depthwise.weight.data)
        w[:, 0, k // 2, k // 2] = 1.0
        self.depthwise.weight.data = w


class ConvAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator, kv_stride: int = 1):
        self.heads = heads
        self.q = ConvProjection(width, rng, 1)
        self.k = ConvProjection(width, rng, kv_stride)
        self.v = ConvProjection(width, rng, kv_stride)
        self.proj = Linear(width, width, rng, std=fan_in_std(width))
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, tokens: Tensor, hw: Tuple[int, int]) -> Tensor:
        grid = tokens_to_grid(tokens, hw)
        q = split_heads(self.q(grid), self.heads)
        k = split_heads(self.k(grid), self.heads)
        v = split_heads(self.v(grid), self.heads)
        out, weights = scaled_dot_attention(q, k, v)
        self.last_weights = weights.data
        return self.proj(merge_heads(out))


class LinearAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(width, width, rng, std=fan_in_std(width))
        self.k = Linear(width, width, rng, std=fan_in_std(width))
        self.v = Linear(width, width, rng, std=fan_in_std(width))
        self.proj = Linear(width, width, rng, std=fan_in_std(width))
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, tokens: Tensor, hw: Tuple[int, int]) -> Tensor:
        q = split_heads(self.q(tokens), self.heads)
        k = split_heads(self.k(tokens), self.heads)
        v = split_heads(self.v(tokens), self.heads)
        out, weights = scaled_dot_attention(q, k, v)
        self.last_weights = weights.data
        return self.proj(merge_heads(out))

    @classmethod
    def from_conv(cls, conv: ConvAttention) -> "LinearAttention":
        """Plain attention sharing the pointwise maps of ``conv``."""
        lin = cls.__new__(cls)
        lin.heads = conv.heads
        lin.q, lin.k, lin.v = conv.q.linear, conv.k.linear, conv.v.linear
        lin.proj = conv.proj
        lin.last_weights = None
        return lin


class TransformerBlock(Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int, rng: np.random.Generator, conv: bool, kv_stride: int = 1):
        self.ln1 = LayerNorm(width)
        self.attn = ConvAttention(width, heads, rng, kv_stride) if conv else LinearAttention(width, heads, rng)
        self.ln2 = LayerNorm(width)
        self.mlp = MLP(width, width * mlp_ratio, rng, fan_in=True)

    def forward(self, x: Tensor, hw: Tuple[int, int]) -> Tensor:
        x = x + self.attn(self.ln1(x), hw)
        return x + self.mlp(self.ln2(x))


class AttentionStage(Module):
    def __init__(self, c_in: int, st: StageConfig, mlp_ratio: int, rng: np.random.Generator, conv: bool, n_pos: int = 0):
        self.embed = Conv2d(c_in, st.width, st.kernel, rng, stride=st.stride, padding=st.padding)
        self.embed_norm = LayerNorm(st.width)
        self.pos = init_normal(rng, (n_pos, st.width)) if n_pos else None
        self.blocks = [TransformerBlock(st.width, st.heads, mlp_ratio, rng, conv, st.kv_stride) for _ in range(st.depth)]

    def forward(self, grid: Tensor) -> Tuple[Tensor, Tuple[int, int]]:
        g = self.embed(grid)
        hw = (g.shape[2], g.shape[3])
        x = self.embed_norm(grid_to_tokens(g))
        if self.pos is not None:
            x = x + self.pos
        for block in self.blocks:
            x = block(x, hw)
        return x, hw


class ConvStage(Module):
    def __init__(self, c_in: int, st: StageConfig, rng: np.random.Generator):
        self.down = Conv2d(c_in, st.width, st.kernel, rng, stride=st.stride, padding=st.padding)
        self.refine = [Conv2d(st.width, st.width, 3, rng, padding=1) for _ in range(st.depth)]

    def forward(self, grid: Tensor) -> Tensor:
        x = ad.gelu(self.down(grid))
        for conv in self.refine:
            x = x + ad.gelu(conv(x))
        return x


class VisionEncoder(Module):
    """E: image batch (B, C, W, W) -> features (B, S, F)."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        c_in = config.channels
        self.stages = []
        if config.variant == "cnn-mini":
            for st in config.stages:
                self.stages.append(ConvStage(c_in, st, rng))
                c_in = st.width
        else:
            conv = config.variant == "cvt-mini"
            sizes = config.grid_sizes
            for st, side in zip(config.stages, sizes):
                n_pos = side * side if config.variant == "vit-mini" else 0
                self.stages.append(AttentionStage(c_in, st, config.mlp_ratio, rng, conv, n_pos))
                c_in = st.width
        self.norm = LayerNorm(config.feature_dim)

    def check_images(self, images: np.ndarray) -> np.ndarray:
        cfg = self.config
        expected = (cfg.channels, cfg.image_width, cfg.image_width)
        arr = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1:] != expected:
            raise ShapeError(f"encoder expects images of shape {expected}, got {arr.shape[-3:] if arr.ndim >= 3 else arr.shape}")
        return arr

    def forward(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(self.check_images(images))
        if self.config.variant == "cnn-mini":
            for stage in self.stages:
                x = stage(x)
            tokens = grid_to_tokens(x)
        else:
            tokens = None
            for stage in self.stages:
                tokens, hw = stage(x)
                x = tokens_to_grid(tokens, hw)
        return self.norm(tokens)

    def encode(self, image) -> VisualFeatures:
        """Features of a single C x W x W image."""
        arr = self.check_images(image)
        if arr.shape[0] != 1:
            raise ShapeError(f"encode takes one image, got a batch of {arr.shape[0]}")
        with ad.no_grad():
            out = self.forward(Tensor(arr))
        return VisualFeatures(out.data[0].copy(), self.config.grid)

    def set_delta_projections(self) -> None:
        for m in self.modules():
            if isinstance(m, ConvProjection):
                m.set_delta()

    def with_linear_attention(self) -> "VisionEncoder":
        """Shallow twin whose conv-attention layers are replaced by plain attention sharing weights."""
        twin = VisionEncoder.__new__(VisionEncoder)
        twin.__dict__.update(self.__dict__)
        twin.stages = []
        for stage in self.stages:
            s = AttentionStage.__new__(AttentionStage)
            s.__dict__.update(stage.__dict__)
            s.blocks = []
            for block in stage.blocks:
                b = TransformerBlock.__new__(TransformerBlock)
                b.__dict__.update(block.__dict__)
                b.attn = LinearAttention.from_conv(block.attn)
                s.blocks.append(b)
            twin.stages.append(s)
        return twin


def encode(image, encoder: VisionEncoder) -> VisualFeatures:
    return encoder.encode(image)
