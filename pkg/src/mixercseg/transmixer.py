"""TransMixer: route SSM output channels to self-attention or local refinement.

After the scan, channels are ranked by their mean step size. The global slice
is mixed across tokens with scaled dot-product attention, the local slice is
refined by a pooled sigmoid gate on its spatial map, and the two slices are
scattered back into place before the Mamba output projection.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Identity, LayerNorm, Linear, Module
from .autodiff.tensor import Tensor
from .exceptions import ConfigError, ShapeError
from .ssm import RANK_DIRECTIONS, ChannelSplit, MambaBlock, ScanTrace, route_channels

LOCAL_POOLS = ("max", "avg")

__all__ = [
    "ChannelSplit",
    "LocalRefinement",
    "SelfAttention",
    "TransMixerBlock",
    "TransMixerConfig",
    "TransMixerStage",
    "merge",
    "split",
]


@dataclass
class TransMixerConfig:
    gamma: float = 0.5
    heads: int = 1
    rank_direction: str = "low-delta"
    local_pool: str = "max"
    depth: int = 1
    literal_delta: bool = False
    scan_directions: int = 1

    def validate(self) -> "TransMixerConfig":
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.rank_direction not in RANK_DIRECTIONS:
            raise ConfigError(f"rank_direction must be one of {RANK_DIRECTIONS}")
        if self.local_pool not in LOCAL_POOLS:
            raise ConfigError(f"local_pool must be one of {LOCAL_POOLS}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        return self

    def global_width(self, d: int) -> int:
        return int(math.floor(d * self.gamma + 1e-9))

    def to_dict(self) -> dict:
        return asdict(self)


def split(y: Tensor, cs: ChannelSplit) -> Tuple[Tensor, Tensor]:
    """Gather the global and local columns of ``y``."""
    if y.shape[-1] != cs.d:
        raise ShapeError(f"split: {y.shape[-1]} channels but the split covers {cs.d}")
    return ops.take(y, cs.g, axis=-1), ops.take(y, cs.l, axis=-1)


def merge(y_global: Tensor, y_local: Tensor, cs: ChannelSplit) -> Tensor:
    """Inverse of :func:`split`: write each slice back to its channel positions."""
    stacked = ops.concat([y_global, y_local], axis=-1)
    return ops.take(stacked, np.argsort(cs.permutation, kind="stable"), axis=-1)


class SelfAttention(Module):
    """Multi-head scaled dot-product attention without positional encoding."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator) -> None:
        if dim % heads:
            raise ConfigError(f"attention width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.o_proj = Linear(dim, dim, rng)
        self.last_weights: Optional[np.ndarray] = None

    def _heads(self, t: Tensor) -> Tensor:
        length = t.shape[0]
        return ops.transpose(ops.reshape(t, (length, self.heads, self.dim // self.heads)), (1, 0, 2))

    def forward(self, y: Tensor, *_) -> Tensor:
        length = y.shape[0]
        q, k, v = self._heads(self.q_proj(y)), self._heads(self.k_proj(y)), self._heads(self.v_proj(y))
        scale = 1.0 / math.sqrt(self.dim // self.heads)
        weights = ops.softmax(ops.matmul(q, ops.transpose(k, (0, 2, 1))) * scale, axis=-1)
        self.last_weights = weights.data
        mixed = ops.transpose(ops.matmul(weights, v), (1, 0, 2))
        return self.o_proj(ops.reshape(mixed, (length, self.dim)))


class LocalRefinement(Module):
    """``F * sigmoid(Conv1x1(pool(F)))`` on the normalised local channels."""

    def __init__(self, dim: int, rng: np.random.Generator, pool: str = "max") -> None:
        if pool not in LOCAL_POOLS:
            raise ConfigError(f"local_pool must be one of {LOCAL_POOLS}, got {pool!r}")
        self.dim = dim
        self.pool = pool
        self.norm = LayerNorm(dim)
        self.conv = Conv2d(dim, dim, 1, rng)

    def forward(self, y: Tensor, height: int, width: int) -> Tensor:
        length = y.shape[0]
        if length != height * width:
            raise ShapeError(f"local refinement: {length} tokens cannot form a {height}x{width} map")
        fmap = ops.reshape(ops.transpose(self.norm(y)), (self.dim, height, width))
        pool = ops.maxpool2d if self.pool == "max" else ops.avgpool2d
        gate = ops.sigmoid(self.conv(pool(fmap, 3, 1, 1)))
        refined = gate * fmap
        return ops.transpose(ops.reshape(refined, (self.dim, length)))


@dataclass
class BlockInfo:
    trace: ScanTrace
    split: ChannelSplit
    mixed: Tensor


class TransMixerBlock(Module):
    """Pre-norm residual TransMixer block on a ``[L, d]`` token sequence."""

    def __init__(self, d: int, state_dim: int, cfg: TransMixerConfig, rng: np.random.Generator) -> None:
        cfg.validate()
        self.d = d
        self.cfg = cfg
        self.d_global = cfg.global_width(d)
        self.d_local = d - self.d_global
        if self.d_global and self.d_global % cfg.heads:
            raise ConfigError(f"global width {self.d_global} is not divisible by {cfg.heads} heads")
        self.norm = LayerNorm(d)
        self.mamba = MambaBlock(d, state_dim, rng, literal_delta=cfg.literal_delta,
                                scan_directions=cfg.scan_directions)
        self.attention = SelfAttention(self.d_global, cfg.heads, rng) if self.d_global else Identity()
        self.refine = LocalRefinement(self.d_local, rng, cfg.local_pool) if self.d_local else Identity()

    def forward(self, tokens: Tensor, height: int, width: int) -> Tuple[Tensor, BlockInfo]:
        x, z = self.mamba.project_in(self.norm(tokens))
        y, trace = self.mamba.ssm(x, (height, width))
        cs = route_channels(trace, self.cfg.gamma, self.cfg.rank_direction)
        y_global, y_local = split(y, cs)
        if self.d_global:
            y_global = self.attention(y_global, height, width)
        if self.d_local:
            y_local = self.refine(y_local, height, width)
        mixed = merge(y_global, y_local, cs)
        out = tokens + self.mamba.project_out(mixed, z)
        return out, BlockInfo(trace=trace, split=cs, mixed=mixed)


class TransMixerStage(Module):
    """``depth`` TransMixer blocks applied to a ``[C, H, W]`` feature map."""

    def __init__(self, d: int, state_dim: int, cfg: TransMixerConfig, rng: np.random.Generator) -> None:
        self.blocks = [TransMixerBlock(d, state_dim, cfg, rng) for _ in range(cfg.depth)]

    def forward(self, fmap: Tensor) -> Tuple[Tensor, List[BlockInfo]]:
        c, h, w = fmap.shape
        tokens = ops.transpose(ops.reshape(fmap, (c, h * w)))
        infos = []
        for block in self.blocks:
            tokens, info = block(tokens, h, w)
            infos.append(info)
        return ops.reshape(ops.transpose(tokens), (c, h, w)), infos
