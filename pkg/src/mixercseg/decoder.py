"""Spatial-refinement multi-level fusion and the segmentation head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Module
from .autodiff.tensor import Tensor
from .exceptions import ConfigError

PYRAMID_LEVELS = 4


@dataclass
class FusionInfo:
    alpha: Optional[np.ndarray]
    upsampled: List[np.ndarray]
    refined: List[np.ndarray]


def _check_levels(levels: Sequence[Tensor]) -> None:
    if len(levels) != PYRAMID_LEVELS:
        raise ConfigError(f"fusion expects {PYRAMID_LEVELS} pyramid levels, got {len(levels)}")


class SpatialRefinementFusion(Module):
    """Reweight upsampled deeper levels by a sigmoid map computed from level 1.

    ``alpha = sigmoid(Conv1x1(F1))`` is a single-channel ``[1, H1, W1]`` map;
    levels 2..4 are bilinearly upsampled to ``(H1, W1)`` and multiplied by it;
    level 1 passes through unchanged. Returns the channel concatenation.
    """

    def __init__(self, c1: int, rng: np.random.Generator) -> None:
        self.attn = Conv2d(c1, 1, 1, rng)

    def forward(self, levels: Sequence[Tensor]) -> Tuple[Tensor, FusionInfo]:
        _check_levels(levels)
        first = levels[0]
        size = first.shape[-2:]
        alpha = ops.sigmoid(self.attn(first))
        ups, refined = [], []
        for level in levels[1:]:
            up = ops.upsample_bilinear(level, size)
            ups.append(up)
            refined.append(alpha * up)
        info = FusionInfo(alpha=alpha.data, upsampled=[u.data for u in ups], refined=[r.data for r in refined])
        return ops.concat([first] + refined, axis=0), info


class ConcatFusion(Module):
    """Ablation: upsample and concatenate with no spatial weighting."""

    def forward(self, levels: Sequence[Tensor]) -> Tuple[Tensor, FusionInfo]:
        _check_levels(levels)
        size = levels[0].shape[-2:]
        ups = [ops.upsample_bilinear(level, size) for level in levels[1:]]
        info = FusionInfo(alpha=None, upsampled=[u.data for u in ups], refined=[u.data for u in ups])
        return ops.concat([levels[0]] + ups, axis=0), info


def srf_fuse(levels: Sequence[Tensor], fusion: SpatialRefinementFusion) -> Tensor:
    return fusion(levels)[0]


class SegHead(Module):
    """Upsample to the output size, then a per-pixel MLP ending in one logit.

    The first 1x1 convolution is linear per pixel and bilinear weights sum to
    one, so it commutes with the resize; it runs before upsampling, on the
    fused resolution, and only ``hidden`` channels are resized.
    """

    def __init__(self, in_ch: int, rng: np.random.Generator, hidden: int = 64) -> None:
        self.hidden = Conv2d(in_ch, hidden, 1, rng)
        self.out = Conv2d(hidden, 1, 1, rng)

    def forward(self, fused: Tensor, size: Tuple[int, int]) -> Tensor:
        x = ops.upsample_bilinear(self.hidden(fused), size)
        return self.out(ops.relu(x))
