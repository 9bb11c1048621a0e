"""Direction-guided edge gated convolution.

A feature map is cut into non-overlapping views. For each view the
channel-mean image gives Sobel gradients, their angle in ``[0, pi]`` is
binned per cell into an orientation histogram weighted by bin centres, and
two convolutions plus pooling turn that histogram into a per-channel
embedding. The embedding biases a sigmoid gate over an edge convolution of the
view; views are stitched back and smoothed by one more edge convolution.

The histogram is a discrete function of the features, so it enters the graph
as a constant: gradients reach the embedding convolutions but not the
features through the angle computation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.decisions import decide
from .autodiff.nn import Conv2d, LayerNorm, Module
from .autodiff.tensor import Tensor
from .exceptions import ConfigError

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
ZERO_GRADIENT = 1e-12


@dataclass
class DegConfig:
    view: Tuple[int, int] = (32, 32)
    cell: Tuple[int, int] = (8, 8)
    n_bins: int = 180
    strip_k: int = 5
    reduce_r: int = 2

    def validate(self) -> "DegConfig":
        if self.n_bins < 1:
            raise ConfigError(f"n_bins must be >= 1, got {self.n_bins}")
        if self.strip_k < 1 or self.strip_k % 2 == 0:
            raise ConfigError(f"strip_k must be a positive odd number, got {self.strip_k}")
        if self.reduce_r < 1:
            raise ConfigError(f"reduce_r must be >= 1, got {self.reduce_r}")
        if min(self.view) < 1 or min(self.cell) < 1:
            raise ConfigError(f"view {self.view} and cell {self.cell} must be positive")
        if self.view[0] % self.cell[0] or self.view[1] % self.cell[1]:
            raise ConfigError(f"view {self.view} is not divisible by cell {self.cell}")
        return self

    def for_resolution(self, height: int, width: int) -> "DegConfig":
        """Clip view and cell sizes to a stage resolution."""
        view = (min(self.view[0], height), min(self.view[1], width))
        cell = (min(self.cell[0], view[0]), min(self.cell[1], view[1]))
        return replace(self, view=view, cell=cell).validate()

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# rearrange
# ---------------------------------------------------------------------------

def reflect_index(n: int, total: int) -> np.ndarray:
    """Indices ``0..total-1`` folded back into ``0..n-1`` by mirror reflection."""
    idx = np.arange(total)
    if n == 1:
        return np.zeros(total, dtype=np.intp)
    period = 2 * (n - 1)
    idx = idx % period
    return np.where(idx < n, idx, period - idx).astype(np.intp)


@dataclass
class ViewGrid:
    """Views ``[N, C, h, w]`` in row-major grid order plus the geometry to undo the cut."""

    views: Tensor
    grid: Tuple[int, int]
    size: Tuple[int, int]
    padded: Tuple[int, int]

    @property
    def count(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def origins(self) -> list:
        h, w = self.views.shape[-2:]
        return [(a * h, b * w) for a in range(self.grid[0]) for b in range(self.grid[1])]

    def with_views(self, views: Tensor) -> "ViewGrid":
        return replace(self, views=views)


def rearrange_partition(fmap: Tensor, view: Tuple[int, int]) -> ViewGrid:
    c, height, width = fmap.shape
    vh, vw = view
    ph, pw = -(-height // vh) * vh, -(-width // vw) * vw
    if (ph, pw) != (height, width):
        fmap = ops.gather2d(fmap, reflect_index(height, ph), reflect_index(width, pw))
    nh, nw = ph // vh, pw // vw
    blocks = ops.reshape(fmap, (c, nh, vh, nw, vw))
    views = ops.reshape(ops.transpose(blocks, (1, 3, 0, 2, 4)), (nh * nw, c, vh, vw))
    return ViewGrid(views=views, grid=(nh, nw), size=(height, width), padded=(ph, pw))


def rearrange_restore(grid: ViewGrid) -> Tensor:
    n, c, vh, vw = grid.views.shape
    nh, nw = grid.grid
    blocks = ops.reshape(grid.views, (nh, nw, c, vh, vw))
    fmap = ops.reshape(ops.transpose(blocks, (2, 0, 3, 1, 4)), (c, nh * vh, nw * vw))
    height, width = grid.size
    if grid.padded != grid.size:
        fmap = ops.narrow(ops.narrow(fmap, 1, 0, height), 2, 0, width)
    return fmap


# ---------------------------------------------------------------------------
# direction prior (numpy only)
# ---------------------------------------------------------------------------

@dataclass
class DirectionField:
    theta: np.ndarray
    dx: np.ndarray
    dy: np.ndarray


def _reflect_pad1(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(3, dtype=np.intp)
    return np.concatenate([[1], np.arange(n), [n - 2]]).astype(np.intp)


def _correlate3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    rows, cols = _reflect_pad1(h), _reflect_pad1(w)
    padded = img[..., rows[:, None], cols[None, :]]
    out = np.zeros(img.shape, dtype=np.float64)
    for i in range(3):
        for j in range(3):
            if kernel[i, j]:
                out += kernel[i, j] * padded[..., i:i + h, j:j + w]
    return out


def sobel_theta(views: np.ndarray) -> DirectionField:
    """Gradient angle of the channel-mean image, mapped into ``[0, pi]``.

    Accepts ``[C, h, w]`` or a batch ``[N, C, h, w]``. Pixels whose gradient
    vanishes (both components below ``1e-12`` in magnitude) get angle 0.
    """
    mean = np.asarray(views, dtype=np.float64).mean(axis=-3)
    dx = _correlate3(mean, SOBEL_X)
    dy = _correlate3(mean, SOBEL_Y)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.arctan(dy / dx)
    theta = np.where(theta < 0, theta + np.pi, theta)
    flat = (np.abs(dx) < ZERO_GRADIENT) & (np.abs(dy) < ZERO_GRADIENT)
    theta = np.where(flat, 0.0, theta)
    return DirectionField(theta=theta[..., None, :, :], dx=dx, dy=dy)


def bin_centres(n_bins: int) -> np.ndarray:
    return np.pi / (2 * n_bins) + np.arange(n_bins) * np.pi / n_bins


def bin_index(theta: np.ndarray, n_bins: int) -> np.ndarray:
    idx = np.floor(theta / (np.pi / n_bins)).astype(np.int64)
    return np.clip(idx, 0, n_bins - 1)


def direction_histogram(theta: np.ndarray, cell: Tuple[int, int], n_bins: int,
                        return_counts: bool = False):
    """Centre-weighted orientation histogram per cell.

    ``theta`` is ``[..., 1, h, w]`` (or ``[..., h, w]``); the result is
    ``[..., n_bins, h / cell_h, w / cell_w]`` with
    ``p[k] = c_k * count_k / (cell_h * cell_w)``.
    """
    th = np.asarray(theta)
    if th.ndim >= 3 and th.shape[-3] == 1:
        th = th[..., 0, :, :]
    lead = th.shape[:-2]
    h, w = th.shape[-2:]
    ch, cw = cell
    if h % ch or w % cw:
        raise ConfigError(f"view {(h, w)} is not divisible by cell {cell}")
    a, b = h // ch, w // cw
    idx = bin_index(th, n_bins).reshape((-1, a, ch, b, cw))
    m = idx.shape[0]
    cell_id = (np.arange(m)[:, None, None, None, None] * a + np.arange(a)[None, :, None, None, None]) * b \
        + np.arange(b)[None, None, None, :, None]
    key = (np.broadcast_to(cell_id, idx.shape) * n_bins + idx).reshape(-1)
    counts = np.bincount(key, minlength=m * a * b * n_bins).reshape(m, a, b, n_bins)
    counts = counts.transpose(0, 3, 1, 2).reshape(lead + (n_bins, a, b))
    p = bin_centres(n_bins).reshape((n_bins, 1, 1)) * counts / float(ch * cw)
    return (p, counts) if return_counts else p


# ---------------------------------------------------------------------------
# learned parts
# ---------------------------------------------------------------------------

class DirectionEmbedding(Module):
    """``avgpool(Norm(ReLU(Conv3x3(Conv1x1(p)))))`` -> one value per channel."""

    def __init__(self, n_bins: int, channels: int, rng: np.random.Generator) -> None:
        self.project = Conv2d(n_bins, channels, 1, rng)
        self.mix = Conv2d(channels, channels, 3, rng, groups=channels)
        self.norm = LayerNorm(channels, axis=-3)

    def forward(self, prior: Tensor) -> Tensor:
        f = ops.relu(self.mix(self.project(prior)))
        pooled = ops.adaptive_avgpool(self.norm(f))
        return ops.reshape(pooled, pooled.shape[:-2])


class EdgeConv(Module):
    """Pointwise reduction, parallel 1xk / kx1 strips, depth-wise 3x3, pointwise expansion."""

    def __init__(self, channels: int, rng: np.random.Generator, k: int = 5, r: int = 2) -> None:
        if channels % r:
            raise ConfigError(f"channels {channels} not divisible by reduction {r}")
        if k % 2 == 0:
            raise ConfigError(f"strip kernel length must be odd, got {k}")
        mid = channels // r
        self.reduce = Conv2d(channels, mid, 1, rng)
        self.strip_h = Conv2d(mid, mid, (1, k), rng, padding=(0, k // 2), groups=mid)
        self.strip_v = Conv2d(mid, mid, (k, 1), rng, padding=(k // 2, 0), groups=mid)
        self.depthwise = Conv2d(2 * mid, 2 * mid, 3, rng, groups=2 * mid)
        self.expand = Conv2d(2 * mid, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        low = self.reduce(x)
        both = ops.concat([self.strip_h(low), self.strip_v(low)], axis=-3)
        return self.expand(self.depthwise(both))


class DegGate(Module):
    """``sigmoid(EdgeConv_g(F + eps)) * EdgeConv_f(F)`` with independent convolutions."""

    def __init__(self, channels: int, rng: np.random.Generator, k: int = 5, r: int = 2) -> None:
        self.gate = EdgeConv(channels, rng, k, r)
        self.feature = EdgeConv(channels, rng, k, r)
        self.last_gate: Optional[np.ndarray] = None

    def forward(self, views: Tensor, eps: Tensor) -> Tensor:
        shift = ops.reshape(eps, eps.shape + (1, 1))
        g = ops.sigmoid(self.gate(views + shift))
        self.last_gate = g.data
        return g * self.feature(views)


@dataclass
class DegInfo:
    theta: np.ndarray
    prior: np.ndarray
    embedding: np.ndarray
    grid: Tuple[int, int] = field(default=(1, 1))


class DEGConv(Module):
    """Full module for one pyramid level of ``channels`` channels."""

    def __init__(self, channels: int, cfg: DegConfig, rng: np.random.Generator) -> None:
        self.channels = channels
        self.cfg = cfg.validate()
        self.embed = DirectionEmbedding(cfg.n_bins, channels, rng)
        self.gate = DegGate(channels, rng, cfg.strip_k, cfg.reduce_r)
        self.post = EdgeConv(channels, rng, cfg.strip_k, cfg.reduce_r)

    def direction_prior(self, views: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        field_ = sobel_theta(views)
        return field_.theta, direction_histogram(field_.theta, self.cfg.cell, self.cfg.n_bins)

    def forward(self, fmap: Tensor) -> Tuple[Tensor, DegInfo]:
        grid = rearrange_partition(fmap, self.cfg.view)
        theta, prior = decide(lambda: self.direction_prior(grid.views.data))
        eps = self.embed(Tensor(prior.astype(fmap.dtype)))
        gated = self.gate(grid.views, eps)
        out = self.post(rearrange_restore(grid.with_views(gated)))
        return out, DegInfo(theta=theta, prior=prior, embedding=eps.data, grid=grid.grid)


def restore_theta(theta: np.ndarray, grid: Tuple[int, int], size: Tuple[int, int]) -> np.ndarray:
    """Stitch per-view angle maps ``[N, 1, h, w]`` into one ``[H, W]`` map."""
    nh, nw = grid
    _, _, vh, vw = theta.shape
    full = theta[:, 0].reshape(nh, nw, vh, vw).transpose(0, 2, 1, 3).reshape(nh * vh, nw * vw)
    return full[:size[0], :size[1]]
