"""Selective state-space scan, the Mamba block around it, and hidden attention.

The scan runs the recurrence

    h_t = exp(delta_t * A) * h_{t-1} + (delta_t * B_t) * x_t,    y_t = sum_n C_t h_t

for every channel independently, with ``h_0 = 0``. Unrolling it gives the
token-to-token weights ``alpha[c, i, j] = sum_n C_i (prod_{k=j+1..i} abar_k) bbar_j``
returned by :func:`hidden_attention`; ``y[i] = sum_j alpha[:, i, j] * x[j]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.decisions import decide
from .autodiff.nn import Linear, Module, kaiming_uniform
from .autodiff.ops import _make
from .autodiff.tensor import Parameter, Tensor
from .exceptions import ConfigError, NumericError

RANK_DIRECTIONS = ("low-delta", "high-delta")


@dataclass(frozen=True)
class ScanTrace:
    """Per-step discretised quantities recorded by one scan.

    ``delta`` is ``[L, d]``, ``a_bar`` and ``b_bar`` are ``[L, d, n]`` and
    ``c`` is ``[L, n]``. Arrays are detached copies of forward values.
    """

    delta: np.ndarray
    a_bar: np.ndarray
    b_bar: np.ndarray
    c: np.ndarray

    @property
    def length(self) -> int:
        return self.delta.shape[0]

    @property
    def channels(self) -> int:
        return self.delta.shape[1]

    def mean_delta(self) -> np.ndarray:
        return self.delta.mean(axis=0)


@dataclass(frozen=True)
class ChannelSplit:
    """Disjoint sorted index sets for the global (``g``) and local (``l``) channels."""

    g: np.ndarray
    l: np.ndarray  # noqa: E741

    def __post_init__(self) -> None:
        d = len(self.g) + len(self.l)
        merged = np.sort(np.concatenate([self.g, self.l]))
        if not np.array_equal(merged, np.arange(d)):
            raise ValueError(f"g={self.g.tolist()} and l={self.l.tolist()} do not partition 0..{d - 1}")

    @property
    def d(self) -> int:
        return len(self.g) + len(self.l)

    @property
    def permutation(self) -> np.ndarray:
        return np.concatenate([self.g, self.l]).astype(np.intp)


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor) -> Tuple[Tensor, ScanTrace]:
    """Run the discretised selective SSM over a ``[L, d]`` sequence.

    Parameters
    ----------
    x, delta : Tensor ``[L, d]``
        Scan input and (positive) step sizes.
    A : Tensor ``[d, n]``
        Continuous-time state matrix, negative entries.
    B, C : Tensor ``[L, n]``
        Input-dependent input and output projections.

    Returns
    -------
    y : Tensor ``[L, d]``
    trace : ScanTrace
    """
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, B.data, C.data
    length, d = xd.shape
    n = Ad.shape[1]
    if length < 1:
        raise ValueError("selective_scan needs at least one token")
    # overflow is detected below and reported with its step index
    with np.errstate(over="ignore", invalid="ignore"):
        a_bar = np.exp(dd[:, :, None] * Ad[None])
        b_bar = dd[:, :, None] * Bd[:, None, :]
        u = b_bar * xd[:, :, None]
        hs = np.empty((length, d, n), dtype=xd.dtype)
        h = np.zeros((d, n), dtype=xd.dtype)
        for t in range(length):
            h = a_bar[t] * h + u[t]
            hs[t] = h
        y = np.einsum("tdn,tn->td", hs, Cd)
    if not np.isfinite(y).all():
        bad = np.flatnonzero(~np.isfinite(hs).reshape(length, -1).all(axis=1))
        step = int(bad[0]) if bad.size else int(np.flatnonzero(~np.isfinite(y).all(axis=1))[0])
        raise NumericError(f"selective_scan produced a non-finite value at step {step}", step=step)
    trace = ScanTrace(delta=dd.copy(), a_bar=a_bar, b_bar=b_bar, c=Cd.copy())

    def backward(gy):
        gC = np.einsum("td,tdn->tn", gy, hs)
        gh_out = gy[:, :, None] * Cd[:, None, :]
        gh = np.empty_like(hs)
        carry = np.zeros((d, n), dtype=gy.dtype)
        for t in range(length - 1, -1, -1):
            acc = gh_out[t] + carry
            gh[t] = acc
            carry = a_bar[t] * acc
        h_prev = np.concatenate([np.zeros((1, d, n), dtype=hs.dtype), hs[:-1]], axis=0)
        g_log_a = gh * h_prev * a_bar
        g_bbar = gh * xd[:, :, None]
        gx = (gh * b_bar).sum(axis=-1)
        gdelta = (g_log_a * Ad[None]).sum(axis=-1) + (g_bbar * Bd[:, None, :]).sum(axis=-1)
        gA = (g_log_a * dd[:, :, None]).sum(axis=0)
        gB = (g_bbar * dd[:, :, None]).sum(axis=1)
        return gx, gdelta, gA, gB, gC

    return _make(y, (x, delta, A, B, C), backward, "selective_scan"), trace


def hidden_attention(trace: ScanTrace) -> np.ndarray:
    """Materialise ``alpha[c, i, j]``; zero above the diagonal (``j > i``)."""
    a_bar, b_bar, c = trace.a_bar, trace.b_bar, trace.c
    length, d, n = a_bar.shape
    alpha = np.zeros((d, length, length), dtype=a_bar.dtype)
    for i in range(length):
        # decay[j] = prod_{k=j+1..i} a_bar[k] for j = 0..i (empty product at j = i)
        decay = np.ones((i + 1, d, n), dtype=a_bar.dtype)
        if i > 0:
            decay[:i] = np.cumprod(a_bar[i:0:-1], axis=0)[::-1]
        alpha[:, i, :i + 1] = np.einsum("jdn,n->dj", decay * b_bar[:i + 1], c[i])
    return alpha


def rank_channels(trace: ScanTrace, gamma: float, direction: str = "low-delta") -> ChannelSplit:
    """Split channels by their sequence-mean step size.

    With ``direction="low-delta"`` the ``floor(d * gamma)`` channels with the
    smallest mean delta (slowest decay, longest memory) become global.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    if direction not in RANK_DIRECTIONS:
        raise ConfigError(f"rank direction must be one of {RANK_DIRECTIONS}, got {direction!r}")
    score = trace.mean_delta()
    d = score.shape[0]
    n_global = int(math.floor(d * gamma + 1e-9))
    key = score if direction == "low-delta" else -score
    order = np.argsort(key, kind="stable")
    return ChannelSplit(g=np.sort(order[:n_global]), l=np.sort(order[n_global:]))


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def scan_orders(height: int, width: int, directions: int) -> list:
    """Token orders for multi-direction scanning of a row-major ``H x W`` grid."""
    row = np.arange(height * width)
    col = row.reshape(height, width).T.reshape(-1)
    orders = [row, row[::-1], col, col[::-1]]
    return orders[:directions]


class MambaBlock(Module):
    """Parameters and forward pass of one Mamba block.

    ``forward`` computes ``Z = SiLU(Linear(I))``, ``X = SiLU(Conv1D(Linear(I)))``,
    ``Y = SSM(X)`` and ``O = Linear(Y * Z)``. The three stages are also exposed
    separately so a caller can rewrite ``Y`` before the output projection.
    """

    def __init__(self, d: int, state_dim: int, rng: np.random.Generator,
                 conv_width: int = 3, literal_delta: bool = False, scan_directions: int = 1,
                 delta_init: float = 0.5) -> None:
        if scan_directions not in (1, 2, 4):
            raise ConfigError(f"scan_directions must be 1, 2 or 4, got {scan_directions}")
        self.d = d
        self.state_dim = state_dim
        self.literal_delta = literal_delta
        self.scan_directions = scan_directions
        self.in_proj = Linear(d, d, rng)
        self.gate_proj = Linear(d, d, rng)
        self.conv_weight = Parameter(kaiming_uniform(rng, (d, conv_width), conv_width))
        self.conv_bias = Parameter(np.zeros(d, dtype=np.float32))
        self.b_proj = Linear(d, state_dim, rng)
        self.c_proj = Linear(d, state_dim, rng)
        if not literal_delta:
            self.dt_proj = Linear(d, d, rng)
            self.dt_proj.bias.data[:] = inverse_softplus(delta_init)
        self.log_a = Parameter(rng.uniform(np.log(0.5), np.log(2.0), size=(d, state_dim)).astype(np.float32))
        self.out_proj = Linear(d, d, rng)

    @property
    def A(self) -> Tensor:
        return ops.neg(ops.exp(self.log_a))

    def project_in(self, inp: Tensor) -> Tuple[Tensor, Tensor]:
        z = ops.silu(self.gate_proj(inp))
        x = ops.silu(ops.causal_conv1d(self.in_proj(inp), self.conv_weight, self.conv_bias))
        return x, z

    def step_sizes(self, x: Tensor) -> Tensor:
        return ops.softplus(x if self.literal_delta else self.dt_proj(x))

    def ssm(self, x: Tensor, hw: Optional[Tuple[int, int]] = None) -> Tuple[Tensor, ScanTrace]:
        delta = self.step_sizes(x)
        B, C, A = self.b_proj(x), self.c_proj(x), self.A
        if self.scan_directions == 1:
            return selective_scan(x, delta, A, B, C)
        if hw is None:
            raise ConfigError("multi-direction scanning needs the spatial size (H, W)")
        outputs, first = [], None
        for order in scan_orders(hw[0], hw[1], self.scan_directions):
            inverse = np.argsort(order)
            y, trace = selective_scan(ops.take(x, order), ops.take(delta, order), A,
                                      ops.take(B, order), ops.take(C, order))
            outputs.append(ops.take(y, inverse))
            if first is None:
                first = trace
        total = outputs[0]
        for y in outputs[1:]:
            total = total + y
        return total * (1.0 / len(outputs)), first

    def project_out(self, y: Tensor, z: Tensor) -> Tensor:
        return self.out_proj(y * z)

    def forward(self, inp: Tensor, hw: Optional[Tuple[int, int]] = None) -> Tuple[Tensor, ScanTrace]:
        x, z = self.project_in(inp)
        y, trace = self.ssm(x, hw)
        return self.project_out(y, z), trace


def route_channels(trace: ScanTrace, gamma: float, direction: str) -> ChannelSplit:
    """:func:`rank_channels` as a replayable discrete decision."""
    return decide(lambda: rank_channels(trace, gamma, direction))
