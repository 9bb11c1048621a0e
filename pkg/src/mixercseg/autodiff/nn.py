"""Parameter containers and the layers shared by every model component."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    # Kaiming-uniform with negative slope sqrt(5): bound = 1/sqrt(fan_in).
    bound = math.sqrt(6.0 / ((1.0 + 5.0) * max(fan_in, 1)))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal container: parameters and sub-modules are plain attributes.

    Traversal follows attribute assignment order, so parameter names (and
    therefore checkpoint layout and optimizer order) are deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != parameter shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self) -> np.dtype:
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Identity(Module):
    def forward(self, x, *args, **kwargs):
        return x


class Linear(Module):
    """``y = x W^T + b`` acting on the last axis."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True) -> None:
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, rng: np.random.Generator,
                 stride=1, padding=None, groups: int = 1, bias: bool = True) -> None:
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        self.stride = stride
        self.padding = (kh // 2, kw // 2) if padding is None else padding
        self.groups = groups
        fan_in = (in_ch // groups) * kh * kw
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, in_ch // groups, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32)) if bias else None

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding, groups=self.groups)


class LayerNorm(Module):
    """Layer normalisation over a single axis with a per-channel affine map."""

    def __init__(self, channels: int, axis: int = -1, eps: float = 1e-5) -> None:
        self.axis = axis
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, axis=self.axis, eps=self.eps)


def as_input(x, module: Module) -> Tensor:
    """Wrap an array as a constant tensor in the module's dtype."""
    if isinstance(x, Tensor):
        if x.dtype != module.dtype and not x.requires_grad:
            return Tensor(x.data.astype(module.dtype))
        return x
    return Tensor(np.asarray(x, dtype=module.dtype))


def optional_tensor(x: Optional[np.ndarray], dtype) -> Optional[Tensor]:
    return None if x is None else Tensor(np.asarray(x, dtype=dtype))
