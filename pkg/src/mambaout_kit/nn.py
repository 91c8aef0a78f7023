"""Parameter containers: a minimal module tree with hierarchical names."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02, dtype=np.float32) -> Tensor:
    """Normal(0, std) truncated to +-2 std by redrawing out-of-range samples."""
    vals = rng.standard_normal(shape)
    bad = np.abs(vals) > 2.0
    while bad.any():
        vals[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(vals) > 2.0
    return Tensor((vals * std).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Module:
    """Attributes holding trainable tensors, sub-modules or lists of modules.

    Names follow attribute order, e.g. ``stages.0.blocks.1.fc1.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif hasattr(value, "parameters") and callable(value.parameters):
                for sub, t in value.parameters().items():
                    yield f"{full}.{sub}", t

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_params(self) -> int:
        return int(sum(t.size for _, t in self.named_parameters()))

    def astype(self, dtype) -> Module:
        """Convert every parameter in place to ``dtype``."""
        for _, t in self.named_parameters():
            t.data = np.ascontiguousarray(t.data.astype(dtype))
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, t in params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = np.ascontiguousarray(arr.copy())


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored ``[in, out]``."""

    def __init__(self, in_features: int, out_features: int, rng, bias: bool = True, dtype=np.float32):
        self.in_features, self.out_features = in_features, out_features
        self.weight = trunc_normal((in_features, out_features), rng, dtype=dtype)
        self.bias = zeros((out_features,), dtype) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float32):
        self.eps = eps
        self.weight = ones((dim,), dtype)
        self.bias = zeros((dim,), dtype)

    def __call__(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel_size: int, rng, stride: int = 1,
                 padding: int = 0, bias: bool = True, dtype=np.float32, std: float = 0.02):
        self.cin, self.cout, self.kernel_size = cin, cout, kernel_size
        self.stride, self.padding = stride, padding
        self.weight = trunc_normal((kernel_size, kernel_size, cin, cout), rng, std=std, dtype=dtype)
        self.bias = zeros((cout,), dtype) if bias else None

    def __call__(self, x):
        y = ops.conv2d(x, self.weight, self.stride, self.padding)
        return y if self.bias is None else ops.add(y, self.bias)

    def out_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel_size) // self.stride + 1
