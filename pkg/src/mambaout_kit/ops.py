"""Differentiable operations on :class:`~mambaout_kit.tensor.Tensor`.

Layout is channels-last throughout: images are ``[B, H, W, C]`` and
convolution kernels are ``[k, k, C]`` (depthwise) or ``[k, k, Cin, Cout]``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Function, ShapeError, Tensor, as_tensor, report_macs

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the tensor operand's dtype so float32 stays float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise


class Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        ga = _unbroadcast(g * self.b, self.a.shape) if self.needs[0] else None
        gb = _unbroadcast(g * self.a, self.b.shape) if self.needs[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = _unbroadcast(g / self.b, self.a.shape) if self.needs[0] else None
        gb = _unbroadcast(-g * self.a / (self.b * self.b), self.b.shape) if self.needs[1] else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a).astype(a.dtype, copy=False)

    def backward(self, g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * self.a))
        return (g * sig,)


class Gelu(Function):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""

    def forward(self, a):
        self.a = a
        self.cdf = 0.5 * (1.0 + erf(a / _SQRT2))
        return (a * self.cdf).astype(a.dtype, copy=False)

    def backward(self, g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * self.a * self.a)
        return ((g * (self.cdf + self.a * pdf)).astype(g.dtype, copy=False),)


class Expm1OverX(Function):
    """``(exp(z) - 1) / z`` with the series ``1 + z/2`` below ``|z| < threshold``."""

    def forward(self, z, threshold=1e-6):
        self.z = z
        small = np.abs(z) < threshold
        safe = np.where(small, 1.0, z)
        out = np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)
        self.small, self.safe, self.out = small, safe, out
        return out.astype(z.dtype, copy=False)

    def backward(self, g):
        # d/dz [(e^z - 1)/z] = (e^z - phi(z)) / z, series slope 1/2 + z/3
        z, safe = self.z, self.safe
        slope = np.where(self.small, 0.5 + z / 3.0, (np.exp(safe) - self.out) / safe)
        return (g * slope,)


def add(a, b):
    return Add.apply(*_pair(a, b))


def sub(a, b):
    return Sub.apply(*_pair(a, b))


def mul(a, b):
    return Mul.apply(*_pair(a, b))


def div(a, b):
    return Div.apply(*_pair(a, b))


def neg(a):
    return Neg.apply(a)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def softplus(a):
    return Softplus.apply(a)


def gelu(a):
    return Gelu.apply(a)


def expm1_over_x(z, threshold: float = 1e-6):
    return Expm1OverX.apply(z, threshold=threshold)


# ---------------------------------------------------------------------------
# products


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul inner dimensions differ: {a.shape} has K={a.shape[-1]}, "
                f"{b.shape} has K={b.shape[-2]}"
            )
        if a.dtype != b.dtype:
            raise ShapeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
        self.a, self.b = a, b
        out = a @ b
        report_macs("matmul", out.size * a.shape[-1])
        return out

    def backward(self, g):
        ga = gb = None
        if self.needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(self.b, -1, -2), self.a.shape)
        if self.needs[1]:
            if self.b.ndim == 2:
                k = self.a.shape[-1]
                gb = self.a.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(self.a, -1, -2) @ g, self.b.shape)
        return ga, gb


def matmul(a, b):
    return MatMul.apply(a, b)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored ``[in, out]``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return (np.broadcast_to(g, self.shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axes]))
        return np.asarray(a.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return (np.broadcast_to(g / self.count, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class Permute(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, g):
        return (np.ascontiguousarray(np.transpose(g, np.argsort(self.axes))),)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return np.ascontiguousarray(a[index])

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        if _is_basic(self.index):
            out[self.index] = g
        else:
            np.add.at(out, self.index, g)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=-1):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=self.axis))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def permute(a, axes):
    return Permute.apply(a, axes=tuple(axes))


def getitem(a, index):
    return GetItem.apply(a, index=index)


def concat(tensors, axis: int = -1):
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    return Concat.apply(*tensors, axis=axis)


def split(x, sizes, axis: int = -1):
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    if any(s < 0 for s in sizes):
        raise ValueError(f"split sizes must be non-negative, got {tuple(sizes)}")
    if np.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {tuple(sizes)} do not cover extent {x.shape[axis]}")
    ax = axis % x.ndim
    pieces, start = [], 0
    for s in sizes:
        idx = (slice(None),) * ax + (slice(start, start + s),)
        pieces.append(getitem(x, idx))
        start += s
    return pieces


# ---------------------------------------------------------------------------
# normalization, softmax, loss


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps=1e-6):
        if x.shape[-1] == 0:
            raise ShapeError("layer_norm over an empty last axis")
        if eps <= 0:
            raise ValueError("layer_norm eps must be positive")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        xhat, inv = self.xhat, self.inv
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if self.needs[1] else None
        dbeta = g.sum(axis=lead) if self.needs[2] else None
        dx = None
        if self.needs[0]:
            dxhat = g * self.gamma
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgamma, dbeta


def layer_norm(x, gamma, beta, eps: float = 1e-6):
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class Softmax(Function):
    def forward(self, x, mask=None):
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
            if not mask.any(axis=-1).all():
                raise ValueError("softmax row is fully masked")
            x = np.where(mask, x, -np.inf)
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def softmax(x, mask=None):
    return Softmax.apply(x, mask=mask)


class CrossEntropy(Function):
    """Mean cross-entropy against label-smoothed one-hot targets."""

    def forward(self, logits, labels=None, smoothing=0.0):
        labels = np.asarray(labels, dtype=np.int64)
        n, k = logits.shape
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        q = np.full_like(logits, smoothing / k)
        q[np.arange(n), labels] += 1.0 - smoothing
        self.p, self.q, self.n = np.exp(logp), q, n
        return np.asarray(-(q * logp).sum() / n, dtype=logits.dtype)

    def backward(self, g):
        return (g * (self.p - self.q) / self.n,)


def cross_entropy(logits, labels, smoothing: float = 0.0):
    return CrossEntropy.apply(logits, labels=labels, smoothing=smoothing)


# ---------------------------------------------------------------------------
# convolution


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


class DepthwiseConv2d(Function):
    def forward(self, x, kernel, stride=1, padding=0):
        if x.ndim != 4 or kernel.ndim != 3:
            raise ShapeError(f"depthwise_conv2d expects [B,H,W,C] and [k,k,C], got {x.shape}, {kernel.shape}")
        if kernel.shape[2] != x.shape[3]:
            raise ShapeError(f"channel mismatch: input has {x.shape[3]}, kernel has {kernel.shape[2]}")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        k = kernel.shape[0]
        B, H, W, C = x.shape
        Ho, Wo = _out_size(H, k, stride, padding), _out_size(W, k, stride, padding)
        xp = _pad(x, padding)
        out = np.zeros((B, Ho, Wo, C), dtype=np.result_type(x, kernel))
        for u in range(k):
            for v in range(k):
                out += xp[:, u:u + stride * (Ho - 1) + 1:stride, v:v + stride * (Wo - 1) + 1:stride] * kernel[u, v]
        self.xp, self.kernel, self.geom = xp, kernel, (stride, padding, H, W, Ho, Wo)
        report_macs("depthwise_conv2d", B * Ho * Wo * C * k * k)
        return out

    def backward(self, g):
        stride, p, H, W, Ho, Wo = self.geom
        k = self.kernel.shape[0]
        dxp = np.zeros_like(self.xp) if self.needs[0] else None
        dk = np.zeros_like(self.kernel) if self.needs[1] else None
        for u in range(k):
            for v in range(k):
                sl = (slice(None), slice(u, u + stride * (Ho - 1) + 1, stride), slice(v, v + stride * (Wo - 1) + 1, stride))
                if dxp is not None:
                    dxp[sl] += g * self.kernel[u, v]
                if dk is not None:
                    dk[u, v] = (g * self.xp[sl]).sum(axis=(0, 1, 2))
        if dxp is not None:
            dxp = np.ascontiguousarray(dxp[:, p:p + H, p:p + W])
        return dxp, dk


class Conv2d(Function):
    """Dense 2-D cross-correlation via patch gathering and one matmul."""

    def forward(self, x, kernel, stride=1, padding=0):
        if x.ndim != 4 or kernel.ndim != 4:
            raise ShapeError(f"conv2d expects [B,H,W,Cin] and [k,k,Cin,Cout], got {x.shape}, {kernel.shape}")
        if kernel.shape[2] != x.shape[3]:
            raise ShapeError(f"channel mismatch: input has {x.shape[3]}, kernel expects {kernel.shape[2]}")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        k, _, cin, cout = kernel.shape
        B, H, W, _ = x.shape
        Ho, Wo = _out_size(H, k, stride, padding), _out_size(W, k, stride, padding)
        xp = _pad(x, padding)
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, : stride * (Ho - 1) + 1:stride, : stride * (Wo - 1) + 1:stride]
        # [B,Ho,Wo,Cin,k,k] -> [B*Ho*Wo, k*k*Cin] matching the kernel's [k,k,Cin] order
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, k * k * cin)
        w2 = kernel.reshape(k * k * cin, cout)
        self.cols, self.w2, self.kshape = cols, w2, kernel.shape
        self.geom = (B, H, W, Ho, Wo, stride, padding, xp.shape)
        report_macs("conv2d", B * Ho * Wo * k * k * cin * cout)
        return (cols @ w2).reshape(B, Ho, Wo, cout)

    def backward(self, g):
        B, H, W, Ho, Wo, stride, p, xp_shape = self.geom
        k, _, cin, cout = self.kshape
        g2 = g.reshape(-1, cout)
        dk = (self.cols.T @ g2).reshape(self.kshape) if self.needs[1] else None
        dx = None
        if self.needs[0]:
            dcols = (g2 @ self.w2.T).reshape(B, Ho, Wo, k, k, cin)
            dxp = np.zeros(xp_shape, dtype=g.dtype)
            for u in range(k):
                for v in range(k):
                    dxp[:, u:u + stride * (Ho - 1) + 1:stride, v:v + stride * (Wo - 1) + 1:stride] += dcols[:, :, :, u, v]
            dx = np.ascontiguousarray(dxp[:, p:p + H, p:p + W])
        return dx, dk


def depthwise_conv2d(x, kernel, stride: int = 1, padding: int = 0):
    return DepthwiseConv2d.apply(x, kernel, stride=stride, padding=padding)


def conv2d(x, kernel, stride: int = 1, padding: int = 0):
    return Conv2d.apply(x, kernel, stride=stride, padding=padding)
