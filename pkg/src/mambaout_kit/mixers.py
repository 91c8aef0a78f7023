"""Token mixers: partial-channel depthwise conv, selective SSM, attention.

The selective SSM keeps a diagonal state matrix ``A = -exp(A_log)`` of shape
``[D, N]`` so discretization is elementwise::

    A_bar = exp(delta * A)
    B_bar = (exp(delta * A) - 1) / (delta * A) * delta * B
    h_t   = A_bar_t * h_{t-1} + B_bar_t * x_t
    y_t   = sum_n C_t[n] * h_t[:, n]

Two evaluators of the recurrence exist: a plain loop over time and a
Blelloch-style work-efficient associative scan. Both share the same
hand-written backward (itself a reversed-time recurrence).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Function, ShapeError, Tensor, report_macs

SERIES_THRESHOLD = 1e-6


class MixMode(enum.Enum):
    FULLY_VISIBLE = "fully-visible"
    CAUSAL = "causal"


# ---------------------------------------------------------------------------
# linear recurrence h_t = a_t * h_{t-1} + b_t along axis 0, h_0 = 0


def _combine(a1, b1, a2, b2):
    # apply (a1, b1) first, then (a2, b2)
    return a2 * a1, a2 * b1 + b2


def recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = np.empty_like(b)
    prev = np.zeros_like(b[0])
    for t in range(b.shape[0]):
        prev = a[t] * prev + b[t]
        h[t] = prev
    return h


def recurrence_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Work-efficient (up-sweep / down-sweep) associative scan.

    Pads to a power of two with identity pairs ``(1, 0)``; the combine tree has
    a fixed topology for a given length, so results are reproducible.
    """
    T = b.shape[0]
    n = 1 << max(T - 1, 0).bit_length()
    A = np.ones((n,) + a.shape[1:], dtype=np.result_type(a, b))
    B = np.zeros((n,) + b.shape[1:], dtype=A.dtype)
    A[:T], B[:T] = a, b
    levels = n.bit_length() - 1
    for d in range(levels):
        half, step = 1 << d, 1 << (d + 1)
        r = np.arange(step - 1, n, step)
        l = r - half
        A[r], B[r] = _combine(A[l], B[l], A[r], B[r])
    A[n - 1], B[n - 1] = 1.0, 0.0
    for d in reversed(range(levels)):
        half, step = 1 << d, 1 << (d + 1)
        r = np.arange(step - 1, n, step)
        l = r - half
        left_a, left_b = A[l].copy(), B[l].copy()
        A[l], B[l] = A[r], B[r]
        A[r], B[r] = _combine(A[r], B[r], left_a, left_b)
    # B now holds exclusive prefixes evaluated at h_0 = 0
    return a * B[:T] + b


_RECURRENCES = {"sequential": recurrence_sequential, "parallel": recurrence_parallel}


class SelectiveScan(Function):
    """``y = scan(A_bar, B_bar, C, x)`` over the time axis (-3 of ``A_bar``)."""

    def forward(self, x, a_bar, b_bar, c, method="sequential"):
        if a_bar.shape != b_bar.shape:
            raise ShapeError(f"A_bar {a_bar.shape} and B_bar {b_bar.shape} differ")
        if a_bar.shape[:-1] != x.shape or c.shape != a_bar.shape[:-2] + a_bar.shape[-1:]:
            raise ShapeError(f"scan shapes disagree: x {x.shape}, A_bar {a_bar.shape}, C {c.shape}")
        rec = _RECURRENCES[method]
        self.rec = rec
        u = b_bar * x[..., None]
        h = np.moveaxis(rec(np.moveaxis(a_bar, -3, 0), np.moveaxis(u, -3, 0)), 0, -3)
        self.x, self.a_bar, self.b_bar, self.c, self.h = x, a_bar, b_bar, c, h
        report_macs("selective_scan", 3 * h.size)
        return np.einsum("...tdn,...tn->...td", h, c)

    def backward(self, dy):
        x, a_bar, b_bar, c, h = self.x, self.a_bar, self.b_bar, self.c, self.h
        local = dy[..., :, None] * c[..., None, :]
        # G_t = local_t + A_bar_{t+1} * G_{t+1}: same recurrence in reversed time
        a_next = np.zeros_like(a_bar)
        a_next[..., :-1, :, :] = a_bar[..., 1:, :, :]
        a_rev = np.moveaxis(a_next, -3, 0)[::-1]
        l_rev = np.moveaxis(local, -3, 0)[::-1]
        G = np.moveaxis(np.ascontiguousarray(self.rec(a_rev, l_rev)[::-1]), 0, -3)
        h_prev = np.zeros_like(h)
        h_prev[..., 1:, :, :] = h[..., :-1, :, :]
        dx = (G * b_bar).sum(axis=-1) if self.needs[0] else None
        da = G * h_prev if self.needs[1] else None
        db = G * x[..., None] if self.needs[2] else None
        dc = np.einsum("...td,...tdn->...tn", dy, h) if self.needs[3] else None
        return dx, da, db, dc


# ---------------------------------------------------------------------------
# selective SSM


def ssm_discretize(delta, A, B, threshold: float = SERIES_THRESHOLD):
    """Zero-order-hold discretization for diagonal ``A``.

    ``delta`` is ``[..., T, D]``, ``A`` is ``[D, N]``, ``B`` is ``[..., T, N]``;
    returns ``(A_bar, B_bar)`` each ``[..., T, D, N]``. Where ``|delta*A|`` is
    below ``threshold`` the factor ``(e^z - 1)/z`` uses its series ``1 + z/2``.
    """
    delta, A, B = (d if isinstance(d, Tensor) else Tensor(d) for d in (delta, A, B))
    if np.any(delta.data <= 0):
        raise ValueError("ssm_discretize requires delta > 0 elementwise")
    d3 = ops.reshape(delta, delta.shape + (1,))
    z = ops.mul(d3, A)
    a_bar = ops.exp(z)
    b3 = ops.reshape(B, B.shape[:-1] + (1, B.shape[-1]))
    b_bar = ops.mul(ops.mul(ops.expm1_over_x(z, threshold), d3), b3)
    return a_bar, b_bar


def selective_scan(x, delta, A, B, C, method: str = "sequential"):
    """Discretize then scan with explicit ``(delta, A, B, C)``; ``x`` is ``[..., T, D]``."""
    if method not in _RECURRENCES:
        raise ValueError(f"unknown scan method {method!r}; choose from {sorted(_RECURRENCES)}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError(f"scan input must be [..., T>=1, D], got {x.shape}")
    a_bar, b_bar = ssm_discretize(delta, A, B)
    return SelectiveScan.apply(x, a_bar, b_bar, C, method=method)


@dataclass
class SsmParams:
    """Selective SSM weights; ``delta``, ``B`` and ``C`` are projected from each token.

    ``delta = softplus(x @ W_delta + b_delta)``, ``B = x @ W_B``, ``C = x @ W_C``,
    ``A = -exp(A_log)``.
    """

    A_log: Tensor
    W_delta: Tensor
    b_delta: Tensor
    W_B: Tensor
    W_C: Tensor

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A_log.shape[1]

    @classmethod
    def init(cls, channels: int, state_dim: int = 16, rng=None, dtype=np.float64,
             dt_min: float = 1e-3, dt_max: float = 1e-1) -> SsmParams:
        rng = np.random.default_rng(rng)
        a_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1)))
        # softplus^-1 of a log-uniform step size in [dt_min, dt_max]
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), channels))
        b_delta = dt + np.log(-np.expm1(-dt))
        std = 0.02
        return cls(
            A_log=Tensor(a_log, dtype=dtype, requires_grad=True),
            W_delta=Tensor(rng.normal(0, std, (channels, channels)), dtype=dtype, requires_grad=True),
            b_delta=Tensor(b_delta, dtype=dtype, requires_grad=True),
            W_B=Tensor(rng.normal(0, std, (channels, state_dim)), dtype=dtype, requires_grad=True),
            W_C=Tensor(rng.normal(0, std, (channels, state_dim)), dtype=dtype, requires_grad=True),
        )

    def A(self):
        return ops.neg(ops.exp(self.A_log))

    def project(self, x):
        delta = ops.softplus(ops.linear(x, self.W_delta, self.b_delta))
        return delta, self.A(), ops.matmul(x, self.W_B), ops.matmul(x, self.W_C)

    def parameters(self) -> dict[str, Tensor]:
        return {"A_log": self.A_log, "W_delta": self.W_delta, "b_delta": self.b_delta,
                "W_B": self.W_B, "W_C": self.W_C}


def ssm_scan_sequential(x, p: SsmParams):
    return selective_scan(x, *p.project(x), method="sequential")


def ssm_scan_parallel(x, p: SsmParams):
    return selective_scan(x, *p.project(x), method="parallel")


# ---------------------------------------------------------------------------
# gated-conv mixer


def split_indices(dim: int, expansion: float = 8 / 3, conv_ratio: float = 1.0) -> tuple[int, int, int]:
    """Channel split ``(gate, passthrough, conv)`` of the fused fc1 output."""
    hidden = int(expansion * dim)
    conv_channels = int(conv_ratio * dim)
    if conv_channels < 0 or hidden - conv_channels < 0:
        raise ValueError(
            f"invalid split: hidden={hidden}, conv_channels={conv_channels} "
            f"(conv_ratio={conv_ratio}) must satisfy 0 <= conv_channels <= hidden"
        )
    return hidden, hidden - conv_channels, conv_channels


def conv_mixer(x, kernel, indices, bias=None):
    """Split ``x`` into ``(g, i, c)``, depthwise-convolve ``c`` with same padding.

    Returns ``(g, concat(i, conv(c)))``.
    """
    if any(s < 0 for s in indices):
        raise ValueError(f"split indices must be non-negative, got {tuple(indices)}")
    g, i, c = ops.split(x, indices)
    if indices[2] == 0:
        return g, i
    k = kernel.shape[0]
    c = ops.depthwise_conv2d(c, kernel, stride=1, padding=k // 2)
    if bias is not None:
        c = ops.add(c, bias)
    if indices[1] == 0:
        return g, c
    return g, ops.concat([i, c], axis=-1)


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttnWeights:
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    heads: int = 1

    def __post_init__(self):
        d = self.Wq.shape[0]
        if d % self.heads:
            raise ValueError(f"heads={self.heads} does not divide D={d}")

    @classmethod
    def init(cls, dim: int, heads: int = 1, rng=None, dtype=np.float64, std: float = 0.02) -> AttnWeights:
        rng = np.random.default_rng(rng)
        mats = [Tensor(rng.normal(0, std, (dim, dim)), dtype=dtype, requires_grad=True) for _ in range(4)]
        return cls(*mats, heads=heads)

    def parameters(self) -> dict[str, Tensor]:
        return {"Wq": self.Wq, "Wk": self.Wk, "Wv": self.Wv, "Wo": self.Wo}


def causal_mask(T: int) -> np.ndarray:
    """Row ``t`` may attend to columns ``0..t``."""
    return np.tril(np.ones((T, T), dtype=bool))


def attention(x, w: AttnWeights, mode: MixMode = MixMode.FULLY_VISIBLE, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over ``x`` of shape ``[..., T, D]``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    B, T, D = x.shape
    if T < 1:
        raise ShapeError("attention needs at least one token")
    H = w.heads
    dh = D // H

    def heads(t):
        return ops.permute(ops.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = heads(ops.matmul(x, w.Wq))
    k = heads(ops.matmul(x, w.Wk))
    v = heads(ops.matmul(x, w.Wv))
    scores = ops.mul(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = causal_mask(T) if MixMode(mode) is MixMode.CAUSAL else None
    attn = ops.softmax(scores, mask=mask)
    out = ops.reshape(ops.permute(ops.matmul(attn, v), (0, 2, 1, 3)), (B, T, D))
    out = ops.matmul(out, w.Wo)
    if squeeze:
        out = ops.reshape(out, (T, D))
    return (out, attn) if return_weights else out
