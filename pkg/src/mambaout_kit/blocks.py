"""Gated CNN / Mamba blocks sharing one meta-architecture, plus a pre-norm
transformer block and stochastic depth."""

from __future__ import annotations

import enum

import numpy as np

from . import ops
from .mixers import AttnWeights, MixMode, SsmParams, attention, conv_mixer, selective_scan, split_indices
from .nn import LayerNorm, Linear, Module, trunc_normal, zeros
from .tensor import ShapeError, Tensor


class MixerKind(enum.Enum):
    GATED_CONV = "gated-conv"
    MAMBA_SSM = "mamba-ssm"
    ATTENTION_FV = "attention-fv"
    ATTENTION_CAUSAL = "attention-causal"
    IDENTITY = "identity"


GATED_KINDS = (MixerKind.GATED_CONV, MixerKind.MAMBA_SSM, MixerKind.IDENTITY)


def drop_path(x, rate: float, training: bool, rng: np.random.Generator | None = None):
    """Zero the whole residual branch per sample with probability ``rate``.

    Survivors are scaled by ``1 / (1 - rate)``; outside training this is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop_path rate must be in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return x
    if rng is None:
        raise ValueError("drop_path in training mode needs an explicit rng")
    keep = rng.random(x.shape[0]) >= rate
    mask = (keep / (1.0 - rate)).astype(x.dtype).reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    return ops.mul(x, Tensor(mask))


class GatedBlock(Module):
    """``Y = fc2(mix(g-split) * act(gate)) + X`` over ``[B, H, W, D]``.

    ``fc1`` fuses the two input projections into one ``D -> 2*hidden`` map with
    ``hidden = int(expansion * D)``; its output splits into the gate, an
    untouched passthrough slice and the slice that is depthwise-convolved.
    """

    def __init__(self, dim: int, rng, kind: MixerKind = MixerKind.GATED_CONV,
                 expansion: float = 8 / 3, kernel_size: int = 7, conv_ratio: float = 1.0,
                 drop_path_rate: float = 0.0, state_dim: int = 16, scan_method: str = "sequential",
                 dtype=np.float32):
        kind = MixerKind(kind)
        rng = np.random.default_rng(rng)
        if kind not in GATED_KINDS:
            raise ValueError(f"GatedBlock supports {[k.value for k in GATED_KINDS]}, got {kind.value}")
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd for same padding")
        self.dim, self.kind, self.kernel_size = dim, kind, kernel_size
        self.split = split_indices(dim, expansion, conv_ratio)
        hidden, _, conv_channels = self.split
        self.hidden = hidden
        self.drop_path_rate = drop_path_rate
        self.scan_method = scan_method

        self.norm = LayerNorm(dim, eps=1e-6, dtype=dtype)
        self.fc1 = Linear(dim, 2 * hidden, rng, dtype=dtype)
        if kind is not MixerKind.IDENTITY and conv_channels > 0:
            self.conv_weight = trunc_normal((kernel_size, kernel_size, conv_channels), rng, dtype=dtype)
            self.conv_bias = zeros((conv_channels,), dtype)
        if kind is MixerKind.MAMBA_SSM:
            self.ssm = SsmParams.init(hidden, state_dim, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)
        # swapped out only for structural ablations
        self._ssm_activation = ops.gelu
        self._ssm_fn = None

    def __call__(self, x, training: bool = False, rng=None):
        return gated_block_forward(x, self, self.kind, training, rng)

    def token_mix(self, z):
        """Mixer applied to the passthrough/conv part (``X'W1``)."""
        B, H, W, C = z.shape
        if self.kind is MixerKind.MAMBA_SSM:
            u = self._ssm_activation(z)
            # row-major raster order over the H*W tokens
            seq = ops.reshape(u, (B, H * W, C))
            out = (self._ssm_fn or self._scan)(seq)
            return ops.reshape(out, (B, H, W, C))
        return z

    def _scan(self, seq):
        return selective_scan(seq, *self.ssm.project(seq), method=self.scan_method)


def gated_block_forward(x, w: GatedBlock, kind: MixerKind | None = None, training: bool = False, rng=None):
    kind = w.kind if kind is None else MixerKind(kind)
    if kind is not w.kind:
        raise ValueError(f"weights were built for {w.kind.value}, not {kind.value}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[-1] != w.dim:
        raise ShapeError(f"expected [B,H,W,{w.dim}], got {x.shape}")
    if x.dtype != w.fc1.weight.dtype:
        raise ShapeError(f"input dtype {x.dtype} != weight dtype {w.fc1.weight.dtype}")
    shortcut = x
    h = w.fc1(w.norm(x))
    if kind is MixerKind.IDENTITY or w.split[2] == 0:
        g, z = ops.split(h, (w.split[0], w.split[0]))
    else:
        g, z = conv_mixer(h, w.conv_weight, w.split, bias=w.conv_bias)
    z = w.token_mix(z)
    y = w.fc2(ops.mul(ops.gelu(g), z))
    y = drop_path(y, w.drop_path_rate, training, rng)
    return ops.add(y, shortcut)


class TransformerBlock(Module):
    """Pre-norm attention and pre-norm MLP (ratio 4), both residual."""

    def __init__(self, dim: int, rng, heads: int = 1, mlp_ratio: int = 4,
                 mode: MixMode = MixMode.FULLY_VISIBLE, drop_path_rate: float = 0.0, dtype=np.float32):
        rng = np.random.default_rng(rng)
        self.dim, self.mode, self.drop_path_rate = dim, MixMode(mode), drop_path_rate
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = AttnWeights.init(dim, heads, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng, dtype=dtype)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng, dtype=dtype)

    def __call__(self, x, training: bool = False, rng=None, mode: MixMode | None = None):
        return transformer_block_forward(x, self, self.mode if mode is None else mode, training, rng)


def transformer_block_forward(x, w: TransformerBlock, mode: MixMode = MixMode.FULLY_VISIBLE,
                              training: bool = False, rng=None):
    x = x if isinstance(x, Tensor) else Tensor(x)
    a = attention(w.norm1(x), w.attn, mode)
    x = ops.add(x, drop_path(a, w.drop_path_rate, training, rng))
    m = w.fc2(ops.gelu(w.fc1(w.norm2(x))))
    return ops.add(x, drop_path(m, w.drop_path_rate, training, rng))
