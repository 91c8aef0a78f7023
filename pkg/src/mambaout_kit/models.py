"""MambaOut model family and a toy isotropic transformer."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import ops
from .blocks import GatedBlock, MixerKind, TransformerBlock
from .mixers import MixMode
from .nn import Conv2d, LayerNorm, Linear, Module, trunc_normal
from .tensor import ShapeError, Tensor, no_grad


@dataclass(frozen=True)
class ModelConfig:
    depths: tuple[int, int, int, int]
    widths: tuple[int, int, int, int]
    mixer: MixerKind = MixerKind.GATED_CONV
    expansion: Fraction = Fraction(8, 3)
    conv_ratio: Fraction = Fraction(1)
    kernel: int = 7
    head_hidden_ratio: Fraction = Fraction(4)
    num_classes: int = 1000
    drop_path_peak: float = 0.0
    state_dim: int = 16
    name: str = "custom"

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.widths) != 4:
            raise ValueError("depths and widths need four stages")
        if min(self.depths) < 1 or min(self.widths) < 1:
            raise ValueError("depths and widths must be positive")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if not 0.0 <= self.drop_path_peak < 1.0:
            raise ValueError("drop_path_peak must be in [0, 1)")

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "depths": list(self.depths),
            "widths": list(self.widths),
            "mixer": self.mixer.value,
            "expansion": str(self.expansion),
            "conv_ratio": str(self.conv_ratio),
            "kernel": self.kernel,
            "head_hidden_ratio": str(self.head_hidden_ratio),
            "num_classes": self.num_classes,
            "drop_path_peak": self.drop_path_peak,
            "state_dim": self.state_dim,
        }


PRESETS: dict[str, ModelConfig] = {
    "femto": ModelConfig((3, 3, 9, 3), (48, 96, 192, 288), drop_path_peak=0.025, name="femto"),
    "tiny": ModelConfig((3, 3, 9, 3), (96, 192, 384, 576), drop_path_peak=0.2, name="tiny"),
    "small": ModelConfig((3, 4, 27, 3), (96, 192, 384, 576), drop_path_peak=0.4, name="small"),
    "base": ModelConfig((3, 4, 27, 3), (128, 256, 512, 768), drop_path_peak=0.6, name="base"),
    # harness regression preset, not one of the published sizes
    "micro": ModelConfig((1, 1, 2, 1), (16, 32, 64, 96), num_classes=8, name="micro"),
}
PUBLISHED_PRESETS = ("femto", "tiny", "small", "base")


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None


class Stem(Module):
    """3x3/s2 conv, norm, GELU, 3x3/s2 conv, norm: overall stride 4."""

    def __init__(self, out_dim: int, rng, dtype=np.float32):
        mid = out_dim // 2
        self.conv1 = Conv2d(3, mid, 3, rng, stride=2, padding=1, dtype=dtype)
        self.norm1 = LayerNorm(mid, dtype=dtype)
        self.conv2 = Conv2d(mid, out_dim, 3, rng, stride=2, padding=1, dtype=dtype)
        self.norm2 = LayerNorm(out_dim, dtype=dtype)

    def __call__(self, x):
        x = ops.gelu(self.norm1(self.conv1(x)))
        return self.norm2(self.conv2(x))


class Downsample(Module):
    """Norm then 3x3/s2 conv between stages."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        self.norm = LayerNorm(cin, dtype=dtype)
        self.conv = Conv2d(cin, cout, 3, rng, stride=2, padding=1, dtype=dtype)

    def __call__(self, x):
        return self.conv(self.norm(x))


class Stage(Module):
    def __init__(self, downsample: Downsample | None, blocks: list[GatedBlock]):
        self.downsample = downsample
        self.blocks = blocks

    def __call__(self, x, training=False, rng=None):
        if self.downsample is not None:
            x = self.downsample(x)
        for blk in self.blocks:
            x = blk(x, training, rng)
        return x


class MlpHead(Module):
    """Global average pool, norm, then a two-layer MLP with GELU in between."""

    def __init__(self, dim: int, hidden: int, num_classes: int, rng, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, num_classes, rng, dtype=dtype)

    def __call__(self, x):
        x = self.norm(ops.mean(x, axis=(1, 2)))
        return self.fc2(ops.gelu(self.fc1(x)))


class MambaOut(Module):
    min_resolution = 32

    def __init__(self, cfg: ModelConfig, rng=0, dtype=np.float32):
        rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.stem = Stem(cfg.widths[0], rng, dtype)
        rates = np.linspace(0.0, cfg.drop_path_peak, sum(cfg.depths)) if sum(cfg.depths) > 1 else [cfg.drop_path_peak]
        stages, k = [], 0
        for i, (depth, width) in enumerate(zip(cfg.depths, cfg.widths)):
            down = Downsample(cfg.widths[i - 1], width, rng, dtype) if i > 0 else None
            blocks = []
            for _ in range(depth):
                blocks.append(GatedBlock(
                    width, rng, kind=cfg.mixer, expansion=cfg.expansion, kernel_size=cfg.kernel,
                    conv_ratio=cfg.conv_ratio, drop_path_rate=float(rates[k]),
                    state_dim=cfg.state_dim, dtype=dtype,
                ))
                k += 1
            stages.append(Stage(down, blocks))
        self.stages = stages
        hidden = int(cfg.head_hidden_ratio * cfg.widths[-1])
        self.head = MlpHead(cfg.widths[-1], hidden, cfg.num_classes, rng, dtype)

    def stage_outputs(self, x, training: bool = False, rng=None) -> list[Tensor]:
        x = self._check_input(x)
        outs = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x, training, rng)
            outs.append(x)
        return outs

    def __call__(self, x, training: bool = False, rng=None):
        return self.head(self.stage_outputs(x, training, rng)[-1])

    def _check_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.stem.conv1.weight.dtype)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ShapeError(f"images must be [B,H,W,3], got {x.shape}")
        H, W = x.shape[1:3]
        if min(H, W) < self.min_resolution:
            raise ShapeError(
                f"resolution {H}x{W} too small: the four stages need at least "
                f"{self.min_resolution}px so the last stage keeps a nonzero extent"
            )
        return x


def stage_resolutions(size: int) -> list[int]:
    """Spatial extent at each stage for a square input (stride 4, then 2, 2, 2)."""
    out = []
    n = size
    for _ in range(2):
        n = (n + 2 - 3) // 2 + 1
    out.append(n)
    for _ in range(3):
        n = (n + 2 - 3) // 2 + 1
        out.append(n)
    return out


def build_mambaout(cfg: ModelConfig | str, rng=0, dtype=np.float32) -> MambaOut:
    if isinstance(cfg, str):
        cfg = get_preset(cfg)
    return MambaOut(cfg, rng=rng, dtype=dtype)


class IsotropicTransformer(Module):
    """Patch embedding, learned positions, uniform-mode blocks, mean pool, linear head."""

    def __init__(self, dim: int, depth: int, patch: int, mode: MixMode = MixMode.FULLY_VISIBLE,
                 image_size: int = 32, heads: int = 2, num_classes: int = 8, rng=0, dtype=np.float32,
                 pos_std: float = 0.2):
        if image_size % patch:
            raise ValueError(f"image size {image_size} is not divisible by patch {patch}")
        rng = np.random.default_rng(rng)
        self.dim, self.depth, self.patch, self.image_size = dim, depth, patch, image_size
        self.mode = MixMode(mode)
        self.num_tokens = (image_size // patch) ** 2
        # fan-in scaled patches and std-0.2 positions: at std 0.02 the position
        # signal is too weak for fully-visible attention to break token symmetry
        self.patch_embed = Conv2d(3, dim, patch, rng, stride=patch, padding=0, dtype=dtype,
                                  std=(3 * patch * patch) ** -0.5)
        self.pos_embed = trunc_normal((self.num_tokens, dim), rng, std=pos_std, dtype=dtype)
        self.blocks = [TransformerBlock(dim, rng, heads=heads, mode=self.mode, dtype=dtype) for _ in range(depth)]
        self.norm = LayerNorm(dim, dtype=dtype)
        self.head = Linear(dim, num_classes, rng, dtype=dtype)

    def token_features(self, x, training: bool = False, rng=None):
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.pos_embed.dtype)
        if x.ndim != 4 or x.shape[1] != self.image_size or x.shape[2] != self.image_size:
            raise ShapeError(f"expected [B,{self.image_size},{self.image_size},3], got {x.shape}")
        t = self.patch_embed(x)
        B = t.shape[0]
        t = ops.add(ops.reshape(t, (B, self.num_tokens, self.dim)), self.pos_embed)
        for blk in self.blocks:
            t = blk(t, training, rng)
        return self.norm(t)

    def __call__(self, x, training: bool = False, rng=None):
        return self.head(ops.mean(self.token_features(x, training, rng), axis=1))


def build_isotropic_transformer(D: int, depth: int, patch: int, mode: MixMode = MixMode.FULLY_VISIBLE,
                                image_size: int = 32, heads: int = 2, num_classes: int = 8,
                                rng=0, dtype=np.float32) -> IsotropicTransformer:
    return IsotropicTransformer(D, depth, patch, mode, image_size, heads, num_classes, rng, dtype)


def forward(model: Module, images, training: bool = False, rng=None) -> Tensor:
    """Logits ``[B, num_classes]``; in inference mode no graph is recorded."""
    if training:
        return model(images, True, rng)
    with no_grad():
        return model(images, False, None)
