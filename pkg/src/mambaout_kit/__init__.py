"""MambaOut building blocks on a small numpy autodiff core, with parameter and
MAC auditing, gradient and scan oracles, and a synthetic training harness."""

__version__ = "0.1.0"

from .tensor import (  # noqa: E402
    AbsentGradientError,
    Graph,
    MacCounter,
    ShapeError,
    Tensor,
    backward,
    finite_diff_grad,
    no_grad,
)
from .mixers import MixMode  # noqa: E402
from .blocks import GatedBlock, MixerKind, TransformerBlock  # noqa: E402
from .models import PRESETS, MambaOut, ModelConfig, build_mambaout, get_preset  # noqa: E402

__all__ = [
    "AbsentGradientError", "GatedBlock", "Graph", "MacCounter", "MambaOut", "MixMode", "MixerKind",
    "ModelConfig", "PRESETS", "ShapeError", "Tensor", "TransformerBlock", "backward",
    "build_mambaout", "finite_diff_grad", "get_preset", "no_grad",
]
