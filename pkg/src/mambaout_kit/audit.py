"""Parameter / MAC accounting and the attention-block complexity ratio.

MAC convention: one multiply-accumulate is one multiply plus one add. Only
dense products are counted (linear maps, full and depthwise convolutions,
attention score and value products, selective-scan products). Norms,
activations, softmax, bias adds and pooling are excluded. Where FLOPs are
reported they are ``2 * MACs``.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .blocks import GatedBlock, MixerKind, TransformerBlock
from .models import PUBLISHED_PRESETS, IsotropicTransformer, MambaOut
from .nn import Linear

SCHEMA_VERSION = 1
MAC_CONVENTION = (
    "1 MAC = 1 multiply + 1 add; counted: linear, conv, depthwise conv, attention QK^T and AV, "
    "selective-scan products; excluded: norms, activations, softmax, biases, pooling; FLOPs = 2 x MACs"
)

# published sizes: (params in millions, MACs in billions at 224x224)
PUBLISHED_SIZES = {
    "femto": (7.3, 1.2),
    "tiny": (26.5, 4.5),
    "small": (48.5, 9.0),
    "base": (84.8, 15.8),
}
PARAM_TOLERANCE = 0.03
MAC_TOLERANCE = 0.05


@dataclass
class LayerRow:
    name: str
    params: int = 0
    macs: int = 0
    head: bool = False


@dataclass
class AuditReport:
    model: str
    resolution: tuple[int, int] | None
    rows: list[LayerRow]
    head_included: bool = True
    convention: str = MAC_CONVENTION
    checks: list[dict] = field(default_factory=list)
    head: dict | None = None

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows if self.head_included or not r.head)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows if self.head_included or not r.head)

    @property
    def head_params(self) -> int:
        return sum(r.params for r in self.rows if r.head)

    @property
    def head_macs(self) -> int:
        return sum(r.macs for r in self.rows if r.head)

    def without_head(self) -> AuditReport:
        return AuditReport(self.model, self.resolution, self.rows, head_included=False,
                           convention=self.convention, checks=self.checks, head=self.head)

    def to_dict(self) -> dict:
        all_params = sum(r.params for r in self.rows)
        all_macs = sum(r.macs for r in self.rows)
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model,
            "resolution": list(self.resolution) if self.resolution else None,
            "convention": self.convention,
            "head_included": self.head_included,
            "head": self.head,
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "with_head": {"params": all_params, "macs": all_macs},
            "without_head": {"params": all_params - self.head_params, "macs": all_macs - self.head_macs},
            "layers": [asdict(r) for r in self.rows],
            "checks": self.checks,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_table(self, layers: bool = False) -> str:
        lines = [f"# {self.convention}", f"model: {self.model}  resolution: {self.resolution}"]
        if layers:
            w = max(len(r.name) for r in self.rows)
            lines.append(f"{'layer':<{w}}  {'params':>12}  {'MACs':>15}")
            for r in self.rows:
                lines.append(f"{r.name:<{w}}  {r.params:>12,}  {r.macs:>15,}")
        d = self.to_dict()
        if self.head is not None:
            dims = " -> ".join(map(str, self.head["dims"]))
            lines.append(f"head: {self.head['layout']} ({dims}), {self.head['params']:,} params")
        lines.append(f"params (with head):    {d['with_head']['params']:>15,}  ({d['with_head']['params'] / 1e6:.3f} M)")
        lines.append(f"params (without head): {d['without_head']['params']:>15,}  ({d['without_head']['params'] / 1e6:.3f} M)")
        lines.append(f"MACs   (with head):    {d['with_head']['macs']:>15,}  ({d['with_head']['macs'] / 1e9:.3f} G)")
        lines.append(f"MACs   (without head): {d['without_head']['macs']:>15,}  ({d['without_head']['macs'] / 1e9:.3f} G)")
        for c in self.checks:
            lines.append(
                f"{c['metric']:<7} measured {c['measured']:.3f} vs published {c['published']} "
                f"(rel {c['rel_error']:+.2%}, tol {c['tolerance']:.0%}): {'PASS' if c['passed'] else 'FAIL'}"
            )
        return "\n".join(lines)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)


def _layer_key(param_name: str) -> str:
    prefix, _, last = param_name.rpartition(".")
    if "_" in last and last.split("_")[0] == "conv":
        return f"{prefix}.conv"
    if last in ("weight", "bias"):
        return prefix
    return prefix or last


def _is_head(name: str) -> bool:
    return name.startswith("head")


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _gated_block_macs(blk: GatedBlock, prefix: str, hw: int, out: OrderedDict) -> None:
    D, h, cc = blk.dim, blk.hidden, blk.split[2]
    out[f"{prefix}.fc1"] = hw * D * 2 * h
    if blk.kind is not MixerKind.IDENTITY and cc > 0:
        out[f"{prefix}.conv"] = hw * blk.kernel_size ** 2 * cc
    if blk.kind is MixerKind.MAMBA_SSM:
        n = blk.ssm.state_dim
        out[f"{prefix}.ssm"] = hw * (h * h + 2 * h * n) + 3 * hw * h * n
    out[f"{prefix}.fc2"] = hw * h * D


def transformer_block_macs(D: int, L: int, mlp_ratio: int = 4) -> int:
    """Dense MACs of one pre-norm block: projections, scores, values, MLP."""
    return 4 * L * D * D + 2 * L * L * D + 2 * mlp_ratio * L * D * D


def _macs_by_layer(model, resolution: tuple[int, int]) -> OrderedDict:
    H, W = resolution
    out: OrderedDict[str, int] = OrderedDict()
    if isinstance(model, MambaOut):
        stem = model.stem
        h1, w1 = _conv_out(H, 3, 2, 1), _conv_out(W, 3, 2, 1)
        out["stem.conv1"] = h1 * w1 * 9 * 3 * stem.conv1.cout
        h, w = _conv_out(h1, 3, 2, 1), _conv_out(w1, 3, 2, 1)
        out["stem.conv2"] = h * w * 9 * stem.conv2.cin * stem.conv2.cout
        for i, stage in enumerate(model.stages):
            if stage.downsample is not None:
                conv = stage.downsample.conv
                h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
                out[f"stages.{i}.downsample.conv"] = h * w * 9 * conv.cin * conv.cout
            for j, blk in enumerate(stage.blocks):
                _gated_block_macs(blk, f"stages.{i}.blocks.{j}", h * w, out)
        head = model.head
        out["head.fc1"] = head.fc1.in_features * head.fc1.out_features
        out["head.fc2"] = head.fc2.in_features * head.fc2.out_features
    elif isinstance(model, IsotropicTransformer):
        if (H, W) != (model.image_size, model.image_size):
            raise ValueError(f"transformer was built for {model.image_size}px input")
        T, D, p = model.num_tokens, model.dim, model.patch
        out["patch_embed"] = T * p * p * 3 * D
        for i, blk in enumerate(model.blocks):
            hid = blk.fc1.out_features
            out[f"blocks.{i}.attn"] = 4 * T * D * D + 2 * T * T * D
            out[f"blocks.{i}.fc1"] = T * D * hid
            out[f"blocks.{i}.fc2"] = T * hid * D
        out["head"] = model.head.in_features * model.head.out_features
    elif isinstance(model, GatedBlock):
        _gated_block_macs(model, "block", H * W, out)
    elif isinstance(model, TransformerBlock):
        raise TypeError("use transformer_block_macs(D, L) for a lone transformer block")
    else:
        raise TypeError(f"cannot count MACs for {type(model).__name__}")
    return out


def _model_name(model) -> str:
    cfg = getattr(model, "cfg", None)
    if cfg is not None:
        return cfg.name
    return type(model).__name__


def count_params(model) -> AuditReport:
    groups: OrderedDict[str, int] = OrderedDict()
    for name, t in model.named_parameters():
        key = _layer_key(name)
        groups[key] = groups.get(key, 0) + t.size
    rows = [LayerRow(k, params=v, head=_is_head(k)) for k, v in groups.items()]
    return AuditReport(_model_name(model), None, rows)


def count_macs(model, resolution: tuple[int, int] = (224, 224)) -> AuditReport:
    macs = _macs_by_layer(model, tuple(resolution))
    rows = [LayerRow(k, macs=v, head=_is_head(k)) for k, v in macs.items()]
    return AuditReport(_model_name(model), tuple(resolution), rows)


def audit(model, resolution: tuple[int, int] = (224, 224), include_head: bool = True) -> AuditReport:
    """Merged per-layer parameter and MAC table."""
    params = count_params(model)
    macs = _macs_by_layer(model, tuple(resolution))
    rows: OrderedDict[str, LayerRow] = OrderedDict((r.name, r) for r in params.rows)
    for name, m in macs.items():
        rows.setdefault(name, LayerRow(name, head=_is_head(name))).macs = m
    report = AuditReport(params.model, tuple(resolution), list(rows.values()), head_included=include_head)
    report.head = describe_head(getattr(model, "head", None), report.head_params)
    return report


def describe_head(head, params: int) -> dict | None:
    """Layout of a classifier head: pooled features through norm and dense layers."""
    if head is None:
        return None
    if isinstance(head, Linear):
        return {"layout": "mean-pool, linear", "dims": [head.in_features, head.out_features], "params": params}
    return {"layout": "mean-pool, layer norm, linear, gelu, linear",
            "dims": [head.fc1.in_features, head.fc1.out_features, head.fc2.out_features], "params": params}


def compare_published(report: AuditReport, preset: str) -> AuditReport:
    """Attach pass/fail checks against the published parameter and MAC figures."""
    preset = preset.lower()
    if preset not in PUBLISHED_SIZES:
        raise ValueError(f"no published figures for {preset!r}; have {', '.join(PUBLISHED_PRESETS)}")
    p_pub, m_pub = PUBLISHED_SIZES[preset]
    d = report.to_dict()
    p_meas = d["with_head"]["params"] / 1e6
    m_meas = d["with_head"]["macs"] / 1e9
    checks = []
    for metric, meas, pub, tol in (("params", p_meas, p_pub, PARAM_TOLERANCE), ("MACs", m_meas, m_pub, MAC_TOLERANCE)):
        rel = (meas - pub) / pub
        checks.append({"metric": metric, "measured": meas, "published": pub, "rel_error": rel,
                       "tolerance": tol, "passed": abs(rel) <= tol})
    report.checks = checks
    return report


# ---------------------------------------------------------------------------
# attention-block complexity


def transformer_block_flops(D: int, L: int) -> int:
    """``24 D^2 L + 4 D L^2`` FLOPs for a transformer block with MLP ratio 4."""
    if D < 1 or L < 0:
        raise ValueError("need D >= 1 and L >= 0")
    return 24 * D * D * L + 4 * D * L * L


def quadratic_ratio(D: int, L: int) -> Fraction:
    """Quadratic-in-L over linear-in-L cost, ``L / (6 D)``, as an exact rational."""
    if D < 1 or L < 1:
        raise ValueError("need D >= 1 and L >= 1")
    return Fraction(L, 6 * D)


@dataclass(frozen=True)
class ComplexityVerdict:
    L: int
    D: int
    r_L: Fraction
    tau: int
    is_long_sequence: bool

    def to_dict(self) -> dict:
        return {"tokens": self.L, "dim": self.D, "r_L": str(self.r_L), "r_L_float": float(self.r_L),
                "tau": self.tau, "is_long_sequence": self.is_long_sequence,
                "flops": transformer_block_flops(self.D, self.L),
                "macs": transformer_block_flops(self.D, self.L) // 2}


def classify_sequence_task(L: int, D: int) -> ComplexityVerdict:
    r = quadratic_ratio(D, L)
    return ComplexityVerdict(L, D, r, 6 * D, L > 6 * D)


def tokens_for_image(height: int, width: int, patch: int = 16) -> int:
    return (height // patch) * (width // patch)
