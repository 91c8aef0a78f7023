"""AdamW with decoupled weight decay and a warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               decay_mask: dict[str, bool] | None = None) -> AdamState:
    """One in-place AdamW update of ``params`` (name -> Tensor).

    ``grads`` maps names to arrays; parameters without a gradient are skipped.
    Decay is ``p *= 1 - lr * weight_decay`` before the moment update, applied to
    every parameter unless ``decay_mask`` says otherwise.
    """
    bad = [n for n, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {len(bad)} parameter(s): {', '.join(bad[:5])}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            p.data = p.data * (1.0 - lr * weight_decay)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)
    return state


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay towards 0."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def scaled_lr(batch_size: int) -> float:
    """Learning-rate rule ``batch_size / 1024 * 1e-3``."""
    return batch_size / 1024 * 1e-3
