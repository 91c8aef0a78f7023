"""Training loop, mixing-mode comparison and run configs."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import ops
from ..checkpoint import save_checkpoint
from ..mixers import MixMode
from ..models import IsotropicTransformer, ModelConfig, build_isotropic_transformer, build_mambaout
from ..tensor import Tensor, backward, no_grad
from .data import SyntheticTask
from .optim import AdamState, adamw_step, lr_schedule, scaled_lr

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "split", "loss", "accuracy", "lr")


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, checkpoint: Path | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float | None = None  # None -> batch_size / 1024 * 1e-3
    warmup_epochs: int = 2
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    drop_path_peak: float = 0.0
    seed: int = 0
    dtype: str = "float32"
    hflip: bool = True

    @property
    def lr(self) -> float:
        return scaled_lr(self.batch_size) if self.base_lr is None else self.base_lr

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["effective_lr"] = self.lr
        return d


@dataclass(frozen=True)
class TransformerConfig:
    """Toy isotropic transformer used for the mixing-mode comparison."""

    dim: int = 32
    depth: int = 2
    patch: int = 8
    heads: int = 2
    mode: MixMode = MixMode.FULLY_VISIBLE
    image_size: int = 32
    num_classes: int = 8

    def replace(self, **changes) -> TransformerConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        return d


# regression recipe for the harness-only micro preset; lr follows the batch rule
MICRO_TRAIN = TrainConfig(epochs=30, batch_size=64, warmup_epochs=2, weight_decay=0.05, label_smoothing=0.1)
# the toy transformer never leaves chance at the batch-rule lr (6.25e-5), so
# the mixing-mode comparison overrides it
COMPARE_TRAIN = TrainConfig(epochs=30, batch_size=64, base_lr=1e-3, warmup_epochs=2, weight_decay=0.05,
                            label_smoothing=0.1)

# regression targets, fixed from the first validated runs: compare_mixers with
# COMPARE_TRAIN on the default 4000/800 task, seeds 0..2, and MICRO_TRAIN on micro
MIXER_GAP_BASELINE = 0.0842
MIXER_GAP_BAND = 0.03
MICRO_TARGET_ACCURACY = 0.90


def build_model(cfg, seed: int, dtype=np.float32, drop_path_peak: float | None = None):
    if isinstance(cfg, ModelConfig):
        if drop_path_peak is not None:
            cfg = cfg.replace(drop_path_peak=drop_path_peak)
        return build_mambaout(cfg, rng=seed, dtype=dtype)
    if isinstance(cfg, TransformerConfig):
        return build_isotropic_transformer(cfg.dim, cfg.depth, cfg.patch, cfg.mode, cfg.image_size,
                                           cfg.heads, cfg.num_classes, rng=seed, dtype=dtype)
    raise TypeError(f"unsupported model config {type(cfg).__name__}")


def evaluate(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256,
             smoothing: float = 0.0) -> tuple[float, float]:
    """Mean loss and accuracy in inference mode."""
    total_loss, correct = 0.0, 0
    with no_grad():
        for start in range(0, len(labels), batch_size):
            x = Tensor(images[start:start + batch_size])
            y = labels[start:start + batch_size]
            logits = model(x)
            total_loss += float(ops.cross_entropy(logits, y, smoothing).data) * len(y)
            correct += int((logits.data.argmax(-1) == y).sum())
    return total_loss / len(labels), correct / len(labels)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    model: object = None
    checkpoint: Path | None = None

    @property
    def final_val_accuracy(self) -> float:
        return [r for r in self.history if r["split"] == "val"][-1]["accuracy"]

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.history:
            w.writerow([r["epoch"], r["split"], repr(r["loss"]), repr(r["accuracy"]), repr(r["lr"])])
        return buf.getvalue()


def train(model_cfg, task: SyntheticTask, tc: TrainConfig, out_dir: str | Path | None = None,
          data: dict | None = None) -> TrainResult:
    """Train from scratch; deterministic for a given ``(model_cfg, task, tc)``.

    Per-sample work inside a batch is vectorized and gradients are reduced in
    a fixed order, so reruns reproduce the metric history exactly. ``data`` may
    carry pre-generated ``{"train": (x, y), "val": (x, y)}`` arrays.
    """
    dtype = np.dtype(tc.dtype)
    model = build_model(model_cfg, tc.seed, dtype, drop_path_peak=tc.drop_path_peak)
    data = data or {"train": task.split("train"), "val": task.split("val")}
    xtr, ytr = data["train"]
    xva, yva = data["val"]
    xtr, xva = xtr.astype(dtype, copy=False), xva.astype(dtype, copy=False)

    params = model.parameters()
    decay_mask = {n: p.ndim >= 2 for n, p in params.items()}
    state = AdamState()
    rng = np.random.default_rng([tc.seed, 1])
    steps_per_epoch = math.ceil(len(ytr) / tc.batch_size)
    total = tc.epochs * steps_per_epoch
    warmup = tc.warmup_epochs * steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    result = TrainResult(model=model)
    step = 0
    lr = 0.0
    for epoch in range(tc.epochs):
        order = rng.permutation(len(ytr))
        ep_loss, ep_correct = 0.0, 0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            x, y = xtr[idx], ytr[idx]
            if tc.hflip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[:, :, ::-1], x)
                y = np.where(flip, task.hflip_label(y), y)
            lr = lr_schedule(step, total, warmup, tc.lr)
            model.zero_grad()
            logits = model(Tensor(x), True, rng)
            loss = ops.cross_entropy(logits, y, tc.label_smoothing)
            lval = float(loss.data)
            if not math.isfinite(lval):
                ckpt = None
                if out is not None:
                    ckpt = save_checkpoint(out / "last_good.mokt", model)
                raise TrainingDiverged(f"loss became {lval} at epoch {epoch} step {step}", ckpt)
            grads = backward(loss)
            if out is not None and epoch == 0 and start == 0:
                # keep a finite restore point from before the first update
                save_checkpoint(out / "last_good.mokt", model)
            adamw_step(params, {n: grads[p] for n, p in params.items() if p in grads}, state, lr,
                       tc.weight_decay, decay_mask=decay_mask)
            ep_loss += lval * len(idx)
            ep_correct += int((logits.data.argmax(-1) == y).sum())
            step += 1
        train_row = {"epoch": epoch, "split": "train", "loss": ep_loss / len(ytr),
                     "accuracy": ep_correct / len(ytr), "lr": lr}
        vloss, vacc = evaluate(model, xva, yva, smoothing=tc.label_smoothing)
        val_row = {"epoch": epoch, "split": "val", "loss": vloss, "accuracy": vacc, "lr": lr}
        result.history += [train_row, val_row]
        log.info("epoch %d train loss %.4f acc %.3f | val loss %.4f acc %.3f", epoch,
                 train_row["loss"], train_row["accuracy"], vloss, vacc)
        if out is not None and math.isfinite(vloss):
            save_checkpoint(out / "last_good.mokt", model)
    if out is not None:
        (out / "metrics.csv").write_text(result.metrics_csv())
        result.checkpoint = save_checkpoint(out / "final.mokt", model)
    return result


@dataclass
class CompareReport:
    modes: list[str]
    seeds: list[int]
    accuracies: list[list[float]]

    @property
    def means(self) -> list[float]:
        return [statistics.fmean(a) for a in self.accuracies]

    @property
    def sds(self) -> list[float]:
        return [statistics.stdev(a) if len(a) > 1 else 0.0 for a in self.accuracies]

    @property
    def gap(self) -> float:
        """First arm minus second arm, mean accuracy."""
        return self.means[0] - self.means[1]

    def to_dict(self) -> dict:
        return {
            "arms": [{"mode": m, "accuracies": a, "mean": mu, "sd": sd}
                     for m, a, mu, sd in zip(self.modes, self.accuracies, self.means, self.sds)],
            "seeds": self.seeds,
            "gap": self.gap,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def compare_mixers(task: SyntheticTask, modes: Sequence[MixMode] = (MixMode.FULLY_VISIBLE, MixMode.CAUSAL),
                   tc: TrainConfig = COMPARE_TRAIN, seeds: Sequence[int] = (0, 1, 2),
                   model_cfg: TransformerConfig | None = None) -> CompareReport:
    """Train the toy transformer once per (mode, seed); arms share init seeds."""
    if len(modes) != 2:
        raise ValueError("compare_mixers takes exactly two modes")
    model_cfg = model_cfg or TransformerConfig(image_size=task.image_size, num_classes=task.num_classes)
    data = {"train": task.split("train"), "val": task.split("val")}
    accs = []
    for mode in modes:
        arm = []
        for seed in seeds:
            res = train(model_cfg.replace(mode=MixMode(mode)), task, tc.replace(seed=seed), data=data)
            arm.append(res.final_val_accuracy)
            log.info("mode %s seed %d: val acc %.4f", MixMode(mode).value, seed, arm[-1])
        accs.append(arm)
    return CompareReport([MixMode(m).value for m in modes], list(seeds), accs)


def causal_prefix_invariant(model: IsotropicTransformer, images: np.ndarray, t: int, seed: int = 0) -> bool:
    """Token features ``0..t`` are unchanged when every later patch is replaced."""
    rng = np.random.default_rng(seed)
    p, n = model.patch, model.image_size // model.patch
    altered = images.copy()
    for tok in range(t + 1, model.num_tokens):
        r, c = divmod(tok, n)
        altered[:, r * p:(r + 1) * p, c * p:(c + 1) * p] = rng.normal(size=altered[:, r * p:(r + 1) * p, c * p:(c + 1) * p].shape)
    with no_grad():
        a = model.token_features(Tensor(images.astype(model.pos_embed.dtype))).data
        b = model.token_features(Tensor(altered.astype(model.pos_embed.dtype))).data
    return bool(np.array_equal(a[:, : t + 1], b[:, : t + 1]))
