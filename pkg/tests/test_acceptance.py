"""Acceptance criteria, one PASS/FAIL line each.

Under pytest the lines are collected into an "acceptance criteria" section of
the terminal summary. Running this file directly prints them as they finish.
"""

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from mambaout_kit.audit import (
    PUBLISHED_PRESETS,
    audit,
    classify_sequence_task,
    compare_published,
    transformer_block_flops,
)
from mambaout_kit.blocks import GatedBlock, MixerKind
from mambaout_kit.checkpoint import load_into, save_checkpoint
from mambaout_kit.gradcheck import run_suite
from mambaout_kit.harness import (
    COMPARE_TRAIN,
    MICRO_TARGET_ACCURACY,
    MICRO_TRAIN,
    MIXER_GAP_BAND,
    MIXER_GAP_BASELINE,
    SyntheticTask,
    compare_mixers,
    train,
)
from mambaout_kit.mixers import MixMode
from mambaout_kit.models import build_mambaout, forward, get_preset
from mambaout_kit.scancheck import cumsum_limit_error, scan_check
from mambaout_kit.tensor import Tensor, no_grad


def _published_checks(metric_index):
    rows, ok = [], True
    for name in PUBLISHED_PRESETS:
        rep = compare_published(audit(build_mambaout(name, rng=0)), name)
        c = rep.checks[metric_index]
        ok &= c["passed"] and rep.head is not None
        rows.append(f"{name} {c['measured']:.3f}/{c['published']} ({c['rel_error']:+.2%})")
    return ok, ", ".join(rows)


def criterion_1():
    return _published_checks(0)


def criterion_2():
    return _published_checks(1)


def criterion_3():
    flops = transformer_block_flops(384, 196)
    small, base = classify_sequence_task(196, 384), classify_sequence_task(196, 768)
    long_small = classify_sequence_task(4000, 384)
    ok = (flops == 752_640_000 and small.tau == 2304 and base.tau == 4608
          and not small.is_long_sequence and not base.is_long_sequence and long_small.is_long_sequence)
    return ok, f"flops(384,196)={flops:,}, tau={small.tau}/{base.tau}, r_L(196,384)={float(small.r_L):.4f}"


def criterion_4():
    t0 = time.perf_counter()
    rep = scan_check(max_len=512, trials=200, seed=0, tolerance=1e-5)
    dt = time.perf_counter() - t0
    ok = rep.passed and rep.trials >= 200 and max(rep.lengths) == 512 and dt < 60
    return ok, f"{rep.trials} trials, max rel err {rep.max_error:.2e}, causal exact {rep.causal_exact}, {dt:.1f}s"


def criterion_5():
    results = run_suite(n_coords=100, seed=0, include_blocks=True)
    names = {r.name for r in results}
    blocks = {"gated_block_gated-conv", "gated_block_mamba-ssm", "transformer_block_fully-visible",
              "transformer_block_causal"}
    worst = max(r.max_rel_error for r in results)
    ok = blocks <= names and all(r.coords >= 100 and r.passed(1e-4) for r in results)
    return ok, f"{len(results)} cases, min coords {min(r.coords for r in results)}, max rel err {worst:.2e}"


def _randomized(block, seed):
    rng = np.random.default_rng(seed)
    for _, p in block.named_parameters():
        p.data = rng.normal(0, 0.3, p.shape)
    return block


def criterion_6():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 5, 16)))
    identity_ok = True
    for kind in (MixerKind.GATED_CONV, MixerKind.MAMBA_SSM):
        blk = _randomized(GatedBlock(16, 0, kind=kind, state_dim=4, dtype=np.float64), 1)
        blk.fc2.weight.data[:] = 0
        blk.fc2.bias.data[:] = 0
        with no_grad():
            identity_ok &= np.array_equal(blk(x).data, x.data)

    gated = _randomized(GatedBlock(16, 0, dtype=np.float64), 2)
    mamba = GatedBlock(16, 0, kind=MixerKind.MAMBA_SSM, state_dim=4, dtype=np.float64)
    shared = gated.parameters()
    for name, p in mamba.parameters().items():
        if name in shared:
            p.data = shared[name].data.copy()
    mamba._ssm_fn = lambda seq: seq
    mamba._ssm_activation = lambda z: z
    with no_grad():
        reduction = float(np.abs(mamba(x).data - gated(x).data).max())

    with tempfile.TemporaryDirectory() as d:
        imgs = np.random.default_rng(3).normal(size=(2, 32, 32, 3))
        a = build_mambaout("micro", rng=0, dtype=np.float64)
        path = save_checkpoint(Path(d) / "a.mokt", a)
        b = build_mambaout("micro", rng=5, dtype=np.float64)
        load_into(b, path)
        round_trip = (np.array_equal(forward(a, imgs).data, forward(b, imgs).data)
                      and path.read_bytes() == save_checkpoint(Path(d) / "b.mokt", b).read_bytes())
    ok = identity_ok and reduction <= 1e-12 and round_trip
    return ok, f"zero-W3 identity {identity_ok}, mamba->gated diff {reduction:.1e}, checkpoint bit-identical {round_trip}"


def criterion_7():
    err = cumsum_limit_error()
    return err <= 1e-8, f"max rel err vs cumulative sum {err:.2e}"


def criterion_8():
    t0 = time.perf_counter()
    rep = compare_mixers(SyntheticTask(), (MixMode.FULLY_VISIBLE, MixMode.CAUSAL), COMPARE_TRAIN, seeds=(0, 1, 2))
    dt = time.perf_counter() - t0
    control_task = SyntheticTask(n_train=256, n_val=128, seed=9)
    short = COMPARE_TRAIN.replace(epochs=2, warmup_epochs=0)
    control = compare_mixers(control_task, (MixMode.FULLY_VISIBLE, MixMode.FULLY_VISIBLE), short, seeds=(0, 1, 2))
    in_band = abs(rep.gap - MIXER_GAP_BASELINE) <= MIXER_GAP_BAND
    ok = rep.means[0] >= rep.means[1] and control.gap == 0.0 and in_band and dt <= 30 * 60
    return ok, (f"FV {rep.means[0]:.4f} vs causal {rep.means[1]:.4f}, gap {rep.gap:+.4f} "
                f"(baseline {MIXER_GAP_BASELINE:+.4f} +/- {MIXER_GAP_BAND}), control gap {control.gap}, {dt / 60:.1f} min")


def criterion_9():
    cfg, task = get_preset("micro"), SyntheticTask()
    data = {"train": task.split("train"), "val": task.split("val")}
    t0 = time.perf_counter()
    a = train(cfg, task, MICRO_TRAIN, data=data)
    dt = time.perf_counter() - t0
    b = train(cfg, task, MICRO_TRAIN, data=data)
    deterministic = a.metrics_csv() == b.metrics_csv()
    train_losses = [h["loss"] for h in a.history if h["split"] == "train"][:5]
    decreasing = all(x > y for x, y in zip(train_losses, train_losses[1:]))
    ok = (MICRO_TRAIN.epochs <= 30 and a.final_val_accuracy >= MICRO_TARGET_ACCURACY and deterministic
          and decreasing and dt <= 10 * 60)
    return ok, (f"val acc {a.final_val_accuracy:.4f} (target {MICRO_TARGET_ACCURACY}) in {MICRO_TRAIN.epochs} epochs, "
                f"identical CSV on rerun {deterministic}, first-5 loss decreasing {decreasing}, {dt / 60:.1f} min/run")


CRITERIA = {
    1: ("published parameter parity", criterion_1),
    2: ("published MAC parity at 224", criterion_2),
    3: ("attention cost exactness", criterion_3),
    4: ("scan equivalence", criterion_4),
    5: ("gradient suite", criterion_5),
    6: ("structural identities", criterion_6),
    7: ("degenerate SSM oracle", criterion_7),
    8: ("fully-visible vs causal direction", criterion_8),
    9: ("micro training sanity", criterion_9),
}


def evaluate(n):
    title, fn = CRITERIA[n]
    ok, detail = fn()
    return ok, f"[{n}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"


@pytest.mark.slow
@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, acceptance_log):
    ok, line = evaluate(n)
    acceptance_log[n] = line
    print(line)
    assert ok, line


if __name__ == "__main__":
    failed = 0
    for n in sorted(CRITERIA):
        ok, line = evaluate(n)
        failed += not ok
        print(line, flush=True)
    sys.exit(1 if failed else 0)
