"""``mokt`` command line: audit, verification, training and benchmarks.

Exit status is 0 on success, 1 when a check fails or the arguments are bad,
and 2 on an unexpected internal error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import platform
import sys
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__

log = logging.getLogger("mokt")

EXIT_OK, EXIT_INVALID, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    """Bad flags or values; reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# output helpers


def _jsonable(obj):
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=_jsonable)


def version_stamp() -> dict:
    return {"mokt": __version__, "python": platform.python_version(), "numpy": np.__version__}


class Run:
    """Collects the effective config and outputs of one command invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.fmt = args.format
        self.out = Path(args.out) if args.out else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)

    def echo_config(self, config: dict) -> None:
        config = {"command": self.args.command, **config, "seed": self.args.seed}
        if self.fmt == "table":
            print("# effective config")
            for k, v in config.items():
                print(f"#   {k}: {json.dumps(v, default=_jsonable)}")
        self.config = config
        if self.out is not None:
            (self.out / "config.json").write_text(_dumps(config) + "\n")
            (self.out / "version.json").write_text(_dumps(version_stamp()) + "\n")

    def emit(self, result: dict, table: str) -> None:
        if self.fmt == "json":
            print(_dumps({"config": self.config, "result": result}))
        else:
            print(table)
        if self.out is not None:
            (self.out / "result.json").write_text(_dumps(result) + "\n")
            (self.out / "result.txt").write_text(table + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_audit(args, run: Run) -> int:
    from .audit import PUBLISHED_PRESETS, audit, compare_published
    from .models import build_mambaout, get_preset

    cfg = get_preset(args.model)
    run.echo_config({"model": cfg.to_dict(), "input": args.input, "include_head": not args.no_head})
    model = build_mambaout(cfg, rng=args.seed)
    report = audit(model, (args.input, args.input), include_head=not args.no_head)
    if cfg.name in PUBLISHED_PRESETS and args.input == 224:
        compare_published(report, cfg.name)
    run.emit(report.to_dict(), report.to_table(layers=args.layers))
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_complexity(args, run: Run) -> int:
    from .audit import classify_sequence_task, transformer_block_flops

    run.echo_config({"tokens": args.tokens, "dim": args.dim})
    v = classify_sequence_task(args.tokens, args.dim)
    D, L = args.dim, args.tokens
    linear, quad = 24 * D * D * L, 4 * D * L * L
    result = {**v.to_dict(), "linear_term": linear, "quadratic_term": quad}
    table = "\n".join([
        f"block FLOPs 24*D^2*L + 4*D*L^2 = {linear:,} + {quad:,} = {transformer_block_flops(D, L):,}",
        f"r_L = L/(6D) = {v.r_L} ~ {float(v.r_L):.4f}",
        f"tau = 6D = {v.tau}",
        f"verdict: {'long-sequence' if v.is_long_sequence else 'not long-sequence'}",
    ])
    run.emit(result, table)
    return EXIT_OK


def cmd_gradcheck(args, run: Run) -> int:
    from .gradcheck import run_suite

    run.echo_config({"coords": args.coords, "tolerance": args.tolerance, "blocks": not args.ops_only})
    results = run_suite(n_coords=args.coords, seed=args.seed, include_blocks=not args.ops_only)
    rows = [{"case": r.name, "coords": r.coords, "max_rel_error": r.max_rel_error,
             "passed": r.passed(args.tolerance)} for r in results]
    worst = max(r.max_rel_error for r in results)
    ok = all(r["passed"] for r in rows)
    w = max(len(r["case"]) for r in rows)
    lines = [f"{'case':<{w}}  {'coords':>6}  {'max rel err':>12}"]
    lines += [f"{r['case']:<{w}}  {r['coords']:>6}  {r['max_rel_error']:>12.3e}  {'PASS' if r['passed'] else 'FAIL'}"
              for r in rows]
    lines.append(f"max relative error {worst:.3e} (tol {args.tolerance:g}): {'PASS' if ok else 'FAIL'}")
    run.emit({"cases": rows, "max_rel_error": worst, "passed": ok}, "\n".join(lines))
    return EXIT_OK if ok else EXIT_INVALID


def cmd_scan_check(args, run: Run) -> int:
    from .scancheck import cumsum_limit_error, scan_check

    run.echo_config({"max_len": args.max_len, "trials": args.trials, "tolerance": args.tolerance})
    report = scan_check(args.max_len, args.trials, args.seed, args.tolerance)
    cum = cumsum_limit_error(seed=args.seed)
    result = {**report.to_dict(), "cumsum_limit_error": cum}
    table = report.to_table() + f"\ncumsum limit err {cum:.3e}"
    run.emit(result, table)
    return EXIT_OK if report.passed else EXIT_INVALID


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise UsageError(f"{path}: config must be a flat mapping of field names to values")
    return data


def resolve_train(args):
    """Merge preset, config file and flags into (ModelConfig, SyntheticTask, TrainConfig)."""
    from .harness import MICRO_TRAIN, SyntheticTask, TrainConfig
    from .models import ModelConfig, get_preset

    raw = _load_config(args.config)
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    task_fields = {"task_" + f.name for f in dataclasses.fields(SyntheticTask)}
    unknown = set(raw) - model_fields - train_fields - task_fields
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")

    cfg = get_preset(args.preset or raw.get("name", "micro"))
    mchanges = {k: v for k, v in raw.items() if k in model_fields and k != "name"}
    for k in ("depths", "widths"):
        if k in mchanges:
            mchanges[k] = tuple(mchanges[k])
    for k in ("expansion", "conv_ratio", "head_hidden_ratio"):
        if k in mchanges:
            mchanges[k] = Fraction(str(mchanges[k]))
    if "mixer" in mchanges:
        from .blocks import MixerKind
        mchanges["mixer"] = MixerKind(mchanges["mixer"])
    cfg = cfg.replace(**mchanges)

    tc = MICRO_TRAIN.replace(**{k: v for k, v in raw.items() if k in train_fields})
    flags = {"epochs": args.epochs, "batch_size": args.batch_size, "base_lr": args.lr}
    tc = tc.replace(**{k: v for k, v in flags.items() if v is not None}, seed=args.seed)
    if args.scaled_lr:
        tc = tc.replace(base_lr=None)

    tkw = {k[len("task_"):]: v for k, v in raw.items() if k in task_fields}
    if args.n_train is not None:
        tkw["n_train"] = args.n_train
    if args.n_val is not None:
        tkw["n_val"] = args.n_val
    tkw.setdefault("num_classes", cfg.num_classes)
    task = SyntheticTask(**tkw)
    return cfg, task, tc


def cmd_train(args, run: Run) -> int:
    from .harness import TrainingDiverged, train

    cfg, task, tc = resolve_train(args)
    run.echo_config({"model": cfg.to_dict(), "task": dataclasses.asdict(task), "train": tc.to_dict()})
    try:
        res = train(cfg, task, tc, out_dir=run.out)
    except TrainingDiverged as e:
        print(f"training aborted: {e}; last good checkpoint: {e.checkpoint}", file=sys.stderr)
        return EXIT_INVALID
    result = {"final_val_accuracy": res.final_val_accuracy, "history": res.history,
              "checkpoint": str(res.checkpoint) if res.checkpoint else None}
    run.emit(result, res.metrics_csv().rstrip() + f"\nfinal val accuracy {res.final_val_accuracy:.4f}")
    return EXIT_OK


def cmd_compare_mixers(args, run: Run) -> int:
    from .harness import COMPARE_TRAIN, SyntheticTask, TransformerConfig, compare_mixers
    from .mixers import MixMode

    modes = [MixMode(m) for m in args.modes]
    task = SyntheticTask(n_train=args.n_train, n_val=args.n_val, seed=args.task_seed)
    tc = COMPARE_TRAIN.replace(**{k: v for k, v in {"epochs": args.epochs, "base_lr": args.lr}.items()
                                  if v is not None})
    seeds = [args.seed + i for i in range(args.seeds)]
    mcfg = TransformerConfig(image_size=task.image_size, num_classes=task.num_classes)
    run.echo_config({"modes": [m.value for m in modes], "seeds": seeds, "task": dataclasses.asdict(task),
                     "train": tc.to_dict(), "model": mcfg.to_dict()})
    rep = compare_mixers(task, modes, tc, seeds, mcfg)
    lines = [f"{m:<14} mean {mu:.4f} sd {sd:.4f}  {a}" for m, mu, sd, a in
             zip(rep.modes, rep.means, rep.sds, rep.accuracies)]
    lines.append(f"gap ({rep.modes[0]} - {rep.modes[1]}): {rep.gap:+.4f}")
    run.emit(rep.to_dict(), "\n".join(lines))
    return EXIT_OK


def cmd_bench_scan(args, run: Run) -> int:
    from .harness.bench import bench_scan

    run.echo_config({"lengths": args.lengths, "dim": args.dim, "state_dim": args.state_dim,
                     "repeats": args.repeats})
    rep = bench_scan(args.lengths, args.dim, args.state_dim, args.repeats, args.seed)
    run.emit(rep.to_dict(), rep.to_table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _positive(kind):
    def parse(s):
        v = kind(s)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {s}")
        return v
    return parse


def _int_list(s: str) -> list[int]:
    try:
        vals = [int(v) for v in s.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("lengths must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--out", help="directory for config echo, outputs and version stamp")
    common.add_argument("--format", choices=("table", "json"), default="table")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="mokt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mokt {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("audit", parents=[common], help="parameter and MAC audit of a preset")
    s.add_argument("--model", default="femto")
    s.add_argument("--input", type=_positive(int), default=224, help="square input resolution")
    s.add_argument("--layers", action="store_true", help="show the per-layer breakdown")
    s.add_argument("--no-head", action="store_true", help="report totals without the classifier head")
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("complexity", parents=[common], help="attention block cost and long-sequence verdict")
    s.add_argument("--tokens", type=_positive(int), required=True)
    s.add_argument("--dim", type=_positive(int), required=True)
    s.set_defaults(func=cmd_complexity)

    s = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    s.add_argument("--coords", type=_positive(int), default=100)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--ops-only", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("scan-check", parents=[common], help="parallel vs sequential scan oracle")
    s.add_argument("--max-len", type=_positive(int), default=512)
    s.add_argument("--trials", type=_positive(int), default=200)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.set_defaults(func=cmd_scan_check)

    s = sub.add_parser("train", parents=[common], help="train on the synthetic arrangement task")
    s.add_argument("--preset", help="model preset (default micro)")
    s.add_argument("--config", help="flat YAML file keyed by config field names")
    s.add_argument("--epochs", type=_positive(int))
    s.add_argument("--batch-size", type=_positive(int))
    s.add_argument("--lr", type=float, help="override the base learning rate")
    s.add_argument("--scaled-lr", action="store_true", help="use the batch-size scaling rule")
    s.add_argument("--n-train", type=_positive(int))
    s.add_argument("--n-val", type=_positive(int))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("compare-mixers", parents=[common], help="fully-visible vs causal toy transformer")
    s.add_argument("--modes", nargs=2, choices=("fully-visible", "causal"), default=["fully-visible", "causal"])
    s.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed")
    s.add_argument("--epochs", type=_positive(int))
    s.add_argument("--lr", type=float)
    s.add_argument("--n-train", type=_positive(int), default=4000)
    s.add_argument("--n-val", type=_positive(int), default=800)
    s.add_argument("--task-seed", type=int, default=0)
    s.set_defaults(func=cmd_compare_mixers)

    s = sub.add_parser("bench-scan", parents=[common], help="time sequential and parallel scans")
    s.add_argument("--lengths", type=_int_list, default=[1, 64, 512, 4096])
    s.add_argument("--dim", type=_positive(int), default=16)
    s.add_argument("--state-dim", type=_positive(int), default=8)
    s.add_argument("--repeats", type=int, default=5)
    s.set_defaults(func=cmd_bench_scan)
    return p


def _thread_limit():
    raw = os.environ.get("MOKT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MOKT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("MOKT_THREADS must be >= 0")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "compare-mixers" and args.seeds < 1:
        parser.print_usage(sys.stderr)
        print("mokt: error: --seeds must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        with _thread_limit():
            return args.func(args, Run(args))
    except (UsageError, ValueError, FileNotFoundError, yaml.YAMLError) as e:
        print(f"mokt: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"mokt: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
