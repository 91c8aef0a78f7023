"""Wall-clock comparison of the sequential and parallel selective scan."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..mixers import recurrence_parallel, recurrence_sequential


@dataclass
class BenchRow:
    T: int
    sequential_s: float
    parallel_s: float
    max_rel_err: float

    @property
    def seq_per_token(self) -> float:
        return self.sequential_s / self.T

    @property
    def par_per_token(self) -> float:
        return self.parallel_s / self.T


@dataclass
class BenchReport:
    D: int
    N: int
    repeats: int
    rows: list[BenchRow] = field(default_factory=list)

    def row(self, T: int) -> BenchRow:
        return next(r for r in self.rows if r.T == T)

    def per_token_ratio(self, T1: int, T2: int) -> float:
        """Sequential per-token cost ratio, larger over smaller."""
        a, b = self.row(T1).seq_per_token, self.row(T2).seq_per_token
        return max(a, b) / min(a, b)

    def to_dict(self) -> dict:
        return {
            "D": self.D, "N": self.N, "repeats": self.repeats,
            "rows": [{"T": r.T, "sequential_s": r.sequential_s, "parallel_s": r.parallel_s,
                      "sequential_per_token_s": r.seq_per_token, "parallel_per_token_s": r.par_per_token,
                      "max_rel_err": r.max_rel_err} for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        head = f"{'T':>6} {'seq (ms)':>10} {'par (ms)':>10} {'seq/token (us)':>15} {'par/token (us)':>15} {'max rel err':>12}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.T:>6} {r.sequential_s * 1e3:>10.3f} {r.parallel_s * 1e3:>10.3f} "
                         f"{r.seq_per_token * 1e6:>15.3f} {r.par_per_token * 1e6:>15.3f} {r.max_rel_err:>12.2e}")
        return "\n".join(lines)


def _median_time(fn, repeats: int) -> float:
    fn()  # warmup, discarded
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_scan(T_list: Sequence[int] = (1, 64, 512, 4096), D: int = 16, N: int = 8,
               repeats: int = 5, seed: int = 0) -> BenchReport:
    """Median wall time of both recurrences on random stable inputs per ``T``."""
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    rng = np.random.default_rng(seed)
    report = BenchReport(D, N, repeats)
    for T in T_list:
        a = rng.uniform(0.5, 0.99, (T, D, N))
        b = rng.normal(size=(T, D, N))
        seq = _median_time(lambda: recurrence_sequential(a, b), repeats)
        par = _median_time(lambda: recurrence_parallel(a, b), repeats)
        hs, hp = recurrence_sequential(a, b), recurrence_parallel(a, b)
        err = float(np.max(np.abs(hs - hp) / np.maximum(np.abs(hs), 1e-12)))
        report.rows.append(BenchRow(T, seq, par, err))
    return report
