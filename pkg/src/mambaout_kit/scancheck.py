"""Oracle checks for the selective scan: parallel vs sequential, causality,
and the ``A -> 0`` cumulative-sum limit."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mixers import selective_scan
from .tensor import no_grad


def random_scan_inputs(rng: np.random.Generator, T: int, D: int = 4, N: int = 3, batch: int = 1):
    x = rng.normal(size=(batch, T, D))
    delta = np.exp(rng.uniform(np.log(1e-3), np.log(1.0), (batch, T, D)))
    A = -np.exp(rng.uniform(np.log(0.1), np.log(4.0), (D, N)))
    B = rng.normal(size=(batch, T, N))
    C = rng.normal(size=(batch, T, N))
    return x, delta, A, B, C


def _scan(method: str, *args) -> np.ndarray:
    with no_grad():
        return selective_scan(*args, method=method).data


def scan_rel_error(parallel: np.ndarray, sequential: np.ndarray) -> float:
    """Max abs deviation over the max magnitude of the sequential output."""
    scale = max(float(np.abs(sequential).max()), np.finfo(np.float64).tiny)
    return float(np.abs(parallel - sequential).max()) / scale


def causality_exact(rng: np.random.Generator, T: int, method: str = "sequential") -> bool:
    """Outputs before ``t`` are bit-identical after perturbing inputs at ``t`` and later."""
    if T < 2:
        return True
    args = random_scan_inputs(rng, T)
    t = int(rng.integers(1, T))
    pert = [a.copy() for a in args]
    for i in (0, 1, 3, 4):  # time-indexed inputs: x, delta, B, C
        pert[i][:, t:] = random_scan_inputs(rng, T)[i][:, t:]
    return bool(np.array_equal(_scan(method, *args)[:, :t], _scan(method, *pert)[:, :t]))


@dataclass
class ScanCheckReport:
    trials: int
    max_len: int
    tolerance: float
    lengths: list[int] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)
    causal_exact: bool = True

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance and self.causal_exact

    def to_dict(self) -> dict:
        worst = int(np.argmax(self.errors)) if self.errors else None
        return {"trials": self.trials, "max_len": self.max_len, "tolerance": self.tolerance,
                "max_rel_error": self.max_error,
                "worst_length": self.lengths[worst] if worst is not None else None,
                "causal_exact": self.causal_exact, "passed": self.passed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        d = self.to_dict()
        return "\n".join(f"{k:<16} {v}" for k, v in d.items())


def scan_check(max_len: int = 512, trials: int = 200, seed: int = 0, tolerance: float = 1e-5,
               causal_trials: int = 20) -> ScanCheckReport:
    """Random-length float64 comparison of both scan evaluators."""
    if max_len < 1 or trials < 1:
        raise ValueError("max_len and trials must be positive")
    rng = np.random.default_rng(seed)
    report = ScanCheckReport(trials, max_len, tolerance)
    # always include the edges of the length range
    lengths = [1, max_len] + list(rng.integers(1, max_len + 1, max(trials - 2, 0)))
    for T in lengths[:trials]:
        args = random_scan_inputs(rng, int(T))
        report.lengths.append(int(T))
        report.errors.append(scan_rel_error(_scan("parallel", *args), _scan("sequential", *args)))
    report.causal_exact = all(causality_exact(rng, int(rng.integers(2, max(max_len, 2) + 1)))
                              for _ in range(causal_trials))
    return report


def cumsum_limit_error(T: int = 64, D: int = 4, N: int = 3, eps: float = 1e-12, seed: int = 0) -> float:
    """Deviation from ``y_t = sum_n C_t[n] * sum_{s<=t} delta_s B_s[n] x_s`` as ``A -> 0``."""
    rng = np.random.default_rng(seed)
    x, delta, _, B, C = random_scan_inputs(rng, T, D, N)
    A = -eps * np.ones((D, N))
    y = _scan("sequential", x, delta, A, B, C)
    u = delta[..., None] * B[..., None, :] * x[..., None]  # [b, T, D, N]
    expected = np.einsum("btdn,btn->btd", np.cumsum(u, axis=1), C)
    return float(np.abs(y - expected).max())
