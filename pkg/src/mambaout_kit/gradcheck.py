"""Analytic-vs-finite-difference gradient checks for every op and block.

Each case builds float64 inputs, reduces the op output to a scalar through a
fixed random projection, and compares :func:`backward` against
:func:`finite_diff_grad` on a random sample of coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .blocks import GatedBlock, MixerKind, TransformerBlock, drop_path
from .mixers import AttnWeights, MixMode, attention, selective_scan, ssm_discretize
from .tensor import Tensor, backward, finite_diff_grad, no_grad

# below this magnitude errors are measured absolutely: central differences at
# h=1e-5 carry ~1e-10 of rounding noise, so tinier gradients have no relative signal
REL_FLOOR = 1e-5


@dataclass
class GradResult:
    name: str
    coords: int
    max_rel_error: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], n_coords: int = 100,
                    h: float = 1e-5, seed: int = 0, name: str = "") -> GradResult:
    """Compare gradients of ``loss_fn()`` w.r.t. ``tensors`` on sampled coordinates.

    ``loss_fn`` must read the tensors by reference; the finite-difference side
    swaps each tensor's data for the perturbed copy.
    """
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.grad = None
    grads = backward(loss_fn())
    sizes = np.array([t.size for t in tensors.values()])
    names = list(tensors)
    total = int(sizes.sum())
    # spread the coordinate budget over inputs, at least one each
    picks: dict[str, list[int]] = {n: [] for n in names}
    if total <= n_coords:
        for n in names:
            picks[n] = list(range(tensors[n].size))
    else:
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        forced = [int(offsets[i] + rng.integers(sizes[i])) for i in range(len(names))]
        rest = np.setdiff1d(np.arange(total), forced)
        flat = [*forced, *rng.choice(rest, size=n_coords - len(names), replace=False)]
        for f in flat:
            i = int(np.searchsorted(offsets, f, side="right") - 1)
            picks[names[i]].append(int(f - offsets[i]))
    worst, count = 0.0, 0
    for n in names:
        idx = sorted(set(picks[n]))
        if not idx:
            continue
        t = tensors[n]
        original = t.data

        def f(x, t=t):
            t.data = x.data
            try:
                return loss_fn()
            finally:
                t.data = original

        numeric = finite_diff_grad(f, Tensor(original.copy()), h=h, indices=idx).data.reshape(-1)[idx]
        analytic = grads[t].reshape(-1)[idx] if t in grads else np.zeros(len(idx))
        worst = max(worst, float(relative_error(analytic, numeric).max()))
        count += len(idx)
    return GradResult(name, count, worst)


def _projected(out_fn, shape_rng_seed=1):
    """Wrap ``out_fn`` so its output is reduced by a fixed random projection."""
    cache: dict = {}

    def loss():
        out = out_fn()
        if "R" not in cache:
            cache["R"] = Tensor(np.random.default_rng(shape_rng_seed).normal(size=out.shape))
        return ops.sum(ops.mul(out, cache["R"]))

    return loss


def _t(rng, *shape, low=None, high=None):
    if low is not None:
        return Tensor(rng.uniform(low, high, shape), requires_grad=True)
    return Tensor(rng.normal(size=shape), requires_grad=True)


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    """Named ``(loss_fn, tensors)`` pairs covering every differentiable op."""
    rng = np.random.default_rng(seed)
    cases = {}

    def add_case(name, out_fn, tensors):
        cases[name] = (_projected(out_fn), tensors)

    a, b = _t(rng, 6, 20), _t(rng, 20)
    add_case("add", lambda: ops.add(a, b), {"a": a, "b": b})
    a2, b2 = _t(rng, 6, 20), _t(rng, 6, 1)
    add_case("sub", lambda: ops.sub(a2, b2), {"a": a2, "b": b2})
    a3, b3 = _t(rng, 6, 20), _t(rng, 20)
    add_case("mul", lambda: ops.mul(a3, b3), {"a": a3, "b": b3})
    a4, b4 = _t(rng, 6, 20), _t(rng, 6, 20, low=0.5, high=2.0)
    add_case("div", lambda: ops.div(a4, b4), {"a": a4, "b": b4})
    n = _t(rng, 120)
    add_case("neg", lambda: ops.neg(n), {"x": n})
    e = _t(rng, 120)
    add_case("exp", lambda: ops.exp(e), {"x": e})
    lg = _t(rng, 120, low=0.2, high=3.0)
    add_case("log", lambda: ops.log(lg), {"x": lg})
    sp = Tensor(rng.normal(scale=3.0, size=120), requires_grad=True)
    add_case("softplus", lambda: ops.softplus(sp), {"x": sp})
    ge = Tensor(rng.normal(scale=2.0, size=120), requires_grad=True)
    add_case("gelu", lambda: ops.gelu(ge), {"x": ge})
    ex = Tensor(rng.uniform(-3, 0.5, 120), requires_grad=True)
    add_case("expm1_over_x", lambda: ops.expm1_over_x(ex), {"z": ex})
    ma, mb = _t(rng, 2, 5, 7), _t(rng, 7, 5)
    add_case("matmul", lambda: ops.matmul(ma, mb), {"a": ma, "b": mb})
    mc, md = _t(rng, 2, 4, 6), _t(rng, 2, 6, 5)
    add_case("matmul_batched", lambda: ops.matmul(mc, md), {"a": mc, "b": md})
    s = _t(rng, 4, 5, 6)
    add_case("sum", lambda: ops.sum(s, axis=(0, 2)), {"x": s})
    mn = _t(rng, 4, 5, 6)
    add_case("mean", lambda: ops.mean(mn, axis=1, keepdims=True), {"x": mn})
    rs = _t(rng, 4, 5, 6)
    add_case("reshape", lambda: ops.reshape(rs, (20, 6)), {"x": rs})
    pm = _t(rng, 4, 5, 6)
    add_case("permute", lambda: ops.permute(pm, (2, 0, 1)), {"x": pm})
    sl = _t(rng, 4, 5, 6)
    add_case("split", lambda: ops.mul(ops.split(sl, (1, 3, 2))[1], 2.0), {"x": sl})
    c1, c2 = _t(rng, 4, 5, 6), _t(rng, 4, 5, 3)
    add_case("concat", lambda: ops.concat([c1, c2], axis=-1), {"a": c1, "b": c2})
    lx, lgam, lbet = _t(rng, 8, 16), _t(rng, 16), _t(rng, 16)
    add_case("layer_norm", lambda: ops.layer_norm(lx, lgam, lbet, 1e-6), {"x": lx, "gamma": lgam, "beta": lbet})
    sm = _t(rng, 6, 20)
    add_case("softmax", lambda: ops.softmax(sm), {"x": sm})
    smm = _t(rng, 12, 12)
    mask = np.tril(np.ones((12, 12), dtype=bool))
    add_case("softmax_masked", lambda: ops.softmax(smm, mask=mask), {"x": smm})
    ce = _t(rng, 16, 8)
    labels = rng.integers(0, 8, 16)
    cases["cross_entropy"] = (lambda: ops.cross_entropy(ce, labels, smoothing=0.1), {"logits": ce})
    dx, dk = _t(rng, 2, 6, 6, 3), _t(rng, 3, 3, 3)
    add_case("depthwise_conv2d", lambda: ops.depthwise_conv2d(dx, dk, 1, 1), {"x": dx, "kernel": dk})
    dx2, dk2 = _t(rng, 2, 7, 7, 3), _t(rng, 3, 3, 3)
    add_case("depthwise_conv2d_stride2", lambda: ops.depthwise_conv2d(dx2, dk2, 2, 1), {"x": dx2, "kernel": dk2})
    cx, ck = _t(rng, 2, 6, 6, 3), _t(rng, 3, 3, 3, 4)
    add_case("conv2d", lambda: ops.conv2d(cx, ck, 2, 1), {"x": cx, "kernel": ck})
    px, pk = _t(rng, 1, 8, 8, 3), _t(rng, 4, 4, 3, 5)
    add_case("conv2d_patch", lambda: ops.conv2d(px, pk, 4, 0), {"x": px, "kernel": pk})

    T, D, N = 16, 4, 3
    delta = Tensor(rng.uniform(0.05, 1.0, (T, D)), requires_grad=True)
    A = Tensor(-rng.uniform(0.2, 2.0, (D, N)), requires_grad=True)
    Bm = _t(rng, T, N)
    T = 7
    add_case("ssm_discretize", lambda: ops.concat(list(ssm_discretize(delta, A, Bm)), axis=-1),
             {"delta": delta, "A": A, "B": Bm})
    for method in ("sequential", "parallel"):
        x = _t(rng, 2, T, D)
        dl = Tensor(rng.uniform(0.05, 1.0, (2, T, D)), requires_grad=True)
        Am = Tensor(-rng.uniform(0.2, 2.0, (D, N)), requires_grad=True)
        Bs, Cs = _t(rng, 2, T, N), _t(rng, 2, T, N)
        add_case(f"selective_scan_{method}",
                 lambda x=x, dl=dl, Am=Am, Bs=Bs, Cs=Cs, m=method: selective_scan(x, dl, Am, Bs, Cs, m),
                 {"x": x, "delta": dl, "A": Am, "B": Bs, "C": Cs})
    for mode in MixMode:
        ax = _t(rng, 2, 5, 8)
        w = AttnWeights.init(8, heads=2, rng=rng, dtype=np.float64, std=0.5)
        add_case(f"attention_{mode.value}", lambda ax=ax, w=w, m=mode: attention(ax, w, m),
                 {"x": ax, **w.parameters()})
    dp = _t(rng, 8, 3, 3, 2)
    add_case("drop_path", lambda: drop_path(dp, 0.5, True, np.random.default_rng(7)), {"x": dp})
    return cases


def _randomize(module, rng, scale=0.3):
    # trained-like weights so no branch sits at an init-time zero
    for name, t in module.named_parameters():
        if name.endswith("A_log"):
            continue
        t.data = t.data + rng.normal(scale=scale, size=t.shape)


def block_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    rng = np.random.default_rng(seed)
    cases = {}
    for kind in (MixerKind.GATED_CONV, MixerKind.MAMBA_SSM, MixerKind.IDENTITY):
        blk = GatedBlock(6, rng, kind=kind, kernel_size=3, state_dim=3, dtype=np.float64)
        _randomize(blk, rng)
        x = _t(rng, 2, 3, 3, 6)
        cases[f"gated_block_{kind.value}"] = (
            _projected(lambda blk=blk, x=x: blk(x)), {"x": x, **blk.parameters()})
    for mode in MixMode:
        tb = TransformerBlock(8, rng, heads=2, mode=mode, dtype=np.float64)
        _randomize(tb, rng)
        x = _t(rng, 2, 5, 8)
        cases[f"transformer_block_{mode.value}"] = (
            _projected(lambda tb=tb, x=x: tb(x)), {"x": x, **tb.parameters()})
    return cases


def run_suite(n_coords: int = 100, seed: int = 0, include_blocks: bool = True) -> list[GradResult]:
    cases = dict(op_cases(seed))
    if include_blocks:
        cases.update(block_cases(seed))
    results = []
    for name, (loss_fn, tensors) in cases.items():
        results.append(check_gradients(loss_fn, tensors, n_coords=n_coords, seed=seed, name=name))
    return results


def graph_replay_matches(loss_fn: Callable[[], Tensor]) -> bool:
    """Replaying a recorded graph from its leaves reproduces every output bit-for-bit."""
    from .tensor import Graph

    out = loss_fn()
    graph = Graph.from_output(out)
    with no_grad():
        replayed = graph.replay()
    return all(np.array_equal(r, n.output.data) for r, n in zip(replayed, graph.nodes))
