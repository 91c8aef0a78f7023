import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambaout_kit import ops
from mambaout_kit.mixers import (
    AttnWeights,
    MixMode,
    SsmParams,
    attention,
    causal_mask,
    conv_mixer,
    recurrence_parallel,
    recurrence_sequential,
    selective_scan,
    split_indices,
    ssm_discretize,
    ssm_scan_parallel,
    ssm_scan_sequential,
)
from mambaout_kit.scancheck import cumsum_limit_error, random_scan_inputs, scan_check, scan_rel_error
from mambaout_kit.tensor import ShapeError, Tensor, no_grad


def scan(method, *args):
    with no_grad():
        return selective_scan(*args, method=method).data


class TestDiscretize:
    def test_small_a_limit(self):
        delta = np.full((1, 3, 2), 0.5)
        A = np.full((2, 4), -1e-12)
        B = np.arange(12.0).reshape(1, 3, 4)
        a_bar, b_bar = ssm_discretize(delta, A, B)
        np.testing.assert_allclose(a_bar.data, 1.0, atol=1e-12)
        np.testing.assert_allclose(b_bar.data, 0.5 * B[:, :, None, :] * np.ones((1, 3, 2, 4)), rtol=1e-11)

    def test_delta_a_minus_one_against_decimal(self):
        getcontext().prec = 40
        e_inv = float(Decimal(-1).exp())
        one_minus = float(1 - Decimal(-1).exp())
        # z = delta * A = -1, so B_bar = (e^z - 1)/z * delta * B = (1 - e^-1) * 2 * 3
        delta = np.array([[2.0]])
        A = np.array([[-0.5]])
        B = np.array([[3.0]])
        a_bar, b_bar = ssm_discretize(delta, A, B)
        assert a_bar.data.item() == pytest.approx(e_inv, rel=1e-15)
        assert b_bar.data.item() == pytest.approx(one_minus * 2.0 * 3.0, rel=1e-14)

    def test_series_and_closed_form_meet_at_threshold(self):
        rng = np.random.default_rng(3)
        for z0 in (1e-6 * (1 - 1e-9), 1e-6 * (1 + 1e-9)):
            z = -z0 * rng.uniform(0.999, 1.001, 50)
            series = ops.expm1_over_x(Tensor(z), threshold=1.0).data
            closed = ops.expm1_over_x(Tensor(z), threshold=0.0).data
            np.testing.assert_allclose(series, closed, atol=1e-10)

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ValueError):
            ssm_discretize(np.zeros((1, 2, 2)), -np.ones((2, 2)), np.ones((1, 2, 2)))

    def test_ssm_params_invariants(self):
        p = SsmParams.init(6, 4, rng=0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 6)))
        delta, A, _, _ = p.project(x)
        assert np.all(delta.data > 0)
        assert np.all(A.data < 0)
        a_bar, _ = ssm_discretize(delta, A, np.ones((2, 5, 4)))
        assert np.all((a_bar.data > 0) & (a_bar.data < 1))


class TestSequentialScan:
    def test_single_step(self):
        rng = np.random.default_rng(0)
        x, delta, A, B, C = random_scan_inputs(rng, 1)
        a_bar, b_bar = ssm_discretize(delta, A, B)
        expected = np.einsum("btdn,btn->btd", b_bar.data * x[..., None], C)
        np.testing.assert_allclose(scan("sequential", x, delta, A, B, C), expected, rtol=1e-14)

    def test_cumulative_sum_limit(self):
        assert cumsum_limit_error(T=128) < 1e-8

    def test_constant_params_running_sum(self):
        rng = np.random.default_rng(1)
        T, D, N = 40, 3, 2
        x = rng.normal(size=(1, T, D))
        delta = np.full((1, T, D), 0.3)
        B = np.tile(rng.normal(size=N), (1, T, 1))
        C = np.tile(rng.normal(size=N), (1, T, 1))
        A = -1e-13 * np.ones((D, N))
        y = scan("sequential", x, delta, A, B, C)
        expected = (C[0, 0] @ B[0, 0]) * 0.3 * np.cumsum(x, axis=1)
        np.testing.assert_allclose(y, expected, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("method", ["sequential", "parallel"])
    def test_causality(self, method):
        rng = np.random.default_rng(2)
        x, delta, A, B, C = random_scan_inputs(rng, 33)
        base = scan(method, x, delta, A, B, C)
        for t in (0, 10, 31):
            x2 = x.copy()
            x2[:, t + 1:] += rng.normal(size=x2[:, t + 1:].shape)
            out = scan(method, x2, delta, A, B, C)
            if method == "sequential":
                np.testing.assert_array_equal(out[:, :t + 1], base[:, :t + 1])
            else:
                np.testing.assert_allclose(out[:, :t + 1], base[:, :t + 1], atol=1e-10)

    def test_stability_long_sequence(self):
        rng = np.random.default_rng(4)
        T, D, N = 4096, 4, 3
        x = rng.uniform(-1, 1, (T, D))
        delta = rng.uniform(0.01, 2.0, (T, D))
        A = -np.exp(rng.uniform(-2, 1, (D, N)))
        B = rng.uniform(-1, 1, (T, N))
        a_bar, b_bar = ssm_discretize(delta, A, B)
        u = b_bar.data * x[..., None]
        h = recurrence_sequential(a_bar.data, u)
        bound = np.abs(u).max(0) / (1 - a_bar.data.max(0))
        assert np.all(np.isfinite(h))
        assert np.all(np.abs(h) <= bound * (1 + 1e-12))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            selective_scan(np.ones((2, 0, 3)), np.ones((2, 0, 3)), -np.ones((3, 2)), np.ones((2, 0, 2)), np.ones((2, 0, 2)))
        with pytest.raises(ValueError):
            selective_scan(*random_scan_inputs(np.random.default_rng(0), 3), method="bogus")


class TestParallelScan:
    def test_length_one_is_exact(self):
        args = random_scan_inputs(np.random.default_rng(5), 1)
        np.testing.assert_array_equal(scan("parallel", *args), scan("sequential", *args))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 300), st.integers(0, 2**32 - 1))
    def test_matches_sequential(self, T, seed):
        args = random_scan_inputs(np.random.default_rng(seed), T)
        assert scan_rel_error(scan("parallel", *args), scan("sequential", *args)) <= 1e-5

    def test_unit_decay_is_running_sum(self):
        b = np.random.default_rng(6).normal(size=(37, 2))
        np.testing.assert_allclose(recurrence_parallel(np.ones_like(b), b), np.cumsum(b, axis=0), rtol=1e-12, atol=1e-13)

    def test_suite_report(self):
        rep = scan_check(max_len=128, trials=50, seed=1)
        assert rep.passed and len(rep.errors) == 50
        assert rep.lengths[:2] == [1, 128]

    def test_ssm_wrappers_agree(self):
        p = SsmParams.init(5, 4, rng=2, dtype=np.float64)
        x = Tensor(np.random.default_rng(7).normal(size=(2, 19, 5)))
        with no_grad():
            a, b = ssm_scan_sequential(x, p).data, ssm_scan_parallel(x, p).data
        assert scan_rel_error(b, a) < 1e-12


class TestConvMixer:
    def test_split_arithmetic(self):
        assert split_indices(64) == (170, 106, 64)

    def test_zero_conv_channels_passthrough(self):
        x = np.random.default_rng(0).normal(size=(1, 4, 4, 8))
        g, z = conv_mixer(Tensor(x), None, (4, 4, 0))
        np.testing.assert_array_equal(g.data, x[..., :4])
        np.testing.assert_array_equal(z.data, x[..., 4:])

    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(1).normal(size=(2, 5, 5, 10))
        k = np.zeros((7, 7, 3))
        k[3, 3] = 1.0
        g, z = conv_mixer(Tensor(x), Tensor(k), (5, 2, 3))
        np.testing.assert_array_equal(g.data, x[..., :5])
        np.testing.assert_array_equal(z.data, x[..., 5:])

    def test_invalid_ratio(self):
        with pytest.raises(ValueError):
            split_indices(16, conv_ratio=3.0)


class TestAttention:
    @pytest.fixture
    def weights(self):
        return AttnWeights.init(8, heads=2, rng=0, dtype=np.float64, std=0.5)

    def test_single_token_modes_agree(self, weights):
        x = np.random.default_rng(0).normal(size=(1, 8))
        with no_grad():
            a = attention(x, weights, MixMode.FULLY_VISIBLE).data
            b = attention(x, weights, MixMode.CAUSAL).data
        np.testing.assert_array_equal(a, b)

    def test_causal_prefix_invariance(self, weights):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(9, 8))
        with no_grad():
            base = attention(x, weights, MixMode.CAUSAL).data
            for t in range(8):
                x2 = x.copy()
                x2[t + 1:] = rng.normal(size=x2[t + 1:].shape)
                np.testing.assert_array_equal(attention(x2, weights, MixMode.CAUSAL).data[:t + 1], base[:t + 1])

    def test_fully_visible_is_not_causal(self, weights):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 8))
        x2 = x.copy()
        x2[-1] += 1.0
        with no_grad():
            assert not np.allclose(attention(x, weights).data[0], attention(x2, weights).data[0])

    def test_zero_logits_give_mean_rows_under_permutation(self):
        rng = np.random.default_rng(3)
        w = AttnWeights(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))),
                        Tensor(rng.normal(size=(4, 4))), Tensor(np.eye(4)))
        x = rng.normal(size=(6, 4))
        perm = rng.permutation(6)
        with no_grad():
            out = attention(x[perm], w).data
        expected = np.tile((x @ w.Wv.data).mean(0), (6, 1))
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_rows_are_stochastic(self, weights):
        x = np.random.default_rng(4).normal(size=(3, 7, 8))
        with no_grad():
            _, p = attention(x, weights, return_weights=True)
            _, pc = attention(x, weights, MixMode.CAUSAL, return_weights=True)
        np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-6)
        assert np.all(pc.data[..., ~causal_mask(7)] == 0)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            AttnWeights.init(6, heads=4)


def test_recurrences_agree_on_decay_grid():
    rng = np.random.default_rng(9)
    for T in (2, 3, 7, 8, 9, 255, 256, 257):
        a = rng.uniform(0, 1, (T, 3))
        b = rng.normal(size=(T, 3))
        np.testing.assert_allclose(recurrence_parallel(a, b), recurrence_sequential(a, b), rtol=1e-12, atol=1e-14)
        assert math.isfinite(float(np.abs(recurrence_parallel(a, b)).max()))
