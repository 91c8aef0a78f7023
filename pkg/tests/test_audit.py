import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mambaout_kit import ops
from mambaout_kit.audit import (
    MAC_CONVENTION,
    PUBLISHED_PRESETS,
    PUBLISHED_SIZES,
    audit,
    classify_sequence_task,
    compare_published,
    count_macs,
    count_params,
    quadratic_ratio,
    tokens_for_image,
    transformer_block_flops,
)
from mambaout_kit.blocks import GatedBlock, MixerKind
from mambaout_kit.checkpoint import iter_entries, save_checkpoint
from mambaout_kit.mixers import MixMode
from mambaout_kit.models import build_isotropic_transformer, build_mambaout, get_preset
from mambaout_kit.nn import Conv2d, Linear
from mambaout_kit.tensor import MacCounter, Tensor, no_grad


@pytest.fixture(scope="module")
def published_models():
    return {name: build_mambaout(name, rng=0) for name in PUBLISHED_PRESETS}


def instrumented_macs(model, x):
    with MacCounter() as mc, no_grad():
        model(Tensor(x))
    return mc.total


class TestParams:
    def test_linear_with_bias(self):
        assert count_params(Linear(4, 8, np.random.default_rng(0))).total_params == 40

    def test_table_parity(self, published_models):
        for name, model in published_models.items():
            rep = compare_published(audit(model), name)
            assert rep.checks[0]["passed"], rep.to_table()

    def test_monotone_across_presets(self, published_models):
        reps = [audit(published_models[n]) for n in PUBLISHED_PRESETS]
        assert all(a.total_params < b.total_params for a, b in zip(reps, reps[1:]))
        assert all(a.total_macs < b.total_macs for a, b in zip(reps, reps[1:]))

    def test_registry_equals_checkpoint_walk(self, tmp_path):
        m = build_mambaout("femto", rng=0)
        path = save_checkpoint(tmp_path / "f.mokt", m)
        walked = sum(int(np.prod(shape)) for _, _, shape, _ in iter_entries(path, load_data=False))
        assert walked == count_params(m).total_params


class TestMacs:
    def test_1x1_conv_equals_dense(self):
        rng = np.random.default_rng(0)
        conv, lin = Conv2d(5, 7, 1, rng), Linear(5, 7, rng)
        x = np.ones((1, 6, 4, 5), np.float32)
        with MacCounter() as a:
            conv(Tensor(x))
        with MacCounter() as b:
            lin(Tensor(x))
        assert a.total == b.total == 6 * 4 * 5 * 7

    @pytest.mark.parametrize("name", ["micro", "femto"])
    def test_analytic_equals_instrumented_forward(self, name):
        m = build_mambaout(name, rng=0)
        assert count_macs(m, (32, 32)).total_macs == instrumented_macs(m, np.zeros((1, 32, 32, 3), np.float32))

    def test_instrumented_mamba_and_rectangular(self):
        cfg = get_preset("micro").replace(mixer=MixerKind.MAMBA_SSM, state_dim=4, conv_ratio=Fraction(1, 2))
        m = build_mambaout(cfg, rng=0)
        x = np.zeros((1, 48, 40, 3), np.float32)
        assert count_macs(m, (48, 40)).total_macs == instrumented_macs(m, x)

    def test_instrumented_transformer(self):
        m = build_isotropic_transformer(16, 2, 8, MixMode.CAUSAL)
        assert count_macs(m, (32, 32)).total_macs == instrumented_macs(m, np.zeros((1, 32, 32, 3), np.float32))

    def test_lone_gated_block(self):
        blk = GatedBlock(16, 0, kind=MixerKind.MAMBA_SSM, state_dim=4)
        with MacCounter() as mc, no_grad():
            blk(Tensor(np.zeros((1, 5, 6, 16), np.float32)))
        assert count_macs(blk, (5, 6)).total_macs == mc.total

    def test_table_parity(self, published_models):
        for name, model in published_models.items():
            rep = compare_published(audit(model, (224, 224)), name)
            assert rep.checks[1]["passed"], rep.to_table()

    def test_additivity(self, published_models):
        rep = audit(published_models["tiny"])
        by_stage = {}
        for r in rep.rows:
            key = r.name.split(".")[1] if r.name.startswith("stages.") else r.name.split(".")[0]
            by_stage[key] = by_stage.get(key, 0) + r.macs
        assert sum(by_stage.values()) == rep.total_macs == sum(r.macs for r in rep.rows)

    def test_head_reporting(self, published_models):
        rep = audit(published_models["femto"])
        d = rep.to_dict()
        assert d["with_head"]["params"] - d["without_head"]["params"] == rep.head_params > 0
        assert rep.without_head().total_params == d["without_head"]["params"]

    def test_head_layout_recorded(self, published_models):
        head = audit(published_models["femto"]).head
        assert head["dims"] == [288, 1152, 1000]
        assert head["params"] == 288 * 2 + 288 * 1152 + 1152 + 1152 * 1000 + 1000
        assert audit(build_isotropic_transformer(16, 1, 8), (32, 32)).head["dims"] == [16, 8]

    def test_json_schema(self, published_models):
        rep = compare_published(audit(published_models["femto"]), "femto")
        d = json.loads(rep.to_json())
        assert d["schema_version"] == 1
        assert d["convention"] == MAC_CONVENTION
        assert {"with_head", "without_head", "layers", "checks"} <= set(d)
        assert "PASS" in rep.to_table()

    def test_unknown_comparison(self, published_models):
        with pytest.raises(ValueError):
            compare_published(audit(published_models["femto"]), "micro")

    def test_published_table_values(self):
        assert PUBLISHED_SIZES == {"femto": (7.3, 1.2), "tiny": (26.5, 4.5), "small": (48.5, 9.0), "base": (84.8, 15.8)}


class TestComplexity:
    def test_flops_exact(self):
        assert transformer_block_flops(384, 196) == 752_640_000
        assert transformer_block_flops(1, 1) == 28
        assert transformer_block_flops(384, 0) == 0

    def test_thresholds(self):
        assert quadratic_ratio(384, 2304) == 1
        assert quadratic_ratio(768, 4608) == 1
        assert not classify_sequence_task(196, 384).is_long_sequence
        assert classify_sequence_task(4000, 384).is_long_sequence
        v = classify_sequence_task(4096, 768)
        assert not v.is_long_sequence
        assert float(v.r_L) == pytest.approx(0.889, abs=1e-3)

    def test_tokens_for_image(self):
        assert tokens_for_image(224, 224) == 196

    @given(st.integers(1, 4096), st.integers(1, 10_000))
    def test_ratio_from_flop_terms(self, D, L):
        quad, lin = 4 * D * L * L, 24 * D * D * L
        assert quadratic_ratio(D, L) == Fraction(quad, lin)

    @given(st.integers(1, 100_000))
    def test_threshold_invariance(self, D):
        assert not classify_sequence_task(6 * D, D).is_long_sequence
        assert classify_sequence_task(6 * D + 1, D).is_long_sequence

    def test_flops_are_twice_block_macs(self):
        v = classify_sequence_task(196, 384).to_dict()
        assert v["flops"] == 2 * v["macs"]


def test_conventions_exclude_elementwise():
    with MacCounter() as mc:
        ops.layer_norm(Tensor(np.ones((4, 8))), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        ops.softmax(Tensor(np.ones((4, 8))))
    assert mc.total == 0
