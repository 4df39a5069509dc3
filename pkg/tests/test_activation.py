import random
from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeplan.activation import (
    RecomputePolicy,
    TrainingConfig,
    activation_per_device,
    expert_tokens,
    mla_activation,
    mla_activation_per_layer,
    moe_activation,
    moe_activation_per_layer,
)
from moeplan.parallel import ParallelConfig

from conftest import tiny_arch

NONE = RecomputePolicy.NONE
FULL = RecomputePolicy.FULL


def train(b=1, s=4096, recompute=NONE):
    return TrainingConfig(micro_batch=b, seq_len=s, recompute=recompute)


def test_expert_tokens(v3):
    assert expert_tokens(train(b=1), v3) == 128
    assert expert_tokens(train(b=4), v3) == 512
    small = tiny_arch(num_routed_experts=512, topk_routed=1, num_dense_layers=0)
    assert expert_tokens(train(b=1, s=256), small) == Fraction(1, 2)


def test_mla_activation_case_study(v3, case_cfg):
    assert mla_activation(v3, train(recompute=NONE), case_cfg, 4) == 23_177_723_904
    assert mla_activation(v3, train(recompute=FULL), case_cfg, 4) == 117_440_512


def test_mla_closed_form_term_by_term(v3, case_cfg):
    # independent evaluation of the four-layer closed form
    b, s, h = 1, 4096, 7168
    d_sum = 1536 + 512
    heads = 128 * 128
    rope_heads = 64 * 128
    expected = (
        10 * b * s * h
        + 8 * b * s * d_sum
        + 16 * b * s * heads
        + 8 * b * s * rope_heads
        + 10 * b * 128 * s * s
    )
    assert mla_activation(v3, train(recompute=NONE), case_cfg, 4) == expected


def test_moe_activation_case_study(v3, case_cfg):
    assert moe_activation(v3, train(recompute=NONE), case_cfg, 4) == 1_493_434_368
    assert (
        moe_activation(v3, train(recompute=FULL), case_cfg, 4)
        == 117_440_512 + 262_144
    )


def test_moe_closed_form_term_by_term(v3, case_cfg):
    b, s, h, h_e = 1, 4096, 7168, 2048
    n, n_r = 256, 8
    expected = (
        20 * b * s * h
        + 16 * b * s * n
        + 8 * b * s * n_r
        + 4 * b * s * Fraction(n_r, n) * (96 * h + 256 * h_e)
        + 32 * b * s * h_e
    )
    assert moe_activation(v3, train(recompute=NONE), case_cfg, 4) == expected


def test_one_token_per_expert_reduces_expert_term():
    # ep == N and b*s*topk == N: one expert per rank holding one token
    arch = tiny_arch(
        num_routed_experts=8, topk_routed=2, num_dense_layers=0, num_shared_experts=1
    )
    cfg = ParallelConfig(dp=8, tp=1, pp=1, ep=8, etp=1, sp=False)
    t = train(b=1, s=4, recompute=NONE)
    assert expert_tokens(t, arch) == 1
    b, s, h, h_e = 1, 4, arch.hidden_dim, arch.moe_mlp_dim
    expected = (
        4 * b * s * h
        + 4 * b * s * arch.num_routed_experts
        + 2 * b * s * arch.topk_routed
        + (3 * h + 8 * h_e)  # one local expert, one expected token
        + (3 * b * s * h + 8 * b * s * h_e)
    )
    assert moe_activation_per_layer(arch, t, cfg) == expected


def test_full_recompute_stage_totals(v3, case_cfg, v3_layout):
    rep = activation_per_device(v3, train(recompute=FULL), case_cfg, v3_layout, 1)
    b, s, h, n_r = 1, 4096, 7168, 8
    assert rep.total == 8 * b * s * h + 8 * b * s * n_r == 235_143_168
    # single-layer final stage
    last = activation_per_device(v3, train(recompute=FULL), case_cfg, v3_layout, 15)
    assert last.total == 2 * b * s * h + 2 * b * s * n_r


def test_stage_report_combines_components(v3, case_cfg, v3_layout):
    rep = activation_per_device(v3, train(recompute=NONE), case_cfg, v3_layout, 1)
    assert rep.mla_bytes == 23_177_723_904
    assert rep.moe_bytes == 1_493_434_368
    assert rep.total == 24_671_158_272
    assert rep.mla_exact == 4 * rep.mla_per_layer
    assert rep.moe_exact == 4 * rep.moe_per_layer


def test_dense_stage_rejected(v3, case_cfg, v3_layout):
    with pytest.raises(ValueError, match="dense"):
        activation_per_device(v3, train(), case_cfg, v3_layout, 0)


def test_context_parallelism_rejected(v3, v3_layout):
    cfg = ParallelConfig(dp=32, tp=2, pp=16, ep=8, etp=1, cp=2)
    with pytest.raises(ValueError, match="context parallelism"):
        activation_per_device(v3, train(), cfg, v3_layout, 1)


def test_sp_off_uses_divisor_one(v3, v3_layout):
    on = ParallelConfig(dp=32, tp=2, pp=16, ep=8, etp=1, sp=True)
    off = ParallelConfig(dp=32, tp=2, pp=16, ep=8, etp=1, sp=False)
    t = train(recompute=NONE)
    undivided = 2 * 1 * 4096 * (1536 + 512)
    for layer_fn in (mla_activation_per_layer,):
        with_sp = layer_fn(v3, t, on)
        without = layer_fn(v3, t, off)
        # every sp-divided term exactly doubles; the compressed-projection
        # term stays untouched
        assert without - undivided == 2 * (with_sp - undivided)


def test_full_never_exceeds_none_random(case_cfg):
    rng = random.Random(7)
    for _ in range(100):
        arch = tiny_arch(
            hidden_dim=rng.randrange(8, 64),
            moe_mlp_dim=2 * rng.randrange(4, 32),
            num_routed_experts=rng.choice([2, 4, 8]),
            topk_routed=1,
            num_dense_layers=0,
        )
        for sp in (True, False):
            for ep in (1, 2):
                cfg = ParallelConfig(dp=4, tp=2, pp=1, ep=ep, etp=1, sp=sp)
                t_none = train(b=rng.randrange(1, 5), s=rng.randrange(1, 64), recompute=NONE)
                t_full = replace(t_none, recompute=FULL)
                assert mla_activation_per_layer(arch, t_full, cfg) <= mla_activation_per_layer(
                    arch, t_none, cfg
                )
                assert moe_activation_per_layer(arch, t_full, cfg) <= moe_activation_per_layer(
                    arch, t_none, cfg
                )


def test_linearity_in_micro_batch_exact(v3, case_cfg):
    rng = random.Random(99)
    for _ in range(100):
        b = rng.randrange(1, 9)
        s = rng.randrange(1, 5000)
        for recompute in (NONE, FULL):
            one = train(b=b, s=s, recompute=recompute)
            two = train(b=2 * b, s=s, recompute=recompute)
            assert mla_activation_per_layer(v3, two, case_cfg) == 2 * mla_activation_per_layer(
                v3, one, case_cfg
            )
            assert moe_activation_per_layer(v3, two, case_cfg) == 2 * moe_activation_per_layer(
                v3, one, case_cfg
            )


@settings(max_examples=100, deadline=None)
@given(
    s=st.integers(min_value=1, max_value=8192),
    b=st.integers(min_value=1, max_value=8),
)
def test_monotone_in_sequence_length(v3, case_cfg, s, b):
    shorter = train(b=b, s=s, recompute=NONE)
    longer = train(b=b, s=s + 1, recompute=NONE)
    assert mla_activation_per_layer(v3, longer, case_cfg) > mla_activation_per_layer(
        v3, shorter, case_cfg
    )
    assert moe_activation_per_layer(v3, longer, case_cfg) > moe_activation_per_layer(
        v3, shorter, case_cfg
    )


def test_invalid_training_config():
    with pytest.raises(ValueError):
        TrainingConfig(micro_batch=0)
    with pytest.raises(ValueError):
        TrainingConfig(seq_len=0)
    with pytest.raises(ValueError, match="unknown recompute"):
        RecomputePolicy.from_name("selective")
