"""Closed-form activation memory for MLA and MoE layers.

Byte counts assume bf16 activations, materialized attention scores (no
fused/flash attention kernel), balanced expert routing, and sequence
parallelism splitting by the tp degree when enabled. Intermediate values
are exact rationals; rounding up to whole bytes happens only at the
report boundary, which keeps the linearity-in-b property exact.

Recomputation policies: ``none`` stores every intermediate activation,
``full`` keeps only the pre-norm layer inputs (plus router outputs for
MoE layers) and recomputes the rest in the backward pass.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

from .arch import ModelArchitecture
from .parallel import ParallelConfig, StageLayout
from .zero import ZeroStrategy


class RecomputePolicy(enum.Enum):
    NONE = "none"
    FULL = "full"

    @classmethod
    def from_name(cls, name: str) -> "RecomputePolicy":
        for policy in cls:
            if policy.value == name:
                return policy
        raise ValueError(
            f"unknown recompute policy {name!r}; expected one of "
            + ", ".join(p.value for p in cls)
        )


@dataclass(frozen=True)
class TrainingConfig:
    """Micro-batch shape plus the memory-relevant training policies."""

    micro_batch: int = 1
    seq_len: int = 4096
    recompute: RecomputePolicy = RecomputePolicy.FULL
    zero: ZeroStrategy = ZeroStrategy.OS_G

    def __post_init__(self) -> None:
        if self.micro_batch < 1:
            raise ValueError("micro_batch must be >= 1")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")


def _check_parallel(cfg: ParallelConfig) -> int:
    if cfg.cp != 1:
        raise ValueError("context parallelism (cp > 1) is not supported")
    return cfg.sp_degree


def expert_tokens(train: TrainingConfig, arch: ModelArchitecture) -> Fraction:
    """Expected tokens per routed expert per layer under balanced routing."""
    return Fraction(
        train.micro_batch * train.seq_len * arch.topk_routed,
        arch.num_routed_experts,
    )


def mla_activation_per_layer(
    arch: ModelArchitecture, train: TrainingConfig, cfg: ParallelConfig
) -> Fraction:
    """Exact activation bytes of one attention block on one device.

    Without recomputation this is the sum of the block's stored
    intermediates; the compressed q/kv projections (the
    ``2*b*s*(d_cq + d_c)`` term) stay undivided by sequence parallelism
    because their input projections are replicated across tp ranks. With
    full recomputation only the two pre-norm block inputs survive.
    """
    sp = _check_parallel(cfg)
    b, s = train.micro_batch, train.seq_len
    h = arch.hidden_dim
    heads = arch.head_dim * arch.num_heads

    if train.recompute is RecomputePolicy.FULL:
        return Fraction(2 * b * s * h, sp)

    undivided = 2 * b * s * (arch.q_compress_dim + arch.kv_compress_dim)
    divided = (
        4 * b * s * h
        + 4 * b * s * (arch.head_dim + arch.rope_head_dim) * arch.num_heads
        + 2 * b * s * heads  # attention input (q/k/v assembled)
        + 5 * b * arch.num_heads * s * s  # materialized attention scores
        + 2 * b * s * heads  # attention output before projection
        + b * s * h
    )
    return undivided + Fraction(divided, sp)


def moe_activation_per_layer(
    arch: ModelArchitecture, train: TrainingConfig, cfg: ParallelConfig
) -> Fraction:
    """Exact activation bytes of one MoE linear block on one device.

    Router scores and top-k outputs are not divided by sequence
    parallelism; routed-expert activations scale with the expected
    tokens per expert and the number of local experts; the shared
    experts process the full micro-batch on every rank.
    """
    sp = _check_parallel(cfg)
    b, s = train.micro_batch, train.seq_len
    h = arch.hidden_dim
    h_e = arch.moe_mlp_dim
    n_experts = arch.num_routed_experts
    if n_experts % cfg.ep:
        raise ValueError(
            f"num_routed_experts ({n_experts}) is not divisible by ep ({cfg.ep})"
        )

    if train.recompute is RecomputePolicy.FULL:
        # block input plus the retained router outputs
        return Fraction(2 * b * s * h, sp) + 2 * b * s * arch.topk_routed

    tokens = expert_tokens(train, arch)
    local_experts = n_experts // cfg.ep
    return (
        Fraction(4 * b * s * h, sp)
        + 4 * b * s * n_experts
        + 2 * b * s * arch.topk_routed
        + local_experts * tokens * (3 * h + 8 * h_e)
        + arch.num_shared_experts * (3 * b * s * h + 8 * b * s * h_e)
    )


def mla_activation(
    arch: ModelArchitecture,
    train: TrainingConfig,
    cfg: ParallelConfig,
    layers_in_stage: int,
) -> Fraction:
    """Attention activation bytes per device for a stage of MoE layers."""
    return layers_in_stage * mla_activation_per_layer(arch, train, cfg)


def moe_activation(
    arch: ModelArchitecture,
    train: TrainingConfig,
    cfg: ParallelConfig,
    layers_in_stage: int,
) -> Fraction:
    """MoE activation bytes per device for a stage of MoE layers."""
    return layers_in_stage * moe_activation_per_layer(arch, train, cfg)


@dataclass(frozen=True)
class ActivationReport:
    """Per-device activation memory for one pipeline stage.

    ``mla_exact``/``moe_exact`` are the exact stage totals; the byte
    fields round them up to whole bytes.
    """

    stage: int
    layers: int
    mla_exact: Fraction
    moe_exact: Fraction
    mla_per_layer: Fraction
    moe_per_layer: Fraction

    @property
    def mla_bytes(self) -> int:
        return math.ceil(self.mla_exact)

    @property
    def moe_bytes(self) -> int:
        return math.ceil(self.moe_exact)

    @property
    def total(self) -> int:
        return self.mla_bytes + self.moe_bytes


def activation_per_device(
    arch: ModelArchitecture,
    train: TrainingConfig,
    cfg: ParallelConfig,
    layout: StageLayout,
    stage: int,
) -> ActivationReport:
    """Activation report for one stage; stages with dense layers are rejected."""
    layers = layout.stage_range(stage)
    if any(not arch.is_moe_layer(i) for i in layers):
        raise ValueError(
            f"activation not modeled for dense stages (stage {stage} holds "
            "conventional-FFN layers)"
        )
    mla_layer = mla_activation_per_layer(arch, train, cfg)
    moe_layer = moe_activation_per_layer(arch, train, cfg)
    return ActivationReport(
        stage=stage,
        layers=len(layers),
        mla_exact=len(layers) * mla_layer,
        moe_exact=len(layers) * moe_layer,
        mla_per_layer=mla_layer,
        moe_per_layer=moe_layer,
    )
