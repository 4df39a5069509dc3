"""Per-device bytes for parameters, gradients, and optimizer states.

ZeRO strategies shard training state across data-parallel groups with
different denominators for the two halves of a device's parameters: the
non-MoE part shards over dp, the MoE part over edp.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .parallel import DeviceParamBreakdown, ParallelConfig


class ZeroStrategy(enum.Enum):
    """Progressively shards optimizer states, then gradients, then weights."""

    NONE = "none"
    OS = "os"
    OS_G = "os+g"
    OS_G_PARAMS = "os+g+params"

    @property
    def level(self) -> int:
        return (self.NONE, self.OS, self.OS_G, self.OS_G_PARAMS).index(self)

    @classmethod
    def from_name(cls, name: str) -> "ZeroStrategy":
        for strategy in cls:
            if strategy.value == name:
                return strategy
        raise ValueError(
            f"unknown ZeRO strategy {name!r}; expected one of "
            + ", ".join(s.value for s in cls)
        )


@dataclass(frozen=True)
class DtypePolicy:
    """Bytes per element for each training-state tensor class.

    Defaults: bf16 weights and activations (2 B), fp32 gradients (4 B),
    and an optimizer holding an fp32 parameter copy plus bf16 momentum
    and variance (4 + 2 + 2 = 8 B total).
    """

    weight_bytes: int = 2
    activation_bytes: int = 2
    gradient_bytes: int = 4
    master_copy_bytes: int = 4
    momentum_bytes: int = 2
    variance_bytes: int = 2

    def __post_init__(self) -> None:
        for name in (
            "weight_bytes",
            "activation_bytes",
            "gradient_bytes",
            "master_copy_bytes",
            "momentum_bytes",
            "variance_bytes",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")

    @property
    def optimizer_bytes(self) -> int:
        return self.master_copy_bytes + self.momentum_bytes + self.variance_bytes


@dataclass(frozen=True)
class StateMemory:
    """Per-device bytes for the three training-state components."""

    param_bytes: int
    gradient_bytes: int
    optimizer_bytes: int

    @property
    def total(self) -> int:
        return self.param_bytes + self.gradient_bytes + self.optimizer_bytes


def _sharded_bytes(
    breakdown: DeviceParamBreakdown,
    cfg: ParallelConfig,
    width: int,
    allow_uneven: bool,
) -> int:
    """(non_moe/dp + moe/edp) * width, requiring exact division by default.

    With ``allow_uneven`` the per-shard size rounds up instead, a
    conservative upper bound for unbalanced shards.
    """
    non_moe, moe = breakdown.non_moe_total, breakdown.moe_total
    edp = cfg.edp
    if allow_uneven:
        return (math.ceil(non_moe / cfg.dp) + math.ceil(moe / edp)) * width
    if non_moe % cfg.dp:
        raise ValueError(
            f"non-MoE parameter count ({non_moe}) is not divisible by dp ({cfg.dp}); "
            "pass allow_uneven=True for ceiling division"
        )
    if moe % edp:
        raise ValueError(
            f"MoE parameter count ({moe}) is not divisible by edp ({edp}); "
            "pass allow_uneven=True for ceiling division"
        )
    return (non_moe // cfg.dp + moe // edp) * width


def training_state_memory(
    breakdown: DeviceParamBreakdown,
    strategy: ZeroStrategy,
    dtype: DtypePolicy,
    cfg: ParallelConfig,
    *,
    allow_uneven: bool = False,
) -> StateMemory:
    """Per-device parameter/gradient/optimizer bytes under a ZeRO strategy."""
    device_total = breakdown.device_total
    param_bytes = device_total * dtype.weight_bytes
    gradient_bytes = device_total * dtype.gradient_bytes
    optimizer_bytes = device_total * dtype.optimizer_bytes

    if strategy.level >= ZeroStrategy.OS.level:
        optimizer_bytes = _sharded_bytes(breakdown, cfg, dtype.optimizer_bytes, allow_uneven)
    if strategy.level >= ZeroStrategy.OS_G.level:
        gradient_bytes = _sharded_bytes(breakdown, cfg, dtype.gradient_bytes, allow_uneven)
    if strategy.level >= ZeroStrategy.OS_G_PARAMS.level:
        param_bytes = _sharded_bytes(breakdown, cfg, dtype.weight_bytes, allow_uneven)

    return StateMemory(
        param_bytes=param_bytes,
        gradient_bytes=gradient_bytes,
        optimizer_bytes=optimizer_bytes,
    )
