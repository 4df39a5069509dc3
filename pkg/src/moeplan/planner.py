"""Enumerate valid parallel configurations and rank them by memory fit.

A configuration is valid when dp*tp*pp covers the world size, the expert
grid tiles the model grid (integral edp), stages do not outnumber
layers, experts divide evenly over ep, the attention heads divide over
tp, and etp divides the expert MLP width. Each valid configuration is
evaluated on its peak stage and filtered against the device budget.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Sequence

from .activation import RecomputePolicy, TrainingConfig
from .arch import ModelArchitecture
from .parallel import ParallelConfig, default_layout
from .report import MemoryReport, OverheadModel, assemble_report
from .zero import DtypePolicy, ZeroStrategy

_CONSTRAINT_KEYS = ("dp", "tp", "pp", "ep", "etp")
_GRID_KEYS = ("micro_batch", "seq_len", "recompute", "zero")


@dataclass(frozen=True)
class ClusterSpec:
    """Device pool in which configurations are planned."""

    world_size: int
    device_memory_bytes: int
    reserve_fraction: Fraction = Fraction(0)

    def __post_init__(self) -> None:
        if self.world_size < 1:
            raise ValueError("world_size must be >= 1")
        if self.device_memory_bytes < 1:
            raise ValueError("device_memory_bytes must be >= 1")
        reserve = self.reserve_fraction
        if not isinstance(reserve, Fraction):
            reserve = Fraction(str(reserve)) if isinstance(reserve, float) else Fraction(reserve)
            object.__setattr__(self, "reserve_fraction", reserve)
        if not 0 <= reserve < 1:
            raise ValueError("reserve_fraction must be within [0, 1)")

    @property
    def budget_bytes(self) -> int:
        budget = self.device_memory_bytes * (1 - self.reserve_fraction)
        return int(budget)  # floor: never budget a partial byte


@dataclass(frozen=True)
class PlanResult:
    parallel: ParallelConfig
    training: TrainingConfig
    grand_total_bytes: int
    fits: bool

    @property
    def sort_key(self) -> tuple:
        cfg = self.parallel
        return (self.grand_total_bytes, cfg.pp, cfg.tp, cfg.dp, cfg.ep, cfg.etp)


@dataclass(frozen=True)
class SkippedConfig:
    parallel: ParallelConfig
    reason: str


@dataclass(frozen=True)
class SweepResult:
    fitting: tuple[PlanResult, ...]
    not_fitting: tuple[PlanResult, ...]
    skipped: tuple[SkippedConfig, ...]


def _divisors(n: int) -> list[int]:
    out = [d for d in range(1, n + 1) if n % d == 0]
    return out


def _matches(constraints: dict[str, int] | None, key: str, value: int) -> bool:
    return constraints is None or key not in constraints or constraints[key] == value


def enumerate_configs(
    spec: ClusterSpec,
    arch: ModelArchitecture,
    constraints: dict[str, int] | None = None,
) -> list[ParallelConfig]:
    """All valid configurations, in lexicographic (dp, tp, pp, ep, etp) order.

    ``constraints`` optionally pins individual degrees, e.g.
    ``{"pp": 16, "tp": 2}``. Sequence parallelism is always on (dividing
    by tp) and cp is fixed to 1, matching the analyzed regime.
    """
    if constraints:
        unknown = sorted(set(constraints) - set(_CONSTRAINT_KEYS))
        if unknown:
            raise ValueError("unknown constraint keys: " + ", ".join(unknown))

    world = spec.world_size
    heads = arch.head_dim * arch.num_heads
    configs: list[ParallelConfig] = []
    for pp in _divisors(world):
        if pp > arch.num_layers or not _matches(constraints, "pp", pp):
            continue
        for tp in _divisors(world // pp):
            if heads % tp or not _matches(constraints, "tp", tp):
                continue
            dp = world // (pp * tp)
            if not _matches(constraints, "dp", dp):
                continue
            model_ranks = dp * tp
            for ep in _divisors(arch.num_routed_experts):
                if model_ranks % ep or not _matches(constraints, "ep", ep):
                    continue
                for etp in _divisors(model_ranks // ep):
                    if arch.moe_mlp_dim % etp or not _matches(constraints, "etp", etp):
                        continue
                    configs.append(
                        ParallelConfig(dp=dp, tp=tp, pp=pp, ep=ep, etp=etp, sp=True, cp=1)
                    )
    configs.sort(key=lambda c: (c.dp, c.tp, c.pp, c.ep, c.etp))
    return configs


def evaluate_config(
    cfg: ParallelConfig,
    spec: ClusterSpec,
    arch: ModelArchitecture,
    train: TrainingConfig,
    dtype: DtypePolicy | None = None,
    overhead: OverheadModel | None = None,
) -> PlanResult:
    """Evaluate one configuration on its peak stage."""
    report: MemoryReport = assemble_report(
        arch, cfg, train, dtype, overhead, layout=default_layout(arch, cfg.pp)
    )
    total = report.grand_total_bytes
    return PlanResult(
        parallel=cfg,
        training=train,
        grand_total_bytes=total,
        fits=total <= spec.budget_bytes,
    )


def sweep(
    spec: ClusterSpec,
    arch: ModelArchitecture,
    train: TrainingConfig,
    dtype: DtypePolicy | None = None,
    overhead: OverheadModel | None = None,
    constraints: dict[str, int] | None = None,
) -> SweepResult:
    """Evaluate every valid configuration and rank the fitting ones.

    Per-config evaluation errors never abort the sweep; they surface as
    skipped entries with their reason. Ranking is by grand total
    ascending, ties broken by smaller pp, then tp, then the remaining
    degrees lexicographically.
    """
    fitting: list[PlanResult] = []
    not_fitting: list[PlanResult] = []
    skipped: list[SkippedConfig] = []
    for cfg in enumerate_configs(spec, arch, constraints):
        try:
            result = evaluate_config(cfg, spec, arch, train, dtype, overhead)
        except ValueError as exc:
            skipped.append(SkippedConfig(parallel=cfg, reason=str(exc)))
            continue
        (fitting if result.fits else not_fitting).append(result)
    fitting.sort(key=lambda r: r.sort_key)
    not_fitting.sort(key=lambda r: r.sort_key)
    return SweepResult(
        fitting=tuple(fitting),
        not_fitting=tuple(not_fitting),
        skipped=tuple(skipped),
    )


def training_grid(
    base: TrainingConfig, axes: dict[str, Sequence]
) -> tuple[TrainingConfig, ...]:
    """Cross product of training-setting values for grid sweeps.

    ``axes`` maps a subset of micro_batch / seq_len / recompute / zero to
    the values to try; unspecified settings keep the base value. The
    combinatorics are bounded by whoever asks for the product.
    """
    unknown = sorted(set(axes) - set(_GRID_KEYS))
    if unknown:
        raise ValueError("unknown grid keys: " + ", ".join(unknown))
    keys = [k for k in _GRID_KEYS if k in axes]
    combos = []
    for values in itertools.product(*(axes[k] for k in keys)):
        updates = dict(zip(keys, values))
        if "recompute" in updates and isinstance(updates["recompute"], str):
            updates["recompute"] = RecomputePolicy.from_name(updates["recompute"])
        if "zero" in updates and isinstance(updates["zero"], str):
            updates["zero"] = ZeroStrategy.from_name(updates["zero"])
        combos.append(replace(base, **updates))
    return tuple(combos)


def sweep_grid(
    spec: ClusterSpec,
    arch: ModelArchitecture,
    trains: Sequence[TrainingConfig],
    dtype: DtypePolicy | None = None,
    overhead: OverheadModel | None = None,
    constraints: dict[str, int] | None = None,
) -> tuple[tuple[TrainingConfig, SweepResult], ...]:
    """Run one sweep per training configuration, in the given order."""
    return tuple(
        (train, sweep(spec, arch, train, dtype, overhead, constraints))
        for train in trains
    )
