"""Parallel topology validation, pipeline stage layout, and static sharding.

The device grid is ``dp * tp`` ranks per pipeline stage. Expert layers
tile the same ranks with an independent (edp, ep, etp) grid, so
``edp * ep * etp == dp * tp`` must hold. Sharding is always perfectly
balanced; dimensions that do not divide evenly are rejected rather than
approximated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .arch import ModelArchitecture
from .params import count_layer

DEEPSEEK_PP16 = "deepseek-pp16"
UNIFORM = "uniform"


@dataclass(frozen=True)
class ParallelConfig:
    """Parallelism degrees. ``edp`` is derived, never stored.

    Sequence parallelism, when on, always splits by the tp degree.
    Context parallelism is carried for completeness but only cp=1 is
    supported by the activation model.
    """

    dp: int
    tp: int
    pp: int
    ep: int = 1
    etp: int = 1
    sp: bool = True
    cp: int = 1

    def __post_init__(self) -> None:
        for name in ("dp", "tp", "pp", "ep", "etp", "cp"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")

    @property
    def edp(self) -> int:
        """Expert data parallelism: edp = dp*tp / (ep*etp)."""
        model_ranks = self.dp * self.tp
        expert_ranks = self.ep * self.etp
        if expert_ranks > model_ranks:
            raise ValueError(
                f"ep*etp ({expert_ranks}) exceeds dp*tp ({model_ranks})"
            )
        if model_ranks % expert_ranks:
            raise ValueError(
                f"edp is not integral: dp*tp ({model_ranks}) is not divisible "
                f"by ep*etp ({expert_ranks})"
            )
        return model_ranks // expert_ranks

    @property
    def sp_degree(self) -> int:
        return self.tp if self.sp else 1

    @property
    def world_size(self) -> int:
        return self.dp * self.tp * self.pp


def validate_topology(cfg: ParallelConfig, world_size: int) -> ParallelConfig:
    """Check the config against a world size and force edp derivation."""
    if cfg.world_size != world_size:
        raise ValueError(
            f"dp*tp*pp = {cfg.world_size} does not match world size {world_size}"
        )
    cfg.edp  # raises if ep*etp does not tile dp*tp
    return cfg


_PARALLEL_KEYS = ("dp", "tp", "pp", "ep", "etp", "sp", "cp")


def _parse_sp(value: object) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("on", "off", "true", "false"):
        return value.lower() in ("on", "true")
    raise ValueError(f"sp must be on/off, got {value!r}")


def parse_parallel(doc: dict, base: ParallelConfig | None = None) -> ParallelConfig:
    """Build a ParallelConfig from a JSON-style mapping with keys dp/tp/pp/ep/etp/sp/cp."""
    unknown = sorted(set(doc) - set(_PARALLEL_KEYS))
    if unknown:
        raise ValueError("unknown parallel keys: " + ", ".join(unknown))
    values = {
        "dp": base.dp if base else 1,
        "tp": base.tp if base else 1,
        "pp": base.pp if base else 1,
        "ep": base.ep if base else 1,
        "etp": base.etp if base else 1,
        "sp": base.sp if base else True,
        "cp": base.cp if base else 1,
    }
    for key, value in doc.items():
        if key == "sp":
            values["sp"] = _parse_sp(value)
        else:
            values[key] = int(value)
    return ParallelConfig(**values)


@dataclass(frozen=True)
class StageLayout:
    """Contiguous layer ranges, one per pipeline stage."""

    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.sizes:
            raise ValueError("layout needs at least one stage")
        if any(size < 1 for size in self.sizes):
            raise ValueError("every stage must hold at least one layer")

    @property
    def num_stages(self) -> int:
        return len(self.sizes)

    @property
    def num_layers(self) -> int:
        return sum(self.sizes)

    def stage_range(self, stage: int) -> range:
        if not 0 <= stage < self.num_stages:
            raise ValueError(f"stage {stage} out of range [0, {self.num_stages})")
        start = sum(self.sizes[:stage])
        return range(start, start + self.sizes[stage])


def stage_layout(
    arch: ModelArchitecture,
    pp: int,
    policy: str | Sequence[int] = UNIFORM,
) -> StageLayout:
    """Assign layers to pipeline stages.

    Policies: ``"deepseek-pp16"`` (fifteen stages of four layers, the
    final layer alone on the last stage; requires pp=16 over 61 layers),
    ``"uniform"`` (as even as possible, earlier stages take the
    remainder), or an explicit per-stage layer-count list.
    """
    if pp < 1:
        raise ValueError("pp must be a positive integer")
    if pp > arch.num_layers:
        raise ValueError(f"pp ({pp}) exceeds num_layers ({arch.num_layers})")

    if isinstance(policy, str):
        if policy == DEEPSEEK_PP16:
            if pp != 16 or arch.num_layers != 61:
                raise ValueError(
                    "deepseek-pp16 layout requires pp=16 and 61 layers, "
                    f"got pp={pp}, layers={arch.num_layers}"
                )
            return StageLayout(sizes=(4,) * 15 + (1,))
        if policy == UNIFORM:
            base, extra = divmod(arch.num_layers, pp)
            return StageLayout(
                sizes=tuple(base + (1 if i < extra else 0) for i in range(pp))
            )
        raise ValueError(f"unknown layout policy {policy!r}")

    sizes = tuple(int(n) for n in policy)
    if len(sizes) != pp:
        raise ValueError(f"explicit layout has {len(sizes)} entries, expected pp={pp}")
    if sum(sizes) != arch.num_layers:
        raise ValueError(
            f"explicit layout sums to {sum(sizes)}, expected {arch.num_layers} layers"
        )
    return StageLayout(sizes=sizes)


def default_layout(arch: ModelArchitecture, pp: int) -> StageLayout:
    """deepseek-pp16 when it applies, uniform otherwise."""
    if pp == 16 and arch.num_layers == 61:
        return stage_layout(arch, pp, DEEPSEEK_PP16)
    return stage_layout(arch, pp, UNIFORM)


@dataclass(frozen=True)
class StageParams:
    stage: int
    num_layers: int
    params: int
    bytes: int


def stage_param_bytes(
    layout: StageLayout, arch: ModelArchitecture, weight_bytes: int = 2
) -> tuple[StageParams, ...]:
    """Unsharded parameter count and byte size of every stage."""
    out = []
    for stage in range(layout.num_stages):
        total = sum(
            count_layer(arch, i).layer_total for i in layout.stage_range(stage)
        )
        out.append(
            StageParams(
                stage=stage,
                num_layers=layout.sizes[stage],
                params=total,
                bytes=total * weight_bytes,
            )
        )
    return tuple(out)


@dataclass(frozen=True)
class DeviceParamBreakdown:
    """Static parameters held by one device of a pipeline stage.

    The MoE part (router + experts) shards over the expert grid and is
    what ZeRO divides by edp; everything else is the non-MoE part,
    divided by dp. The dense/embedding/head fields are zero on stages
    made purely of MoE transformer layers.
    """

    norm_params: int
    mla_tp_sharded: int
    mla_replicated: int
    router_params: int
    routed_expert_params: int
    shared_expert_params: int
    dense_mlp_params: int = 0
    embedding_params: int = 0
    head_params: int = 0

    @property
    def non_moe_total(self) -> int:
        return (
            self.norm_params
            + self.mla_tp_sharded
            + self.mla_replicated
            + self.dense_mlp_params
            + self.embedding_params
            + self.head_params
        )

    @property
    def moe_total(self) -> int:
        return (
            self.router_params
            + self.routed_expert_params
            + self.shared_expert_params
        )

    @property
    def device_total(self) -> int:
        return self.non_moe_total + self.moe_total


def _require_divisible(value: int, degree: int, what: str) -> int:
    if value % degree:
        raise ValueError(f"{what} ({value}) is not divisible by {degree}")
    return value // degree


def shard_static_params(
    arch: ModelArchitecture,
    stage: int,
    layout: StageLayout,
    cfg: ParallelConfig,
) -> DeviceParamBreakdown:
    """Static parameters per device for one stage.

    Placement rules: norm gains and the down/rotary attention projections
    are replicated across tp ranks; the q/k/v up-projections and the
    output projection split across tp; the router is replicated across tp
    and ep ranks; routed experts distribute over ep and split over etp;
    the shared experts are replicated across ep ranks and split over etp.
    Counts use the raw matrix shapes, so they are identical in both
    norm-accounting modes.
    """
    if layout.num_layers != arch.num_layers:
        raise ValueError(
            f"layout covers {layout.num_layers} layers, expected {arch.num_layers}"
        )
    cfg.edp  # validate the expert grid before any arithmetic

    h = arch.hidden_dim
    dcq = arch.q_compress_dim
    dc = arch.kv_compress_dim
    dhr = arch.rope_head_dim
    heads = arch.head_dim * arch.num_heads
    _require_divisible(heads, cfg.tp, "head_dim*num_heads")
    _require_divisible(arch.moe_mlp_dim, cfg.etp, "moe_mlp_dim")

    mla_sharded_full = heads * dcq + 2 * heads * dc + h * heads
    mla_replicated = dcq * h + dc * h + dhr * arch.num_heads * dcq + dhr * h
    expert_elements = 3 * h * arch.moe_mlp_dim

    out = {
        "norm_params": 0,
        "mla_tp_sharded": 0,
        "mla_replicated": 0,
        "router_params": 0,
        "routed_expert_params": 0,
        "shared_expert_params": 0,
        "dense_mlp_params": 0,
        "embedding_params": 0,
        "head_params": 0,
    }
    for layer in layout.stage_range(stage):
        out["norm_params"] += 2 * h + dcq + dc
        out["mla_tp_sharded"] += mla_sharded_full // cfg.tp
        out["mla_replicated"] += mla_replicated
        if arch.is_moe_layer(layer):
            out["router_params"] += arch.num_routed_experts * h
            local_experts = _require_divisible(
                arch.num_routed_experts, cfg.ep, "num_routed_experts"
            )
            out["routed_expert_params"] += local_experts * expert_elements // cfg.etp
            out["shared_expert_params"] += (
                arch.num_shared_experts * expert_elements // cfg.etp
            )
        else:
            _require_divisible(arch.dense_mlp_dim, cfg.tp, "dense_mlp_dim")
            out["dense_mlp_params"] += 3 * h * arch.dense_mlp_dim // cfg.tp
        if layer == 0:
            _require_divisible(arch.vocab_size, cfg.tp, "vocab_size")
            out["embedding_params"] += arch.vocab_size * h // cfg.tp
        if layer == arch.num_layers - 1 and not arch.tied_embeddings:
            _require_divisible(arch.vocab_size, cfg.tp, "vocab_size")
            out["head_params"] += arch.vocab_size * h // cfg.tp
    return DeviceParamBreakdown(**out)
