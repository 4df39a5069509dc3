"""Brute-force verifier for parameter counting and static sharding.

Enumerates every parameter tensor of a pipeline stage as an explicit
record, places each record on a simulated device grid, and sums element
counts per device. On purpose this module shares no arithmetic with the
closed-form counting in ``params``/``parallel``: the duplication is what
makes it a useful cross-check.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from math import prod

from .arch import ModelArchitecture
from .parallel import ParallelConfig, StageLayout


@dataclass(frozen=True)
class TensorRecord:
    """One parameter tensor and its placement on the device grid.

    ``shard_axes`` lists (axis, parallel dimension) pairs whose degree
    divides that axis; ``replication_dims`` lists dimensions along which
    every rank keeps the full tensor. Routed experts are neither: each
    lives on exactly one ep rank, identified via ``expert_index``.
    """

    name: str
    shape: tuple[int, ...]
    layer: int
    shard_axes: tuple[tuple[int, str], ...] = ()
    replication_dims: tuple[str, ...] = ()
    expert_index: int | None = None

    @property
    def elements(self) -> int:
        return prod(self.shape)


def enumerate_tensors(
    arch: ModelArchitecture, layout: StageLayout, stage: int
) -> list[TensorRecord]:
    """Every parameter tensor present in one pipeline stage."""
    h = arch.hidden_dim
    dcq = arch.q_compress_dim
    dc = arch.kv_compress_dim
    dhr = arch.rope_head_dim
    heads = arch.head_dim * arch.num_heads

    records: list[TensorRecord] = []

    def add(name, shape, layer, shard_axes=(), replication_dims=(), expert_index=None):
        records.append(
            TensorRecord(
                name=name,
                shape=tuple(shape),
                layer=layer,
                shard_axes=tuple(shard_axes),
                replication_dims=tuple(replication_dims),
                expert_index=expert_index,
            )
        )

    for layer in layout.stage_range(stage):
        prefix = f"layer{layer}"
        if layer == 0:
            add(f"{prefix}.embedding", (arch.vocab_size, h), layer,
                shard_axes=((0, "tp"),), replication_dims=("dp",))

        for norm, width in (
            ("input_norm", h),
            ("post_attn_norm", h),
            ("q_compress_norm", dcq),
            ("kv_compress_norm", dc),
        ):
            add(f"{prefix}.norm.{norm}", (width,), layer,
                replication_dims=("tp", "dp"))

        # attention: up/out projections split over tp, the rest replicated
        add(f"{prefix}.attn.q_down_proj", (dcq, h), layer,
            replication_dims=("tp", "dp"))
        add(f"{prefix}.attn.q_up_proj", (heads, dcq), layer,
            shard_axes=((0, "tp"),), replication_dims=("dp",))
        add(f"{prefix}.attn.q_rope_proj", (dhr * arch.num_heads, dcq), layer,
            replication_dims=("tp", "dp"))
        add(f"{prefix}.attn.kv_down_proj", (dc, h), layer,
            replication_dims=("tp", "dp"))
        add(f"{prefix}.attn.k_up_proj", (heads, dc), layer,
            shard_axes=((0, "tp"),), replication_dims=("dp",))
        add(f"{prefix}.attn.k_rope_proj", (dhr, h), layer,
            replication_dims=("tp", "dp"))
        add(f"{prefix}.attn.v_up_proj", (heads, dc), layer,
            shard_axes=((0, "tp"),), replication_dims=("dp",))
        add(f"{prefix}.attn.out_proj", (h, heads), layer,
            shard_axes=((1, "tp"),), replication_dims=("dp",))

        if arch.is_moe_layer(layer):
            add(f"{prefix}.moe.router", (arch.num_routed_experts, h), layer,
                replication_dims=("tp", "dp"))
            for expert in range(arch.num_routed_experts):
                who = f"{prefix}.moe.expert{expert:03d}"
                add(f"{who}.gate_proj", (h, arch.moe_mlp_dim), layer,
                    shard_axes=((1, "etp"),), replication_dims=("edp",),
                    expert_index=expert)
                add(f"{who}.up_proj", (h, arch.moe_mlp_dim), layer,
                    shard_axes=((1, "etp"),), replication_dims=("edp",),
                    expert_index=expert)
                add(f"{who}.down_proj", (arch.moe_mlp_dim, h), layer,
                    shard_axes=((0, "etp"),), replication_dims=("edp",),
                    expert_index=expert)
            for shared in range(arch.num_shared_experts):
                who = f"{prefix}.moe.shared{shared}"
                add(f"{who}.gate_proj", (h, arch.moe_mlp_dim), layer,
                    shard_axes=((1, "etp"),), replication_dims=("ep", "edp"))
                add(f"{who}.up_proj", (h, arch.moe_mlp_dim), layer,
                    shard_axes=((1, "etp"),), replication_dims=("ep", "edp"))
                add(f"{who}.down_proj", (arch.moe_mlp_dim, h), layer,
                    shard_axes=((0, "etp"),), replication_dims=("ep", "edp"))
        else:
            add(f"{prefix}.mlp.gate_proj", (h, arch.dense_mlp_dim), layer,
                shard_axes=((1, "tp"),), replication_dims=("dp",))
            add(f"{prefix}.mlp.up_proj", (h, arch.dense_mlp_dim), layer,
                shard_axes=((1, "tp"),), replication_dims=("dp",))
            add(f"{prefix}.mlp.down_proj", (arch.dense_mlp_dim, h), layer,
                shard_axes=((0, "tp"),), replication_dims=("dp",))

        if layer == arch.num_layers - 1 and not arch.tied_embeddings:
            add(f"{prefix}.head", (h, arch.vocab_size), layer,
                shard_axes=((1, "tp"),), replication_dims=("dp",))

    return records


def _grid_degrees(cfg: ParallelConfig) -> dict[str, int]:
    return {"tp": cfg.tp, "dp": cfg.dp, "ep": cfg.ep, "etp": cfg.etp, "edp": cfg.edp}


def _sharded_elements(record: TensorRecord, degrees: dict[str, int]) -> int:
    count = record.elements
    for axis, dim in record.shard_axes:
        degree = degrees[dim]
        size = record.shape[axis]
        if size % degree:
            raise ValueError(
                f"{record.name}: axis {axis} of size {size} is not divisible "
                f"by {dim}={degree}"
            )
        count //= degree
    return count


def oracle_device_params(
    records: list[TensorRecord], cfg: ParallelConfig, device: int
) -> int:
    """Sum the elements a single rank holds.

    ``device`` is a flat rank in [0, dp*tp). The expert grid tiles the
    same ranks, fastest axis first: etp, then ep, then edp.
    """
    edp = cfg.edp  # validates the tiling
    model_ranks = cfg.dp * cfg.tp
    if not 0 <= device < model_ranks:
        raise ValueError(f"device {device} out of range [0, {model_ranks})")
    ep_rank = (device // cfg.etp) % cfg.ep

    routed = {
        (r.layer, r.expert_index)
        for r in records
        if r.expert_index is not None
    }
    per_layer = {}
    for layer, expert in routed:
        per_layer[layer] = max(per_layer.get(layer, 0), expert + 1)
    for layer, n_routed in per_layer.items():
        if n_routed % cfg.ep:
            raise ValueError(
                f"layer {layer}: {n_routed} routed experts not divisible by ep={cfg.ep}"
            )

    degrees = _grid_degrees(cfg)
    total = 0
    for record in records:
        if record.expert_index is not None and "ep" not in record.replication_dims:
            per_rank = per_layer[record.layer] // cfg.ep
            if record.expert_index // per_rank != ep_rank:
                continue
        total += _sharded_elements(record, degrees)
    return total


def records_to_csv(records: list[TensorRecord], weight_bytes: int = 2) -> str:
    """Debug dump: one row per record with its placement description."""
    out = io.StringIO()
    out.write("name,shape,bytes,placement\n")
    for record in records:
        placement = []
        for axis, dim in record.shard_axes:
            placement.append(f"{dim}-shard(axis={axis})")
        for dim in record.replication_dims:
            placement.append(f"{dim}-replicated")
        if record.expert_index is not None and "ep" not in record.replication_dims:
            placement.append(f"ep-distributed(expert={record.expert_index})")
        shape = "x".join(str(n) for n in record.shape)
        out.write(
            f"{record.name},{shape},{record.elements * weight_bytes},"
            f"{';'.join(placement)}\n"
        )
    return out.getvalue()
