"""Exact parameter counting per component, per layer, and per model.

All counts are exact integers derived from the parameter-matrix shapes;
byte sizes are ``count * weight_bytes``. Linear layers are bias-free and
embeddings carry no positional parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

from .arch import ModelArchitecture

COMPONENT_KINDS = (
    "embedding",
    "mla",
    "dense_mlp",
    "gate",
    "moe_experts",
    "layernorm",
    "head",
)

LAYER_KINDS = ("dense", "moe")


@dataclass(frozen=True)
class LayerParamCount:
    """Per-component parameter counts for a single layer.

    Components that do not apply to the layer's kind are zero (a dense
    layer has ``gate == moe_experts == 0``; embedding/head appear only on
    the first/last layer).
    """

    layer_index: int
    embedding: int = 0
    mla: int = 0
    dense_mlp: int = 0
    gate: int = 0
    moe_experts: int = 0
    layernorm: int = 0
    head: int = 0

    @property
    def layer_total(self) -> int:
        return (
            self.embedding
            + self.mla
            + self.dense_mlp
            + self.gate
            + self.moe_experts
            + self.layernorm
            + self.head
        )


@dataclass(frozen=True)
class ModelParamTable:
    """Ordered per-layer counts plus the whole-model total."""

    rows: tuple[LayerParamCount, ...]

    @property
    def model_total(self) -> int:
        return sum(row.layer_total for row in self.rows)

    def total_bytes(self, weight_bytes: int = 2) -> int:
        return self.model_total * weight_bytes


def _mla_matrix_elements(arch: ModelArchitecture) -> int:
    """Sum of the eight attention parameter matrices."""
    h = arch.hidden_dim
    dcq = arch.q_compress_dim
    dc = arch.kv_compress_dim
    dhr = arch.rope_head_dim
    heads = arch.head_dim * arch.num_heads
    return (
        dcq * h  # q down-projection
        + heads * dcq  # q up-projection
        + dhr * arch.num_heads * dcq  # q rotary branch
        + dc * h  # kv down-projection
        + 2 * heads * dc  # k and v up-projections
        + dhr * h  # k rotary branch
        + h * heads  # output projection
    )


def count_component(arch: ModelArchitecture, kind: str, layer_kind: str) -> int:
    """Exact parameter count of one component for a layer of the given kind."""
    if kind not in COMPONENT_KINDS:
        raise ValueError(f"unknown component kind {kind!r}")
    if layer_kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {layer_kind!r}")
    if kind == "dense_mlp" and layer_kind != "dense":
        raise ValueError("dense_mlp only applies to dense layers")
    if kind in ("gate", "moe_experts") and layer_kind != "moe":
        raise ValueError(f"{kind} only applies to moe layers")

    h = arch.hidden_dim
    if kind in ("embedding", "head"):
        return arch.vocab_size * h
    if kind == "mla":
        count = _mla_matrix_elements(arch)
        if arch.norm_accounting == "inclusive":
            # compression-norm gains counted here as well as in layernorm
            count += arch.q_compress_dim + arch.kv_compress_dim
        return count
    if kind == "dense_mlp":
        return 3 * h * arch.dense_mlp_dim
    if kind == "gate":
        return arch.num_routed_experts * h
    if kind == "moe_experts":
        experts = arch.num_routed_experts + arch.num_shared_experts
        return 3 * h * arch.moe_mlp_dim * experts
    # layernorm: two full-width gains plus the q/kv compression-norm gains
    return 2 * h + arch.q_compress_dim + arch.kv_compress_dim


def count_layer(arch: ModelArchitecture, layer_index: int) -> LayerParamCount:
    """Count one layer, including embedding on layer 0 and head on the last."""
    kind = arch.layer_kind(layer_index)  # validates the index
    counts = {
        "layer_index": layer_index,
        "mla": count_component(arch, "mla", kind),
        "layernorm": count_component(arch, "layernorm", kind),
    }
    if kind == "dense":
        counts["dense_mlp"] = count_component(arch, "dense_mlp", kind)
    else:
        counts["gate"] = count_component(arch, "gate", kind)
        counts["moe_experts"] = count_component(arch, "moe_experts", kind)
    if layer_index == 0:
        counts["embedding"] = count_component(arch, "embedding", kind)
    if layer_index == arch.num_layers - 1 and not arch.tied_embeddings:
        counts["head"] = count_component(arch, "head", kind)
    return LayerParamCount(**counts)


def count_model(arch: ModelArchitecture) -> ModelParamTable:
    """Count every layer of the model."""
    rows = tuple(count_layer(arch, i) for i in range(arch.num_layers))
    return ModelParamTable(rows=rows)
