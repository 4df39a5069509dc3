"""Model architecture schema, built-in presets, and JSON config loading.

The schema targets MoE transformers with multi-head latent attention:
low-rank query and key-value compression projections, decoupled rotary
branches, a leading block of conventional dense-FFN layers followed by
MoE layers, and untied input embedding / output head matrices.

Config files use the same key names as Hugging-Face style model configs
(``hidden_size``, ``moe_intermediate_size``, ...) so a downloaded config
can be pasted in with minimal editing.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import MISSING, dataclass, fields, replace
from pathlib import Path
from typing import Any

NORM_ACCOUNTING_MODES = ("inclusive", "strict")

# dataclass field -> external config key (Hugging-Face style)
_EXTERNAL_KEYS = {
    "hidden_dim": "hidden_size",
    "moe_mlp_dim": "moe_intermediate_size",
    "dense_mlp_dim": "intermediate_size",
    "head_dim": "qk_nope_head_dim",
    "num_heads": "num_attention_heads",
    "q_compress_dim": "q_lora_rank",
    "rope_head_dim": "qk_rope_head_dim",
    "kv_compress_dim": "kv_lora_rank",
    "num_routed_experts": "n_routed_experts",
    "num_shared_experts": "n_shared_experts",
    "topk_routed": "num_experts_per_tok",
    "num_layers": "num_hidden_layers",
    "vocab_size": "vocab_size",
    "num_dense_layers": "first_k_dense_replace",
    "tied_embeddings": "tie_word_embeddings",
    "norm_accounting": "norm_accounting",
}

_FIELD_FOR_KEY = {v: k for k, v in _EXTERNAL_KEYS.items()}

_POSITIVE_FIELDS = (
    "hidden_dim",
    "moe_mlp_dim",
    "dense_mlp_dim",
    "head_dim",
    "num_heads",
    "q_compress_dim",
    "rope_head_dim",
    "kv_compress_dim",
    "num_routed_experts",
    "num_shared_experts",
    "topk_routed",
    "num_layers",
    "vocab_size",
)


@dataclass(frozen=True)
class ModelArchitecture:
    """Structural configuration of an MoE transformer.

    ``norm_accounting`` controls where the gains of the q/kv-compression
    norms are counted when tallying parameters:

    * ``inclusive`` (default): the attention component includes the
      compression-norm gains even though they are also part of the
      per-layer norm component, matching the published per-layer totals
      this planner reproduces.
    * ``strict``: every gain is counted exactly once (norm component
      only), so component counts sum to the true tensor inventory.
    """

    hidden_dim: int
    moe_mlp_dim: int
    dense_mlp_dim: int
    head_dim: int
    num_heads: int
    q_compress_dim: int
    rope_head_dim: int
    kv_compress_dim: int
    num_routed_experts: int
    num_shared_experts: int
    topk_routed: int
    num_layers: int
    vocab_size: int
    num_dense_layers: int = 0
    tied_embeddings: bool = False
    norm_accounting: str = "inclusive"

    def __post_init__(self) -> None:
        problems = []
        for name in _POSITIVE_FIELDS:
            if getattr(self, name) < 1:
                problems.append(f"{name} must be a positive integer")
        if self.num_dense_layers < 0:
            problems.append("num_dense_layers must be non-negative")
        elif self.num_dense_layers > self.num_layers:
            problems.append(
                f"num_dense_layers ({self.num_dense_layers}) exceeds "
                f"num_layers ({self.num_layers})"
            )
        if self.topk_routed > self.num_routed_experts:
            problems.append(
                f"topk_routed ({self.topk_routed}) exceeds "
                f"num_routed_experts ({self.num_routed_experts})"
            )
        if self.norm_accounting not in NORM_ACCOUNTING_MODES:
            problems.append(
                f"norm_accounting must be one of {NORM_ACCOUNTING_MODES}, "
                f"got {self.norm_accounting!r}"
            )
        if problems:
            raise ValueError("invalid architecture: " + "; ".join(problems))

    def layer_kind(self, layer_index: int) -> str:
        """Return ``"dense"`` or ``"moe"`` for a layer index."""
        if not 0 <= layer_index < self.num_layers:
            raise ValueError(
                f"layer_index {layer_index} out of range [0, {self.num_layers})"
            )
        return "dense" if layer_index < self.num_dense_layers else "moe"

    def is_moe_layer(self, layer_index: int) -> bool:
        return self.layer_kind(layer_index) == "moe"

    def to_dict(self) -> dict[str, Any]:
        """Serialize with external (config-file) key names."""
        return {_EXTERNAL_KEYS[f.name]: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_DEEPSEEK_V3 = ModelArchitecture(
    hidden_dim=7168,
    moe_mlp_dim=2048,
    dense_mlp_dim=18432,
    head_dim=128,
    num_heads=128,
    q_compress_dim=1536,
    rope_head_dim=64,
    kv_compress_dim=512,
    num_routed_experts=256,
    num_shared_experts=1,
    topk_routed=8,
    num_layers=61,
    vocab_size=129280,
    num_dense_layers=3,
    tied_embeddings=False,
)

_PRESETS = {"deepseek-v3": _DEEPSEEK_V3}


def available_presets() -> tuple[str, ...]:
    return tuple(sorted(_PRESETS))


def builtin_preset(name: str) -> ModelArchitecture:
    """Return a built-in architecture preset by name."""
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; available presets: "
            + ", ".join(available_presets())
        ) from None


def _resolve_key(key: str) -> str | None:
    """Map an external or internal key to a field name, or None if unknown."""
    if key in _FIELD_FOR_KEY:
        return _FIELD_FOR_KEY[key]
    if key in _EXTERNAL_KEYS:  # internal field names are accepted too
        return key
    return None


def load_architecture(doc: dict[str, Any], *, on_unknown: str = "error") -> ModelArchitecture:
    """Build a validated architecture from a parsed config document.

    The document either supplies every required field, or names a
    ``preset`` to inherit from with selected fields overridden (via an
    ``overrides`` mapping and/or flat keys). Unknown keys are rejected;
    pass ``on_unknown="warn"`` to downgrade that to a warning.
    """
    if on_unknown not in ("error", "warn"):
        raise ValueError("on_unknown must be 'error' or 'warn'")
    if not isinstance(doc, dict):
        raise ValueError("architecture document must be a JSON object")

    doc = dict(doc)
    preset_name = doc.pop("preset", None)
    overrides = doc.pop("overrides", None) or {}
    if not isinstance(overrides, dict):
        raise ValueError("'overrides' must be an object")

    updates: dict[str, Any] = {}
    unknown: list[str] = []
    for key, value in {**doc, **overrides}.items():
        field_name = _resolve_key(key)
        if field_name is None:
            unknown.append(key)
        else:
            updates[field_name] = value

    if unknown:
        message = "unknown architecture keys: " + ", ".join(sorted(unknown))
        if on_unknown == "error":
            raise ValueError(message)
        warnings.warn(message, stacklevel=2)

    if preset_name is not None:
        return replace(builtin_preset(preset_name), **updates)

    required = {f.name for f in fields(ModelArchitecture) if f.default is MISSING}
    missing = sorted(required - updates.keys())
    if missing:
        raise ValueError(
            "missing architecture fields: "
            + ", ".join(_EXTERNAL_KEYS[name] for name in missing)
        )
    return ModelArchitecture(**updates)


def read_architecture(path: str | Path, *, on_unknown: str = "error") -> ModelArchitecture:
    """Load an architecture from a UTF-8 JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON in {path}: {exc}") from exc
    return load_architecture(doc, on_unknown=on_unknown)
