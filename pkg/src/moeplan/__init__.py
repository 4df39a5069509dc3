"""Per-device GPU memory planner for MoE transformer training.

Predicts static parameter, gradient, optimizer-state, and activation
memory per device under data/tensor/pipeline/expert parallelism, ZeRO
sharding, and activation recomputation, and searches parallel
configurations that fit a device memory budget.
"""

from .activation import (
    ActivationReport,
    RecomputePolicy,
    TrainingConfig,
    activation_per_device,
    expert_tokens,
    mla_activation,
    moe_activation,
)
from .arch import ModelArchitecture, available_presets, builtin_preset, load_architecture, read_architecture
from .oracle import TensorRecord, enumerate_tensors, oracle_device_params
from .parallel import (
    DeviceParamBreakdown,
    ParallelConfig,
    StageLayout,
    default_layout,
    shard_static_params,
    stage_layout,
    stage_param_bytes,
    validate_topology,
)
from .params import LayerParamCount, ModelParamTable, count_component, count_layer, count_model
from .planner import (
    ClusterSpec,
    PlanResult,
    SweepResult,
    enumerate_configs,
    sweep,
    sweep_grid,
    training_grid,
)
from .report import MemoryReport, OverheadModel, assemble_report, peak_moe_stage, render
from .zero import DtypePolicy, StateMemory, ZeroStrategy, training_state_memory

__version__ = "0.1.0"

__all__ = [
    "ActivationReport",
    "ClusterSpec",
    "DeviceParamBreakdown",
    "DtypePolicy",
    "LayerParamCount",
    "MemoryReport",
    "ModelArchitecture",
    "ModelParamTable",
    "OverheadModel",
    "ParallelConfig",
    "PlanResult",
    "RecomputePolicy",
    "StageLayout",
    "StateMemory",
    "SweepResult",
    "TensorRecord",
    "TrainingConfig",
    "ZeroStrategy",
    "activation_per_device",
    "assemble_report",
    "available_presets",
    "builtin_preset",
    "count_component",
    "count_layer",
    "count_model",
    "default_layout",
    "enumerate_configs",
    "enumerate_tensors",
    "expert_tokens",
    "load_architecture",
    "mla_activation",
    "moe_activation",
    "oracle_device_params",
    "peak_moe_stage",
    "read_architecture",
    "render",
    "shard_static_params",
    "stage_layout",
    "stage_param_bytes",
    "sweep",
    "sweep_grid",
    "training_grid",
    "training_state_memory",
    "validate_topology",
]
