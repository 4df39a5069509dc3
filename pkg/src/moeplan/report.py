"""Per-device memory report assembly and rendering.

All stored values are exact integer bytes (or exact rationals); rounding
happens only in display strings. MB/GB labels follow the binary units
MiB/GiB throughout, matching the tables this planner reproduces.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

from .activation import ActivationReport, RecomputePolicy, TrainingConfig, activation_per_device
from .arch import ModelArchitecture
from .parallel import (
    DeviceParamBreakdown,
    ParallelConfig,
    StageLayout,
    default_layout,
    shard_static_params,
    stage_param_bytes,
)
from .params import count_model
from .zero import DtypePolicy, StateMemory, ZeroStrategy, training_state_memory

MIB = 1024**2
GIB = 1024**3

_FRAGMENTATION_SOFT_RANGE = (Fraction(1, 20), Fraction(3, 10))
_BUFFER_SOFT_RANGE = (Fraction(4, 5) * GIB, 2 * GIB)


# ---------------------------------------------------------------------------
# display helpers


def mib_decimal(nbytes: int, places: int = 2) -> Decimal:
    return _quantize(Decimal(nbytes) / Decimal(MIB), places)


def gib_decimal(nbytes: int, places: int = 2) -> Decimal:
    return _quantize(Decimal(nbytes) / Decimal(GIB), places)


def _quantize(value: Decimal, places: int) -> Decimal:
    exp = Decimal(1).scaleb(-places) if places else Decimal(1)
    return value.quantize(exp, rounding=ROUND_HALF_UP)


def format_gib(nbytes: int, places: int = 2) -> str:
    return str(gib_decimal(nbytes, places))


def format_mib(nbytes: int, places: int = 0) -> str:
    return str(mib_decimal(nbytes, places))


def format_param_billions(count: int) -> str:
    """Human display of a parameter count in decimal billions.

    Keeps roughly two to three significant digits: two decimals below one
    billion, one decimal up to a hundred billion, whole numbers beyond.
    """
    value = Decimal(count) / Decimal(10**9)
    if value >= 100:
        places = 0
    elif value >= 1:
        places = 1
    else:
        places = 2
    text = str(_quantize(value, places))
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text


def _zero_cell(nbytes: int) -> Decimal:
    # wide cells carry one decimal, narrow ones two, mirroring the
    # published summary table this renderer reproduces
    places = 1 if nbytes >= 20 * GIB else 2
    return gib_decimal(nbytes, places)


def arch_digest(arch: ModelArchitecture) -> str:
    canonical = json.dumps(arch.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(canonical).hexdigest()[:12]


# ---------------------------------------------------------------------------
# overheads and report assembly


@dataclass(frozen=True)
class OverheadModel:
    """Allocator fragmentation and communication-buffer overheads.

    Fragmentation is a fraction of all modeled memory (applied after the
    buffer is added); the buffer is staging memory for inter-GPU
    transfers. Values outside the typical ranges (5-30% and
    0.8-2 GiB) only produce a warning.
    """

    fragmentation_fraction: Fraction = Fraction(1, 10)
    comm_buffer_bytes: int = GIB

    def __post_init__(self) -> None:
        fraction = self.fragmentation_fraction
        if not isinstance(fraction, Fraction):
            fraction = Fraction(str(fraction)) if isinstance(fraction, float) else Fraction(fraction)
            object.__setattr__(self, "fragmentation_fraction", fraction)
        if not 0 <= fraction <= 1:
            raise ValueError("fragmentation_fraction must be within [0, 1]")
        if self.comm_buffer_bytes < 0:
            raise ValueError("comm_buffer_bytes must be non-negative")
        low, high = _FRAGMENTATION_SOFT_RANGE
        if fraction != 0 and not low <= fraction <= high:
            warnings.warn(
                f"fragmentation_fraction {float(fraction):.3f} outside the "
                "typical 0.05-0.30 range",
                stacklevel=2,
            )
        low, high = _BUFFER_SOFT_RANGE
        if self.comm_buffer_bytes and not low <= self.comm_buffer_bytes <= high:
            warnings.warn(
                f"comm_buffer_bytes {self.comm_buffer_bytes} outside the "
                "typical 0.8-2 GiB range",
                stacklevel=2,
            )


@dataclass(frozen=True)
class MemoryReport:
    """Full per-device memory assembly for one pipeline stage.

    ``activation_bytes`` is None for stages holding dense-FFN layers,
    which have no activation model. The grand total is the component sum
    (including the communication buffer) scaled by one plus the
    fragmentation fraction, rounded up to a whole byte.
    """

    architecture: ModelArchitecture
    parallel: ParallelConfig
    training: TrainingConfig
    dtype: DtypePolicy
    overhead: OverheadModel
    stage: int
    layers_in_stage: int
    in_flight_microbatches: int
    breakdown: DeviceParamBreakdown
    state: StateMemory
    activation: ActivationReport | None

    @property
    def param_bytes(self) -> int:
        return self.state.param_bytes

    @property
    def gradient_bytes(self) -> int:
        return self.state.gradient_bytes

    @property
    def optimizer_bytes(self) -> int:
        return self.state.optimizer_bytes

    @property
    def activation_bytes(self) -> int | None:
        if self.activation is None:
            return None
        return self.activation.total * self.in_flight_microbatches

    @property
    def comm_buffer_bytes(self) -> int:
        return self.overhead.comm_buffer_bytes

    @property
    def modeled_sum(self) -> int:
        """All modeled components before fragmentation."""
        return (
            self.state.total
            + (self.activation_bytes or 0)
            + self.comm_buffer_bytes
        )

    @property
    def grand_total_bytes(self) -> int:
        scaled = self.modeled_sum * (1 + self.overhead.fragmentation_fraction)
        return math.ceil(scaled)

    @property
    def fragmentation_bytes(self) -> int:
        return self.grand_total_bytes - self.modeled_sum

    @property
    def notes(self) -> tuple[str, ...]:
        notes = []
        if self.activation is None:
            notes.append("activation: not modeled for stages with dense-FFN layers")
        elif self.training.recompute is RecomputePolicy.NONE:
            notes.append("attention=materialized (scores stored, no fused kernel)")
        if self.in_flight_microbatches > 1:
            notes.append(
                f"activation extrapolated to {self.in_flight_microbatches} "
                "in-flight micro-batches"
            )
        notes.append("fragmentation applied to all components incl. comm buffer")
        return tuple(notes)


def assemble_report(
    arch: ModelArchitecture,
    cfg: ParallelConfig,
    train: TrainingConfig,
    dtype: DtypePolicy | None = None,
    overhead: OverheadModel | None = None,
    *,
    stage: int | None = None,
    layout: StageLayout | None = None,
    in_flight_microbatches: int = 1,
    allow_uneven: bool = False,
) -> MemoryReport:
    """Build the full per-device report for one stage.

    Without an explicit ``stage`` the peak stage is used: the MoE-only
    stage holding the most static parameters per device.
    """
    dtype = dtype or DtypePolicy()
    overhead = overhead or OverheadModel()
    if in_flight_microbatches < 1:
        raise ValueError("in_flight_microbatches must be >= 1")
    if layout is None:
        layout = default_layout(arch, cfg.pp)
    if stage is None:
        stage = peak_moe_stage(arch, layout, cfg)

    breakdown = shard_static_params(arch, stage, layout, cfg)
    state = training_state_memory(
        breakdown, train.zero, dtype, cfg, allow_uneven=allow_uneven
    )
    try:
        act = activation_per_device(arch, train, cfg, layout, stage)
    except ValueError as exc:
        if "not modeled" not in str(exc):
            raise
        act = None

    return MemoryReport(
        architecture=arch,
        parallel=cfg,
        training=train,
        dtype=dtype,
        overhead=overhead,
        stage=stage,
        layers_in_stage=layout.sizes[stage],
        in_flight_microbatches=in_flight_microbatches,
        breakdown=breakdown,
        state=state,
        activation=act,
    )


def peak_moe_stage(arch: ModelArchitecture, layout: StageLayout, cfg: ParallelConfig) -> int:
    """Stage with the most static parameters per device among MoE-only stages."""
    best: tuple[int, int] | None = None
    for stage in range(layout.num_stages):
        if any(not arch.is_moe_layer(i) for i in layout.stage_range(stage)):
            continue
        total = shard_static_params(arch, stage, layout, cfg).device_total
        if best is None or total > best[0]:
            best = (total, stage)
    if best is None:
        raise ValueError(
            "no stage consists purely of MoE layers; pass an explicit stage"
        )
    return best[1]


# ---------------------------------------------------------------------------
# rendering


def _component_rows(report: MemoryReport) -> list[tuple[str, int | None]]:
    return [
        ("parameters", report.param_bytes),
        ("gradients", report.gradient_bytes),
        ("optimizer", report.optimizer_bytes),
        ("activation", report.activation_bytes),
        ("comm_buffer", report.comm_buffer_bytes),
        ("fragmentation", report.fragmentation_bytes),
        ("grand_total", report.grand_total_bytes),
    ]


def report_to_dict(report: MemoryReport) -> dict:
    """JSON-ready view; byte values stay exact integers."""
    return {
        "architecture": report.architecture.to_dict(),
        "architecture_digest": arch_digest(report.architecture),
        "parallel": {
            "dp": report.parallel.dp,
            "tp": report.parallel.tp,
            "pp": report.parallel.pp,
            "ep": report.parallel.ep,
            "etp": report.parallel.etp,
            "edp": report.parallel.edp,
            "sp": "on" if report.parallel.sp else "off",
            "cp": report.parallel.cp,
        },
        "training": {
            "micro_batch": report.training.micro_batch,
            "seq_len": report.training.seq_len,
            "recompute": report.training.recompute.value,
            "zero": report.training.zero.value,
        },
        "dtype": {
            "weight_bytes": report.dtype.weight_bytes,
            "activation_bytes": report.dtype.activation_bytes,
            "gradient_bytes": report.dtype.gradient_bytes,
            "optimizer_bytes": report.dtype.optimizer_bytes,
        },
        "overhead": {
            "fragmentation_fraction": str(report.overhead.fragmentation_fraction),
            "comm_buffer_bytes": report.overhead.comm_buffer_bytes,
        },
        "stage": report.stage,
        "layers_in_stage": report.layers_in_stage,
        "in_flight_microbatches": report.in_flight_microbatches,
        "static_params_per_device": report.breakdown.device_total,
        "components": {name: value for name, value in _component_rows(report)},
        "notes": list(report.notes),
    }


def render(report: MemoryReport, fmt: str = "table") -> str:
    if fmt == "json":
        return json.dumps(report_to_dict(report), indent=2) + "\n"
    if fmt == "csv":
        lines = ["component,bytes,mib,gib"]
        for name, value in _component_rows(report):
            if value is None:
                lines.append(f"{name},,,")
            else:
                lines.append(f"{name},{value},{mib_decimal(value)},{gib_decimal(value)}")
        return "\n".join(lines) + "\n"
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")

    cfg = report.parallel
    head = [
        "Per-device memory report",
        f"  architecture : {arch_digest(report.architecture)} "
        f"({report.architecture.num_layers} layers, "
        f"{format_param_billions(count_model(report.architecture).model_total)} B params)",
        f"  stage        : {report.stage} ({report.layers_in_stage} layers)",
        f"  parallel     : dp={cfg.dp} tp={cfg.tp} pp={cfg.pp} ep={cfg.ep} "
        f"etp={cfg.etp} edp={cfg.edp} sp={'on' if cfg.sp else 'off'} cp={cfg.cp}",
        f"  training     : micro_batch={report.training.micro_batch} "
        f"seq_len={report.training.seq_len} "
        f"recompute={report.training.recompute.value} zero={report.training.zero.value}",
        "",
    ]
    rows = [("component", "bytes", "MB", "GB")]
    for name, value in _component_rows(report):
        if value is None:
            rows.append((name, "not modeled", "-", "-"))
        else:
            rows.append((name, f"{value:,}", str(mib_decimal(value)), str(gib_decimal(value))))
    body = _align(rows)
    notes = [""] + [f"  note: {note}" for note in report.notes]
    return "\n".join(head + body + notes) + "\n"


def _align(rows: list[tuple[str, ...]]) -> list[str]:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    out = []
    for row in rows:
        cells = [row[0].ljust(widths[0])] + [
            cell.rjust(widths[i]) for i, cell in enumerate(row) if i > 0
        ]
        out.append("  ".join(cells).rstrip())
    return out


# ---------------------------------------------------------------------------
# table views mirroring the published analyses


def layer_table_rows(arch: ModelArchitecture) -> list[dict]:
    """Per-layer component counts grouped by identical consecutive layers."""
    table = count_model(arch)
    groups: list[dict] = []
    for row in table.rows:
        signature = (
            row.embedding,
            row.mla,
            row.dense_mlp,
            row.gate,
            row.moe_experts,
            row.layernorm,
            row.head,
        )
        if groups and groups[-1]["signature"] == signature:
            groups[-1]["last"] = row.layer_index
        else:
            groups.append(
                {
                    "signature": signature,
                    "first": row.layer_index,
                    "last": row.layer_index,
                    "row": row,
                }
            )
    out = []
    for group in groups:
        row = group["row"]
        per_layer = row.layer_total
        count = group["last"] - group["first"] + 1
        out.append(
            {
                "layers": (group["first"], group["last"]),
                "components": {
                    name: value
                    for name, value in (
                        ("embedding", row.embedding),
                        ("mla", row.mla),
                        ("dense_mlp", row.dense_mlp),
                        ("gate", row.gate),
                        ("moe_experts", row.moe_experts),
                        ("layernorm", row.layernorm),
                        ("head", row.head),
                    )
                    if value
                },
                "per_layer": per_layer,
                "group_layers": count,
                "group_params": per_layer * count,
            }
        )
    return out


def render_layer_table(arch: ModelArchitecture, weight_bytes: int = 2) -> str:
    groups = layer_table_rows(arch)
    table = count_model(arch)
    total = table.model_total
    total_bytes = total * weight_bytes

    rows = [("Layers", "Component", "Params", "Per layer", "B", "MB", "GB")]
    for group in groups:
        first, last = group["layers"]
        label = f"Layer {first}" if first == last else f"Layers {first}-{last}"
        per_layer = group["per_layer"]
        bytes_per_layer = per_layer * weight_bytes
        lead = True
        for name, value in group["components"].items():
            rows.append(
                (
                    label if lead else "",
                    name,
                    f"{value:,}",
                    f"{per_layer:,}" if lead else "",
                    format_param_billions(per_layer) if lead else "",
                    format_mib(bytes_per_layer) if lead else "",
                    format_gib(bytes_per_layer) if lead else "",
                )
            )
            lead = False
    gib = gib_decimal(total_bytes, 0 if total_bytes >= 1000 * GIB else 2)
    rows.append(
        (
            "Total",
            "",
            f"{total:,}",
            "",
            format_param_billions(total),
            format_mib(total_bytes),
            str(gib),
        )
    )
    return "\n".join(_align(rows)) + "\n"


def layer_table_csv(arch: ModelArchitecture, weight_bytes: int = 2) -> str:
    lines = [
        "layer,embedding,mla,dense_mlp,gate,moe_experts,layernorm,head,layer_total"
    ]
    table = count_model(arch)
    for row in table.rows:
        lines.append(
            f"{row.layer_index},{row.embedding},{row.mla},{row.dense_mlp},"
            f"{row.gate},{row.moe_experts},{row.layernorm},{row.head},{row.layer_total}"
        )
    lines.append(f"total,,,,,,,,{table.model_total}")
    return "\n".join(lines) + "\n"


def layer_table_json(arch: ModelArchitecture, weight_bytes: int = 2) -> str:
    table = count_model(arch)
    doc = {
        "layers": [
            {
                "layer": row.layer_index,
                "embedding": row.embedding,
                "mla": row.mla,
                "dense_mlp": row.dense_mlp,
                "gate": row.gate,
                "moe_experts": row.moe_experts,
                "layernorm": row.layernorm,
                "head": row.head,
                "layer_total": row.layer_total,
            }
            for row in table.rows
        ],
        "model_total": table.model_total,
        "total_bytes": table.total_bytes(weight_bytes),
    }
    return json.dumps(doc, indent=2) + "\n"


def render_stage_table(
    arch: ModelArchitecture, layout: StageLayout, weight_bytes: int = 2, fmt: str = "table"
) -> str:
    stages = stage_param_bytes(layout, arch, weight_bytes)
    if fmt == "csv":
        lines = ["stage,layers,params,bytes,gib"]
        for entry in stages:
            lines.append(
                f"{entry.stage},{entry.num_layers},{entry.params},{entry.bytes},"
                f"{gib_decimal(entry.bytes)}"
            )
        total = sum(e.params for e in stages)
        lines.append(f"sum,{layout.num_layers},{total},{total * weight_bytes},"
                     f"{gib_decimal(total * weight_bytes)}")
        return "\n".join(lines) + "\n"
    if fmt == "json":
        doc = {
            "stages": [
                {
                    "stage": e.stage,
                    "layers": e.num_layers,
                    "params": e.params,
                    "bytes": e.bytes,
                }
                for e in stages
            ],
            "total_params": sum(e.params for e in stages),
        }
        return json.dumps(doc, indent=2) + "\n"

    rows = [("Stage", "Layers", "Params", "B", "GB")]
    for entry in stages:
        rows.append(
            (
                f"{entry.stage}",
                f"{entry.num_layers}",
                f"{entry.params:,}",
                format_param_billions(entry.params),
                str(gib_decimal(entry.bytes, 0)),
            )
        )
    total = sum(e.params for e in stages)
    rows.append(
        (
            "Sum",
            f"{layout.num_layers}",
            f"{total:,}",
            format_param_billions(total),
            str(gib_decimal(total * weight_bytes, 0)),
        )
    )
    return "\n".join(_align(rows)) + "\n"


def zero_table_rows(
    arch: ModelArchitecture,
    cfg: ParallelConfig,
    dtype: DtypePolicy | None = None,
    layout: StageLayout | None = None,
    stage: int | None = None,
) -> list[dict]:
    """The four-strategy state-memory comparison for one stage.

    The displayed total is the sum of the rounded component cells (so the
    column can be checked by hand against the printed cells); exact byte
    totals are carried alongside.
    """
    dtype = dtype or DtypePolicy()
    if layout is None:
        layout = default_layout(arch, cfg.pp)
    if stage is None:
        stage = peak_moe_stage(arch, layout, cfg)
    breakdown = shard_static_params(arch, stage, layout, cfg)

    rows = []
    for strategy in ZeroStrategy:
        state = training_state_memory(breakdown, strategy, dtype, cfg)
        cells = {
            "params_gib": _zero_cell(state.param_bytes),
            "gradients_gib": _zero_cell(state.gradient_bytes),
            "optimizer_gib": _zero_cell(state.optimizer_bytes),
        }
        rows.append(
            {
                "strategy": strategy.value,
                "param_bytes": state.param_bytes,
                "gradient_bytes": state.gradient_bytes,
                "optimizer_bytes": state.optimizer_bytes,
                "total_bytes": state.total,
                **cells,
                "total_gib_display": _quantize(sum(cells.values(), Decimal(0)), 2),
            }
        )
    return rows


def render_zero_table(
    arch: ModelArchitecture,
    cfg: ParallelConfig,
    dtype: DtypePolicy | None = None,
    layout: StageLayout | None = None,
    stage: int | None = None,
    fmt: str = "table",
) -> str:
    rows = zero_table_rows(arch, cfg, dtype, layout, stage)
    if fmt == "json":
        doc = [
            {
                "strategy": row["strategy"],
                "param_bytes": row["param_bytes"],
                "gradient_bytes": row["gradient_bytes"],
                "optimizer_bytes": row["optimizer_bytes"],
                "total_bytes": row["total_bytes"],
                "total_gib_display": str(row["total_gib_display"]),
            }
            for row in rows
        ]
        return json.dumps(doc, indent=2) + "\n"
    if fmt == "csv":
        lines = ["strategy,param_bytes,gradient_bytes,optimizer_bytes,total_bytes,total_gib"]
        for row in rows:
            lines.append(
                f"{row['strategy']},{row['param_bytes']},{row['gradient_bytes']},"
                f"{row['optimizer_bytes']},{row['total_bytes']},{row['total_gib_display']}"
            )
        return "\n".join(lines) + "\n"

    table = [("ZeRO", "Params GB", "Gradients GB", "Optimizer GB", "P+G+O GB")]
    for row in rows:
        table.append(
            (
                row["strategy"],
                str(row["params_gib"]),
                str(row["gradients_gib"]),
                str(row["optimizer_gib"]),
                str(row["total_gib_display"]),
            )
        )
    return "\n".join(_align(table)) + "\n"


def render_activation_table(
    arch: ModelArchitecture,
    train: TrainingConfig,
    cfg: ParallelConfig,
    layout: StageLayout | None = None,
    stage: int | None = None,
    fmt: str = "table",
) -> str:
    """Evaluate both recomputation policies for one stage, side by side."""
    from dataclasses import replace

    if layout is None:
        layout = default_layout(arch, cfg.pp)
    if stage is None:
        stage = peak_moe_stage(arch, layout, cfg)
    reports = {
        policy: activation_per_device(
            arch, replace(train, recompute=policy), cfg, layout, stage
        )
        for policy in RecomputePolicy
    }
    none_rep = reports[RecomputePolicy.NONE]
    full_rep = reports[RecomputePolicy.FULL]

    if fmt == "json":
        doc = {
            "stage": stage,
            "layers": none_rep.layers,
            "micro_batch": train.micro_batch,
            "seq_len": train.seq_len,
            "none": {"mla": none_rep.mla_bytes, "moe": none_rep.moe_bytes, "total": none_rep.total},
            "full": {"mla": full_rep.mla_bytes, "moe": full_rep.moe_bytes, "total": full_rep.total},
        }
        return json.dumps(doc, indent=2) + "\n"
    if fmt == "csv":
        lines = ["component,recompute_none_bytes,recompute_full_bytes"]
        lines.append(f"mla,{none_rep.mla_bytes},{full_rep.mla_bytes}")
        lines.append(f"moe,{none_rep.moe_bytes},{full_rep.moe_bytes}")
        lines.append(f"total,{none_rep.total},{full_rep.total}")
        return "\n".join(lines) + "\n"

    head = [
        f"Activation memory per device (stage {stage}, {none_rep.layers} layers, "
        f"micro_batch={train.micro_batch}, seq_len={train.seq_len})",
        "",
    ]
    rows = [("Component", "AC none (bytes)", "AC none GB", "AC full (bytes)", "AC full GB")]
    for name, none_val, full_val in (
        ("mla", none_rep.mla_bytes, full_rep.mla_bytes),
        ("moe", none_rep.moe_bytes, full_rep.moe_bytes),
        ("total", none_rep.total, full_rep.total),
    ):
        rows.append(
            (
                name,
                f"{none_val:,}",
                str(gib_decimal(none_val)),
                f"{full_val:,}",
                str(gib_decimal(full_val)),
            )
        )
    note = ["", "  note: attention=materialized (scores stored, no fused kernel)"]
    return "\n".join(head + _align(rows) + note) + "\n"
