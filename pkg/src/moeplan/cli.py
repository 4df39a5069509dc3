"""Command-line interface.

Subcommands: describe, stages, plan, zero-table, activation, sweep,
oracle-dump. Defaults reproduce the reference case study (dp=32 tp=2
pp=16 ep=8 etp=1, micro-batch 1, sequence length 4096), so a bare
``moeplan plan --model deepseek-v3`` works out of the box.

Exit codes: 0 success, 1 validation error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

from .activation import RecomputePolicy, TrainingConfig
from .arch import ModelArchitecture, available_presets, builtin_preset, read_architecture
from .oracle import enumerate_tensors, records_to_csv
from .parallel import ParallelConfig, default_layout, parse_parallel, stage_layout
from .planner import ClusterSpec, sweep, training_grid
from .report import (
    GIB,
    OverheadModel,
    arch_digest,
    assemble_report,
    format_gib,
    gib_decimal,
    layer_table_csv,
    layer_table_json,
    peak_moe_stage,
    render,
    render_activation_table,
    render_layer_table,
    render_stage_table,
    render_zero_table,
)
from .zero import DtypePolicy, ZeroStrategy

MODEL_PATH_ENV = "MOEPLAN_MODEL_PATH"

_REFERENCE_CASE = ParallelConfig(dp=32, tp=2, pp=16, ep=8, etp=1, sp=True, cp=1)


def _resolve_model(name: str, on_unknown: str = "error") -> ModelArchitecture:
    if name in available_presets():
        return builtin_preset(name)
    path = Path(name)
    if path.exists():
        return read_architecture(path, on_unknown=on_unknown)
    search = os.environ.get(MODEL_PATH_ENV, "")
    for directory in filter(None, search.split(os.pathsep)):
        for candidate in (Path(directory) / name, Path(directory) / f"{name}.json"):
            if candidate.exists():
                return read_architecture(candidate, on_unknown=on_unknown)
    raise ValueError(
        f"unknown model {name!r}: not a preset ({', '.join(available_presets())}), "
        f"not a file, and not found under ${MODEL_PATH_ENV}"
    )


def _parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parallel_from_args(args: argparse.Namespace) -> ParallelConfig:
    cfg = _REFERENCE_CASE
    if args.parallel:
        cfg = parse_parallel(_parse_kv(args.parallel), base=cfg)
    overrides = {}
    for key in ("dp", "tp", "pp", "ep", "etp", "cp"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "sp", None) is not None:
        overrides["sp"] = args.sp
    if overrides:
        cfg = parse_parallel(overrides, base=cfg)
    return cfg


def _training_from_args(args: argparse.Namespace) -> TrainingConfig:
    return TrainingConfig(
        micro_batch=args.micro_batch,
        seq_len=args.seq_len,
        recompute=RecomputePolicy.from_name(args.recompute),
        zero=ZeroStrategy.from_name(args.zero),
    )


def _overhead_from_args(args: argparse.Namespace) -> OverheadModel:
    return OverheadModel(
        fragmentation_fraction=Fraction(str(args.fragmentation)),
        comm_buffer_bytes=int(Fraction(str(args.comm_buffer_gib)) * GIB),
    )


def _layout_from_args(arch: ModelArchitecture, cfg: ParallelConfig, args: argparse.Namespace):
    policy = getattr(args, "layout", None)
    if policy is None or policy == "auto":
        return default_layout(arch, cfg.pp)
    if "," in policy:
        return stage_layout(arch, cfg.pp, [int(n) for n in policy.split(",")])
    return stage_layout(arch, cfg.pp, policy)


def _emit(text: str, args: argparse.Namespace) -> None:
    if getattr(args, "out", None):
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--model",
        required=True,
        help="preset name, path to a JSON architecture file, or a name "
        f"searched under ${MODEL_PATH_ENV}",
    )
    parser.add_argument(
        "--lenient-keys",
        action="store_true",
        help="warn instead of erroring on unknown architecture keys",
    )


def _add_output_flags(parser: argparse.ArgumentParser, formats=("table", "json", "csv")) -> None:
    parser.add_argument("--format", choices=formats, default="table")
    parser.add_argument("--out", help="write output to a file instead of stdout")


def _add_parallel_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--parallel",
        help="compact form, e.g. dp=32,tp=2,pp=16,ep=8,etp=1,sp=on,cp=1",
    )
    for key in ("dp", "tp", "pp", "ep", "etp", "cp"):
        parser.add_argument(f"--{key}", type=int, help=f"{key} degree (overrides --parallel)")
    parser.add_argument("--sp", choices=("on", "off"), help="sequence parallelism")


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-b", "--micro-batch", type=int, default=1)
    parser.add_argument("-s", "--seq-len", type=int, default=4096)
    parser.add_argument(
        "--recompute", choices=[p.value for p in RecomputePolicy], default="full"
    )
    parser.add_argument(
        "--zero", choices=[z.value for z in ZeroStrategy], default="os+g"
    )


def _add_overhead_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--fragmentation", default="0.1", help="fraction, default 0.1")
    parser.add_argument("--comm-buffer-gib", default="1", help="GiB, default 1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moeplan",
        description="Per-device GPU memory planner for MoE transformer training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="per-layer parameter counts")
    _add_model_flags(p)
    _add_output_flags(p)

    p = sub.add_parser("stages", help="per-stage parameter totals under PP")
    _add_model_flags(p)
    p.add_argument("--pp", type=int, default=16)
    p.add_argument(
        "--layout",
        default="auto",
        help="auto, deepseek-pp16, uniform, or explicit sizes like 4,4,...,1",
    )
    _add_output_flags(p)

    p = sub.add_parser("plan", help="full per-device memory report")
    _add_model_flags(p)
    _add_parallel_flags(p)
    _add_training_flags(p)
    _add_overhead_flags(p)
    p.add_argument("--stage", type=int, help="stage index (default: peak MoE stage)")
    p.add_argument("--in-flight", type=int, default=1, help="in-flight micro-batches")
    p.add_argument(
        "--allow-uneven",
        action="store_true",
        help="ceiling-divide uneven ZeRO shards instead of erroring",
    )
    _add_output_flags(p)

    p = sub.add_parser("zero-table", help="state memory per ZeRO strategy")
    _add_model_flags(p)
    _add_parallel_flags(p)
    p.add_argument("--stage", type=int, help="stage index (default: peak MoE stage)")
    _add_output_flags(p)

    p = sub.add_parser("activation", help="activation memory per recompute policy")
    _add_model_flags(p)
    _add_parallel_flags(p)
    _add_training_flags(p)
    p.add_argument("--stage", type=int, help="stage index (default: peak MoE stage)")
    _add_output_flags(p)

    p = sub.add_parser("sweep", help="enumerate and rank configurations")
    _add_model_flags(p)
    p.add_argument("--world-size", type=int, required=True)
    p.add_argument("--device-memory-gib", default="80")
    p.add_argument("--reserve-fraction", default="0")
    _add_training_flags(p)
    _add_overhead_flags(p)
    p.add_argument(
        "--fix",
        action="append",
        default=[],
        metavar="K=V",
        help="pin a degree, e.g. --fix pp=16 (repeatable)",
    )
    p.add_argument(
        "--grid",
        action="append",
        default=[],
        metavar="K=V1,V2",
        help="cross-product a training setting over several values, e.g. "
        "--grid micro_batch=1,2,4 --grid recompute=none,full (repeatable)",
    )
    p.add_argument("--show-all", action="store_true", help="include non-fitting configs")
    p.add_argument("--limit", type=int, help="print at most N rows")
    _add_output_flags(p, formats=("table", "json"))

    p = sub.add_parser("oracle-dump", help="dump the tensor inventory as CSV")
    _add_model_flags(p)
    _add_parallel_flags(p)
    p.add_argument("--stage", type=int, help="stage index (default: peak MoE stage)")
    p.add_argument("--out", help="write output to a file instead of stdout")

    return parser


def _cmd_describe(args) -> str:
    arch = _resolve_model(args.model, "warn" if args.lenient_keys else "error")
    if args.format == "csv":
        return layer_table_csv(arch)
    if args.format == "json":
        return layer_table_json(arch)
    return render_layer_table(arch)


def _cmd_stages(args) -> str:
    arch = _resolve_model(args.model, "warn" if args.lenient_keys else "error")
    cfg = ParallelConfig(dp=1, tp=1, pp=args.pp)
    layout = _layout_from_args(arch, cfg, args)
    return render_stage_table(arch, layout, fmt=args.format)


def _cmd_plan(args) -> str:
    arch = _resolve_model(args.model, "warn" if args.lenient_keys else "error")
    cfg = _parallel_from_args(args)
    train = _training_from_args(args)
    report = assemble_report(
        arch,
        cfg,
        train,
        DtypePolicy(),
        _overhead_from_args(args),
        stage=args.stage,
        in_flight_microbatches=args.in_flight,
        allow_uneven=args.allow_uneven,
    )
    return render(report, args.format)


def _cmd_zero_table(args) -> str:
    arch = _resolve_model(args.model, "warn" if args.lenient_keys else "error")
    cfg = _parallel_from_args(args)
    return render_zero_table(arch, cfg, stage=args.stage, fmt=args.format)


def _cmd_activation(args) -> str:
    arch = _resolve_model(args.model, "warn" if args.lenient_keys else "error")
    cfg = _parallel_from_args(args)
    train = _training_from_args(args)
    return render_activation_table(arch, train, cfg, stage=args.stage, fmt=args.format)


def _sweep_result_json(result, shown) -> dict:
    return {
        "results": [
            {
                "dp": r.parallel.dp,
                "tp": r.parallel.tp,
                "pp": r.parallel.pp,
                "ep": r.parallel.ep,
                "etp": r.parallel.etp,
                "edp": r.parallel.edp,
                "grand_total_bytes": r.grand_total_bytes,
                "fits": r.fits,
            }
            for r in shown
        ],
        "skipped": [
            {
                "parallel": f"dp={s.parallel.dp},tp={s.parallel.tp},pp={s.parallel.pp},"
                f"ep={s.parallel.ep},etp={s.parallel.etp}",
                "reason": s.reason,
            }
            for s in result.skipped
        ],
    }


def _sweep_result_table(result, shown, spec) -> str:
    rows = [("#", "dp", "tp", "pp", "ep", "etp", "edp", "GB", "fits")]
    for rank, r in enumerate(shown):
        cfg = r.parallel
        rows.append(
            (
                str(rank),
                str(cfg.dp),
                str(cfg.tp),
                str(cfg.pp),
                str(cfg.ep),
                str(cfg.etp),
                str(cfg.edp),
                format_gib(r.grand_total_bytes),
                "yes" if r.fits else "no",
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = [
        "  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row)).rstrip()
        for row in rows
    ]
    summary = (
        f"\n{len(result.fitting)} fitting / {len(result.not_fitting)} over budget / "
        f"{len(result.skipped)} skipped; budget "
        f"{gib_decimal(spec.budget_bytes)} GB per device\n"
    )
    return "\n".join(lines) + summary


def _training_echo(train: TrainingConfig) -> dict:
    return {
        "micro_batch": train.micro_batch,
        "seq_len": train.seq_len,
        "recompute": train.recompute.value,
        "zero": train.zero.value,
    }


def _cmd_sweep(args) -> str:
    arch = _resolve_model(args.model, "warn" if args.lenient_keys else "error")
    spec = ClusterSpec(
        world_size=args.world_size,
        device_memory_bytes=int(Fraction(str(args.device_memory_gib)) * GIB),
        reserve_fraction=Fraction(str(args.reserve_fraction)),
    )
    constraints = {}
    for item in args.fix:
        for key, value in _parse_kv(item).items():
            constraints[key] = int(value)

    base_train = _training_from_args(args)
    axes = {}
    for item in args.grid:
        if "=" not in item:
            raise ValueError(f"expected key=value list, got {item!r}")
        key, values = item.split("=", 1)
        parts = [v.strip() for v in values.split(",") if v.strip()]
        if key in ("micro_batch", "seq_len"):
            axes[key] = [int(v) for v in parts]
        else:
            axes[key] = parts
    trains = training_grid(base_train, axes) if axes else (base_train,)

    dtype = DtypePolicy()
    overhead = _overhead_from_args(args)
    blocks = []
    for train in trains:
        result = sweep(spec, arch, train, dtype, overhead, constraints=constraints or None)
        shown = list(result.fitting)
        if args.show_all:
            shown += list(result.not_fitting)
        if args.limit is not None:
            shown = shown[: args.limit]
        blocks.append((train, result, shown))

    if args.format == "json":
        doc = {
            "budget_bytes": spec.budget_bytes,
            "sweeps": [
                {"training": _training_echo(train), **_sweep_result_json(result, shown)}
                for train, result, shown in blocks
            ],
        }
        if len(blocks) == 1:  # keep the flat shape for plain sweeps
            doc.update(_sweep_result_json(blocks[0][1], blocks[0][2]))
        return json.dumps(doc, indent=2) + "\n"

    parts = []
    for train, result, shown in blocks:
        if len(blocks) > 1:
            echo = _training_echo(train)
            parts.append(
                "training: " + " ".join(f"{k}={v}" for k, v in echo.items())
            )
        parts.append(_sweep_result_table(result, shown, spec))
    return "\n".join(parts)


def _cmd_oracle_dump(args) -> str:
    arch = _resolve_model(args.model, "warn" if args.lenient_keys else "error")
    cfg = _parallel_from_args(args)
    layout = default_layout(arch, cfg.pp)
    stage = args.stage if args.stage is not None else peak_moe_stage(arch, layout, cfg)
    return records_to_csv(enumerate_tensors(arch, layout, stage))


_COMMANDS = {
    "describe": _cmd_describe,
    "stages": _cmd_stages,
    "plan": _cmd_plan,
    "zero-table": _cmd_zero_table,
    "activation": _cmd_activation,
    "sweep": _cmd_sweep,
    "oracle-dump": _cmd_oracle_dump,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        text = _COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        _emit(text, args)
    except BrokenPipeError:
        # downstream consumer (e.g. head) closed the pipe; not an error
        import os as _os

        _os.dup2(_os.open(_os.devnull, _os.O_WRONLY), sys.stdout.fileno())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
