"""Command-line interface.

Subcommands:
  analyze     trace a block and profile its memory footprint
  commvolume  closed-form tensor-parallel vs axial-parallel volumes
  simulate    run the sharded block, check numerics and ledger bytes
  plan        search a chunk plan under a peak-memory budget
  run-plan    execute a saved plan and verify outputs and peak memory
  schedule    simulate a timeline in sync and async modes

Exit codes: 0 success, 2 bad arguments or malformed input, 3 model
constraint violated (e.g. head-count limit), 4 infeasible budget.  All
output is JSON with sorted keys; pass --no-timestamp for byte-identical
reruns.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone

import numpy as np

from . import chunk_exec, chunker, commcost, dap_block, memory, plans, trace
from .engine import Allocator
from .errors import (
    EvoplanError,
    GraphFormatError,
    HeadLimitError,
    InfeasibleBudgetError,
    ScheduleError,
)
from .evoformer import EvoConfig, evoformer_block, init_block_params
from .graph import execute
from .scheduling import events_from_json, simulate_schedule
from .sharding import CommLedger, DeviceMesh

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONSTRAINT = 3
EXIT_INFEASIBLE = 4


def _emit(args, command: str, result: dict) -> None:
    doc = {"schema": "evoplan-cli-v1", "command": command, "result": result}
    if not args.no_timestamp:
        doc["timestamp"] = datetime.now(timezone.utc).isoformat()
    text = json.dumps(doc, sort_keys=True, indent=2)
    if getattr(args, "out", None):
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-seq", type=int, default=8)
    p.add_argument("--n-res", type=int, default=16)
    p.add_argument("--h-msa", type=int, default=16)
    p.add_argument("--h-pair", type=int, default=8)
    p.add_argument("--heads-msa", type=int, default=2)
    p.add_argument("--heads-pair", type=int, default=2)
    p.add_argument("--hidden-proj", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)


def _config(args) -> EvoConfig:
    return EvoConfig(
        n_seq=args.n_seq, n_res=args.n_res, h_msa=args.h_msa,
        h_pair=args.h_pair, n_head_msa=args.heads_msa,
        n_head_pair=args.heads_pair, hidden_proj=args.hidden_proj)


def _traced(cfg: EvoConfig, seed: int):
    params = init_block_params(cfg, seed)
    return trace.trace_evoformer(cfg, params), params


def _config_dict(cfg: EvoConfig) -> dict:
    return asdict(cfg)


def cmd_analyze(args) -> int:
    cfg = _config(args)
    graph, _params = _traced(cfg, args.seed)
    profile = memory.estimate_memory(graph, element_size=args.element_size)
    _emit(args, "analyze", {
        "config": _config_dict(cfg),
        "element_size": args.element_size,
        "n_nodes": len(graph.nodes),
        "peak_bytes": profile.peak_bytes,
        "peak_node": graph.nodes[profile.peak_node_id].name,
        "footprint_stats": memory.footprint_stats(profile, args.fraction),
    })
    return EXIT_OK


def cmd_commvolume(args) -> int:
    model = commcost.CommModel(n_heads=args.heads)
    report = model.compare(args.k, args.devices)
    _emit(args, "commvolume", json.loads(report.to_json()))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    params = init_block_params(cfg, args.seed)
    rng = np.random.default_rng(args.seed)
    m = rng.normal(size=(cfg.n_seq, cfg.n_res, cfg.h_msa))
    z = rng.normal(size=(cfg.n_res, cfg.n_res, cfg.h_pair))
    order = (tuple(int(x) for x in args.device_order.split(","))
             if args.device_order else ())
    mesh = DeviceMesh(args.devices, order)
    ledger = CommLedger(args.devices, element_size=args.element_size)
    m_ref, z_ref = evoformer_block(m, z, params, cfg)
    m_dap, z_dap = dap_block.dap_evoformer_block(m, z, params, cfg, mesh, ledger)
    err = max(float(np.max(np.abs(m_dap - m_ref))),
              float(np.max(np.abs(z_dap - z_ref))))
    predicted = commcost.predict_block_ledger(cfg, args.devices,
                                              args.element_size)
    measured = {
        cat: {"count": ledger.counts[cat], "bytes": sum(ledger.bytes[cat])}
        for cat in sorted(ledger.counts)
    }
    _emit(args, "simulate", {
        "config": _config_dict(cfg),
        "n_devices": args.devices,
        "device_order": list(mesh.device_order),
        "max_abs_error": err,
        "ledger": measured,
        "predicted": predicted,
        "ledger_matches_prediction": measured == predicted,
    })
    return EXIT_OK if err <= 1e-9 and measured == predicted else EXIT_CONSTRAINT


def _resolve_budget(args, peak: int) -> int:
    if args.budget is not None:
        return args.budget
    if args.budget_frac is not None:
        return int(peak * args.budget_frac)
    raise SystemExit(EXIT_USAGE)


def cmd_plan(args) -> int:
    cfg = _config(args)
    graph, _params = _traced(cfg, args.seed)
    base = memory.estimate_memory(graph, element_size=args.element_size)
    budget = _resolve_budget(args, base.peak_bytes)
    plan = chunker.autochunk_search(graph, budget, args.element_size)
    after = memory.estimate_memory(graph, plan, args.element_size)
    doc = {
        "schema": "evoplan-planfile-v1",
        "config": _config_dict(cfg),
        "seed": args.seed,
        "element_size": args.element_size,
        "budget": budget,
        "peak_before": base.peak_bytes,
        "peak_after": after.peak_bytes,
        "plan": plans.plan_codegen(graph, plan),
    }
    _emit(args, "plan", doc)
    return EXIT_OK


def cmd_run_plan(args) -> int:
    with open(args.plan) as fh:
        text = fh.read()
    try:
        outer = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"malformed plan file: {exc.msg}") from exc
    doc = outer.get("result", outer)
    if doc.get("schema") != "evoplan-planfile-v1":
        raise GraphFormatError(f"unexpected plan schema {doc.get('schema')!r}")
    cfg = EvoConfig(**doc["config"])
    graph, _params = _traced(cfg, doc["seed"])
    plan = plans.plan_from_document(doc["plan"])
    es = doc["element_size"]
    rng = np.random.default_rng(doc["seed"] + 1)
    inputs = {
        graph.runtime_inputs[0]: rng.normal(
            size=(cfg.n_seq, cfg.n_res, cfg.h_msa)),
        graph.runtime_inputs[1]: rng.normal(
            size=(cfg.n_res, cfg.n_res, cfg.h_pair)),
    }
    reference = execute(graph, inputs)
    allocator = Allocator()
    got = chunk_exec.execute_chunked(graph, plan, inputs, allocator)
    err = max(float(np.max(np.abs(got[i] - reference[i])))
              for i in graph.outputs)
    measured = allocator.stats().in_element_size(es).peak_bytes
    estimated = memory.estimate_memory(graph, plan, es).peak_bytes
    within = doc.get("budget") is None or measured <= doc["budget"]
    _emit(args, "run-plan", {
        "config": _config_dict(cfg),
        "max_abs_error": err,
        "peak_estimated": estimated,
        "peak_measured": measured,
        "peak_matches": measured == estimated,
        "budget": doc.get("budget"),
        "within_budget": within,
    })
    return EXIT_OK if err <= 1e-9 and within and measured == estimated \
        else EXIT_CONSTRAINT


def cmd_schedule(args) -> int:
    if args.example:
        text = (importlib.resources.files("evoplan")
                .joinpath("data/example_timeline.json").read_text())
    elif args.timeline:
        with open(args.timeline) as fh:
            text = fh.read()
    else:
        raise SystemExit(EXIT_USAGE)
    events = events_from_json(text)
    sync = simulate_schedule(events, "sync")
    overlap = simulate_schedule(events, "async")
    _emit(args, "schedule", {
        "n_events": len(events),
        "sync": json.loads(sync.to_json()),
        "async": json.loads(overlap.to_json()),
        "overlap_speedup": (sync.makespan / overlap.makespan
                            if overlap.makespan else 1.0),
    })
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evoplan",
        description="Planning toolkit for sharded and chunked evoformer "
                    "execution.")
    parser.add_argument("--no-timestamp", action="store_true",
                        help="omit the timestamp for reproducible output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="profile traced block memory")
    _add_config_args(p)
    p.add_argument("--element-size", type=int, default=2)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("commvolume", help="closed-form volume comparison")
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--devices", type=int, required=True)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_commvolume)

    p = sub.add_parser("simulate", help="run the sharded block simulation")
    _add_config_args(p)
    p.add_argument("--devices", type=int, required=True)
    p.add_argument("--device-order", default="")
    p.add_argument("--element-size", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("plan", help="search a chunk plan under a budget")
    _add_config_args(p)
    p.add_argument("--element-size", type=int, default=8)
    p.add_argument("--budget", type=int)
    p.add_argument("--budget-frac", type=float)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("run-plan", help="execute and verify a saved plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_run_plan)

    p = sub.add_parser("schedule", help="simulate a comm/compute timeline")
    p.add_argument("--timeline")
    p.add_argument("--example", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_schedule)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except InfeasibleBudgetError as exc:
        print(json.dumps({"error": str(exc),
                          "min_peak_bytes": exc.min_peak}, sort_keys=True),
              file=sys.stderr)
        return EXIT_INFEASIBLE
    except HeadLimitError as exc:
        print(json.dumps({"error": str(exc)}, sort_keys=True), file=sys.stderr)
        return EXIT_CONSTRAINT
    except (GraphFormatError, ScheduleError, FileNotFoundError) as exc:
        print(json.dumps({"error": str(exc)}, sort_keys=True), file=sys.stderr)
        return EXIT_USAGE
    except (EvoplanError, SystemExit) as exc:
        code = exc.code if isinstance(exc, SystemExit) else None
        print(json.dumps({"error": str(exc)}, sort_keys=True), file=sys.stderr)
        return code if isinstance(code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
