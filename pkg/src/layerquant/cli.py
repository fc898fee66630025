"""Command-line pipeline: capture, score, plan, quantize, evaluate, report.

Every command is deterministic for identical inputs and flags (no timestamps
anywhere), so outputs can be diffed byte for byte. Exit codes are a stable
contract: 0 success, 2 insufficient memory (retryable), 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import bundle as bundle_mod
from . import planner, toymodel
from .container import load_store, write_store
from .importance import DEFAULT_TOP_K, ImportanceReport, rank_ascending, score_layers
from .quantizer import apply_plan, plan_fingerprint

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INSUFFICIENT_MEMORY = 2

WAIT_POLL_SECONDS = 1.0


def _cmd_capture_toy(args) -> int:
    config = toymodel.ToyConfig(seed=args.seed)
    weights = toymodel.init_toy(config)
    Path(args.out_weights).write_bytes(toymodel.weights_to_store_bytes(weights))
    calib = toymodel.capture_bundle(weights, samples=args.samples)
    bundle_mod.save_bundle(args.out_bundle, calib, model_id="toy")
    print(f"wrote weights to {args.out_weights} and a {args.samples}-sample bundle "
          f"to {args.out_bundle}")
    return EXIT_OK


def _cmd_importance(args) -> int:
    calib = bundle_mod.load_bundle_file(args.bundle)
    report = score_layers(calib, metric=args.metric, k=args.k)
    Path(args.out).write_text(report.to_json())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(f"scored {report.num_layers} layers ({args.metric}); "
          f"least important first: {report.ordering}")
    return EXIT_OK


def _budget_providers(args) -> list[planner.BudgetProvider]:
    providers: list[planner.BudgetProvider] = [
        planner.flag_budget(args.memory),
        planner.env_budget(os.environ),
        planner.config_budget(getattr(args, "config", None)),
    ]
    if getattr(args, "devices_file", None):
        providers.append(planner.device_budget(lambda: planner.load_devices_file(args.devices_file)))
    else:
        providers.append(planner.device_budget(planner.probe_nvidia_devices))
    return providers


def _cmd_plan(args) -> int:
    report = ImportanceReport.from_json(Path(args.importance).read_text())
    profile = planner.load_profile(args.profile)
    if report.num_layers != profile.num_layers:
        raise ValueError(f"importance report covers {report.num_layers} layers but profile "
                         f"{profile.model_id!r} has {profile.num_layers}")
    ranked = rank_ascending(report)

    deadline = time.monotonic() + args.timeout if args.wait else None
    while True:
        budget = planner.resolve_budget(_budget_providers(args))
        try:
            plan = planner.allocate_precision(ranked, profile, budget)
            break
        except planner.InsufficientMemoryError as exc:
            if deadline is None or time.monotonic() >= deadline:
                print(f"insufficient memory: {exc}", file=sys.stderr)
                return EXIT_INSUFFICIENT_MEMORY
            time.sleep(WAIT_POLL_SECONDS)

    Path(args.out).write_text(plan.to_json())
    counts = plan.counts()
    print(f"plan for {plan.model_id} under {plan.budget_bytes} B: "
          f"{counts['fp16']} fp16 / {counts['int8']} int8 / {counts['int4']} int4 layers, "
          f"avg {plan.average_bits} bits, predicted {plan.predicted_bytes} B")
    return EXIT_OK


def _cmd_quantize(args) -> int:
    weights = load_store(args.weights)
    plan = planner.QuantPlan.from_json(Path(args.plan).read_text())
    out = apply_plan(weights, plan)
    Path(args.out).write_bytes(write_store(dict(out.items()), out.metadata))
    print(f"quantized store written to {args.out} (plan {out.metadata['plan_id']})")
    return EXIT_OK


def _cmd_eval_toy(args) -> int:
    original = toymodel.weights_from_store(load_store(args.weights))
    quantized = toymodel.load_dequantized(load_store(args.quantized))
    corpus = toymodel.synth_corpus(original.config, length=args.corpus_length,
                                   corpus_seed=args.corpus_seed)
    ppl_fp = toymodel.perplexity(original, corpus)
    ppl_quant = toymodel.perplexity(quantized, corpus)
    result = {
        "ppl_fp": ppl_fp,
        "ppl_quant": ppl_quant,
        "relative_delta": (ppl_quant - ppl_fp) / ppl_fp,
    }
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def _cmd_probe(args) -> int:
    if args.devices_file:
        reports = planner.load_devices_file(args.devices_file)
    else:
        reports = planner.probe_nvidia_devices()
    if not reports:
        raise ValueError("no devices available (pass --devices-file or install nvidia-smi)")
    chosen = planner.select_device(reports)
    doc = {
        "devices": [{"device_id": r.device_id, "free_bytes": r.free_bytes} for r in reports],
        "selected": chosen,
    }
    try:
        doc["budget_bytes"] = planner.resolve_budget(_budget_providers(args))
    except planner.BudgetError:
        pass
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_report(args) -> int:
    plan = planner.QuantPlan.from_json(Path(args.plan).read_text())
    counts = plan.counts()
    print(f"model:     {plan.model_id}")
    print(f"plan id:   {plan_fingerprint(plan.to_json())}")
    print(f"budget:    {plan.budget_bytes} B ({plan.budget_bytes / 1e9:.2f} GB)")
    print(f"predicted: {plan.predicted_bytes} B ({plan.predicted_bytes / 1e9:.2f} GB)")
    print()
    print("memory      fp16 layers  int8 layers  int4 layers  avg bits")
    print(f"{plan.budget_bytes / 1e9:<12.2g}{counts['fp16']:<13}{counts['int8']:<13}"
          f"{counts['int4']:<13}{plan.average_bits:g}")
    if counts["int4"]:
        int4_layers = [i for i, p in enumerate(plan.assignment) if p == "int4"]
        print(f"\nint4 layers (least important): {sorted(int4_layers)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerquant",
        description="Layer-adaptive mixed-precision quantization under a memory budget.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("capture-toy", help="init the toy model and dump weights + calibration bundle")
    p.add_argument("--out-weights", required=True)
    p.add_argument("--out-bundle", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=1)
    p.set_defaults(func=_cmd_capture_toy)

    p = sub.add_parser("importance", help="score layer importance from a calibration bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", choices=["jaccard", "cosine"], default="jaccard")
    p.add_argument("--k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--csv", help="also write a layer,score CSV to this path")
    p.set_defaults(func=_cmd_importance)

    p = sub.add_parser("plan", help="allocate per-layer precision under a memory budget")
    p.add_argument("--importance", required=True)
    p.add_argument("--profile", required=True, help="shipped profile name or profile JSON path")
    p.add_argument("--out", required=True)
    p.add_argument("--memory", help='budget, e.g. "6GB" (decimal) or "8GiB" (binary)')
    p.add_argument("--config", help="JSON config file with a memory_budget key")
    p.add_argument("--devices-file", help="JSON device fixture used as the budget probe")
    p.add_argument("--wait", action="store_true",
                   help="poll every second until the budget suffices")
    p.add_argument("--timeout", type=float, default=60.0, help="max seconds to wait")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("quantize", help="apply a plan to a weight store")
    p.add_argument("--weights", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("eval-toy", help="compare toy perplexity before/after quantization")
    p.add_argument("--weights", required=True, help="original toy weight store")
    p.add_argument("--quantized", required=True, help="quantized toy store")
    p.add_argument("--corpus-seed", type=int, default=12345)
    p.add_argument("--corpus-length", type=int, default=2048)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval_toy)

    p = sub.add_parser("probe", help="list devices and pick the one with the most free memory")
    p.add_argument("--devices-file")
    p.add_argument("--memory")
    p.set_defaults(func=_cmd_probe, config=None)

    p = sub.add_parser("report", help="pretty-print a plan as a strategy table")
    p.add_argument("--plan", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except planner.InsufficientMemoryError as exc:
        print(f"insufficient memory: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT_MEMORY
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
