"""
Command-line entry point.

Exit codes:
    0  success
    2  usage error (unknown flag, malformed value)
    3  conflicting flags
    4  infeasible budget
    5  malformed FKV1 dump
    6  invalid input (non-finite data, plan/dump mismatch, bad JSON)
    7  file not found or unreadable

Failures print one JSON object on stderr:
    {"error": "<kind>", "exit_code": <n>, "message": "..."}
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import baselines, fkv, spectral
from .budget import DYNAMIC, UNIFORM
from .cache import ALL_TOKENS, VISION_ONLY, CompressionConfig, evaluate_plan, RetentionPlan, timed_compress
from .outlier import SEQ_AXIS, BudgetError
from .synth import SynthSpec, SynthTruth, generate, recall

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFLICT = 3
EXIT_INFEASIBLE = 4
EXIT_FORMAT = 5
EXIT_INVALID = 6
EXIT_IO = 7

SCOPES = {"all": ALL_TOKENS, "vision": VISION_ONLY}


class CliError(Exception):
    def __init__(self, kind: str, exit_code: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, f"{self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _add_selection_flags(p):
    p.add_argument("--rho", type=float, default=0.2, help="global KV retention ratio in (0, 1]")
    p.add_argument("--gamma", type=float, default=0.2, help="low-pass cutoff factor in [0, 1]")
    p.add_argument("--policy", choices=baselines.POLICIES, default=baselines.FLASHCACHE)
    p.add_argument("--mode", choices=(DYNAMIC, UNIFORM), default=DYNAMIC, help="per-layer budget allocation")
    p.add_argument("--scope", choices=tuple(SCOPES), default="all", help="evict among all tokens or vision only")
    p.add_argument("--sink", type=int, default=4, help="leading positions always kept")
    p.add_argument("--recent", type=int, default=8, help="trailing positions always kept")
    p.add_argument("--seed", type=int, default=0, help="seed for random_seeded policy and generated queries")
    p.add_argument("--workers", type=int, default=1, help="threads for per-layer analysis")


def _add_query_flags(p, default_count: int):
    p.add_argument("--queries", help=".npy array [M, kv_heads*head_dim] of query vectors")
    p.add_argument("--num-queries", type=int, default=default_count,
                   help=f"random Gaussian queries when --queries is absent (default {default_count})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="freqkv",
        description="Frequency-domain KV-cache compression on serialized or synthetic KV dumps.",
        epilog="exit codes: 0 ok, 2 usage, 3 conflicting flags, 4 infeasible budget, "
               "5 malformed dump, 6 invalid input, 7 file not found",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("compress", help="compress a dump and write plan + metrics JSON")
    p.add_argument("--input", required=True)
    _add_selection_flags(p)
    _add_query_flags(p, 0)
    p.add_argument("--plan", required=True)
    p.add_argument("--metrics", required=True)
    p.add_argument("--compressed", help="write the retained rows and position maps as .npz")

    p = sub.add_parser("spectrum", help="per-frequency mean power of K and V along the sequence axis")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int)
    p.add_argument("--per-head", action="store_true", help="also emit one row block per KV head")

    p = sub.add_parser("synth", help="generate a synthetic dump with planted outliers")
    p.add_argument("--spec", required=True, help="JSON object of SynthSpec fields")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", required=True)

    p = sub.add_parser("eval", help="evaluate an existing plan against its dump")
    p.add_argument("--input", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_query_flags(p, 32)
    p.add_argument("--metrics", required=True)

    p = sub.add_parser("sweep", help="metrics per gamma or rho setting, as CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--gamma-list", type=_float_list)
    p.add_argument("--rho-list", type=_float_list)
    _add_selection_flags(p)
    _add_query_flags(p, 16)
    p.add_argument("--truth", help="truth JSON from `synth`; adds a planted-outlier recall column")
    p.add_argument("--out", required=True)
    return parser


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise CliError("invalid_input", EXIT_INVALID, f"{path}: invalid JSON ({err})") from None


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _config(args) -> CompressionConfig:
    return CompressionConfig(
        rho=args.rho, gamma=args.gamma, sink_count=args.sink, recent_count=args.recent,
        allocation_mode=args.mode, eviction_scope=SCOPES[args.scope], policy=args.policy, seed=args.seed,
    )


def _queries(args, dump):
    if args.queries:
        return np.load(args.queries)
    if args.num_queries > 0:
        rng = np.random.default_rng([args.seed, 0x51])
        return rng.standard_normal((args.num_queries, dump.kv_heads * dump.head_dim))
    return None


def cmd_compress(args) -> int:
    dump = fkv.read_dump(args.input)
    plan, cache, ms = timed_compress(dump, _config(args), args.workers)
    metrics = evaluate_plan(dump, plan, _queries(args, dump), method_latency_ms=ms)
    _write_json(plan.to_dict(), args.plan)
    _write_json(metrics, args.metrics)
    if args.compressed:
        arrays = {}
        for l, (layer, pos) in enumerate(zip(cache.layers, cache.position_maps)):
            arrays[f"keys_{l}"] = layer.keys
            arrays[f"values_{l}"] = layer.values
            arrays[f"positions_{l}"] = pos
        with open(args.compressed, "wb") as fh:
            np.savez(fh, **arrays)
    return EXIT_OK


def spectrum_rows(dump, layer=None, per_head=False) -> list[dict]:
    """Per-bin power rows: channel/head means per tensor plus the K+V total."""
    if layer is not None and not 0 <= layer < dump.num_layers:
        raise CliError("invalid_input", EXIT_INVALID, f"--layer {layer} outside [0, {dump.num_layers})")
    picked = dump.layers if layer is None else [dump.layers[layer]]
    rows = []
    for lay in picked:
        pk = spectral.power_spectrum(spectral.dct(lay.keys.astype(np.float64), axis=SEQ_AXIS))  # [H, N, D]
        pv = spectral.power_spectrum(spectral.dct(lay.values.astype(np.float64), axis=SEQ_AXIS))
        groups = [("all", slice(None))]
        if per_head:
            groups += [(str(h), slice(h, h + 1)) for h in range(lay.kv_heads)]
        for name, sel in groups:
            k_mean = pk[sel].mean(axis=(0, 2))
            v_mean = pv[sel].mean(axis=(0, 2))
            total = pk[sel].sum(axis=(0, 2)) + pv[sel].sum(axis=(0, 2))
            for m in range(lay.seq_len):
                rows.append({
                    "layer": lay.layer_index, "head": name, "bin": m,
                    "key_power": float(k_mean[m]), "value_power": float(v_mean[m]),
                    "mean_power": float(0.5 * (k_mean[m] + v_mean[m])), "total_power": float(total[m]),
                })
    return rows


SPECTRUM_COLUMNS = ["layer", "head", "bin", "key_power", "value_power", "mean_power", "total_power"]


def cmd_spectrum(args) -> int:
    dump = fkv.read_dump(args.input)
    rows = spectrum_rows(dump, args.layer, args.per_head)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SPECTRUM_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return EXIT_OK


def cmd_synth(args) -> int:
    d = _read_json(args.spec)
    try:
        spec = SynthSpec.from_dict(d)
    except TypeError as err:
        raise CliError("invalid_input", EXIT_INVALID, f"{args.spec}: {err}") from None
    dump, truth = generate(spec)
    fkv.write_dump(dump, args.out)
    _write_json(truth.to_dict(), args.truth)
    return EXIT_OK


def cmd_eval(args) -> int:
    dump = fkv.read_dump(args.input)
    plan = RetentionPlan.from_dict(_read_json(args.plan))
    _write_json(evaluate_plan(dump, plan, _queries(args, dump)), args.metrics)
    return EXIT_OK


SWEEP_COLUMNS = ["parameter", "value", "rho_achieved", "energy_retained_mean", "attention_error_mean",
                 "recall_mean", "method_latency_ms"]


def cmd_sweep(args) -> int:
    if args.gamma_list and args.rho_list:
        raise CliError("conflicting_flags", EXIT_CONFLICT, "--gamma-list and --rho-list are mutually exclusive")
    if not (args.gamma_list or args.rho_list):
        raise CliError("usage", EXIT_USAGE, "sweep needs --gamma-list or --rho-list")
    param, values = ("gamma", args.gamma_list) if args.gamma_list else ("rho", args.rho_list)
    dump = fkv.read_dump(args.input)
    truth = SynthTruth.from_dict(_read_json(args.truth)) if args.truth else None
    queries = _queries(args, dump)
    base = _config(args)
    rows = []
    for v in values:
        cfg = CompressionConfig(**{**base.to_dict(), param: v})
        plan, _, ms = timed_compress(dump, cfg, args.workers)
        m = evaluate_plan(dump, plan, queries, ms)
        errs = [x["attention_error"] for x in m["layers"] if x["attention_error"] is not None]
        rec = None
        if truth is not None:
            rec = float(np.mean([recall(s.retained, p) for s, p in zip(plan.per_layer, truth.planted)]))
        rows.append({
            "parameter": param, "value": v,
            "rho_achieved": m["global"]["rho_achieved"],
            "energy_retained_mean": float(np.mean([x["energy_retained"] for x in m["layers"]])),
            "attention_error_mean": float(np.mean(errs)) if errs else "",
            "recall_mean": "" if rec is None else rec,
            "method_latency_ms": ms,
        })
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


COMMANDS = {"compress": cmd_compress, "spectrum": cmd_spectrum, "synth": cmd_synth, "eval": cmd_eval,
            "sweep": cmd_sweep}


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except CliError as err:
        return _fail(err.kind, err.exit_code, str(err))
    except BudgetError as err:
        return _fail("infeasible_budget", EXIT_INFEASIBLE, str(err))
    except fkv.FormatError as err:
        return _fail(err.code, EXIT_FORMAT, str(err))
    except (FileNotFoundError, IsADirectoryError, PermissionError) as err:
        return _fail("io_error", EXIT_IO, str(err))
    except (ValueError, KeyError, TypeError) as err:
        return _fail("invalid_input", EXIT_INVALID, str(err))


if __name__ == "__main__":
    sys.exit(main())
