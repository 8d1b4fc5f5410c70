"""Command-line entry point.

Subcommands: run (one experiment), sweep (mechanism/predictor/period cross
product), attack (scenario grid + security matrix), gen-trace (synthetic
workload generation), verify (built-in invariant suite).  Exit status: 0 on
success, 1 on validation errors, 2 on runtime failures.  All outputs are
deterministic under a fixed seed; ``BPISO_SEED`` is the seed fallback.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from . import report, verify
from .attacks import run_attack
from .core import Mechanism, MechanismConfig
from .engine import RunConfig, RunMode, run_trace
from .traceio import (
    ConfigError,
    LoadedConfig,
    TraceParseError,
    generate_synthetic,
    load_config,
    parse_trace,
    preset_spec,
    write_trace,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _seed_override(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("BPISO_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"BPISO_SEED must be an integer, got {env!r}") from None
    return None


def _load(args) -> LoadedConfig:
    overrides = _parse_overrides(args.set or [])
    loaded = load_config(args.config, overrides)
    seed = _seed_override(args)
    if seed is not None:
        if loaded.run is not None:
            loaded.run = replace(loaded.run, seed=seed)
        loaded.attacks = [replace(s, seed=seed) for s in loaded.attacks]
    for warning in loaded.warnings:
        print(f"warning: {warning}")
    if args.set:
        print("overrides: " + " ".join(args.set))
    return loaded


def _load_traces(paths: list[str]):
    if not paths:
        raise ConfigError("[run]: no trace files configured (set trace = <path>)")
    traces = []
    for p in paths:
        if not os.path.exists(p):
            raise ConfigError(f"trace file not found: {p}")
        traces.append(parse_trace(p))
    return traces


def cmd_run(args) -> int:
    loaded = _load(args)
    if loaded.run is None:
        raise ConfigError(f"{args.config}: run command needs a [run] section")
    traces = _load_traces(loaded.trace_paths)
    metrics = run_trace(traces, loaded.run)
    print(report.format_run_metrics(metrics))
    if args.csv:
        report.write_metrics_csv(report.metrics_csv_rows(metrics), args.csv)
        print(f"csv written: {args.csv}")
    return EXIT_OK


def _run_cell(payload):
    key, cfg, paths = payload
    try:
        traces = [parse_trace(p) for p in paths]
        return key, run_trace(traces, cfg)
    except Exception as exc:  # surfaced with the failing cell named
        raise RuntimeError(f"sweep cell {key} failed: {exc}") from exc


def cmd_sweep(args) -> int:
    loaded = _load(args)
    if loaded.sweep is None:
        raise ConfigError(f"{args.config}: sweep command needs a [sweep] section")
    base = loaded.run if loaded.run is not None else RunConfig()
    seed = _seed_override(args)
    if seed is not None:
        base = replace(base, seed=seed)
    sweep = loaded.sweep
    jobs = []
    for mech_name in sweep.mechanisms:
        mech = MechanismConfig(mechanism=Mechanism(mech_name),
                               pht_encoding=base.mechanism.pht_encoding,
                               word_width_bits=base.mechanism.word_width_bits,
                               hardened_word_select=base.mechanism.hardened_word_select)
        for pred in sweep.predictors:
            for period in sweep.periods:
                for fg, bg in sweep.workloads:
                    label = os.path.basename(fg).rsplit(".", 1)[0]
                    if bg:
                        label += "+" + os.path.basename(bg).rsplit(".", 1)[0]
                    cfg = replace(base, mechanism=mech, predictor=pred,
                                  switch_period_cycles=period)
                    paths = [fg] + ([bg] if bg else [])
                    key = report.CellKey(mech_name, pred, period, label)
                    jobs.append((key, cfg, paths))
    for _, _, paths in jobs:
        for p in paths:
            if not os.path.exists(p):
                raise ConfigError(f"trace file not found: {p}")

    matrix = report.ExperimentMatrix()
    threads = args.threads or os.cpu_count() or 1
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for key, metrics in pool.map(_run_cell, jobs):
                matrix.add(key, metrics)
    else:
        for job in jobs:
            key, metrics = _run_cell(job)
            matrix.add(key, metrics)

    print(f"sweep: {len(jobs)} cells")
    baseline = Mechanism.BASELINE.value
    if baseline in sweep.mechanisms and len(sweep.mechanisms) > 1:
        rows = report.emit_overhead_table(matrix, baseline)
        print(report.format_overhead_table(rows))
        if args.csv:
            report.write_overhead_csv(rows, args.csv)
            print(f"csv written: {args.csv}")
    else:
        all_rows = []
        for key in sorted(matrix.cells, key=lambda k: (k.mechanism, k.predictor,
                                                       k.period, k.workload)):
            all_rows.extend(report.metrics_csv_rows(matrix.cells[key], key.workload))
        if args.csv:
            report.write_metrics_csv(all_rows, args.csv)
            print(f"csv written: {args.csv}")
        for key in sorted(matrix.cells, key=lambda k: (k.mechanism, k.predictor,
                                                       k.period, k.workload)):
            m = matrix.cells[key].aggregate
            print(f"{key.mechanism:<16} {key.predictor:<11} {key.period:>10} "
                  f"{key.workload:<22} mpki={m.mpki:.3f} cycles={m.estimated_cycles}")
    return EXIT_OK


def cmd_attack(args) -> int:
    loaded = _load(args)
    if not loaded.attacks:
        raise ConfigError(f"{args.config}: attack command needs [attack.<name>] sections")
    reports = []
    for scenario in loaded.attacks:
        reports.append(run_attack(scenario))
    rows = report.emit_security_matrix(reports)
    print(report.format_security_matrix(rows))
    if any(r.iterations < 10_000 for r in rows):
        print("note: fewer than 10000 iterations in some scenarios; "
              "confidence intervals are wider")
    if args.csv:
        report.write_security_csv(rows, args.csv)
        print(f"csv written: {args.csv}")
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    seed = _seed_override(args) or 0
    spec = preset_spec(args.preset, seed=seed, num_records=args.records)
    if args.gap is not None:
        spec = replace(spec, inst_gap=args.gap)
    trace = generate_synthetic(spec)
    write_trace(trace, args.out)
    taken = sum(1 for r in trace.records if r.taken)
    print(f"wrote {args.out}: {len(trace.records)} records, "
          f"{trace.instruction_count} instructions, "
          f"taken fraction {taken / len(trace.records):.3f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = _seed_override(args) or 0
    results = verify.run_checks(seed)
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, message in results:
        status = "ok" if ok else "FAIL"
        line = f"{status:<5} {name}"
        if message:
            line += f": {message}"
        print(line)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bpiso",
        description="Branch-predictor isolation simulator and attack harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("--config", required=True, help="config file path")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--csv", help="write machine-readable results here")
        p.add_argument("--seed", type=int, help="seed override (or BPISO_SEED)")

    p_run = sub.add_parser("run", help="run one configured experiment")
    common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a mechanism/predictor/period sweep")
    common(p_sweep)
    p_sweep.add_argument("--threads", type=int,
                         help="parallel cells (default: machine parallelism)")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_attack = sub.add_parser("attack", help="run configured attack scenarios")
    common(p_attack)
    p_attack.set_defaults(fn=cmd_attack)

    p_gen = sub.add_parser("gen-trace", help="generate a synthetic trace")
    p_gen.add_argument("--out", required=True, help="output trace path")
    p_gen.add_argument("--preset", default="mixed",
                       help="workload preset: mixed, warmup, background")
    p_gen.add_argument("--records", type=int, default=100_000)
    p_gen.add_argument("--gap", type=int, help="override instructions per branch gap")
    p_gen.add_argument("--seed", type=int, help="seed override (or BPISO_SEED)")
    p_gen.set_defaults(fn=cmd_gen_trace)

    p_verify = sub.add_parser("verify", help="run the built-in invariant suite")
    p_verify.add_argument("--seed", type=int, help="seed override (or BPISO_SEED)")
    p_verify.set_defaults(fn=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, TraceParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
