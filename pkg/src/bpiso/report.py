"""Metrics aggregation: normalized-overhead tables and the security matrix.

Security classification is a pure function of (success rate, chance floor,
baseline rate): Defend means statistically indistinguishable from the
no-information floor (exact binomial test, p > 0.001), Mitigate means above
the floor but below half the unprotected baseline rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from scipy.stats import binomtest

from .attacks import AttackKind, AttackReport, BranchScopeMode
from .core import Mechanism, MechanismConfig, PhtEncoding
from .engine import RunMetrics

DEFEND_ALPHA = 0.001

DEFEND = "Defend"
MITIGATE = "Mitigate"
NO_PROTECTION = "No Protection"


def classify(successes: int, iterations: int, chance_floor: float,
             baseline_rate: float) -> tuple[str, float]:
    """Label one attack outcome; returns (label, p_value vs chance)."""
    floor = min(max(chance_floor, 0.0), 1.0)
    p_value = binomtest(successes, iterations, floor, alternative="greater").pvalue
    if p_value > DEFEND_ALPHA:
        return DEFEND, p_value
    rate = successes / iterations
    if rate < 0.5 * baseline_rate:
        return MITIGATE, p_value
    return NO_PROTECTION, p_value


# Published security summary for the eyeball column: maps
# (structure, mechanism display name, coresident) -> expected label.
_EXPECTED = {
    ("btb", "Complete Flush", False): DEFEND,
    ("btb", "Complete Flush", True): NO_PROTECTION,
    ("btb", "Precise Flush", False): DEFEND,
    ("btb", "Precise Flush", True): DEFEND,
    ("btb", "XOR-BTB", False): DEFEND,
    ("btb", "XOR-BTB", True): MITIGATE,
    ("btb", "Noisy-XOR-BTB", False): DEFEND,
    ("btb", "Noisy-XOR-BTB", True): DEFEND,
    ("btb.contention", "Complete Flush", False): DEFEND,
    ("btb.contention", "Complete Flush", True): NO_PROTECTION,
    ("btb.contention", "Precise Flush", False): DEFEND,
    ("btb.contention", "Precise Flush", True): NO_PROTECTION,
    ("btb.contention", "XOR-BTB", False): DEFEND,
    ("btb.contention", "XOR-BTB", True): NO_PROTECTION,
    ("btb.contention", "Noisy-XOR-BTB", False): DEFEND,
    ("btb.contention", "Noisy-XOR-BTB", True): MITIGATE,
    ("pht", "Complete Flush", False): DEFEND,
    ("pht", "Complete Flush", True): NO_PROTECTION,
    ("pht", "Precise Flush", False): DEFEND,
    ("pht", "Precise Flush", True): DEFEND,
    ("pht", "XOR-PHT", False): MITIGATE,
    ("pht", "XOR-PHT", True): NO_PROTECTION,
    ("pht", "Enhanced-XOR-PHT", False): DEFEND,
    ("pht", "Enhanced-XOR-PHT", True): MITIGATE,
    ("pht", "Noisy-XOR-PHT", False): DEFEND,
    ("pht", "Noisy-XOR-PHT", True): MITIGATE,
}


def mechanism_display_name(cfg: MechanismConfig, structure: str) -> str:
    m = cfg.mechanism
    if m is Mechanism.BASELINE:
        return "Baseline"
    if m is Mechanism.COMPLETE_FLUSH:
        return "Complete Flush"
    if m is Mechanism.PRECISE_FLUSH:
        return "Precise Flush"
    if structure == "btb":
        return "XOR-BTB" if m is Mechanism.XOR_BP else "Noisy-XOR-BTB"
    if m is Mechanism.NOISY_XOR_BP:
        return "Noisy-XOR-PHT"
    if cfg.pht_encoding is PhtEncoding.PER_ENTRY:
        return "XOR-PHT"
    return "Enhanced-XOR-PHT"


def expected_label(report: AttackReport) -> str:
    s = report.scenario
    structure = "pht" if s.kind is AttackKind.PHT_BRANCHSCOPE else "btb"
    key_structure = structure
    if s.kind is AttackKind.BTB_CONTENTION:
        key_structure = "btb.contention"
    name = mechanism_display_name(s.mechanism, structure)
    if name == "Baseline":
        return NO_PROTECTION
    coresident = s.rotations_between_phases == 0
    return _EXPECTED.get((key_structure, name, coresident), "-")


@dataclass
class SecurityRow:
    attack: str
    mechanism: str
    mode: str
    coresident: bool
    iterations: int
    successes: int
    success_rate: float
    chance_floor: float
    baseline_rate: float
    p_value: float
    classification: str
    expected: str


def emit_security_matrix(reports: list[AttackReport]) -> list[SecurityRow]:
    """Classify every report against the baseline run of the same attack."""
    groups: dict[tuple, list[AttackReport]] = {}
    for r in reports:
        s = r.scenario
        key = (s.kind, s.mode, s.rotations_between_phases, s.whole_btb)
        groups.setdefault(key, []).append(r)
    rows: list[SecurityRow] = []
    for key, group in groups.items():
        baseline_rate = 1.0
        for r in group:
            if r.scenario.mechanism.mechanism is Mechanism.BASELINE:
                baseline_rate = r.success_rate
                break
        for r in group:
            s = r.scenario
            structure = "pht" if s.kind is AttackKind.PHT_BRANCHSCOPE else "btb"
            label, p = classify(r.successes, r.iterations_run, r.chance_floor,
                                baseline_rate)
            mode = s.mode.value if s.kind is AttackKind.PHT_BRANCHSCOPE else (
                "whole-btb" if s.whole_btb else "targeted")
            rows.append(SecurityRow(
                attack=s.kind.value,
                mechanism=mechanism_display_name(s.mechanism, structure),
                mode=mode,
                coresident=s.rotations_between_phases == 0,
                iterations=r.iterations_run,
                successes=r.successes,
                success_rate=r.success_rate,
                chance_floor=r.chance_floor,
                baseline_rate=baseline_rate,
                p_value=p,
                classification=label,
                expected=expected_label(r),
            ))
    return rows


def format_security_matrix(rows: list[SecurityRow]) -> str:
    header = (f"{'attack':<18} {'mechanism':<18} {'mode':<10} {'smt':<4} "
              f"{'rate':>8} {'floor':>8} {'class':<14} {'expected':<14}")
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.attack:<18} {r.mechanism:<18} {r.mode:<10} "
            f"{'yes' if r.coresident else 'no':<4} "
            f"{r.success_rate:>8.4f} {r.chance_floor:>8.4f} "
            f"{r.classification:<14} {r.expected:<14}")
    return "\n".join(lines)


SECURITY_CSV_COLUMNS = [
    "attack", "mechanism", "mode", "coresident", "iterations", "successes",
    "success_rate", "chance_floor", "baseline_rate", "p_value",
    "classification", "expected",
]


def write_security_csv(rows: list[SecurityRow], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SECURITY_CSV_COLUMNS)
        for r in rows:
            w.writerow([getattr(r, c) for c in SECURITY_CSV_COLUMNS])


# ---------------------------------------------------------------------------
# Performance matrices


@dataclass(frozen=True)
class CellKey:
    mechanism: str
    predictor: str
    period: int
    workload: str


@dataclass
class ExperimentMatrix:
    """mechanism x predictor x switch-period x workload grid of run metrics."""

    cells: dict[CellKey, RunMetrics] = field(default_factory=dict)

    def add(self, key: CellKey, metrics: RunMetrics) -> None:
        self.cells[key] = metrics

    def mechanisms(self) -> list[str]:
        seen = []
        for k in self.cells:
            if k.mechanism not in seen:
                seen.append(k.mechanism)
        return seen


@dataclass
class OverheadRow:
    mechanism: str
    predictor: str
    period: int
    workload: str
    baseline_cycles: int
    cycles: int
    overhead: float
    mpki: float
    baseline_mpki: float
    accuracy_delta: str  # per-thread deltas, "t0:...;t1:..."
    is_mean: bool = False


def emit_overhead_table(matrix: ExperimentMatrix,
                        baseline_mechanism: str = "baseline") -> list[OverheadRow]:
    """Per-cell normalized overheads plus a geometric-mean row per group.

    The geometric mean is taken over cycle ratios across workloads, then
    reported as ratio - 1 so that zero means baseline-equal.
    """
    rows: list[OverheadRow] = []
    groups: dict[tuple[str, str, int], list[float]] = {}
    for key, metrics in matrix.cells.items():
        if key.mechanism == baseline_mechanism:
            continue
        base_key = CellKey(baseline_mechanism, key.predictor, key.period, key.workload)
        base = matrix.cells.get(base_key)
        if base is None:
            raise ValueError(f"missing baseline cell {base_key}")
        ratio = metrics.aggregate.estimated_cycles / base.aggregate.estimated_cycles
        deltas = ";".join(
            f"t{tid}:{metrics.threads[tid].accuracy - base.threads[tid].accuracy:+.6f}"
            for tid in sorted(metrics.threads))
        rows.append(OverheadRow(
            mechanism=key.mechanism, predictor=key.predictor, period=key.period,
            workload=key.workload,
            baseline_cycles=base.aggregate.estimated_cycles,
            cycles=metrics.aggregate.estimated_cycles,
            overhead=ratio - 1.0,
            mpki=metrics.aggregate.mpki,
            baseline_mpki=base.aggregate.mpki,
            accuracy_delta=deltas,
        ))
        groups.setdefault((key.mechanism, key.predictor, key.period), []).append(ratio)
    for (mech, pred, period), ratios in groups.items():
        geomean = math.exp(sum(math.log(r) for r in ratios) / len(ratios))
        rows.append(OverheadRow(
            mechanism=mech, predictor=pred, period=period, workload="(geomean)",
            baseline_cycles=0, cycles=0, overhead=geomean - 1.0,
            mpki=0.0, baseline_mpki=0.0, accuracy_delta="", is_mean=True,
        ))
    return rows


def format_overhead_table(rows: list[OverheadRow]) -> str:
    header = (f"{'mechanism':<16} {'predictor':<11} {'period':>10} "
              f"{'workload':<22} {'overhead':>9} {'mpki':>8} {'base_mpki':>10}")
    lines = [header, "-" * len(header)]
    for r in rows:
        mpki = f"{r.mpki:8.3f}" if not r.is_mean else " " * 8
        base = f"{r.baseline_mpki:10.3f}" if not r.is_mean else " " * 10
        lines.append(
            f"{r.mechanism:<16} {r.predictor:<11} {r.period:>10} "
            f"{r.workload:<22} {r.overhead:>8.3%} {mpki} {base}")
    return "\n".join(lines)


OVERHEAD_CSV_COLUMNS = [
    "mechanism", "predictor", "period", "workload", "baseline_cycles",
    "cycles", "overhead", "mpki", "baseline_mpki", "accuracy_delta", "is_mean",
]


def write_overhead_csv(rows: list[OverheadRow], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(OVERHEAD_CSV_COLUMNS)
        for r in rows:
            w.writerow([getattr(r, c) for c in OVERHEAD_CSV_COLUMNS])


METRICS_CSV_COLUMNS = [
    "mechanism", "predictor", "mode", "period", "workload", "seed", "tid",
    "instructions", "branches", "cond_branches", "mispredictions",
    "target_mispredictions", "btb_misses", "mpki", "accuracy",
    "estimated_cycles", "key_rotations", "context_rotations",
    "privilege_rotations", "flushes",
]


def metrics_csv_rows(metrics: RunMetrics, workload: str | None = None):
    """Flatten one run into per-thread + aggregate CSV rows."""
    cfg = metrics.cfg
    label = workload if workload is not None else "+".join(metrics.trace_names)
    out = []
    entries = [(str(tid), tm) for tid, tm in sorted(metrics.threads.items())]
    entries.append(("all", metrics.aggregate))
    for tid, tm in entries:
        out.append([
            cfg.mechanism.mechanism.value, cfg.predictor, cfg.mode.value,
            cfg.switch_period_cycles, label, cfg.seed, tid,
            tm.instructions, tm.branches, tm.cond_branches, tm.mispredictions,
            tm.target_mispredictions, tm.btb_misses, tm.mpki, tm.accuracy,
            tm.estimated_cycles, tm.key_rotations, tm.context_rotations,
            tm.privilege_rotations, metrics.flushes,
        ])
    return out


def write_metrics_csv(all_rows: list[list], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_CSV_COLUMNS)
        w.writerows(all_rows)


def format_run_metrics(metrics: RunMetrics) -> str:
    cfg = metrics.cfg
    lines = [
        f"predictor={cfg.predictor} mechanism={cfg.mechanism.mechanism.value} "
        f"mode={cfg.mode.value} period={cfg.switch_period_cycles} seed={cfg.seed}",
        f"traces: {', '.join(metrics.trace_names)}",
        f"{'thread':<8} {'branches':>10} {'mispred':>9} {'mpki':>8} "
        f"{'accuracy':>9} {'btb_miss':>9} {'cycles':>12} {'rotations':>10}",
    ]
    entries = [(f"t{tid}", tm) for tid, tm in sorted(metrics.threads.items())]
    entries.append(("all", metrics.aggregate))
    for name, tm in entries:
        lines.append(
            f"{name:<8} {tm.branches:>10} {tm.mispredictions:>9} {tm.mpki:>8.3f} "
            f"{tm.accuracy:>9.5f} {tm.btb_misses:>9} {tm.estimated_cycles:>12} "
            f"{tm.key_rotations:>10}")
    lines.append(f"flushes={metrics.flushes} switch_in_events={metrics.switch_in_events} "
                 f"privilege_events={metrics.privilege_events}")
    return "\n".join(lines)
