"""Trace-driven simulation engine.

Interleaves per-thread branch streams, fires context/privilege-switch events
against a cycle clock (one cycle per instruction plus a fixed misprediction
penalty), and applies the configured isolation mechanism at each event:
key rotation for the XOR mechanisms, complete or precise flush for the flush
baselines.  Runs are bit-reproducible from (traces, config, seed).
"""

from __future__ import annotations

import enum
import heapq
import random
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable

from .core import (
    EventKind,
    Key,
    Mechanism,
    MechanismConfig,
    Privilege,
    ScheduleEvent,
    ThreadContext,
    generate_key,
    rotate_key,
)
from .isolation import flush_complete, flush_precise
from .predictors import PredictorStack

if TYPE_CHECKING:  # pragma: no cover
    from .traceio import Trace


class RunMode(enum.Enum):
    SINGLE_THREAD = "single-thread"
    SMT2 = "smt2"


@dataclass(frozen=True)
class RunConfig:
    predictor: str = "gshare"
    mechanism: MechanismConfig = field(default_factory=MechanismConfig)
    mode: RunMode = RunMode.SINGLE_THREAD
    switch_period_cycles: int = 8_000_000
    privilege_rate_per_mcycle: float = 2.0
    misprediction_penalty: int = 10
    kernel_dwell_cycles: int = 1_000
    seed: int = 0
    max_cycles: int | None = None
    rotate_keys: bool = True
    use_brob: bool = False
    record_outcomes: bool = False
    initial_key_values: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.switch_period_cycles <= 0:
            raise ValueError("switch_period_cycles must be positive")
        if self.privilege_rate_per_mcycle < 0:
            raise ValueError("privilege_rate_per_mcycle must be >= 0")
        if self.misprediction_penalty < 0:
            raise ValueError("misprediction_penalty must be >= 0")


@dataclass
class ThreadMetrics:
    instructions: int = 0
    branches: int = 0
    cond_branches: int = 0
    mispredictions: int = 0          # conditional direction errors
    target_mispredictions: int = 0   # indirect-class wrong/missing target
    btb_misses: int = 0
    key_rotations: int = 0
    context_rotations: int = 0
    privilege_rotations: int = 0
    estimated_cycles: int = 0
    mpki: float = 0.0
    accuracy: float = 1.0

    def finalize(self, penalty: int) -> None:
        self.estimated_cycles = self.instructions + penalty * (
            self.mispredictions + self.target_mispredictions)
        if self.instructions:
            self.mpki = 1000.0 * self.mispredictions / self.instructions
        if self.branches:
            self.accuracy = 1.0 - self.mispredictions / self.branches

    def add(self, other: "ThreadMetrics") -> None:
        self.instructions += other.instructions
        self.branches += other.branches
        self.cond_branches += other.cond_branches
        self.mispredictions += other.mispredictions
        self.target_mispredictions += other.target_mispredictions
        self.btb_misses += other.btb_misses
        self.key_rotations += other.key_rotations
        self.context_rotations += other.context_rotations
        self.privilege_rotations += other.privilege_rotations


@dataclass
class RunMetrics:
    cfg: RunConfig
    trace_names: tuple[str, ...]
    threads: dict[int, ThreadMetrics]
    aggregate: ThreadMetrics
    flushes: int = 0
    entries_flushed: int = 0
    switch_in_events: int = 0
    privilege_events: int = 0
    outcomes: dict[int, list] | None = None

    @property
    def key_rotations(self) -> int:
        return self.aggregate.key_rotations


@dataclass(frozen=True)
class OverheadReport:
    overhead: float
    accuracy_delta: dict[int, float]
    mpki_base: float
    mpki_other: float


def compare_runs(metrics_a: RunMetrics, metrics_b: RunMetrics) -> OverheadReport:
    """Normalized cycle overhead of run b relative to run a."""
    if metrics_a.trace_names != metrics_b.trace_names:
        raise ValueError("runs cover different traces: "
                         f"{metrics_a.trace_names} vs {metrics_b.trace_names}")
    if metrics_a.cfg.predictor != metrics_b.cfg.predictor:
        raise ValueError("runs use different predictors: "
                         f"{metrics_a.cfg.predictor} vs {metrics_b.cfg.predictor}")
    if metrics_a.cfg.mode != metrics_b.cfg.mode:
        raise ValueError("runs use different modes")
    base = metrics_a.aggregate.estimated_cycles
    overhead = (metrics_b.aggregate.estimated_cycles - base) / base
    deltas = {
        tid: metrics_b.threads[tid].accuracy - metrics_a.threads[tid].accuracy
        for tid in metrics_a.threads if tid in metrics_b.threads
    }
    return OverheadReport(overhead=overhead, accuracy_delta=deltas,
                          mpki_base=metrics_a.aggregate.mpki,
                          mpki_other=metrics_b.aggregate.mpki)


def _derived_rng(seed: int, stream: str) -> random.Random:
    return random.Random(f"{seed}/{stream}")


def _switch_boundaries(cfg: RunConfig, num_threads: int):
    """Yield (cycle, [events]) for OS quantum boundaries, cycle-increasing.

    Single-thread mode round-robins residency every period.  SMT-2 keeps both
    threads resident; each thread's quantum timer fires every period, the two
    staggered by half a period.
    """
    period = cfg.switch_period_cycles
    if cfg.mode is RunMode.SINGLE_THREAD:
        k = 1
        while True:
            cycle = k * period
            outgoing = (k - 1) % num_threads
            incoming = k % num_threads
            yield cycle, [
                ScheduleEvent(cycle, EventKind.CONTEXT_SWITCH_OUT, outgoing),
                ScheduleEvent(cycle, EventKind.CONTEXT_SWITCH_IN, incoming),
            ]
            k += 1
    else:
        k = 1
        while True:
            # thread 0 at k*period, thread 1 offset by period/2
            for tid, cycle in ((0, k * period), (1, k * period + period // 2)):
                yield cycle, [
                    ScheduleEvent(cycle, EventKind.CONTEXT_SWITCH_OUT, tid),
                    ScheduleEvent(cycle, EventKind.CONTEXT_SWITCH_IN, tid),
                ]
            k += 1


def _privilege_stream(cfg: RunConfig, stream_tid: int, rng: random.Random,
                      resident_of=None):
    """Yield (cycle, [events]) pairs for kernel enter/leave transitions.

    Enter events arrive as a Poisson process at half the configured
    per-thread transition rate; each is followed by a leave after a fixed
    kernel dwell, so transitions occur at the configured rate.  In
    single-thread mode events target whichever thread is resident.
    """
    rate = cfg.privilege_rate_per_mcycle
    if rate <= 0:
        return
    pair_rate_per_cycle = rate / 2.0 / 1_000_000.0
    t = 0.0
    while True:
        t += rng.expovariate(pair_rate_per_cycle)
        enter = int(t) + 1
        leave = enter + cfg.kernel_dwell_cycles
        if resident_of is not None:
            enter_tid = resident_of(enter)
            leave_tid = resident_of(leave)
        else:
            enter_tid = leave_tid = stream_tid
        yield enter, [ScheduleEvent(enter, EventKind.PRIVILEGE_CHANGE, enter_tid,
                                    Privilege.KERNEL)]
        yield leave, [ScheduleEvent(leave, EventKind.PRIVILEGE_CHANGE, leave_tid,
                                    Privilege.USER)]


class _EventSource:
    """Merges the boundary and privilege streams in cycle order."""

    def __init__(self, cfg: RunConfig, num_threads: int):
        self._heap: list = []
        self._seq = 0
        self._streams = []
        period = cfg.switch_period_cycles

        def resident_of(cycle: int) -> int:
            return (cycle // period) % num_threads

        self._push_stream(_switch_boundaries(cfg, num_threads))
        if cfg.mode is RunMode.SMT2:
            for tid in range(num_threads):
                rng = _derived_rng(cfg.seed, f"priv{tid}")
                self._push_stream(_privilege_stream(cfg, tid, rng))
        else:
            rng = _derived_rng(cfg.seed, "priv0")
            self._push_stream(_privilege_stream(cfg, 0, rng, resident_of))

    def _push_stream(self, gen) -> None:
        sid = len(self._streams)
        self._streams.append(gen)
        self._advance(sid)

    def _advance(self, sid: int) -> None:
        try:
            cycle, events = next(self._streams[sid])
        except StopIteration:
            return
        heapq.heappush(self._heap, (cycle, self._seq, sid, events))
        self._seq += 1

    def peek_cycle(self) -> float:
        return self._heap[0][0] if self._heap else float("inf")

    def pop(self) -> list[ScheduleEvent]:
        cycle, _, sid, events = heapq.heappop(self._heap)
        self._advance(sid)
        return events


def schedule_events(cfg: RunConfig, horizon: int, num_threads: int = 2) -> list[ScheduleEvent]:
    """The deterministic event stream up to (but excluding) ``horizon``."""
    source = _EventSource(cfg, num_threads)
    out: list[ScheduleEvent] = []
    while source.peek_cycle() < horizon:
        out.extend(source.pop())
    return out


def context_switch(stack: PredictorStack, contexts: dict[int, ThreadContext],
                   incoming_tid: int, outgoing_tid: int, rng: random.Random,
                   cycle: int = 0) -> None:
    """Apply one scheduling boundary outside the engine (attack harnesses)."""
    mech = stack.cfg
    if mech.mechanism is Mechanism.COMPLETE_FLUSH:
        flush_complete(stack, cycle)
    elif mech.mechanism is Mechanism.PRECISE_FLUSH:
        flush_precise(stack, outgoing_tid, cycle)
    elif mech.rotates_keys:
        event = ScheduleEvent(cycle, EventKind.CONTEXT_SWITCH_IN, incoming_tid)
        rotate_key(contexts[incoming_tid], event, rng)


class _Engine:
    def __init__(self, traces, cfg: RunConfig):
        self.cfg = cfg
        self.traces = traces
        self.num_threads = len(traces)
        mech = cfg.mechanism
        self.stack = PredictorStack(cfg.predictor, mech, cfg.seed)
        self.key_rng = _derived_rng(cfg.seed, "keys")
        self.contexts = {}
        for tid in range(self.num_threads):
            if cfg.initial_key_values is not None:
                key = Key(cfg.initial_key_values[tid])
            elif mech.rotates_keys:
                key = generate_key(self.key_rng)
            else:
                key = Key(0)
            self.contexts[tid] = ThreadContext(tid=tid, key=key)
        self.stack.prime_encoded_state(self.contexts[0])
        self.threads = {tid: ThreadMetrics() for tid in range(self.num_threads)}
        self.flushes = 0
        self.entries_flushed = 0
        self.switch_in_events = 0
        self.privilege_events = 0
        self.clock = 0
        self.resident = 0
        self.outcomes = {tid: [] for tid in range(self.num_threads)} if cfg.record_outcomes else None

    def _rotate(self, tid: int, event: ScheduleEvent, privilege: bool) -> None:
        rotate_key(self.contexts[tid], event, self.key_rng)
        tm = self.threads[tid]
        tm.key_rotations += 1
        if privilege:
            tm.privilege_rotations += 1
        else:
            tm.context_rotations += 1

    def _handle(self, event: ScheduleEvent) -> None:
        mech = self.cfg.mechanism.mechanism
        if event.kind is EventKind.CONTEXT_SWITCH_OUT:
            if mech is Mechanism.PRECISE_FLUSH:
                stats = flush_precise(self.stack, event.tid, event.cycle)
                self.flushes += 1
                self.entries_flushed += stats.entries_cleared
        elif event.kind is EventKind.CONTEXT_SWITCH_IN:
            self.switch_in_events += 1
            if self.cfg.mode is RunMode.SINGLE_THREAD:
                self.resident = event.tid
            if mech is Mechanism.COMPLETE_FLUSH:
                stats = flush_complete(self.stack, event.cycle)
                self.flushes += 1
                self.entries_flushed += stats.entries_cleared
            elif self.cfg.mechanism.rotates_keys and self.cfg.rotate_keys:
                self._rotate(event.tid, event, privilege=False)
        else:  # privilege change
            self.privilege_events += 1
            ctx = self.contexts[event.tid]
            ctx.privilege = event.to_level
            if mech is Mechanism.COMPLETE_FLUSH:
                stats = flush_complete(self.stack, event.cycle)
                self.flushes += 1
                self.entries_flushed += stats.entries_cleared
            elif mech is Mechanism.PRECISE_FLUSH:
                stats = flush_precise(self.stack, event.tid, event.cycle)
                self.flushes += 1
                self.entries_flushed += stats.entries_cleared
            elif self.cfg.mechanism.rotates_keys and self.cfg.rotate_keys:
                self._rotate(event.tid, event, privilege=True)

    def run(self) -> RunMetrics:
        cfg = self.cfg
        source = _EventSource(cfg, self.num_threads)
        if self.stack.direction.name == "gshare":
            self.stack.direction.use_brob = cfg.use_brob
        positions = [0] * self.num_threads
        records = [t.records for t in self.traces]
        penalty = cfg.misprediction_penalty
        smt = cfg.mode is RunMode.SMT2

        while True:
            if cfg.max_cycles is not None and self.clock >= cfg.max_cycles:
                break
            while source.peek_cycle() <= self.clock:
                for event in source.pop():
                    self._handle(event)
            if smt:
                t0, t1 = self.threads[0], self.threads[1]
                tid = 0 if t0.instructions <= t1.instructions else 1
                if positions[tid] >= len(records[tid]):
                    break
            else:
                tid = self.resident
                if positions[tid] >= len(records[tid]):
                    if tid == 0:
                        break
                    positions[tid] = 0  # background trace loops
            rec = records[tid][positions[tid]]
            positions[tid] += 1
            out = self.stack.execute(rec, self.contexts[tid])
            mispredicted = out.direction_mispredict or out.target_mispredict
            instr = rec.inst_gap + 1
            self.clock += instr + (penalty if mispredicted else 0)
            tm = self.threads[tid]
            tm.instructions += instr
            tm.branches += 1
            if out.direction_pred is not None:
                tm.cond_branches += 1
                if out.direction_mispredict:
                    tm.mispredictions += 1
            else:
                if out.btb_miss:
                    tm.btb_misses += 1
                if out.target_mispredict:
                    tm.target_mispredictions += 1
            if self.outcomes is not None:
                self.outcomes[tid].append((out.direction_pred, out.target_pred))

        aggregate = ThreadMetrics()
        for tm in self.threads.values():
            tm.finalize(penalty)
            aggregate.add(tm)
        aggregate.finalize(penalty)
        return RunMetrics(
            cfg=cfg,
            trace_names=tuple(t.name for t in self.traces),
            threads=self.threads,
            aggregate=aggregate,
            flushes=self.flushes,
            entries_flushed=self.entries_flushed,
            switch_in_events=self.switch_in_events,
            privilege_events=self.privilege_events,
            outcomes=self.outcomes,
        )


def run_trace(traces: Iterable["Trace"], cfg: RunConfig) -> RunMetrics:
    """Simulate the traces under ``cfg`` and return accumulated metrics."""
    traces = list(traces)
    if not traces or all(len(t.records) == 0 for t in traces):
        raise ValueError("at least one nonempty trace is required")
    if cfg.mode is RunMode.SMT2:
        if len(traces) != 2:
            raise ValueError("smt2 mode requires exactly two traces")
        if any(len(t.records) == 0 for t in traces):
            raise ValueError("smt2 mode requires two nonempty traces")
    else:
        if len(traces) > 2:
            raise ValueError("single-thread mode takes a foreground and at most one background trace")
    return _Engine(traces, cfg).run()
