"""Trace ingestion, synthetic workload generation, and config parsing.

Trace format, one dynamic branch per line::

    pc_hex,kind,taken,target_hex,inst_gap

with ``kind`` one of cond/ind/call/ret, hex fields without ``0x``, ``#``
comments, and optional trailing CR.  ``inst_gap`` counts non-branch
instructions retired before the branch.

Config files are flat ``key = value`` INI sections: ``[run]`` for a single
experiment, ``[sweep]`` for axis lists, ``[attack.<name>]`` per attack
scenario.
"""

from __future__ import annotations

import configparser
import random
from dataclasses import dataclass, field, replace

from .attacks import AttackKind, AttackScenario, BranchScopeMode
from .core import BranchKind, BranchRecord, Mechanism, MechanismConfig, PhtEncoding
from .engine import RunConfig, RunMode
from .predictors import PREDICTOR_NAMES


class ConfigError(ValueError):
    """Invalid configuration file contents."""


class TraceParseError(ValueError):
    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass
class Trace:
    name: str
    records: list[BranchRecord] = field(default_factory=list)

    @property
    def instruction_count(self) -> int:
        return sum(r.inst_gap + 1 for r in self.records)


_KIND_TOKENS = {k.value: k for k in BranchKind}


def parse_trace(path: str, name: str | None = None) -> Trace:
    """Parse a trace file, reporting the offending line on any error."""
    records: list[BranchRecord] = []
    with open(path, "r", encoding="ascii") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if "#" in line:
                line = line[:line.index("#")]
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise TraceParseError(path, line_no,
                                      f"expected 5 comma-separated fields, got {len(parts)}")
            pc_s, kind_s, taken_s, target_s, gap_s = (p.strip() for p in parts)
            try:
                pc = int(pc_s, 16)
            except ValueError:
                raise TraceParseError(path, line_no, f"bad pc {pc_s!r}: not hex") from None
            kind = _KIND_TOKENS.get(kind_s)
            if kind is None:
                valid = "/".join(_KIND_TOKENS)
                raise TraceParseError(path, line_no,
                                      f"unknown branch kind {kind_s!r} (expected {valid})")
            if taken_s not in ("0", "1"):
                raise TraceParseError(path, line_no, f"bad taken flag {taken_s!r}")
            try:
                target = int(target_s, 16)
            except ValueError:
                raise TraceParseError(path, line_no, f"bad target {target_s!r}: not hex") from None
            try:
                gap = int(gap_s)
            except ValueError:
                raise TraceParseError(path, line_no, f"bad inst_gap {gap_s!r}") from None
            if gap < 0:
                raise TraceParseError(path, line_no, "inst_gap must be >= 0")
            records.append(BranchRecord(pc=pc, kind=kind, taken=taken_s == "1",
                                        target=target, inst_gap=gap))
    if name is None:
        name = path.rsplit("/", 1)[-1]
        name = name.rsplit(".", 1)[0]
    return Trace(name=name, records=records)


def write_trace(trace: Trace, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for r in trace.records:
            fh.write(f"{r.pc:x},{r.kind.value},{int(r.taken)},{r.target:x},{r.inst_gap}\n")


# ---------------------------------------------------------------------------
# Synthetic workloads


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic synthetic branch trace.

    The static branch population mixes bias-dominated branches, per-branch
    repeating patterns, loops (emitted as whole taken-runs, so their exit is
    a long-history event), and indirect branches cycling through small
    target sets.
    """

    name: str = "synthetic"
    num_records: int = 100_000
    seed: int = 0
    inst_gap: int = 5
    pc_base: int = 0x0040_0000
    num_biased: int = 48
    bias_range: tuple[float, float] = (0.60, 0.97)
    not_taken_fraction: float = 0.25
    num_patterns: int = 16
    pattern_period_range: tuple[int, int] = (4, 10)
    num_loops: int = 8
    loop_period_range: tuple[int, int] = (16, 28)
    num_indirect: int = 4
    indirect_targets: int = 4
    burst_range: tuple[int, int] = (1, 3)
    emission: str = "random"  # "random" draws branches; "cyclic" fixes the order

    def __post_init__(self) -> None:
        lo, hi = self.bias_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("bias_range must satisfy 0 <= lo <= hi <= 1")
        if not 0.0 <= self.not_taken_fraction <= 1.0:
            raise ValueError("not_taken_fraction must be a probability")
        if self.num_records <= 0:
            raise ValueError("num_records must be positive")
        if self.inst_gap < 0:
            raise ValueError("inst_gap must be >= 0")
        if self.emission not in ("random", "cyclic"):
            raise ValueError(f"unknown emission mode {self.emission!r}")


class _Biased:
    __slots__ = ("pc", "p")

    def __init__(self, pc, p):
        self.pc, self.p = pc, p

    def outcomes(self, rng, n):
        return [rng.random() < self.p for _ in range(n)]


class _Pattern:
    __slots__ = ("pc", "pattern", "pos")

    def __init__(self, pc, pattern):
        self.pc, self.pattern, self.pos = pc, pattern, 0

    def outcomes(self, rng, n):
        out = []
        for _ in range(n):
            out.append(self.pattern[self.pos % len(self.pattern)])
            self.pos += 1
        return out


class _Loop:
    """Emitted as whole iterations: period-1 takens then one not-taken."""

    __slots__ = ("pc", "period")

    def __init__(self, pc, period):
        self.pc, self.period = pc, period

    def outcomes(self, rng, n):
        return [i != self.period - 1 for i in range(min(n, self.period))]


def generate_synthetic(spec: SyntheticSpec) -> Trace:
    rng = random.Random(spec.seed)
    branches = []
    pc = spec.pc_base

    def next_pc():
        nonlocal pc
        p, pc = pc, pc + 4 * 7  # stride spreads branches over index space
        return p

    lo, hi = spec.bias_range
    for i in range(spec.num_biased):
        p = rng.uniform(lo, hi)
        if rng.random() < spec.not_taken_fraction:
            p = 1.0 - p
        branches.append(_Biased(next_pc(), p))
    plo, phi = spec.pattern_period_range
    for _ in range(spec.num_patterns):
        period = rng.randint(plo, phi)
        pattern = [bool(rng.getrandbits(1)) for _ in range(period)]
        pattern[rng.randrange(period)] = True  # avoid degenerate all-false
        branches.append(_Pattern(next_pc(), pattern))
    llo, lhi = spec.loop_period_range
    for _ in range(spec.num_loops):
        branches.append(_Loop(next_pc(), rng.randint(llo, lhi)))

    indirect = []
    for _ in range(spec.num_indirect):
        base = next_pc()
        targets = [0x0100_0000 + (rng.getrandbits(16) << 6)
                   for _ in range(spec.indirect_targets)]
        indirect.append((base, targets, 0))

    records: list[BranchRecord] = []
    blo, bhi = spec.burst_range
    cyclic = spec.emission == "cyclic"
    cycle_pos = 0
    n_cond = len(branches)
    total_weight = n_cond + spec.num_indirect

    def emit_conditional(br) -> None:
        n = br.period if isinstance(br, _Loop) else rng.randint(blo, bhi)
        n = min(n, spec.num_records - len(records))
        for taken in br.outcomes(rng, n):
            records.append(BranchRecord(
                pc=br.pc, kind=BranchKind.CONDITIONAL, taken=taken,
                target=br.pc + 16, inst_gap=spec.inst_gap))

    def emit_indirect(idx: int) -> None:
        base, targets, pos = indirect[idx]
        records.append(BranchRecord(
            pc=base, kind=BranchKind.INDIRECT, taken=True,
            target=targets[pos % len(targets)], inst_gap=spec.inst_gap))
        indirect[idx] = (base, targets, pos + 1)

    while len(records) < spec.num_records:
        if cyclic:
            pick = cycle_pos % total_weight
            cycle_pos += 1
        else:
            pick = rng.randrange(total_weight) if total_weight else 0
        if branches and pick < n_cond:
            emit_conditional(branches[pick])
        elif indirect:
            emit_indirect((pick - n_cond) % len(indirect) if cyclic
                          else rng.randrange(len(indirect)))
    return Trace(name=spec.name, records=records)


def preset_spec(preset: str, seed: int = 0, num_records: int = 100_000) -> SyntheticSpec:
    """Named workload recipes used by the experiment suites."""
    if preset == "mixed":
        # History-rich mix separating the predictors by capability: patterns
        # beyond the gshare history window, loops beyond the local history
        # window, near-deterministic block order so long-history contexts
        # repeat.
        return SyntheticSpec(
            name=f"mixed-{seed}", num_records=num_records, seed=seed, inst_gap=5,
            num_biased=60, bias_range=(0.90, 0.99), not_taken_fraction=0.30,
            num_patterns=30, pattern_period_range=(6, 11),
            num_loops=16, loop_period_range=(14, 28),
            num_indirect=6, emission="cyclic",
        )
    if preset == "warmup":
        # Strongly biased working set: the dominant cost is re-warming
        # predictor state after a flush or key change.
        return SyntheticSpec(
            name=f"warmup-{seed}", num_records=num_records, seed=seed, inst_gap=49,
            num_biased=340, bias_range=(0.92, 0.995), not_taken_fraction=0.08,
            num_patterns=4, pattern_period_range=(4, 8),
            num_loops=6, loop_period_range=(8, 24),
            num_indirect=10, burst_range=(3, 8),
        )
    if preset == "background":
        return SyntheticSpec(
            name=f"background-{seed}", num_records=num_records, seed=seed, inst_gap=49,
            num_biased=260, bias_range=(0.90, 0.99), not_taken_fraction=0.10,
            num_patterns=4, pattern_period_range=(4, 8),
            num_loops=5, loop_period_range=(8, 20),
            num_indirect=8, burst_range=(3, 8),
        )
    valid = "mixed, warmup, background"
    raise ConfigError(f"unknown preset {preset!r}; valid values: {valid}")


# ---------------------------------------------------------------------------
# Config files


@dataclass
class SweepSpec:
    mechanisms: list[str]
    predictors: list[str]
    periods: list[int]
    workloads: list[tuple[str, str | None]]


@dataclass
class LoadedConfig:
    run: RunConfig | None = None
    trace_paths: list[str] = field(default_factory=list)
    sweep: SweepSpec | None = None
    attacks: list[AttackScenario] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _parse_bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_int(value: str, key: str) -> int:
    try:
        return int(value.replace("_", ""))
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def _parse_float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def _mechanism_config(items: dict[str, str], warnings: list[str],
                      where: str) -> tuple[MechanismConfig, dict[str, str]]:
    rest = dict(items)
    name = rest.pop("mechanism", "baseline")
    try:
        mech = Mechanism(name)
    except ValueError:
        valid = ", ".join(m.value for m in Mechanism)
        raise ConfigError(f"{where}: unknown mechanism {name!r}; valid values: {valid}") from None
    enc_name = rest.pop("pht_encoding", PhtEncoding.ENHANCED_WORD.value)
    try:
        enc = PhtEncoding(enc_name)
    except ValueError:
        valid = ", ".join(e.value for e in PhtEncoding)
        raise ConfigError(f"{where}: unknown pht_encoding {enc_name!r}; valid values: {valid}") from None
    kwargs = {}
    if "word_width_bits" in rest:
        kwargs["word_width_bits"] = _parse_int(rest.pop("word_width_bits"), "word_width_bits")
    if "hardened_word_select" in rest:
        kwargs["hardened_word_select"] = _parse_bool(rest.pop("hardened_word_select"),
                                                     "hardened_word_select")
    if "owner_tracking" in rest:
        kwargs["owner_tracking"] = _parse_bool(rest.pop("owner_tracking"), "owner_tracking")
    if mech is Mechanism.NOISY_XOR_BP and enc is PhtEncoding.PER_ENTRY:
        warnings.append(f"{where}: noisy-xor-bp normally pairs with enhanced-word "
                        "counter encoding; per-entry encoding is weaker")
    try:
        cfg = MechanismConfig(mechanism=mech, pht_encoding=enc, **kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return cfg, rest


_RUN_KEYS = {
    "mechanism", "pht_encoding", "word_width_bits", "hardened_word_select",
    "owner_tracking", "predictor", "mode", "trace", "trace2",
    "switch_period_cycles", "privilege_rate_per_mcycle", "misprediction_penalty",
    "kernel_dwell_cycles", "seed", "max_cycles", "use_brob",
}


def _run_config(items: dict[str, str], warnings: list[str]) -> tuple[RunConfig, list[str]]:
    unknown = set(items) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"[run]: unknown keys: {', '.join(sorted(unknown))}")
    mech, rest = _mechanism_config(items, warnings, "[run]")
    predictor = rest.pop("predictor", "gshare")
    if predictor not in PREDICTOR_NAMES:
        valid = ", ".join(PREDICTOR_NAMES)
        raise ConfigError(f"[run]: unknown predictor {predictor!r}; valid values: {valid}")
    mode_name = rest.pop("mode", RunMode.SINGLE_THREAD.value)
    try:
        mode = RunMode(mode_name)
    except ValueError:
        valid = ", ".join(m.value for m in RunMode)
        raise ConfigError(f"[run]: unknown mode {mode_name!r}; valid values: {valid}") from None
    paths = []
    if "trace" in rest:
        paths.append(rest.pop("trace"))
    if "trace2" in rest:
        if not paths:
            raise ConfigError("[run]: trace2 given without trace")
        paths.append(rest.pop("trace2"))
    kwargs = {}
    for key, parse in (
        ("switch_period_cycles", _parse_int),
        ("misprediction_penalty", _parse_int),
        ("kernel_dwell_cycles", _parse_int),
        ("seed", _parse_int),
        ("max_cycles", _parse_int),
        ("privilege_rate_per_mcycle", _parse_float),
        ("use_brob", _parse_bool),
    ):
        if key in rest:
            kwargs[key] = parse(rest.pop(key), key)
    try:
        cfg = RunConfig(predictor=predictor, mechanism=mech, mode=mode, **kwargs)
    except ValueError as exc:
        raise ConfigError(f"[run]: {exc}") from None
    return cfg, paths


_ATTACK_KEYS = {
    "kind", "mechanism", "mechanisms", "pht_encoding", "word_width_bits",
    "hardened_word_select", "owner_tracking", "iterations",
    "trainings_per_iteration", "success_threshold", "rotations_between_phases",
    "mode", "whole_btb", "seed",
}


def _attack_scenarios(section: str, items: dict[str, str],
                      warnings: list[str]) -> list[AttackScenario]:
    unknown = set(items) - _ATTACK_KEYS
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys: {', '.join(sorted(unknown))}")
    items = dict(items)
    kind_name = items.pop("kind", None)
    if kind_name is None:
        raise ConfigError(f"[{section}]: missing required key 'kind'")
    try:
        kind = AttackKind(kind_name)
    except ValueError:
        valid = ", ".join(k.value for k in AttackKind)
        raise ConfigError(f"[{section}]: unknown attack kind {kind_name!r}; "
                          f"valid values: {valid}") from None
    mech_names = [m.strip() for m in items.pop("mechanisms", "").split(",") if m.strip()]
    if not mech_names:
        mech_names = [items.pop("mechanism", "baseline")]
    else:
        items.pop("mechanism", None)
    kwargs = {}
    for key in ("iterations", "trainings_per_iteration", "success_threshold",
                "rotations_between_phases", "seed"):
        if key in items:
            kwargs[key] = _parse_int(items.pop(key), key)
    if "whole_btb" in items:
        kwargs["whole_btb"] = _parse_bool(items.pop("whole_btb"), "whole_btb")
    if "mode" in items:
        mode_name = items.pop("mode")
        try:
            kwargs["mode"] = BranchScopeMode(mode_name)
        except ValueError:
            valid = ", ".join(m.value for m in BranchScopeMode)
            raise ConfigError(f"[{section}]: unknown mode {mode_name!r}; "
                              f"valid values: {valid}") from None
    scenarios = []
    for mname in mech_names:
        mech, _ = _mechanism_config({"mechanism": mname, **items}, warnings, f"[{section}]")
        try:
            scenarios.append(AttackScenario(kind=kind, mechanism=mech, **kwargs))
        except ValueError as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return scenarios


def _sweep_spec(items: dict[str, str], base_paths: list[str]) -> SweepSpec:
    known = {"mechanisms", "predictors", "periods", "workloads"}
    unknown = set(items) - known
    if unknown:
        raise ConfigError(f"[sweep]: unknown keys: {', '.join(sorted(unknown))}")

    def split(key: str, default: str) -> list[str]:
        return [v.strip() for v in items.get(key, default).split(",") if v.strip()]

    mechanisms = split("mechanisms", "baseline")
    for m in mechanisms:
        if m not in {x.value for x in Mechanism}:
            valid = ", ".join(x.value for x in Mechanism)
            raise ConfigError(f"[sweep]: unknown mechanism {m!r}; valid values: {valid}")
    predictors = split("predictors", "gshare")
    for p in predictors:
        if p not in PREDICTOR_NAMES:
            valid = ", ".join(PREDICTOR_NAMES)
            raise ConfigError(f"[sweep]: unknown predictor {p!r}; valid values: {valid}")
    periods = [_parse_int(v, "periods") for v in split("periods", "8000000")]
    if any(p <= 0 for p in periods):
        raise ConfigError("[sweep]: periods must be positive")
    workloads: list[tuple[str, str | None]] = []
    if "workloads" in items:
        for w in split("workloads", ""):
            if ":" in w:
                fg, bg = w.split(":", 1)
                workloads.append((fg.strip(), bg.strip() or None))
            else:
                workloads.append((w, None))
    elif base_paths:
        workloads.append((base_paths[0], base_paths[1] if len(base_paths) > 1 else None))
    else:
        raise ConfigError("[sweep]: no workloads given and [run] names no traces")
    return SweepSpec(mechanisms=mechanisms, predictors=predictors,
                     periods=periods, workloads=workloads)


_SWEEP_KEYS = {"mechanisms", "predictors", "periods", "workloads"}


def load_config(path: str, overrides: dict[str, str] | None = None) -> LoadedConfig:
    """Parse and validate a config file into run/sweep/attack settings.

    ``overrides`` (from repeated ``--set key=value``) are merged into every
    section that knows the key before validation; a key no section knows is
    an error.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",),
                                       interpolation=None)
    parser.optionxform = str
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    overrides = dict(overrides or {})
    for key in overrides:
        if key not in _RUN_KEYS | _ATTACK_KEYS | _SWEEP_KEYS:
            raise ConfigError(f"--set {key}: no section accepts this key")

    def merged(section: str, keys: set[str]) -> dict[str, str]:
        items = dict(parser.items(section))
        items.update({k: v for k, v in overrides.items() if k in keys})
        return items

    loaded = LoadedConfig()
    for section in parser.sections():
        if section == "run":
            items = merged(section, _RUN_KEYS)
            loaded.run, loaded.trace_paths = _run_config(items, loaded.warnings)
        elif section == "sweep":
            pass  # handled after [run] so it can inherit traces
        elif section.startswith("attack.") or section == "attack":
            items = merged(section, _ATTACK_KEYS)
            loaded.attacks.extend(_attack_scenarios(section, items, loaded.warnings))
        else:
            raise ConfigError(f"{path}: unknown section [{section}]")
    if parser.has_section("sweep"):
        loaded.sweep = _sweep_spec(merged("sweep", _SWEEP_KEYS), loaded.trace_paths)
    if loaded.run is None and loaded.sweep is None and not loaded.attacks:
        raise ConfigError(f"{path}: no [run], [sweep], or [attack.*] section found")
    return loaded
