"""Acceptance suite: one test per criterion, at the stated tolerances.

Runs on synthetic workloads in a few minutes.  Expensive run matrices are
shared module-scoped fixtures.  Each criterion prints a PASS/FAIL line
(visible with ``pytest -s`` or on failure).
"""

import math
import random
from dataclasses import replace

import pytest
from scipy.stats import binomtest

from bpiso.attacks import (
    AttackKind,
    AttackScenario,
    BranchScopeMode,
    attack_btb_contention,
    attack_btb_reuse,
    attack_pht_branchscope,
)
from bpiso.cli import main as cli_main
from bpiso.core import (
    Key,
    MechanismConfig,
    PhtEncoding,
    ThreadContext,
    codec_apply,
    generate_key,
)
from bpiso.engine import RunConfig, RunMode, compare_runs, run_trace
from bpiso.predictors import Btb
from bpiso.traceio import generate_synthetic, parse_trace, preset_spec, write_trace

SMT_RECORDS = 120_000
PERIOD_RECORDS = 240_000
SEED = 9
RATE = 4.9  # privilege transitions per Mcycle, within the published 1.6-7.0
PERIOD = 8_000_000
PREDICTORS = ("gshare", "tournament", "tage")
MECHANISMS = ("baseline", "complete-flush", "precise-flush", "noisy-xor-bp")
PAIR_SEEDS = ((11, 12), (21, 22))


def _check(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _mech(name, **kw):
    return MechanismConfig.from_name(name, **kw)


def _smt_pair(seed_a, seed_b, records=SMT_RECORDS):
    fg = generate_synthetic(preset_spec("warmup", seed=seed_a, num_records=records))
    bg = generate_synthetic(replace(
        preset_spec("background", seed=seed_b, num_records=records),
        pc_base=0x402000))
    return fg, bg


@pytest.fixture(scope="module")
def smt_matrix():
    """SMT-2 runs: mechanism x predictor x workload pair at the 8M quantum."""
    pairs = [_smt_pair(a, b) for a, b in PAIR_SEEDS]
    cells = {}
    for predictor in PREDICTORS:
        for mech in MECHANISMS:
            cfg = RunConfig(predictor=predictor, mechanism=_mech(mech),
                            mode=RunMode.SMT2, switch_period_cycles=PERIOD,
                            privilege_rate_per_mcycle=RATE, seed=SEED)
            for i, pair in enumerate(pairs):
                cells[(predictor, mech, i)] = run_trace(pair, cfg)
    return cells


@pytest.fixture(scope="module")
def st_flush_runs():
    """Single-thread baseline/complete-flush runs matching the SMT matrix."""
    pairs = [_smt_pair(a, b) for a, b in PAIR_SEEDS]
    cells = {}
    for mech in ("baseline", "complete-flush"):
        cfg = RunConfig(predictor="gshare", mechanism=_mech(mech),
                        switch_period_cycles=PERIOD,
                        privilege_rate_per_mcycle=RATE, seed=SEED)
        for i, pair in enumerate(pairs):
            cells[(mech, i)] = run_trace(pair, cfg)
    return cells


# --- criterion 1: codec involution & zero/fixed-key transparency -----------


def test_criterion_1_codec_involution():
    rng = random.Random(1)
    for _ in range(100_000):
        width = 64 if rng.getrandbits(1) else 32
        w = rng.getrandbits(width)
        k = rng.getrandbits(width)
        if codec_apply(codec_apply(w, k, width), k, width) != w:
            _check("criterion 1a (involution)", False, f"w={w:#x} k={k:#x}")
    _check("criterion 1a (involution)", True, "10^5 random (word, key) pairs")


@pytest.mark.parametrize("predictor", PREDICTORS)
def test_criterion_1_transparency(predictor):
    trace = generate_synthetic(preset_spec("mixed", seed=77, num_records=100_000))

    def outcomes(mech_cfg, key):
        cfg = RunConfig(predictor=predictor, mechanism=mech_cfg,
                        privilege_rate_per_mcycle=0.0,
                        switch_period_cycles=10**12, rotate_keys=False,
                        record_outcomes=True, seed=SEED,
                        initial_key_values=(key,))
        return run_trace([trace], cfg).outcomes

    base = outcomes(_mech("baseline"), 0)
    zero = outcomes(_mech("xor-bp"), 0)
    fixed = outcomes(_mech("noisy-xor-bp"), 0xF00D_BEEF_1234_5678)
    ok = base == zero and base == fixed
    _check(f"criterion 1b (transparency, {predictor})", ok,
           "zero-key and fixed-key outcome sequences match baseline "
           f"on {len(trace.records)} branches")


# --- criterion 2: cross-key garbling ----------------------------------------


def test_criterion_2_cross_key_tag_hit_rate():
    trials = 100_000
    rng = random.Random(2)
    btb = Btb(ways=1)  # one residual entry per trial: a single tag compare
    cfg = _mech("xor-bp")
    pc = 0x400100
    hits = 0
    for _ in range(trials):
        plant = ThreadContext(tid=0, key=generate_key(rng))
        probe = ThreadContext(tid=0, key=generate_key(rng))
        btb.update(pc, 0x80004000, True, plant, cfg)
        if btb.lookup(pc, probe, cfg) is not None:
            hits += 1
    p = 2.0 ** -12
    expected = trials * p
    sigma = math.sqrt(trials * p * (1 - p))
    ok = abs(hits - expected) <= 3 * sigma
    _check("criterion 2 (cross-key garbling)", ok,
           f"{hits} residual tag hits in {trials} trials, "
           f"expected {expected:.1f} +- {3 * sigma:.1f}")


# --- criteria 3: attack grid, Table-style Defend cells ----------------------


def _defend(report, alpha=0.001):
    p = binomtest(report.successes, report.iterations_run,
                  min(max(report.chance_floor, 0.0), 1.0),
                  alternative="greater").pvalue
    return p > alpha


def test_criterion_3_btb_reuse_grid():
    rates = {}
    reports = {}
    for mech in ("baseline", "xor-bp", "noisy-xor-bp"):
        r = attack_btb_reuse(AttackScenario(
            kind=AttackKind.BTB_REUSE, mechanism=_mech(mech),
            iterations=10_000, seed=3))
        rates[mech] = r.success_rate
        reports[mech] = r
    ok = (rates["baseline"] >= 0.90
          and rates["xor-bp"] < 0.01 and _defend(reports["xor-bp"])
          and rates["noisy-xor-bp"] < 0.01 and _defend(reports["noisy-xor-bp"]))
    _check("criterion 3 (BTB reuse grid)", ok,
           f"baseline={rates['baseline']:.4f} xor-bp={rates['xor-bp']:.4f} "
           f"noisy-xor-bp={rates['noisy-xor-bp']:.4f}")


def test_criterion_3_pht_branchscope_grid():
    rates = {}
    reports = {}
    for mech in ("baseline", "xor-bp", "noisy-xor-bp"):
        r = attack_pht_branchscope(AttackScenario(
            kind=AttackKind.PHT_BRANCHSCOPE, mechanism=_mech(mech),
            iterations=10_000, trainings_per_iteration=100,
            success_threshold=90, seed=3))
        rates[mech] = r.success_rate
        reports[mech] = r
    ok = (rates["baseline"] >= 0.90
          and rates["xor-bp"] < 0.01 and _defend(reports["xor-bp"])
          and rates["noisy-xor-bp"] < 0.01 and _defend(reports["noisy-xor-bp"]))
    _check("criterion 3 (PHT BranchScope grid)", ok,
           f"baseline={rates['baseline']:.4f} xor-bp={rates['xor-bp']:.4f} "
           f"noisy-xor-bp={rates['noisy-xor-bp']:.4f}")


# --- criterion 4: contention defense ----------------------------------------


def test_criterion_4_contention():
    trials = 10_000
    rates = {}
    for mech in ("baseline", "xor-bp", "noisy-xor-bp"):
        r = attack_btb_contention(AttackScenario(
            kind=AttackKind.BTB_CONTENTION, mechanism=_mech(mech),
            iterations=trials, seed=4))
        rates[mech] = r.success_rate
    bound = 3 * math.sqrt(0.25 / trials)
    ok = (rates["baseline"] >= 0.95
          and abs(rates["xor-bp"] - 0.5) <= bound
          and abs(rates["noisy-xor-bp"] - 0.5) <= bound)
    _check("criterion 4 (SBPA defense)", ok,
           f"baseline={rates['baseline']:.4f} xor-bp={rates['xor-bp']:.4f} "
           f"noisy-xor-bp={rates['noisy-xor-bp']:.4f} (chance +- {bound:.4f})")


# --- criterion 5: flush trends ----------------------------------------------


def _geomean(values):
    return math.exp(sum(math.log(v) for v in values) / len(values))


def test_criterion_5a_flush_period_trend():
    pairs = [_smt_pair(a, b, records=PERIOD_RECORDS) for a, b in PAIR_SEEDS]
    periods = (1_000_000, 4_000_000, 8_000_000, 16_000_000)
    means = []
    for period in periods:
        cfg = RunConfig(predictor="gshare", mechanism=_mech("complete-flush"),
                        switch_period_cycles=period,
                        privilege_rate_per_mcycle=0.0, seed=SEED)
        mpkis = [run_trace(pair, cfg).threads[0].mpki for pair in pairs]
        means.append(_geomean(mpkis))
    ok = all(a >= b - 1e-12 for a, b in zip(means, means[1:]))
    detail = " >= ".join(f"{m:.4f}" for m in means)
    _check("criterion 5a (flush period trend)", ok,
           f"CF MPKI geomeans over periods {periods}: {detail}")


def test_criterion_5b_smt_flush_loss_exceeds_single_thread(smt_matrix, st_flush_runs):
    st_losses, smt_losses = [], []
    for i in range(len(PAIR_SEEDS)):
        st_losses.append(st_flush_runs[("baseline", i)].threads[0].accuracy
                         - st_flush_runs[("complete-flush", i)].threads[0].accuracy)
        smt_losses.append(smt_matrix[("gshare", "baseline", i)].threads[0].accuracy
                          - smt_matrix[("gshare", "complete-flush", i)].threads[0].accuracy)
    st_mean = sum(st_losses) / len(st_losses)
    smt_mean = sum(smt_losses) / len(smt_losses)
    ok = smt_mean > st_mean
    _check("criterion 5b (SMT flush interference)", ok,
           f"mean accuracy loss: smt={smt_mean:.5f} > single-thread={st_mean:.5f}")


def test_criterion_5c_precise_flush_cheaper_than_complete(smt_matrix):
    for predictor in PREDICTORS:
        pf, cf = [], []
        for i in range(len(PAIR_SEEDS)):
            base = smt_matrix[(predictor, "baseline", i)]
            pf.append(compare_runs(base, smt_matrix[(predictor, "precise-flush", i)]).overhead)
            cf.append(compare_runs(base, smt_matrix[(predictor, "complete-flush", i)]).overhead)
        pf_mean = sum(pf) / len(pf)
        cf_mean = sum(cf) / len(cf)
        _check(f"criterion 5c (PF <= CF, {predictor})", pf_mean <= cf_mean,
               f"suite-mean overhead pf={pf_mean:.4%} cf={cf_mean:.4%}")


# --- criterion 6: mechanism ordering ----------------------------------------


@pytest.mark.parametrize("predictor", PREDICTORS)
def test_criterion_6_mechanism_ordering(smt_matrix, predictor):
    means = {}
    for mech in ("noisy-xor-bp", "precise-flush", "complete-flush"):
        overheads = []
        for i in range(len(PAIR_SEEDS)):
            base = smt_matrix[(predictor, "baseline", i)]
            overheads.append(compare_runs(base, smt_matrix[(predictor, mech, i)]).overhead)
        means[mech] = sum(overheads) / len(overheads)
    nxb, pf, cf = (means["noisy-xor-bp"], means["precise-flush"],
                   means["complete-flush"])
    gap = (cf - nxb) / cf if cf > 0 else float("nan")
    ok = nxb <= pf <= cf
    _check(f"criterion 6 (mechanism ordering, {predictor})", ok,
           f"noisy-xor-bp={nxb:.4%} <= precise-flush={pf:.4%} "
           f"<= complete-flush={cf:.4%}; noisy-xor-bp is {gap:.1%} below "
           "complete-flush (reported, not asserted)")


# --- criterion 7: predictor quality ordering --------------------------------


def test_criterion_7_predictor_quality_ordering():
    traces = [generate_synthetic(preset_spec("mixed", seed=s, num_records=120_000))
              for s in (101, 202)]
    means = {}
    for predictor in PREDICTORS:
        cfg = RunConfig(predictor=predictor, privilege_rate_per_mcycle=0.0,
                        switch_period_cycles=10**12, seed=SEED)
        means[predictor] = _geomean([run_trace([t], cfg).aggregate.mpki
                                     for t in traces])
    ok = means["gshare"] > means["tournament"] > means["tage"]
    _check("criterion 7 (predictor quality ordering)", ok,
           f"MPKI geomeans gshare={means['gshare']:.3f} > "
           f"tournament={means['tournament']:.3f} > tage={means['tage']:.3f}")


# --- criterion 8: per-entry vs word-granular encoding ------------------------


def test_criterion_8_differential_probe_contrast():
    trials = 10_000
    per_entry = attack_pht_branchscope(AttackScenario(
        kind=AttackKind.PHT_BRANCHSCOPE,
        mechanism=_mech("xor-bp", pht_encoding=PhtEncoding.PER_ENTRY),
        iterations=trials, seed=8, mode=BranchScopeMode.PERCEPTION))
    word = attack_pht_branchscope(AttackScenario(
        kind=AttackKind.PHT_BRANCHSCOPE,
        mechanism=_mech("xor-bp", pht_encoding=PhtEncoding.ENHANCED_WORD),
        iterations=trials, seed=8, mode=BranchScopeMode.PERCEPTION))
    p_pe = binomtest(per_entry.successes, trials, 0.5, alternative="greater").pvalue
    p_w = binomtest(word.successes, trials, 0.5, alternative="greater").pvalue
    ok = p_pe <= 0.001 and p_w > 0.001
    _check("criterion 8 (per-entry vs word encoding)", ok,
           f"per-entry rate={per_entry.success_rate:.4f} (p={p_pe:.2e}), "
           f"word rate={word.success_rate:.4f} (p={p_w:.3f})")


# --- criterion 9: privilege-event accounting ---------------------------------


def test_criterion_9_privilege_event_accounting():
    trace = generate_synthetic(preset_spec("warmup", seed=51, num_records=200_000))
    cfg = RunConfig(predictor="gshare", mechanism=_mech("noisy-xor-bp"),
                    switch_period_cycles=PERIOD,
                    privilege_rate_per_mcycle=RATE, seed=SEED)
    m = run_trace([trace], cfg)
    mcycles = m.aggregate.estimated_cycles / 1e6
    expected = RATE * mcycles
    sigma = math.sqrt(expected)
    priv = m.aggregate.privilege_rotations
    ctx_rot = m.aggregate.context_rotations
    ok_rate = abs(priv - expected) <= 3 * sigma
    ok_ratio = ctx_rot == 0 or priv / ctx_rot >= 10
    _check("criterion 9 (privilege accounting)", ok_rate and ok_ratio,
           f"{priv} privilege rotations over {mcycles:.1f} Mcycles "
           f"(expected {expected:.0f} +- {3 * sigma:.0f}); "
           f"context rotations {ctx_rot}; ratio "
           f"{priv / ctx_rot if ctx_rot else float('inf'):.1f} >= 10")


# --- criterion 10: determinism & round-trips ---------------------------------


def test_criterion_10_determinism_and_round_trips(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli_main(["gen-trace", "--out", "fg.trace", "--preset", "warmup",
                     "--records", "5000", "--seed", "1"]) == 0
    assert cli_main(["gen-trace", "--out", "bg.trace", "--preset", "background",
                     "--records", "5000", "--seed", "2"]) == 0
    (tmp_path / "c.cfg").write_text(
        "[run]\npredictor = tournament\nmechanism = noisy-xor-bp\n"
        "trace = fg.trace\ntrace2 = bg.trace\n"
        "switch_period_cycles = 200000\nprivilege_rate_per_mcycle = 3.0\nseed = 6\n")
    assert cli_main(["run", "--config", "c.cfg", "--csv", "r1.csv"]) == 0
    assert cli_main(["run", "--config", "c.cfg", "--csv", "r2.csv"]) == 0
    byte_identical = (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()

    trace = generate_synthetic(preset_spec("mixed", seed=13, num_records=5000))
    write_trace(trace, str(tmp_path / "rt.trace"))
    round_trip = parse_trace(str(tmp_path / "rt.trace")).records == trace.records

    ok = byte_identical and round_trip
    _check("criterion 10 (determinism & round-trips)", ok,
           f"csv byte-identical={byte_identical}, trace round-trip={round_trip}")
