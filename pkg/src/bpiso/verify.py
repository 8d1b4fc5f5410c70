"""Built-in invariant suite behind ``bpiso verify``.

Each check runs on small randomized instances from a named seed so failures
print a reproduction seed.  The registry is module-level so a failing check
can be injected in tests.
"""

from __future__ import annotations

import random

from .core import Key, MechanismConfig, ThreadContext, codec_apply, generate_key
from .engine import RunConfig, RunMode, run_trace
from .isolation import WordKeySchedule, flush_complete, flush_precise
from .predictors import PredictorStack, counter_update, gshare_index
from .traceio import SyntheticSpec, generate_synthetic


def check_codec_involution(rng: random.Random) -> None:
    for _ in range(2000):
        width = rng.choice((2, 12, 32, 64))
        w = rng.getrandbits(width)
        k = rng.getrandbits(width)
        assert codec_apply(codec_apply(w, k, width), k, width) == w, \
            f"involution failed for w={w:#x} k={k:#x} width={width}"


def check_zero_key_transparency(rng: random.Random) -> None:
    spec = SyntheticSpec(name="verify", num_records=3000, seed=rng.getrandbits(32),
                         num_biased=24, num_patterns=8, num_loops=4, num_indirect=2)
    trace = generate_synthetic(spec)
    base_cfg = RunConfig(predictor="gshare", max_cycles=None, record_outcomes=True,
                         privilege_rate_per_mcycle=0.0, switch_period_cycles=10**12)
    enc_cfg = RunConfig(predictor="gshare",
                        mechanism=MechanismConfig.from_name("noisy-xor-bp"),
                        record_outcomes=True, privilege_rate_per_mcycle=0.0,
                        switch_period_cycles=10**12, rotate_keys=False,
                        initial_key_values=(rng.getrandbits(64),))
    base = run_trace([trace], base_cfg)
    enc = run_trace([trace], enc_cfg)
    assert base.outcomes == enc.outcomes, \
        "fixed-key encoded run diverged from baseline outcome sequence"


def check_rotation_locality(rng: random.Random) -> None:
    from .core import EventKind, ScheduleEvent
    ctx = ThreadContext(tid=3, key=generate_key(rng))
    before_priv = ctx.privilege
    old_key = ctx.key
    event = ScheduleEvent(0, EventKind.CONTEXT_SWITCH_IN, 3)
    from .core import rotate_key
    rotate_key(ctx, event, rng)
    assert ctx.tid == 3 and ctx.privilege == before_priv, "rotation touched non-key fields"
    assert ctx.rotation_count == 1 and ctx.key != old_key, "rotation did not refresh the key"


def check_counter_ranges(rng: random.Random) -> None:
    state = rng.randrange(4)
    for _ in range(500):
        state = counter_update(state, bool(rng.getrandbits(1)))
        assert 0 <= state <= 3, f"counter escaped saturating range: {state}"


def check_flush_complete(rng: random.Random) -> None:
    cfg = MechanismConfig.from_name("complete-flush")
    stack = PredictorStack("gshare", cfg)
    ctx = ThreadContext(tid=0)
    pcs = [rng.getrandbits(30) for _ in range(64)]
    for pc in pcs:
        stack.btb.update(pc, pc + 64, True, ctx, cfg)
    flush_complete(stack)
    for pc in pcs:
        assert stack.btb.lookup(pc, ctx, cfg) is None, "post-flush BTB lookup hit"
    pred, _ = stack.predict_direction(rng.getrandbits(30), ctx)
    assert pred is False, "post-flush direction prediction was not fall-through"


def check_flush_precise_selectivity(rng: random.Random) -> None:
    cfg = MechanismConfig.from_name("precise-flush")
    stack = PredictorStack("gshare", cfg)
    ctx0, ctx1 = ThreadContext(tid=0), ThreadContext(tid=1)
    pcs0 = [rng.getrandbits(28) for _ in range(32)]
    pcs1 = [rng.getrandbits(28) for _ in range(32)]
    for pc in pcs0:
        stack.btb.update(pc, pc + 4, True, ctx0, cfg)
    for pc in pcs1:
        stack.btb.update(pc, pc + 8, True, ctx1, cfg)
    survivors = [pc for pc in pcs1 if stack.btb.lookup(pc, ctx1, cfg) is not None]
    flush_precise(stack, 0)
    for pc in pcs0:
        assert stack.btb.lookup(pc, ctx0, cfg) is None, "owned entry survived precise flush"
    for pc in survivors:
        assert stack.btb.lookup(pc, ctx1, cfg) is not None, \
            "precise flush touched another thread's entry"


def check_hardened_select_bijection(rng: random.Random) -> None:
    schedule = WordKeySchedule(Key(rng.getrandbits(64)))
    num_words = 256
    images = {schedule.select_word(w, num_words, True) for w in range(num_words)}
    assert len(images) == num_words, "hardened word select is not a bijection"
    ident = WordKeySchedule(Key(0))
    assert all(ident.select_word(w, num_words, True) == w for w in range(num_words)), \
        "zero-key hardened select is not the identity"


def check_gshare_index_bijection(rng: random.Random) -> None:
    cfg = MechanismConfig.from_name("noisy-xor-bp")
    ctx = ThreadContext(tid=0, key=generate_key(rng))
    ghr = rng.getrandbits(12)
    entries = 4096
    images = {gshare_index(pc << 2, ghr, ctx, cfg, entries) for pc in range(entries)}
    assert len(images) == entries, "index randomization is not a bijection over pc"


CHECKS = [
    ("codec-involution", check_codec_involution),
    ("zero-key-transparency", check_zero_key_transparency),
    ("rotation-locality", check_rotation_locality),
    ("counter-ranges", check_counter_ranges),
    ("flush-complete", check_flush_complete),
    ("flush-precise-selectivity", check_flush_precise_selectivity),
    ("hardened-select-bijection", check_hardened_select_bijection),
    ("gshare-index-bijection", check_gshare_index_bijection),
]


def run_checks(seed: int = 0, checks=None) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in (checks if checks is not None else CHECKS):
        rng = random.Random(f"{seed}/verify/{name}")
        try:
            fn(rng)
        except AssertionError as exc:
            results.append((name, False, f"{exc} (seed {seed})"))
        else:
            results.append((name, True, ""))
    return results
