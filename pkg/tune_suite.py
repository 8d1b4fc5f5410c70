# Suite tuning scratch script (not part of the package).
import sys
import time
from dataclasses import replace

from bpiso.engine import run_trace, RunConfig, RunMode, compare_runs
from bpiso.core import MechanismConfig
from bpiso.traceio import generate_synthetic, SyntheticSpec


def spec(seed, pc_base, nb, blo, bhi, nt, rec):
    return SyntheticSpec(
        name=f"s{seed}", num_records=rec, seed=seed, inst_gap=49, pc_base=pc_base,
        num_biased=nb, bias_range=(blo, bhi), not_taken_fraction=nt,
        num_patterns=nb // 12, pattern_period_range=(4, 8), num_loops=nb // 25,
        loop_period_range=(8, 24), num_indirect=nb // 25, burst_range=(3, 8))


def main():
    nb = int(sys.argv[1]) if len(sys.argv) > 1 else 300
    blo = float(sys.argv[2]) if len(sys.argv) > 2 else 0.90
    nt = float(sys.argv[3]) if len(sys.argv) > 3 else 0.10
    rate = float(sys.argv[4]) if len(sys.argv) > 4 else 4.9
    rec = int(sys.argv[5]) if len(sys.argv) > 5 else 120_000
    preds = sys.argv[6].split(",") if len(sys.argv) > 6 else ["gshare", "tournament", "tage"]
    t0 = time.time()
    pairs = [(generate_synthetic(spec(21, 0x400000, nb, blo, 0.995, nt, rec)),
              generate_synthetic(spec(22, 0x402000, nb, blo, 0.995, nt, rec))),
             (generate_synthetic(spec(31, 0x400000, nb, blo, 0.995, nt, rec)),
              generate_synthetic(spec(32, 0x402000, nb, blo, 0.995, nt, rec)))]
    print(f"nb={nb} bias=({blo},0.995) nt={nt} rate={rate} rec={rec}")
    for pred in preds:
        base = RunConfig(predictor=pred, mode=RunMode.SMT2, switch_period_cycles=8_000_000,
                         privilege_rate_per_mcycle=rate, seed=9)
        sums = {}
        for pi, (a, b) in enumerate(pairs):
            res = {}
            for mech in ("baseline", "complete-flush", "precise-flush", "noisy-xor-bp"):
                res[mech] = run_trace([a, b], replace(base, mechanism=MechanismConfig.from_name(mech)))
            bl = res["baseline"]
            for mech in ("noisy-xor-bp", "precise-flush", "complete-flush"):
                r = compare_runs(bl, res[mech])
                sums.setdefault(mech, []).append(r.overhead)
        line = f"  {pred:11s} "
        for mech in ("noisy-xor-bp", "precise-flush", "complete-flush"):
            vals = sums[mech]
            line += f"{mech.split('-')[0]}={sum(vals)/len(vals):+.4%} "
        nxb, pf, cf = (sum(sums[m]) / 2 for m in ("noisy-xor-bp", "precise-flush", "complete-flush"))
        line += f"  [{'OK' if nxb <= pf <= cf else 'BAD'}]"
        print(line)
    print(f"{time.time()-t0:.0f}s")


if __name__ == "__main__":
    main()
