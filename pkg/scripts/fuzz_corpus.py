"""Crash-consistency sweep over the corpus: exhaustive single crashes on the
Rewinding backend and random energy traces on the JIT backend.

    python3 scripts/fuzz_corpus.py [--seeds 1000] [--jobs N]
"""

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from purevm import bench as B
from purevm import powersim as P


def _predicate(name):
    return P.NeverAll(("alarm", "tempOK")) if name == "ALARM" else None


def exhaustive(name):
    spec = B.benchmark(name, truncated=True)
    return P.exhaustive_single_crash(spec.compile(), spec.interrupts, 100_000, spec.env,
                                     predicate=_predicate(name), name=name)


def jit(name, seeds, seed_base):
    spec = B.benchmark(name, truncated=True)
    cp = spec.compile(spec.config.replace(vm_backend="JUST_IN_TIME"))
    return P.random_crash_fuzz(cp, seeds, spec.interrupts, "JUST_IN_TIME", spec.env,
                               _predicate(name), name, check_trace=True, seed_base=seed_base)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=1000)
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args(argv)
    seed_base = int(os.environ.get("PUREVM_SEED", "0"), 0)
    ok = True
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        ex = {n: pool.submit(exhaustive, n) for n in B.CORPUS}
        chunks = [list(range(i, args.seeds, 8)) for i in range(8)]
        jt = {n: [pool.submit(jit, n, c, seed_base) for c in chunks] for n in B.CORPUS}
        for n in B.CORPUS:
            rep = ex[n].result()
            ok &= rep.ok
            print(rep.to_text())
        for n in B.CORPUS:
            rep = P.merge_reports([f.result() for f in jt[n]])
            ok &= rep.ok
            print(rep.to_text())
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
