"""Acceptance criteria, one test each.  Every test prints a single line

    ACCEPT <n> PASS|FAIL <measured> (<tolerance>)

collected into an "acceptance criteria" section of pytest's terminal summary,
so ``pytest -v tests/test_acceptance.py`` doubles as a report.
"""

import subprocess
import sys
import time
from pathlib import Path

import pytest

from purevm import bench as B
from purevm import nvm
from purevm import powersim as P
from purevm import types as ty
from purevm import vm as V

from test_types import BUILTIN_SIGNATURES, H, ILL_TYPED, _where

REPORTS = Path(__file__).resolve().parent.parent / "reports"
BUDGET = 100_000
JIT_SEEDS = 1000
ALARM_PRED = P.NeverAll(("alarm", "tempOK"))

_lines = []


def say(n, ok, measured, tolerance):
    line = "ACCEPT %d %s %s (%s)" % (n, "PASS" if ok else "FAIL", measured, tolerance)
    _lines.append(line)
    return ok


def _predicate(name):
    return ALARM_PRED if name == "ALARM" else None


# --- shared fuzz runs --------------------------------------------------------------------


@pytest.fixture(scope="module")
def exhaustive():
    t0 = time.perf_counter()
    reps = {}
    for name in B.CORPUS:
        spec = B.benchmark(name, truncated=True)
        reps[name] = P.exhaustive_single_crash(spec.compile(), spec.interrupts, BUDGET,
                                               spec.env, predicate=_predicate(name), name=name)
    return reps, time.perf_counter() - t0


@pytest.fixture(scope="module")
def jit():
    t0 = time.perf_counter()
    reps = {}
    for name in B.CORPUS:
        spec = B.benchmark(name, truncated=True)
        cp = spec.compile(spec.config.replace(vm_backend="JUST_IN_TIME"))
        reps[name] = P.random_crash_fuzz(cp, range(JIT_SEEDS), spec.interrupts,
                                         "JUST_IN_TIME", spec.env, _predicate(name), name,
                                         check_trace=True)
    return reps, time.perf_counter() - t0


def test_1_rewinding_exhaustive_single_crash(exhaustive):
    reps, secs = exhaustive
    points = sum(r.crash_points for r in reps.values())
    bad = sum(len(r.mismatches) for r in reps.values())
    detail = " ".join("%s:%d" % (n, r.crash_points) for n, r in reps.items())
    ok = say(1, bad == 0 and secs < 300,
             "mismatches=%d points=%d [%s] time=%.0fs" % (bad, points, detail, secs),
             "0 mismatches, budget %d steps, < 300 s" % BUDGET)
    assert ok


def test_2_jit_random_energy(jit):
    reps, secs = jit
    bad = sum(len(r.mismatches) for r in reps.values())
    reexec = sum(r.reexecutions for r in reps.values())
    crashes = sum(r.crashes for r in reps.values())
    ok = say(2, bad == 0 and reexec == 0,
             "mismatches=%d reexecutions=%d traces=%d crashes=%d time=%.0fs"
             % (bad, reexec, JIT_SEEDS * len(reps), crashes, secs),
             "0 mismatches, 0 mid-block re-executions, %d traces per program" % JIT_SEEDS)
    assert ok


# --- 3: word-level atomicity ------------------------------------------------------------


class OpTracer(nvm.FaultingWords):
    """Tags every attempted word write with the engine operation doing it."""

    def __init__(self, words, vm, faults=()):
        super().__init__(words, faults)
        self.vm = vm
        self.kinds = []
        lo = vm.rt["UNDO"]
        self.undo = (lo, lo + vm.cp.undo_capacity * (1 + vm.mem.wpp) + 1)

    def _one(self, i, v):
        vm = self.vm
        if vm.in_post:
            kind = "enqueue"
        elif vm.in_recovery:
            kind = "undo_restore"
        elif self.undo[0] <= i < self.undo[1]:
            kind = "commit_clear" if i == self.undo[0] and v == 0 else "log_page"
        elif vm.code_id == V.CONSUME_CODE:
            kind = "consume"
        else:
            kind = "block"
        self.kinds.append(kind)
        super()._one(i, v)


def _run_faulted(cp, spec, faults):
    h = V.VM(cp, backend="REWINDING", env=spec.env())
    h.in_post = False
    orig = h._post

    def post(*a, **kw):
        h.in_post = True
        try:
            return orig(*a, **kw)
        finally:
            h.in_post = False

    h._post = post
    h.boot()
    tr = OpTracer(h.mem.words, h, faults)
    h.mem.words = tr
    rep = h.run_until_idle(P.continuous(spec.interrupts))
    return rep, tr


OPS = ("log_page", "undo_restore", "commit_clear", "consume", "enqueue")


def test_3_word_level_atomicity():
    tried = dict.fromkeys(OPS, 0)
    bad = []
    for name, stride in (("WAR", 3), ("SENSE", 3), ("ALARM", 12)):
        spec = B.benchmark(name)
        cp = spec.compile()
        want = V.VM(cp, backend="TEST", env=spec.env()).boot().run_until_idle(
            P.continuous(spec.interrupts))
        _, tr = _run_faulted(cp, spec, ())
        kinds = tr.kinds

        def check(faults, kind):
            rep, t = _run_faulted(cp, spec, faults)
            tried[kind] += 1
            if rep.values() != want.values() or rep.globals != want.globals:
                bad.append((name, kind, tuple(sorted(faults))))
            return t

        for n, kind in enumerate(kinds):
            if kind in OPS:
                check({n}, kind)
        # a second fault at every write of the recovery that follows a crash
        firsts = [n for n, k in enumerate(kinds) if k in ("block", "log_page")][::stride]
        for n in firsts:
            _, t = _run_faulted(cp, spec, {n})
            rec = [m for m, k in enumerate(t.kinds) if k == "undo_restore"]
            for m in rec[:16]:
                check({n, m}, "undo_restore")
    ok = say(3, not bad and all(tried.values()),
             "mismatches=%d %s" % (len(bad), " ".join("%s:%d" % kv for kv in tried.items())),
             "every faulted word write leaves old or new state")
    assert ok, bad[:5]


def test_4_alarm_invariant_at_commits(exhaustive, jit):
    ex = exhaustive[0]["ALARM"]
    jr = jit[0]["ALARM"]
    v = len(ex.violations) + len(jr.violations)
    ok = say(4, v == 0 and ex.crash_points > 0,
             "violations=%d (exhaustive %d points, jit %d traces)"
             % (v, ex.crash_points, jr.crash_points),
             "not(alarm and tempOK) at every commit")
    assert ok


# --- 5-7: benchmarks ---------------------------------------------------------------------


def test_5_full_benchmarks():
    res = {}
    slow = []
    for name in B.BENCHMARKS:
        spec = B.benchmark(name)
        t0 = time.perf_counter()
        rep, _ = B.run_benchmark(spec)
        secs = time.perf_counter() - t0
        if secs >= 60:
            slow.append(name)
        res[name] = (rep, secs)
    bc = res["BC"][0]
    cf = res["CF"][0]
    ar = res["AR"][0]
    agree = bc.globals["agree"]
    found, failed, _ev = cf.decoded()
    nins = B.FULL["CF"]["nins"]
    per_class = ar.globals["nfeat"] // 2
    ok = not slow and agree == 100 and found == nins and failed == 0 and per_class == 128
    say(5, ok, "BC agree=%d CF found=%d/%d failed=%d AR samples/class=%d times=%s"
        % (agree, found, nins, failed, per_class,
           ",".join("%s:%.1fs" % (n, s) for n, (_, s) in res.items())),
        "each < 60 s, agree=100, all found, 128/class")
    assert ok


def test_6_optimizations():
    spec = B.benchmark("BC")
    levels = (("none", frozenset()), ("loop", frozenset({"LOOP_OPT"})))
    none, loop = B.compare_optimizations(spec, levels=levels)
    ratio = none.page_copies / max(1, loop.page_copies)
    worse = []
    for name in B.CORPUS:
        s = B.benchmark(name, truncated=name in ("BC", "CF", "AR"))
        rows = B.compare_optimizations(s, levels=(
            ("none", frozenset()), ("fusion", frozenset({"BLOCK_FUSION"})),
            ("loop", frozenset({"LOOP_OPT"})),
            ("fusion+loop", frozenset({"BLOCK_FUSION", "LOOP_OPT"}))))
        by = {r.opt: r for r in rows}
        if by["fusion"].commits > by["none"].commits or \
                by["fusion+loop"].commits > by["loop"].commits:
            worse.append(name)
        if any(r.result != "PASS" for r in rows):
            worse.append(name + "(outputs)")
    ok = ratio >= 2 and not worse and none.result == loop.result == "PASS"
    say(6, ok, "BC page copies none=%d loop=%d ratio=%.2f; fusion increased commits in %s"
        % (none.page_copies, loop.page_copies, ratio, worse or "none"),
        "ratio >= 2, fusion never adds commits")
    assert ok


def _archived_rows(size):
    path = REPORTS / ("page_size_%d.txt" % size)
    if not path.is_file():
        return None
    rows = {}
    for line in path.read_text().splitlines()[2:]:
        parts = line.split()
        rows[parts[0]] = tuple(int(x) for x in parts[1:])
    return rows


def test_7_page_sizes():
    differ = []
    fresh = {32: {}, 64: {}}
    for name in B.BENCHMARKS:
        rows = B.page_size_report(B.benchmark(name))
        if any(r["outputs"] != rows[0]["outputs"] or r["globals"] != rows[0]["globals"]
               for r in rows):
            differ.append(name)
        for r in rows:
            if r["page_size"] in fresh:
                s = r["split"]
                fresh[r["page_size"]][name] = (
                    r["commits"], r["page_copies"], r["steps"], s.useful_primitive_steps,
                    s.undo_log_steps, s.stack_op_steps, s.consume_commit_steps)
    archived = {s: _archived_rows(s) for s in fresh}
    stale = [s for s in fresh if archived[s] != fresh[s]]
    ok = not differ and not stale
    say(7, ok, "sizes 16/32/64/128 differing=%s; archived 32/64 %s"
        % (differ or "none", "stale: %s" % stale if stale else "match"),
        "identical outputs, reports/page_size_{32,64}.txt current")
    assert ok


# --- 8: typing ------------------------------------------------------------------------------


def test_8_typing():
    tp = ty.check_source(H, "t.pl")
    sig_ok = all(tp.signature(n) == s for n, s in BUILTIN_SIGNATURES.items())
    rejected = 0
    for _name, src, snippet, err in ILL_TYPED:
        text = src + H
        try:
            ty.check_source(text, "t.pl")
        except err as e:
            if e.span is not None and (e.span.line, e.span.col) == _where(text, snippet):
                rejected += 1
    confusions = 0
    for spec in B.corpus(truncated=True):
        for be in ("TEST", "REWINDING", "JUST_IN_TIME"):
            cp = spec.compile(spec.config.replace(
                optimizations=frozenset({"BLOCK_FUSION", "LOOP_OPT"})))
            try:
                V.VM(cp, backend=be, env=spec.env(), checked=True).boot().run_until_idle(
                    P.continuous(spec.interrupts))
            except V.DynamicTypeError:
                confusions += 1
    ok = sig_ok and rejected == len(ILL_TYPED) == 20 and confusions == 0
    say(8, ok, "signatures %s; rejected with position %d/%d; checked-mode confusions=%d"
        % ("exact" if sig_ok else "DIFFER", rejected, len(ILL_TYPED), confusions),
        "exact signatures, 20/20, 0")
    assert ok


# --- 9: CLI determinism -------------------------------------------------------------------


def test_9_cli_determinism():
    progs = B._program_file("")
    cmds = [["check", str(progs / "sense.pl")],
            ["compile", str(progs / "alarm.pl"), "--emit-text"],
            ["run", str(progs / "alarm.pl"), "--trace"],
            ["run", str(progs / "war.pl"), "--power", "energy"],
            ["crashfuzz", str(progs / "alarm.pl"), "--exhaustive", "--budget", "400",
             "--never", "alarm,tempOK"],
            ["crashfuzz", str(progs / "war.pl"), "--backend", "JUST_IN_TIME", "--seeds", "30"],
            ["bench", "--name", "SENSE"]]
    differ = []
    for argv in cmds:
        outs = [subprocess.run([sys.executable, "-m", "purevm.cli", *argv],
                               capture_output=True).stdout for _ in range(2)]
        if outs[0] != outs[1] or not outs[0]:
            differ.append(argv[0])
    ok = not differ
    say(9, ok, "%d commands run twice, differing=%s" % (len(cmds), differ or "none"),
        "byte-identical stdout")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
