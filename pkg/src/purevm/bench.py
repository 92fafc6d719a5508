"""Benchmark corpus (BC, CF, AR, SENSE plus the WAR and ALARM examples),
input generation, overhead accounting and optimization comparisons."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Optional

from . import frontend as fe
from . import lowering as lw
from . import powersim as ps
from . import types as ty
from . import vm as V
from .errors import OracleMismatch

LCG_SEED = 0x5EED_2024_C0FF_EE11
_LCG_A = 6364136223846793005
_LCG_C = 1442695040888963407
_M64 = (1 << 64) - 1


def lcg(seed=LCG_SEED):
    """64-bit linear congruential generator; yields the high 32 bits."""
    x = seed & _M64
    while True:
        x = (x * _LCG_A + _LCG_C) & _M64
        yield x >> 32


def lcg_words(n, seed=LCG_SEED):
    g = lcg(seed)
    return [next(g) for _ in range(n)]


def ar_samples(per_class, test_windows, seed=LCG_SEED):
    """Three-sample windows: ``per_class`` training windows of class 0, then
    of class 1, then test windows alternating between the classes.
    Class 0 is a quiet signal near 1.0, class 1 a noisy one around 5.0.
    Returns (flat samples, true test labels)."""
    g = lcg(seed ^ 0xA5A5)

    def u():
        return next(g) / 2.0 ** 32

    def sample(c):
        return round(1.0 + 0.2 * u(), 4) if c == 0 else round(4.0 + 2.0 * u(), 4)

    out = []
    for c in (0, 1):
        for _ in range(per_class):
            out += [sample(c) for _ in range(3)]
    labels = []
    for k in range(test_windows):
        c = k % 2
        labels.append(c)
        out += [sample(c) for _ in range(3)]
    return out, labels


@dataclass
class BenchmarkSpec:
    name: str
    source: str
    config: fe.VmConfig
    interrupts: list = field(default_factory=list)
    sensor: list = field(default_factory=list)
    defines: dict = field(default_factory=dict)
    source_name: str = "<bench>"

    def with_config(self, **kw):
        return replace(self, config=self.config.replace(**kw))

    def env(self):
        return V.Environment(sensor=list(self.sensor))

    def typed(self):
        return _typed(self.source, self.source_name)

    def compile(self, cfg=None):
        return lw.compile_program(self.typed(), cfg or self.config, self.defines)


@lru_cache(maxsize=None)
def _typed(source, name):
    return ty.check_source(source, name)


def _program_file(name):
    return resources.files(__package__) / "programs" / name


def _read(name, default=""):
    p = _program_file(name)
    return p.read_text() if p.is_file() else default


def load_program(stem):
    """Load ``programs/<stem>.pl`` with its config, interrupt script and sensor file."""
    src = _read(stem + ".pl")
    cfg = fe.parse_config(_read(stem + ".vmcfg"))
    irq = ps.parse_interrupts(_read(stem + ".irq"))
    sensor = [float(x) for x in _read(stem + ".sensor").split()]
    return BenchmarkSpec(stem.upper(), src, cfg, irq, sensor, {}, stem + ".pl")


# full-size parameters and the truncated variants used by the crash fuzzer
FULL = {"BC": {"execs": 100}, "CF": {"nins": 100}, "AR": {"per": 128, "ntest": 16}}
TRUNCATED = {"BC": {"execs": 1}, "CF": {"nins": 16}, "AR": {"per": 8, "ntest": 2}}
BENCHMARKS = ("BC", "CF", "AR", "SENSE")
CORPUS = ("WAR", "ALARM", "SENSE", "BC", "CF", "AR")


def benchmark(name, truncated=False):
    name = name.upper()
    spec = load_program(name.lower())
    if name in FULL:
        params = (TRUNCATED if truncated else FULL)[name]
        spec.defines = dict(params)
        if name == "BC":
            spec.sensor = lcg_words(params["execs"])
        elif name == "CF":
            spec.sensor = lcg_words(params["nins"])
        elif name == "AR":
            spec.sensor, _ = ar_samples(params["per"], params["ntest"])
    return spec


def corpus(truncated=True):
    return [benchmark(n, truncated) for n in CORPUS]


# --- overhead accounting ---------------------------------------------------------


@dataclass
class OverheadSplit:
    useful_primitive_steps: int = 0
    undo_log_steps: int = 0
    stack_op_steps: int = 0
    consume_commit_steps: int = 0
    recovery_steps: int = 0
    checkpoint_steps: int = 0
    interrupt_steps: int = 0

    @classmethod
    def from_counters(cls, c):
        s = c.by_category()
        return cls(s["useful"], s["undo_log"], s["stack_op"], s["consume_commit"],
                   s["recovery"], s["checkpoint"], s["interrupt"])

    @property
    def total(self):
        return sum(self.__dict__.values())


def run_benchmark(spec, cfg=None, driver=None, backend=None):
    """Run to idle and compare with the TestVM oracle."""
    cfg = cfg or spec.config
    cp = spec.compile(cfg)
    oracle = V.VM(cp, backend="TEST", env=spec.env()).boot().run_until_idle(
        ps.continuous(spec.interrupts))
    h = V.VM(cp, backend=backend or cfg.vm_backend, env=spec.env()).boot()
    rep = h.run_until_idle(driver or ps.continuous(spec.interrupts))
    if rep.values() != oracle.values() or rep.globals != oracle.globals:
        raise OracleMismatch({"benchmark": spec.name, "want": oracle.decoded(),
                              "got": rep.decoded()})
    return rep, OverheadSplit.from_counters(rep.counters)


def minimize_schedule(spec, cp, steps, backend="REWINDING"):
    """Smallest prefix-bisected crash schedule that still mismatches."""
    oracle = V.VM(cp, backend="TEST", env=spec.env()).boot().run_until_idle(
        ps.continuous(spec.interrupts))

    def bad(sched):
        r = V.VM(cp, backend=backend, env=spec.env()).boot().run_until_idle(
            ps.schedule(sched, spec.interrupts))
        return r.values() != oracle.values() or r.globals != oracle.globals

    steps = sorted(steps)
    if not bad(steps):
        return None
    lo, hi = 1, len(steps)
    while lo < hi:
        mid = (lo + hi) // 2
        if bad(steps[:mid]):
            hi = mid
        else:
            lo = mid + 1
    return steps[:lo]


OPT_LEVELS = (("none", frozenset()), ("fusion", frozenset({"BLOCK_FUSION"})),
              ("fusion+loop", frozenset({"BLOCK_FUSION", "LOOP_OPT"})))


@dataclass
class OptRow:
    name: str
    backend: str
    opt: str
    commits: int
    page_copies: int
    stack_ops: int
    crashes: int
    steps: int
    outputs: list
    result: str = "PASS"


def compare_optimizations(spec, cfg=None, levels=OPT_LEVELS, backend="REWINDING",
                          driver_factory=None):
    cfg = cfg or spec.config
    rows = []
    want = None
    for label, opts in levels:
        c = cfg.replace(optimizations=opts)
        cp = spec.compile(c)
        drv = driver_factory() if driver_factory else ps.continuous(spec.interrupts)
        rep = V.VM(cp, backend=backend, env=spec.env()).boot().run_until_idle(drv)
        oracle = V.VM(cp, backend="TEST", env=spec.env()).boot().run_until_idle(
            ps.continuous(spec.interrupts))
        ok = rep.values() == oracle.values() and rep.globals == oracle.globals
        if want is None:
            want = oracle.values()
        ok = ok and oracle.values() == want
        c_ = rep.counters
        rows.append(OptRow(spec.name, backend, label, c_.commits, c_.page_copies,
                           c_.pushes + c_.pops, c_.crashes, rep.steps, rep.decoded(),
                           "PASS" if ok else "FAIL"))
    return rows


def render_rows(rows):
    head = "%-6s %-12s %-12s %9s %12s %10s %8s %s" % (
        "name", "backend", "opt", "commits", "logged_pages", "stack_ops", "crashes", "result")
    out = [head]
    for r in rows:
        out.append("%-6s %-12s %-12s %9d %12d %10d %8d %s" % (
            r.name, r.backend, r.opt, r.commits, r.page_copies, r.stack_ops, r.crashes,
            r.result))
    return "\n".join(out) + "\n"


def page_size_report(spec, sizes=(16, 32, 64, 128), backend="REWINDING"):
    """Run under several page sizes; outputs must match, counters may differ."""
    rows = []
    for ps_ in sizes:
        cfg = spec.config.replace(page_size_bytes=ps_)
        cp = spec.compile(cfg)
        t0 = time.perf_counter()
        rep = V.VM(cp, backend=backend, env=spec.env()).boot().run_until_idle(
            ps.continuous(spec.interrupts))
        rows.append({"page_size": ps_, "outputs": rep.values(), "globals": rep.globals,
                     "commits": rep.counters.commits, "page_copies": rep.counters.page_copies,
                     "steps": rep.steps, "split": OverheadSplit.from_counters(rep.counters),
                     "seconds": time.perf_counter() - t0})
    return rows


def render_page_size_report(name, rows):
    lines = ["# page size report: %s" % name,
             "%-9s %9s %12s %10s %8s %8s %8s %8s" % ("page_size", "commits", "page_copies",
                                                    "steps", "useful", "undo", "stack",
                                                    "consume")]
    for r in rows:
        s = r["split"]
        lines.append("%-9d %9d %12d %10d %8d %8d %8d %8d" % (
            r["page_size"], r["commits"], r["page_copies"], r["steps"],
            s.useful_primitive_steps, s.undo_log_steps, s.stack_op_steps,
            s.consume_commit_steps))
    return "\n".join(lines) + "\n"
