"""Power drivers (continuous, scheduled crashes, capacitor energy model),
interrupt scripts, and the crash-point fuzzers.

A driver is asked once per micro-step (``tick``) whether the step may run.
It owns the global step counter, which keeps counting across crashes; the
counter is incremented before the decision, so a crash scheduled at step
``k`` consumes index ``k`` and the interrupted operation never happens.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import random
import re
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError, CostUnknown, NonTermination

CONTINUE, SIGNAL, CRASH = 0, 1, 2
DECISIONS = ("Continue", "LowEnergySignal", "Crash")

# op kinds passed to tick()
K_READ, K_WRITE, K_COPY, K_PRIM, K_IO = range(5)
KIND_NAMES = ("word_read", "word_write", "page_copy", "primitive_exec", "io_exec")


@dataclass
class EnergyModel:
    capacity: float = 1000.0
    threshold_on: float = 900.0
    threshold_off: float = 100.0
    costs: dict = field(default_factory=lambda: {"word_read": 1, "word_write": 2,
                                                 "primitive_exec": 4, "io_exec": 16})
    harvest: list = field(default_factory=lambda: [(100, 0.5)])  # (duration, rate/step)

    def __post_init__(self):
        if not (0 <= self.threshold_off < self.threshold_on <= self.capacity):
            raise ConfigError("energy", "need threshold_off < threshold_on <= capacity")
        for k, v in self.costs.items():
            if v <= 0:
                raise ConfigError("energy", "cost of %s must be positive" % k)
        for d, r in self.harvest:
            if d <= 0 or r < 0:
                raise ConfigError("energy", "bad harvest segment (%s, %s)" % (d, r))

    def table(self, words_per_page):
        """Cost per op kind, indexed like KIND_NAMES."""
        c = dict(self.costs)
        c.setdefault("page_copy", 2 * words_per_page)
        out = []
        for name in KIND_NAMES:
            if name not in c:
                raise CostUnknown(name)
            out.append(c[name])
        return out


@dataclass
class CrashSchedule:
    crash_steps: list

    def __post_init__(self):
        steps = list(self.crash_steps)
        if any(b <= a for a, b in zip(steps, steps[1:])) or any(s < 1 for s in steps):
            raise ConfigError("crash_steps", "must be strictly increasing positive steps")
        self.crash_steps = steps


@dataclass(frozen=True)
class Interrupt:
    step: int
    name: str
    value: Optional[float] = None
    index: int = -1  # position in the script


def parse_interrupts(text):
    """``step name [value]`` per line; ``#`` starts a comment."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3) or not re.fullmatch(r"\d+", parts[0]):
            raise ConfigError("interrupts", "expected 'step name [value]'", lineno)
        val = None
        if len(parts) == 3:
            try:
                val = float(parts[2]) if any(ch in parts[2] for ch in ".eEn") else int(parts[2], 0)
            except ValueError:
                raise ConfigError("interrupts", "bad value %r" % parts[2], lineno) from None
        out.append(Interrupt(int(parts[0]), parts[1], val))
    if any(b.step < a.step for a, b in zip(out, out[1:])):
        raise ConfigError("interrupts", "steps must be non-decreasing")
    return out


def parse_trace(text):
    """Harvest trace: ``duration rate`` pairs, one per line."""
    segs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError("trace", "expected 'duration rate'", lineno)
        segs.append((int(parts[0]), float(parts[1])))
    return segs


class PowerDriver:
    """CONTINUOUS, ENERGY(model) or SCHEDULE(crash steps) power, plus an
    interrupt script.  ``jit`` turns low energy into a checkpoint signal."""

    def __init__(self, mode="CONTINUOUS", energy=None, schedule=None, interrupts=(),
                 words_per_page=16):
        self.mode = mode.upper()
        self.step = 0
        self.interrupts = [dataclasses.replace(x, index=i) for i, x in enumerate(interrupts)]
        self.irq_pos = 0
        self.pending = []
        self.jit = False
        self.jit_margin = 0.0
        self.in_checkpoint = False
        self.signaled = False
        self.crash_count = 0
        if self.mode == "CONTINUOUS":
            self.tick = self._tick_continuous
        elif self.mode == "SCHEDULE":
            if schedule is None:
                raise ConfigError("power", "SCHEDULE mode needs a crash schedule")
            if not isinstance(schedule, CrashSchedule):
                schedule = CrashSchedule(list(schedule))
            self.schedule = schedule
            self.crash_pos = 0
            self.tick = self._tick_schedule
        elif self.mode == "ENERGY":
            if energy is None:
                raise ConfigError("power", "ENERGY mode needs an energy model")
            self.energy = energy
            self.costs = energy.table(words_per_page)
            self.level = float(energy.threshold_on)
            self.h_seg = 0
            self.h_left = energy.harvest[0][0] if energy.harvest else 0
            self.tick = self._tick_energy
        else:
            raise ConfigError("power", "unknown power mode %r" % mode)

    # interrupt script
    @property
    def irq_due(self):
        if self.pending:
            return 0
        if self.irq_pos < len(self.interrupts):
            return self.interrupts[self.irq_pos].step
        return math.inf

    def interrupts_remaining(self):
        return bool(self.pending) or self.irq_pos < len(self.interrupts)

    def collect_due(self):
        while self.irq_pos < len(self.interrupts) and \
                self.interrupts[self.irq_pos].step <= self.step:
            self.pending.append(self.interrupts[self.irq_pos])
            self.irq_pos += 1

    def fast_forward(self):
        """Idle until the next scripted interrupt; False when none is left."""
        if self.pending:
            return True
        if self.irq_pos >= len(self.interrupts):
            return False
        self.step = max(self.step, self.interrupts[self.irq_pos].step)
        self.collect_due()
        return True

    # ticks
    def _tick_continuous(self, kind, units=1):
        self.step += 1
        return CONTINUE

    def _tick_schedule(self, kind, units=1):
        self.step += 1
        steps = self.schedule.crash_steps
        while self.crash_pos < len(steps) and steps[self.crash_pos] < self.step:
            self.crash_pos += 1
        if self.crash_pos < len(steps) and steps[self.crash_pos] == self.step:
            self.crash_pos += 1
            if self.in_checkpoint:
                return CONTINUE
            return SIGNAL if self.jit else CRASH
        return CONTINUE

    def _tick_energy(self, kind, units=1):
        self.step += 1
        try:
            cost = self.costs[kind] * units
        except (IndexError, TypeError):
            raise CostUnknown(kind) from None
        e = self.energy
        if not self.in_checkpoint:
            if self.jit and not self.signaled and \
                    self.level - cost < e.threshold_off + self.jit_margin:
                self.signaled = True
                return SIGNAL
            if self.level - cost < e.threshold_off:
                return CRASH
        self.level = max(0.0, self.level - cost)
        self._harvest()
        return CONTINUE

    def _harvest(self):
        segs = self.energy.harvest
        if not segs:
            return
        self.level = min(self.energy.capacity, self.level + segs[self.h_seg][1])
        self.h_left -= 1
        if self.h_left <= 0:
            self.h_seg = (self.h_seg + 1) % len(segs)
            self.h_left = segs[self.h_seg][0]

    def recharge(self):
        """Power came back: the capacitor is refilled to threshold_on."""
        self.crash_count += 1
        self.signaled = False
        if self.mode == "ENERGY":
            self.level = float(self.energy.threshold_on)

    _STATE = ("step", "irq_pos", "signaled", "level", "h_seg", "h_left")

    def state(self):
        d = {k: getattr(self, k) for k in self._STATE if hasattr(self, k)}
        d["pending"] = list(self.pending)
        return d

    def restore(self, st):
        for k, v in st.items():
            if k != "pending" and hasattr(self, k):
                setattr(self, k, v)
        self.pending = list(st["pending"])


def continuous(interrupts=()):
    return PowerDriver("CONTINUOUS", interrupts=interrupts)


def schedule(steps, interrupts=()):
    return PowerDriver("SCHEDULE", schedule=CrashSchedule(sorted(set(steps))),
                       interrupts=interrupts)


def energy(model, interrupts=(), words_per_page=16):
    return PowerDriver("ENERGY", energy=model, interrupts=interrupts,
                       words_per_page=words_per_page)


def random_energy_model(rng, min_window):
    """Random capacitor/harvest setting whose on-off window exceeds ``min_window``."""
    window = min_window * rng.uniform(1.2, 4.0) + 50
    off = rng.uniform(10, 100)
    on = off + window
    cap = on + rng.uniform(0, window)
    harvest = [(rng.randint(5, 200), rng.choice([0.0, 0.1, 0.3, 0.8, 1.5]))
               for _ in range(rng.randint(1, 4))]
    return EnergyModel(cap, on, off, harvest=harvest)


# --- fuzzing -------------------------------------------------------------------


@dataclass
class FuzzReport:
    program: str
    backend: str
    crash_points: int = 0
    mismatches: list = field(default_factory=list)
    memo_hits: int = 0
    full_runs: int = 0
    total_steps: int = 0
    oracle_steps: int = 0
    crashes: int = 0
    reboots: int = 0
    reexecutions: int = 0
    violations: list = field(default_factory=list)  # predicate failures at commits
    seconds: float = 0.0

    @property
    def ok(self):
        return not self.mismatches and not self.violations and self.reexecutions == 0

    def to_text(self):
        lines = [
            "program = %s" % self.program,
            "backend = %s" % self.backend,
            "crash_points = %d" % self.crash_points,
            "mismatches = %d" % len(self.mismatches),
            "violations = %d" % len(self.violations),
            "reexecutions = %d" % self.reexecutions,
            "memo_hits = %d" % self.memo_hits,
            "full_runs = %d" % self.full_runs,
            "oracle_steps = %d" % self.oracle_steps,
            "crashes = %d" % self.crashes,
            "reboots = %d" % self.reboots,
            "result = %s" % ("PASS" if self.ok else "FAIL"),
        ]
        if self.mismatches:
            lines.append("first_mismatches = %s" % " ".join(str(k) for k in self.mismatches[:10]))
        return "\n".join(lines) + "\n"


def merge_reports(reports, program=None, backend=None):
    """Combine partial reports (e.g. from worker processes) in a way that does
    not depend on the order they finished in."""
    reports = list(reports)
    first = reports[0]
    out = FuzzReport(program or first.program, backend or first.backend)
    for r in reports:
        out.crash_points += r.crash_points
        out.mismatches += r.mismatches
        out.memo_hits += r.memo_hits
        out.full_runs += r.full_runs
        out.total_steps += r.total_steps
        out.crashes += r.crashes
        out.reboots += r.reboots
        out.reexecutions += r.reexecutions
        out.violations += r.violations
        out.seconds = max(out.seconds, r.seconds)
    out.oracle_steps = first.oracle_steps
    out.mismatches = sorted(set(out.mismatches))
    out.violations = sorted(set(out.violations), key=lambda v: (str(v[0]), v[1]))
    return out


@dataclass(frozen=True)
class NeverAll:
    """Commit-point predicate: the named Bool globals are never all true."""

    names: tuple

    def __call__(self, vm):
        return not all(vm.read_cell(vm.cp.globals[n][0]) for n in self.names)


def _digest(*parts):
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        h.update(p if isinstance(p, (bytes, bytearray)) else repr(p).encode())
    return h.digest()


class _Outcome:
    __slots__ = ("values", "globals")

    def __init__(self, values, globals_):
        self.values = values
        self.globals = globals_


def _oracle(cp, interrupts, env_factory, checked=False):
    from . import vm as V
    h = V.VM(cp, backend="TEST", env=env_factory(), checked=checked)
    h.boot()
    rep = h.run_until_idle(continuous(interrupts))
    return rep


def exhaustive_single_crash(cp, interrupts=(), budget=100_000, env_factory=None,
                            memo=True, predicate=None, name="program", progress=None,
                            ks=None):
    """Crash once at every step k in 1..budget (RewindingVM) and compare
    each run's deduplicated outputs and final globals with the TestVM oracle.

    With ``memo`` the run after a crash stops as soon as it reaches a
    transaction boundary whose normalized NVM state equals a boundary of the
    reference run; the remainder is then known to match.  ``predicate`` is
    evaluated on the memory at every commit point of every run.
    """
    import time
    from . import vm as V

    t0 = time.perf_counter()
    env_factory = env_factory or V.Environment
    rep = FuzzReport(name, "REWINDING")
    oracle = _oracle(cp, interrupts, env_factory)
    want_vals = oracle.values()
    want_globals = oracle.globals
    rep.oracle_steps = oracle.steps
    memo_ok = memo and cp.reboot_noop and not env_factory().live

    # reference run: continuous power, boundary keys recorded
    ref = V.VM(cp, backend="REWINDING", env=env_factory())
    ref.boot()
    ref_drv = continuous(interrupts)
    keys = {}
    boundaries = []  # step of every boundary of the reference run

    def ref_hook(vm):
        if predicate is not None and not predicate(vm):
            rep.violations.append(("reference", vm.drv.step))
        if memo_ok and not vm.drv.interrupts_remaining():
            k = vm.state_key()
            if k not in keys:
                keys[k] = len(V.dedup(vm.env.outputs))
        boundaries.append(vm.drv.step)
        return False

    ref.on_boundary = ref_hook
    ref.attach(ref_drv)
    start = ref.snapshot()
    ref_rep = ref.run_until_idle(ref_drv)
    if ref_rep.values() != want_vals or ref_rep.globals != want_globals:
        rep.mismatches.append(0)
    horizon = min(budget, ref_rep.steps)
    points = list(ks) if ks is not None else list(range(1, horizon + 1))
    rep.crash_points = len(points)

    # cursor: replays the reference run, stopping at the boundary before k
    cur = V.VM(cp, backend="REWINDING", env=env_factory())
    cur_drv = continuous(interrupts)
    cur.attach(cur_drv)
    cur.restore(start)
    bpos = 0
    snap = cur.snapshot()
    for k in points:
        # advance the cursor to the last boundary strictly before step k
        while bpos < len(boundaries) and boundaries[bpos] < k:
            target = boundaries[bpos]
            cur.on_boundary = (lambda vm, t=target: vm.drv.step >= t)
            cur.run_until_idle(cur_drv, stop_at_boundary=True)
            snap = cur.snapshot()
            bpos += 1
        vm = V.VM(cp, backend="REWINDING", env=env_factory())
        drv = schedule([k], interrupts)
        vm.attach(drv)
        vm.restore(snap)
        state = {"hit": None}

        def hook(v, state=state):
            if predicate is not None and not predicate(v):
                rep.violations.append((k, v.drv.step))
            if memo_ok and drv.crash_count and not v.drv.interrupts_remaining():
                key = v.state_key()
                if key in keys:
                    state["hit"] = (keys[key], V.dedup(v.env.outputs))
                    return True
            return False

        vm.on_boundary = hook
        r = vm.run_until_idle(drv, stop_at_boundary=False)
        rep.crashes += r.counters.crashes
        rep.reboots += r.counters.reboots
        rep.total_steps += r.steps
        if state["hit"] is not None:
            rep.memo_hits += 1
            n, prefix = state["hit"]
            if [(o.type, o.cell) for o in prefix] != want_vals[:n] or len(prefix) != n:
                rep.mismatches.append(k)
        else:
            rep.full_runs += 1
            if r.values() != want_vals or r.globals != want_globals:
                rep.mismatches.append(k)
        if progress is not None:
            progress(k, horizon)
    rep.seconds = time.perf_counter() - t0
    return rep


def random_crash_fuzz(cp, seeds, interrupts=(), backend="REWINDING", env_factory=None,
                      predicate=None, name="program", check_trace=None, seed_base=0):
    """Random multi-crash runs under random capacitor settings.

    For the JIT backend ``check_trace`` compares the executed block
    instruction stream with the TestVM stream; any difference means some
    instruction ran twice (a mid-block re-execution) or was skipped.
    """
    import time
    from . import vm as V

    t0 = time.perf_counter()
    env_factory = env_factory or V.Environment
    rep = FuzzReport(name, backend)
    want = V.VM(cp, backend="TEST", env=env_factory(), record_blocks=check_trace is not None)
    want.boot()
    wrep = want.run_until_idle(continuous(interrupts))
    want_vals, want_globals = wrep.values(), wrep.globals
    want_stream = want.block_stream(exclude_reboot=True) if check_trace is not None else None
    rep.oracle_steps = wrep.steps
    max_tx = V.max_transaction_cost(cp)
    for s in seeds:
        rng = random.Random(seed_base * 1_000_003 + s)
        model = random_energy_model(rng, max_tx)
        vm = V.VM(cp, backend=backend, env=env_factory(), record_blocks=check_trace is not None)
        vm.boot()
        drv = energy(model, interrupts, cp.cfg.words_per_page)
        if predicate is not None:
            vm.on_boundary = (lambda v: (predicate(v) or rep.violations.append((s, v.drv.step)))
                              and False)
        try:
            r = vm.run_until_idle(drv)
        except NonTermination:
            rep.mismatches.append(s)
            continue
        rep.crash_points += 1
        rep.crashes += r.counters.crashes
        rep.reboots += r.counters.reboots
        rep.total_steps += r.steps
        rep.full_runs += 1
        if r.values() != want_vals or r.globals != want_globals:
            rep.mismatches.append(s)
        if want_stream is not None and vm.block_stream(exclude_reboot=True) != want_stream:
            rep.reexecutions += 1
    rep.seconds = time.perf_counter() - t0
    return rep


def state_digest(vm):
    return _digest(vm.state_key())
