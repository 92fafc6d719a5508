"""Execution engines: TestVM, RewindingVM and JustInTimeVM.

Every basic block is compiled to a short list of micro-instructions.  Reads,
writes, primitive executions, IO and commits are *ticking* instructions:
each one asks the power driver for permission first, which is where crashes
and low-energy signals happen.  Register moves, jumps and address arithmetic
are free.  The engine's own dispatch loop (pop the stack, else consume the
queue, else wait, else sleep, else halt) is microcode too, so a JIT
checkpoint can stop anywhere and resume at the exact instruction.

Backends differ only in a few places:

* REWINDING logs a page pre-image before the first write to each page in a
  transaction and clears the log at commit; reboot rolls back and resumes
  at the dispatch loop.
* JUST_IN_TIME never logs.  On a low-energy signal it writes a double
  buffered checkpoint of (code, pc, registers) and powers off; reboot
  resumes there.
* TEST is the oracle: continuous power only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from . import catalog
from . import frontend as fe
from . import lowering as lw
from .errors import (AlreadyBooted, CorruptState, DynamicTypeError, LogFull, NonTermination,
                     OutOfRange, PowerFailure, PureVMError, Trap, TrapIndexOutOfBounds,
                     TrapStackOverflow)
from .nvm import ObjectMemory
from .powersim import CONTINUE, CRASH, K_COPY, K_IO, K_PRIM, K_READ, K_WRITE, SIGNAL, PowerDriver

# ticking ops
RD, RDX, WR, WRX, EXEC, IO, COMMIT = range(7)
# free ops
(IMM, ADDI, JZ, JNZ, JMP, JEQ, JGEI, INGRP, IDX, PUSHCHK, POP, GOTO, GOTOC, TODISPATCH,
 QADDR, QINC, INC32, WAIT, HALT, NOP) = range(7, 27)
OP_NAMES = ("RD RDX WR WRX EXEC IO COMMIT IMM ADDI JZ JNZ JMP JEQ JGEI INGRP IDX PUSHCHK POP "
            "GOTO GOTOC TODISPATCH QADDR QINC INC32 WAIT HALT NOP").split()
OP_KIND = (K_READ, K_READ, K_WRITE, K_WRITE, K_PRIM, K_IO, K_WRITE)

# step categories
USEFUL, UNDO, STACK, CONSUME, RECOVERY, CKPT, INTERRUPT = range(7)
CATEGORIES = ("useful", "undo_log", "stack_op", "consume_commit", "recovery", "checkpoint",
              "interrupt")

DISPATCH, CONSUME_CODE, SLEEP_CODE = 0xFFFF, 0xFFFE, 0xFFFD
SYSTEM_CODES = (DISPATCH, CONSUME_CODE, SLEEP_CODE)

# engine registers
R_SP, R_BLK, R_CHAIN, R_TMP, R_HEAD, R_TAIL, R_S0, R_S1 = range(8)

_INF = math.inf


# --- records ---------------------------------------------------------------------


@dataclass(frozen=True)
class OutputRecord:
    seq: int
    cell: int
    type: Optional[str]

    @property
    def value(self):
        return catalog.decode(self.cell, self.type or "Int")


def dedup(outputs):
    """Keep the last record for each transaction sequence number."""
    last = {}
    for o in outputs:
        last[o.seq] = o
    return [last[s] for s in sorted(last)]


@dataclass
class Counters:
    steps: list = field(default_factory=lambda: [0] * len(CATEGORIES))
    commits: int = 0
    blocks: int = 0
    page_copies: int = 0
    log_searches: int = 0
    pushes: int = 0
    pops: int = 0
    crashes: int = 0
    reboots: int = 0
    checkpoints: int = 0
    restored_pages: int = 0
    dropped_events: int = 0
    isr_runs: int = 0
    prim_execs: int = 0
    io_execs: int = 0

    def copy(self):
        c = Counters(**self.__dict__)
        c.steps = list(self.steps)
        return c

    @property
    def total(self):
        return sum(self.steps)

    def by_category(self):
        return dict(zip(CATEGORIES, self.steps))


@dataclass
class Environment:
    """Sensor samples and the output log.

    In replay mode the k-th sensor read of the whole execution (counted by a
    transactional NVM index) always sees ``sensor[k]``, so re-executed reads
    return the same sample.  Live mode advances a volatile counter instead.
    """

    sensor: list = field(default_factory=list)
    live: bool = False
    outputs: list = field(default_factory=list)
    live_reads: int = 0

    def read(self, index, type_name):
        if not self.sensor:
            return catalog.sensor_cell(0, type_name)
        if self.live:
            v = self.sensor[self.live_reads % len(self.sensor)]
            self.live_reads += 1
        else:
            v = self.sensor[index % len(self.sensor)]
        return catalog.sensor_cell(v, type_name)

    def emit(self, seq, cell, type_name):
        self.outputs.append(OutputRecord(seq, cell, type_name))


@dataclass
class RunReport:
    backend: str
    status: str
    steps: int
    outputs: list
    counters: Counters
    globals: dict
    queue_drops: int = 0

    def values(self):
        return [(o.type, o.cell) for o in dedup(self.outputs)]

    def decoded(self):
        return [o.value for o in dedup(self.outputs)]

    def to_text(self):
        lines = ["backend = %s" % self.backend, "status = %s" % self.status,
                 "steps = %d" % self.steps]
        for name, n in zip(CATEGORIES, self.counters.steps):
            lines.append("steps.%s = %d" % (name, n))
        for k in ("commits", "blocks", "page_copies", "pushes", "pops", "crashes", "reboots",
                  "checkpoints", "dropped_events"):
            lines.append("%s = %d" % (k, getattr(self.counters, k)))
        outs = dedup(self.outputs)
        lines.append("outputs = %d" % len(outs))
        for o in outs:
            lines.append("output.%d = %s" % (o.seq, _fmt(o.value)))
        for name in sorted(self.globals):
            lines.append("global.%s = %s" % (name, _fmt(self.globals[name])))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "()"
    return str(v)


# --- type tag rules for checked mode ---------------------------------------------


def _tag_of(te):
    if isinstance(te, fe.TName):
        return te.name
    if isinstance(te, fe.TArray):
        return "Array"
    return None


_TAG_RULES = None


def tag_rules():
    """prim name -> (expected operand tags, result rule)."""
    global _TAG_RULES
    if _TAG_RULES is None:
        rules = {}
        for d in fe.parse(catalog.prelude_text()).declarations:
            if d.kind != fe.PRIMITIVE:
                continue
            ops = [d.flow_in] + list(d.params) if d.flow_in is not None else list(d.params)
            exp = [_tag_of(p.type) for p in ops]
            out = d.flow_out
            rule = _tag_of(out) if out is not None else "Void"
            if isinstance(out, fe.TVar):
                rule = next((i for i, p in enumerate(ops)
                             if isinstance(p.type, fe.TVar) and p.type.name == out.name), None)
            rules[d.name] = (exp, rule)
        rules["move"] = ([None], 0)
        _TAG_RULES = rules
    return _TAG_RULES


# --- microcode ---------------------------------------------------------------------


class _Asm:
    def __init__(self, cp, backend):
        self.cp = cp
        self.rt = cp.runtime
        self.rew = backend == "REWINDING"
        self.code = []
        self.free = lw.ENGINE_REGS

    def emit(self, *ins):
        self.code.append(ins)
        return len(self.code) - 1

    def patch(self, at, target):
        ins = self.code[at]
        self.code[at] = ins[:-1] + (target,)

    def regs(self, n):
        r = self.free
        self.free += n
        if self.free > self.cp.nreg:
            raise lw.LoweringError("register demand exceeds %d" % self.cp.nreg)
        return r

    def addr(self, slot):
        return self.rt["FLOW"] if slot == lw.FLOW else self.cp.addr(slot)

    def slot_tag(self, slot):
        if slot == lw.FLOW or slot is None:
            return None
        return lw.base_of(self.cp.slot_types.get(slot))

    def load(self, opnd, cat):
        r = self.regs(2)
        if lw.is_imm(opnd):
            c = lw.imm_cell(opnd)
            t = lw.imm_type(opnd)
            self.emit(IMM, cat, r, c & 0xFFFF, t)
            self.emit(IMM, cat, r + 1, c >> 16, t)
        else:
            a = self.addr(opnd)
            self.emit(RD, cat, r, a)
            self.emit(RD, cat, r + 1, a + 1)
        return r

    def store(self, slot, r, cat):
        a = self.addr(slot)
        self.emit(WR, cat, a, r, self.slot_tag(slot))
        self.emit(WR, cat, a + 1, r + 1, None)

    def rt_load(self, key, r, cat):
        a = self.rt[key]
        self.emit(RD, cat, r, a)
        self.emit(RD, cat, r + 1, a + 1)

    def rt_store(self, key, r, cat):
        a = self.rt[key]
        self.emit(WR, cat, a, r, None)
        self.emit(WR, cat, a + 1, r + 1, None)

    # blocks
    def call(self, c, bid):
        self.free = lw.ENGINE_REGS
        spec = catalog.lookup(c.callee)
        if c.callee == "move":
            r = self.load(c.flow_in, STACK)
            self.store(c.result, r, STACK)
            return
        ops = c.operands()
        regs = [self.load(o, USEFUL) for o in ops]
        exp, rule = tag_rules().get(c.callee, ([None] * len(ops), None))
        if spec.special == "getAt":
            t = self.regs(1)
            self.emit(IDX, USEFUL, t, regs[0], regs[1], c.flow_in)
            self.emit(EXEC, USEFUL, None, [], -1, [], c.callee, [], None)
            out = self.regs(2)
            self.emit(RDX, USEFUL, out, t, 0)
            self.emit(RDX, USEFUL, out + 1, t, 1)
            self.store(c.result, out, USEFUL)
        elif spec.special == "setAt":
            t = self.regs(1)
            self.emit(IDX, USEFUL, t, regs[0], regs[1], c.flow_in)
            self.emit(EXEC, USEFUL, None, [], -1, [], c.callee, [], None)
            self.emit(WRX, USEFUL, t, 0, regs[2])
            self.emit(WRX, USEFUL, t, 1, regs[2] + 1)
        elif spec.io == "sensor":
            idx = self.regs(2)
            self.rt_load("IOIDX", idx, USEFUL)
            out = self.regs(2) if c.result else -1
            wregs = [self.regs(2) for _ in spec.writes]
            self.emit(IO, USEFUL, "sensor", idx, out, spec.sensor_type, wregs, c.callee)
            for w, r in zip(spec.writes, wregs):
                self.store(ops[w], r, USEFUL)
            if c.result:
                self.store(c.result, out, USEFUL)
            self.rt_store("IOIDX", idx, USEFUL)
        elif spec.io == "emit":
            seq = self.regs(2)
            self.rt_load("SEQ", seq, USEFUL)
            src = ops[0]
            t = lw.imm_type(src) if lw.is_imm(src) else self.slot_tag(src)
            self.emit(IO, USEFUL, "emit", seq, regs[0], t, [], c.callee)
            if c.result:
                self.store(c.result, regs[0], USEFUL)
        else:
            out = self.regs(2) if c.result else -1
            wregs = [self.regs(2) for _ in spec.writes]
            self.emit(EXEC, USEFUL, spec.fn, regs, out, wregs, c.callee, exp, rule)
            for w, r in zip(spec.writes, wregs):
                self.store(ops[w], r, USEFUL)
            if c.result:
                self.store(c.result, out, USEFUL)

    def push(self, templates):
        base = self.free
        pairs = []
        for t in templates:
            e = self.cp.entries.get(t.target)
            if e is None:
                continue
            if e.flow is not None:
                pairs.append((t.flow_in, e.flow))
            pairs += [(s, d) for s, d in zip(t.params, e.params) if d is not None]
        loaded = [(self.load(s, STACK), d) for s, d in pairs]
        for r, d in loaded:
            self.store(d, r, STACK)
        for t in templates:
            self.emit(PUSHCHK, STACK, R_SP)
            self.emit(IMM, STACK, R_BLK, t.target, None)
            self.emit(WRX, STACK, R_SP, self.rt["STACK"], R_BLK)
            self.emit(ADDI, STACK, R_SP, R_SP, 1)
        self.emit(WR, STACK, self.rt["SP"], R_SP, None)
        self.free = base

    def terminator(self, term):
        self.free = lw.ENGINE_REGS
        if isinstance(term, lw.Return):
            r = self.load(term.slot, STACK)
            self.rt_store("FLOW", r, STACK)
            self.emit(WR, STACK, self.rt["SP"], R_SP, None)
        elif isinstance(term, lw.PushCont):
            self.push(term.templates)
        elif isinstance(term, lw.SelectCont):
            rest = list(term.rest)
            if lw.is_imm(term.cond):
                self.push(rest + [term.then if lw.imm_cell(term.cond) else term.else_])
                return
            c = self.regs(1)
            self.emit(RD, USEFUL, c, self.cp.addr(term.cond))
            jz = self.emit(JZ, USEFUL, c, None)
            self.push(rest + [term.then])
            jmp = self.emit(JMP, USEFUL, None)
            self.patch(jz, len(self.code))
            self.push(rest + [term.else_])
            self.patch(jmp, len(self.code))
        else:
            raise lw.InvalidProgram("unknown terminator %r" % (term,))

    def commit(self):
        self.rt_load("SEQ", R_HEAD, CONSUME)
        self.emit(INC32, CONSUME, R_HEAD)
        self.rt_store("SEQ", R_HEAD, CONSUME)
        self.emit(COMMIT, CONSUME)
        self.emit(TODISPATCH, CONSUME)

    def block(self, b):
        self.emit(POP, STACK)
        for c in b.calls:
            self.call(c, b.id)
        self.terminator(b.terminator)
        if b.group is not None:
            done = []
            done.append(self.emit(JGEI, STACK, R_CHAIN, self.cp.groups[b.group], None))
            done.append(self.emit(JZ, STACK, R_SP, None))
            self.emit(ADDI, STACK, R_TMP, R_SP, 0xFFFF)
            self.emit(RDX, STACK, R_BLK, R_TMP, self.rt["STACK"])
            done.append(self.emit(INGRP, STACK, R_BLK, b.group, None))
            self.emit(ADDI, STACK, R_CHAIN, R_CHAIN, 1)
            self.emit(GOTO, STACK, R_BLK)
            for at in done:
                self.patch(at, len(self.code))
        self.commit()
        return self.code


def _dispatch_code(cp, backend):
    a = _Asm(cp, backend)
    rt = cp.runtime
    a.emit(IMM, CONSUME, R_CHAIN, 0, None)                 # 0
    a.emit(RD, CONSUME, R_SP, rt["SP"])                    # 1
    a.emit(JZ, CONSUME, R_SP, 6)                           # 2
    a.emit(ADDI, CONSUME, R_TMP, R_SP, 0xFFFF)             # 3
    a.emit(RDX, CONSUME, R_BLK, R_TMP, rt["STACK"])        # 4
    a.emit(GOTO, CONSUME, R_BLK)                           # 5
    a.emit(RD, CONSUME, R_HEAD, rt["QHEAD"])               # 6
    a.emit(RD, CONSUME, R_TAIL, rt["QTAIL"])               # 7
    a.emit(JEQ, CONSUME, R_HEAD, R_TAIL, 10)               # 8
    a.emit(GOTOC, CONSUME, CONSUME_CODE)                   # 9
    a.emit(WAIT, CONSUME)                                  # 10
    a.emit(RD, CONSUME, R_S0, rt["SLEEP_DONE"])            # 11
    a.emit(JNZ, CONSUME, R_S0, 14)                         # 12
    a.emit(GOTOC, CONSUME, SLEEP_CODE)                     # 13
    a.emit(HALT, CONSUME)                                  # 14
    return a.code


def _consume_code(cp, backend):
    a = _Asm(cp, backend)
    rt = cp.runtime
    p0, p1 = lw.ENGINE_REGS, lw.ENGINE_REGS + 1
    a.emit(QADDR, CONSUME, R_TMP, R_HEAD)
    a.emit(RDX, CONSUME, R_BLK, R_TMP, 0)
    a.emit(RDX, CONSUME, R_S0, R_TMP, 1)
    a.emit(RDX, CONSUME, p0, R_TMP, 2)
    a.emit(RDX, CONSUME, p1, R_TMP, 3)
    a.emit(QINC, CONSUME, R_HEAD)
    a.emit(WR, CONSUME, rt["QHEAD"], R_HEAD, None)
    a.emit(WRX, CONSUME, R_S0, 0, p0)
    a.emit(WRX, CONSUME, R_S0, 1, p1)
    a.emit(RD, CONSUME, R_SP, rt["SP"])
    a.emit(PUSHCHK, CONSUME, R_SP)
    a.emit(WRX, CONSUME, R_SP, rt["STACK"], R_BLK)
    a.emit(ADDI, CONSUME, R_SP, R_SP, 1)
    a.emit(WR, CONSUME, rt["SP"], R_SP, None)
    a.commit()
    return a.code


def _sleep_code(cp, backend):
    a = _Asm(cp, backend)
    rt = cp.runtime
    p0 = lw.ENGINE_REGS
    a.emit(IMM, CONSUME, R_S0, 1, None)
    a.emit(WR, CONSUME, rt["SLEEP_DONE"], R_S0, None)
    flow = cp.handler_flow.get("sleep")
    if flow is not None:
        a.emit(IMM, CONSUME, p0, 0, "Void")
        a.emit(IMM, CONSUME, p0 + 1, 0, "Void")
        a.store(flow, p0, CONSUME)
    a.emit(RD, CONSUME, R_SP, rt["SP"])
    a.emit(PUSHCHK, CONSUME, R_SP)
    a.emit(IMM, CONSUME, R_BLK, cp.handler_entry["sleep"], None)
    a.emit(WRX, CONSUME, R_SP, rt["STACK"], R_BLK)
    a.emit(ADDI, CONSUME, R_SP, R_SP, 1)
    a.emit(WR, CONSUME, rt["SP"], R_SP, None)
    a.commit()
    return a.code


def compile_microcode(cp, backend):
    codes = {}
    for bid, b in cp.blocks.items():
        codes[bid] = tuple(_Asm(cp, backend).block(b))
    codes[DISPATCH] = tuple(_dispatch_code(cp, backend))
    codes[CONSUME_CODE] = tuple(_consume_code(cp, backend))
    codes[SLEEP_CODE] = tuple(_sleep_code(cp, backend))
    return codes


def render_microcode(code):
    out = []
    for pc, ins in enumerate(code):
        args = []
        for x in ins[2:]:
            if callable(x):
                continue
            args.append(str(x))
        out.append("%4d  %-10s %-14s %s" % (pc, OP_NAMES[ins[0]], CATEGORIES[ins[1]], " ".join(args)))
    return "\n".join(out)


def transaction_cost(cp, table=(1, 2, None, 4, 16)):
    """Upper bound on the energy of the longest transaction plus a reboot."""
    wpp = cp.wpp
    copy = table[2] if table[2] is not None else 2 * wpp
    cost = [table[0], table[0], table[1], table[1], table[3], table[4], table[1]]
    codes = compile_microcode(cp, "REWINDING")

    def code_cost(code):
        return sum(cost[i[0]] for i in code if i[0] <= COMMIT)

    worst = code_cost(codes[CONSUME_CODE])
    for bid, b in cp.blocks.items():
        c = code_cost(codes[bid])
        if b.group is not None:
            c *= cp.groups[b.group] + 1
        worst = max(worst, c)
    logging = cp.undo_capacity * (copy + table[1] + table[0] * (cp.undo_capacity + 1))
    recovery = cp.undo_capacity * copy + 12 * table[1]
    return worst + code_cost(codes[DISPATCH]) + logging + recovery


max_transaction_cost = transaction_cost


# --- engine ------------------------------------------------------------------------


class _Stop(Exception):
    pass


class VM:
    """One deployed program on one backend.  Create, ``boot()``, then
    ``run_until_idle(driver)``."""

    def __init__(self, cp, backend=None, env=None, checked=False, trace=False,
                 record_blocks=False, audit=False):
        self.cp = cp
        self.backend = backend or cp.cfg.vm_backend
        if self.backend not in fe.BACKENDS:
            raise PureVMError("unknown backend %r" % self.backend)
        self.cfg = cp.cfg
        self.env = env if env is not None else Environment()
        self.checked = checked
        self.trace = [] if trace else None
        self.codes = compile_microcode(cp, self.backend)
        self.mem = ObjectMemory(cp.cfg.nvm_size_bytes, cp.cfg.page_size_bytes, cp.regions)
        self.rt = cp.runtime
        self.nreg = cp.nreg
        self.R = [0] * self.nreg
        self.T = [None] * self.nreg
        self.tags = {}
        self.counters = Counters()
        self.code_id = DISPATCH
        self.pc = 0
        self.booted = False
        self.need_reboot = False
        self.logged = []
        self.logged_set = set()
        self.drv = None
        self.on_boundary = None
        self.block_group = {b.id: b.group for b in cp.blocks.values()}
        self.qcap = cp.cfg.event_queue_capacity
        self.records = [] if record_blocks else None
        self.audit = [] if audit else None
        self.tx_start = None
        self.deferred_signal = False
        self.in_recovery = False
        self._reboot_blocks = None

    # deployment
    def boot(self):
        if self.booted:
            raise AlreadyBooted("program already deployed")
        cp = self.cp
        w = self.mem.words
        for slot, cells in cp.inits.items():
            a = cp.addr(slot)
            for i, c in enumerate(cells):
                w[a + 2 * i] = c & 0xFFFF
                w[a + 2 * i + 1] = c >> 16
            if self.checked:
                if slot in cp.arrays:
                    elem = lw.base_of(cp.arrays[slot][0])
                    for i in range(cp.arrays[slot][1]):
                        self.tags[a + 2 * i] = elem
                else:
                    self.tags[a] = lw.base_of(cp.slot_types.get(slot))
        if self.checked:
            for s, (elem, n) in cp.arrays.items():
                a = cp.addr(s)
                for i in range(n):
                    self.tags.setdefault(a + 2 * i, lw.base_of(elem))
        if self.backend == "JUST_IN_TIME":
            ck = self.rt["CKPT"]
            w[ck] = 0
            base = ck + 1
            w[base + 1] = DISPATCH
            w[base + 2] = 0
        self._post("boot", 0, ticks=False)
        self.booted = True
        return self

    def attach(self, driver):
        self.drv = driver
        driver.jit = self.backend == "JUST_IN_TIME"
        if driver.jit and driver.mode == "ENERGY":
            driver.jit_margin = 2 * self._checkpoint_cost()

    def _checkpoint_cost(self):
        e = self.drv.energy
        return (4 + self.nreg) * e.costs.get("word_write", 2)

    # ticks outside the microcode loop
    def _tick(self, kind, cat, units=1):
        d = self.drv.tick(kind, units)
        if d:
            self._decision(d, interrupt=(cat == INTERRUPT))
        self.counters.steps[cat] += 1
        if self.drv.step > self.cfg.step_budget:
            raise NonTermination(self.cfg.step_budget)

    def _decision(self, d, interrupt=False):
        if self.backend == "TEST":
            raise PureVMError("TestVM requires continuous power")
        if self.backend == "JUST_IN_TIME" and d == SIGNAL:
            if self.in_recovery:
                # the last checkpoint is still the one being restored
                raise PowerFailure("power off during recovery")
            if interrupt:
                self.deferred_signal = True
                return
            self._checkpoint()
            raise PowerFailure("power off after checkpoint")
        raise PowerFailure("power failure")

    # events
    def _post(self, handler, cell, ticks=True, cat=RECOVERY, tag=None):
        """Append (entry block, flow slot, payload) to the queue; drops when full."""
        cp = self.cp
        mem = self.mem
        w = mem.words
        rt = self.rt
        if ticks:
            self._tick(K_READ, cat)
        tail = w[rt["QTAIL"]]
        if ticks:
            self._tick(K_READ, cat)
        head = w[rt["QHEAD"]]
        if (tail - head) % (2 * self.qcap) >= self.qcap:
            if ticks:
                self._tick(K_READ, cat)
                self._tick(K_WRITE, cat)
            mem.store(rt["DROPS"], w[rt["DROPS"]] + 1)
            self.counters.dropped_events += 1
            return False
        e = rt["QENTRIES"] + (tail % self.qcap) * 4
        flow = cp.handler_flow.get(handler)
        vals = (cp.handler_entry[handler], cp.addr(flow) if flow is not None else
                rt["FLOW"], cell & 0xFFFF, cell >> 16)
        for k, v in enumerate(vals):
            if ticks:
                self._tick(K_WRITE, cat)
            mem.store(e + k, v)
        if self.checked:
            self.tags[e + 2] = tag
        if ticks:
            self._tick(K_WRITE, cat)
        mem.store(rt["QTAIL"], (tail + 1) % (2 * self.qcap))
        return True

    def add_event(self, handler, value=None):
        """Post an event from outside (counts as an interrupt-context enqueue)."""
        if handler not in self.cp.handler_entry:
            raise PureVMError("unknown handler %r" % handler)
        flow = self.cp.handler_flow.get(handler)
        t = lw.base_of(self.cp.slot_types.get(flow)) if flow else "Void"
        cell = catalog.encode(value if value is not None else 0, t or "Int")
        return self._post(handler, cell, ticks=False, tag=t)

    # interrupts
    def _service_interrupts(self):
        drv = self.drv
        drv.collect_due()
        while drv.pending:
            self._run_isr(drv.pending[0])
            drv.pending.pop(0)
        if self.deferred_signal:
            self.deferred_signal = False
            self._checkpoint()
            raise PowerFailure("power off after deferred checkpoint")

    def _run_isr(self, irq):
        cp = self.cp
        self.counters.isr_runs += 1
        if irq.name in cp.handler_entry and irq.name not in cp.interrupts:
            flow = cp.handler_flow.get(irq.name)
            t = lw.base_of(cp.slot_types.get(flow)) if flow else "Void"
            cell = catalog.encode(irq.value if irq.value is not None else 0, t or "Int")
            self._post(irq.name, cell, cat=INTERRUPT, tag=t)
            return
        isr = cp.interrupts.get(irq.name)
        if isr is None:
            raise PureVMError("no interrupt handler named %r" % irq.name)
        regs = {}
        if isr.flow_type != "Void" and irq.value is not None:
            regs[isr.flow] = catalog.encode(irq.value, isr.flow_type)
        else:
            regs[isr.flow] = 0
        sensor_val = irq.value

        def get(o):
            return lw.imm_cell(o) if lw.is_imm(o) else regs.get(o, 0)

        for c in isr.calls:
            spec = catalog.lookup(c.callee)
            self._tick(K_IO if spec.io else K_PRIM, INTERRUPT)
            ops = c.operands()
            if spec.io == "sensor":
                if sensor_val is not None:
                    cell = catalog.sensor_cell(sensor_val, spec.sensor_type)
                else:
                    cell = self.env.read(irq.index, spec.sensor_type)
                for w_ in spec.writes:
                    regs[ops[w_]] = cell
                if c.result:
                    regs[c.result] = cell
                continue
            res = spec.fn(*[get(o) for o in ops])
            if spec.writes:
                res, news = res
                for w_, v in zip(spec.writes, news):
                    regs[ops[w_]] = v
            if c.result:
                regs[c.result] = res
        for h, opnd, t in isr.enqueues:
            self._post(h, get(opnd), cat=INTERRUPT, tag=t)

    # JIT checkpointing
    def _checkpoint(self):
        mem = self.mem
        w = mem.words
        ck = self.rt["CKPT"]
        drv = self.drv
        drv.in_checkpoint = True
        try:
            seq = w[ck]
            nseq = (seq + 1) & 0xFFFF
            base = ck + 1 + (nseq & 1) * (lw.CKPT_HDR + self.nreg)
            vals = [nseq, self.code_id, self.pc] + list(self.R)
            for k, v in enumerate(vals):
                self._tick(K_WRITE, CKPT)
                mem.store(base + k, v)
            self._tick(K_WRITE, CKPT)
            mem.store(ck, nseq)
        finally:
            drv.in_checkpoint = False
        self.counters.checkpoints += 1

    def _restore_checkpoint(self):
        w = self.mem.words
        ck = self.rt["CKPT"]
        self._tick(K_READ, RECOVERY)
        seq = w[ck]
        base = ck + 1 + (seq & 1) * (lw.CKPT_HDR + self.nreg)
        vals = []
        for k in range(lw.CKPT_HDR + self.nreg):
            self._tick(K_READ, RECOVERY)
            vals.append(w[base + k])
        if vals[0] != seq:
            raise CorruptState("checkpoint buffer does not match its sequence word")
        self.code_id, self.pc = vals[1], vals[2]
        if self.code_id not in self.codes:
            raise CorruptState("checkpoint names unknown code %d" % self.code_id)
        self.R = vals[3:]

    # recovery
    def _reboot(self):
        self.in_recovery = True
        try:
            self._recover()
        finally:
            self.in_recovery = False

    def _recover(self):
        self.counters.reboots += 1
        self.R = [0] * self.nreg
        self.T = [None] * self.nreg
        self.logged = []
        self.logged_set = set()
        self.tx_start = None
        self.deferred_signal = False
        if self.backend == "REWINDING":
            mem = self.mem
            w = mem.words
            base = self.rt["UNDO"]
            self._tick(K_READ, RECOVERY)
            n = w[base]
            if n > self.cp.undo_capacity:
                raise CorruptState("undo count %d exceeds capacity" % n)
            stride = 1 + mem.wpp
            for i in range(n):
                self._tick(K_COPY, RECOVERY)
                at = base + 1 + i * stride
                dst = w[at] * mem.wpp
                w[dst:dst + mem.wpp] = w[at + 1:at + 1 + mem.wpp]
                self.counters.restored_pages += 1
            if n:
                self._tick(K_WRITE, RECOVERY)
                mem.store(base, 0)
            self.code_id, self.pc = DISPATCH, 0
        elif self.backend == "JUST_IN_TIME":
            self._restore_checkpoint()
        else:
            self.code_id, self.pc = DISPATCH, 0
        self._post("reboot", 0, cat=RECOVERY, tag="Void")
        self.need_reboot = False

    # undo logging
    def _log(self, widx):
        page = widx // self.mem.wpp
        n = len(self.logged)
        self.counters.log_searches += 1
        self._tick(K_READ, UNDO, 1 + n)
        if page in self.logged_set:
            return
        if n >= self.cp.undo_capacity:
            raise LogFull(self.cp.undo_capacity)
        mem = self.mem
        w = mem.words
        wpp = mem.wpp
        base = self.rt["UNDO"]
        at = base + 1 + n * (1 + wpp)
        self._tick(K_COPY, UNDO)
        w[at] = page
        w[at + 1:at + 1 + wpp] = w[page * wpp:(page + 1) * wpp]
        self.counters.page_copies += 1
        self._tick(K_WRITE, UNDO)
        w[base] = n + 1
        self.logged.append(page)
        self.logged_set.add(page)

    def _audit_commit(self):
        start = self.tx_start
        if start is None:
            return
        if start in self.cp.blocks:
            allowed = lw.transaction_pages(self.cp, start)
        else:
            allowed = lw.consume_pages(self.cp)
        extra = set(self.logged) - allowed
        if extra:
            self.audit.append((start, sorted(extra)))

    # main loop
    def run_until_idle(self, driver=None, stop_at_boundary=False):
        if not self.booted:
            raise PureVMError("boot() the program first")
        if driver is None:
            driver = self.drv or PowerDriver("CONTINUOUS")
        if driver is not self.drv:
            self.attach(driver)
        if self.backend == "TEST" and driver.mode != "CONTINUOUS":
            raise PureVMError("TestVM requires continuous power")
        status = None
        while status is None:
            try:
                if self.need_reboot:
                    self._reboot()
                status = self._run(stop_at_boundary)
            except PowerFailure:
                self.counters.crashes += 1
                self.need_reboot = True
                self.R = [0] * self.nreg
                driver.recharge()
            except Trap as t:
                if t.block is None:
                    t.block = self.code_id
                raise
        return self.report(status)

    def report(self, status="halted"):
        return RunReport(self.backend, status, self.drv.step if self.drv else 0,
                         list(self.env.outputs), self.counters.copy(), self.globals(),
                         self.mem.words[self.rt["DROPS"]])

    def _run(self, stop_at_boundary):
        R = self.R
        T = self.T
        w = self.mem.words
        nwords = len(w)
        codes = self.codes
        drv = self.drv
        tick = drv.tick
        cnt = self.counters
        steps = cnt.steps
        budget = self.cfg.step_budget
        rew = self.backend == "REWINDING"
        checked = self.checked
        tags = self.tags
        trace = self.trace
        rec = self.records
        env = self.env
        rt = self.rt
        wpp = self.mem.wpp
        qcap = self.qcap
        qmod = 2 * qcap
        qent = rt["QENTRIES"]
        depth = self.cfg.stack_depth
        groups = self.block_group
        cid = self.code_id
        pc = self.pc
        code = codes[cid]
        irq_due = drv.irq_due
        while True:
            ins = code[pc]
            op = ins[0]
            if op <= COMMIT:
                if drv.step >= irq_due:
                    self.code_id, self.pc = cid, pc
                    self._service_interrupts()
                    irq_due = drv.irq_due
                if rew and (op == WR or op == WRX):
                    if op == WR:
                        a = ins[2]
                    else:
                        a = R[ins[2]] + ins[3]
                    if (a // wpp) not in self.logged_set:
                        self.code_id, self.pc = cid, pc
                        self._log(a)
                    else:
                        cnt.log_searches += 1
                        self.code_id, self.pc = cid, pc
                        self._tick(K_READ, UNDO, 1 + len(self.logged))
                d = tick(OP_KIND[op])
                if d:
                    self.code_id, self.pc = cid, pc
                    self._decision(d)
                steps[ins[1]] += 1
                if drv.step > budget:
                    raise NonTermination(budget)
                if trace is not None:
                    self._trace(ins, cid, pc)
                if rec is not None and cid < 0xFFF0:
                    rec.append(cid << 16 | pc)
                if op == RD:
                    R[ins[2]] = w[ins[3]]
                    if checked:
                        T[ins[2]] = tags.get(ins[3])
                elif op == WR:
                    a = ins[2]
                    w[a] = R[ins[3]]
                    if checked:
                        t = T[ins[3]]
                        if ins[4] is not None and t is not None and t != ins[4]:
                            raise DynamicTypeError("%s value stored into %s slot" % (t, ins[4]),
                                                   cid)
                        tags[a] = t
                elif op == EXEC:
                    fn = ins[2]
                    cnt.prim_execs += 1
                    if fn is not None:
                        regs = ins[3]
                        if checked:
                            exp = ins[7]
                            for k, r in enumerate(regs):
                                if k < len(exp) and exp[k] is not None and T[r] is not None \
                                        and T[r] != exp[k]:
                                    raise DynamicTypeError("%s got %s where %s was expected"
                                                           % (ins[6], T[r], exp[k]), cid)
                        try:
                            res = fn(*[R[r] | (R[r + 1] << 16) for r in regs])
                        except Trap as t:
                            t.block = cid
                            raise
                        wregs = ins[5]
                        if wregs:
                            res, news = res
                            for r, v in zip(wregs, news):
                                R[r] = v & 0xFFFF
                                R[r + 1] = (v >> 16) & 0xFFFF
                        out = ins[4]
                        if out >= 0:
                            R[out] = res & 0xFFFF
                            R[out + 1] = (res >> 16) & 0xFFFF
                        if checked:
                            rule = ins[8]
                            tg = T[regs[rule]] if isinstance(rule, int) else rule
                            for r in ([out] if out >= 0 else []) + list(wregs):
                                T[r] = T[r + 1] = tg
                elif op == RDX:
                    a = R[ins[3]] + ins[4]
                    if a >= nwords:
                        raise OutOfRange(a * 2)
                    R[ins[2]] = w[a]
                    if checked:
                        T[ins[2]] = tags.get(a)
                elif op == WRX:
                    a = R[ins[2]] + ins[3]
                    if a >= nwords:
                        raise OutOfRange(a * 2)
                    w[a] = R[ins[4]]
                    if checked:
                        tags[a] = T[ins[4]]
                elif op == IO:
                    cnt.io_execs += 1
                    if ins[2] == "sensor":
                        ir = ins[3]
                        idx = R[ir] | (R[ir + 1] << 16)
                        cell = env.read(idx, ins[5])
                        idx += 1
                        R[ir] = idx & 0xFFFF
                        R[ir + 1] = (idx >> 16) & 0xFFFF
                        for r in ([ins[4]] if ins[4] >= 0 else []) + list(ins[6]):
                            R[r] = cell & 0xFFFF
                            R[r + 1] = cell >> 16
                            if checked:
                                T[r] = T[r + 1] = ins[5]
                    else:
                        sr, vr = ins[3], ins[4]
                        t = ins[5]
                        if checked and T[vr] is not None:
                            t = T[vr]
                        env.emit(R[sr] | (R[sr + 1] << 16), R[vr] | (R[vr + 1] << 16), t)
                else:  # COMMIT
                    cnt.commits += 1
                    if rew:
                        w[rt["UNDO"]] = 0
                        if self.audit is not None:
                            self._audit_commit()
                        self.logged = []
                        self.logged_set = set()
                pc += 1
                continue
            # free ops
            if rec is not None and cid < 0xFFF0:
                rec.append(cid << 16 | pc)
            if op == IMM:
                R[ins[2]] = ins[3]
                if checked:
                    T[ins[2]] = ins[4]
                pc += 1
            elif op == ADDI:
                R[ins[2]] = (R[ins[3]] + ins[4]) & 0xFFFF
                pc += 1
            elif op == JZ:
                pc = ins[3] if R[ins[2]] == 0 else pc + 1
            elif op == JNZ:
                pc = ins[3] if R[ins[2]] != 0 else pc + 1
            elif op == JMP:
                pc = ins[2]
            elif op == POP:
                R[R_SP] = (R[R_SP] - 1) & 0xFFFF
                cnt.pops += 1
                pc += 1
            elif op == PUSHCHK:
                if R[ins[2]] >= depth:
                    raise TrapStackOverflow(cid)
                cnt.pushes += 1
                pc += 1
            elif op == GOTO:
                nxt = R[ins[2]]
                if nxt not in codes or nxt in SYSTEM_CODES:
                    raise CorruptState("stack names unknown block %d" % nxt)
                if R[R_CHAIN] == 0:
                    self.tx_start = nxt
                cid = nxt
                code = codes[cid]
                pc = 0
                cnt.blocks += 1
            elif op == IDX:
                ar, ir = ins[3], ins[4]
                i = R[ir] | (R[ir + 1] << 16)
                if i & 0x80000000:
                    i -= 1 << 32
                if not 0 <= i < R[ar + 1]:
                    raise TrapIndexOutOfBounds(ins[5], i, cid)
                R[ins[2]] = R[ar] + 2 * i
                pc += 1
            elif op == TODISPATCH:
                cid = DISPATCH
                code = codes[cid]
                pc = 0
                if self.on_boundary is not None or stop_at_boundary:
                    self.code_id, self.pc = cid, pc
                    if self.on_boundary is not None and self.on_boundary(self):
                        return "stopped"
                    if stop_at_boundary and self.on_boundary is None:
                        return "boundary"
            elif op == JEQ:
                pc = ins[4] if R[ins[2]] == R[ins[3]] else pc + 1
            elif op == JGEI:
                pc = ins[4] if R[ins[2]] >= ins[3] else pc + 1
            elif op == INGRP:
                pc = ins[4] if groups.get(R[ins[2]]) != ins[3] else pc + 1
            elif op == GOTOC:
                cid = ins[2]
                code = codes[cid]
                pc = 0
                self.tx_start = cid
            elif op == QADDR:
                R[ins[2]] = qent + (R[ins[3]] % qcap) * 4
                pc += 1
            elif op == QINC:
                R[ins[2]] = (R[ins[2]] + 1) % qmod
                pc += 1
            elif op == INC32:
                r = ins[2]
                v = ((R[r] | (R[r + 1] << 16)) + 1) & 0xFFFFFFFF
                R[r] = v & 0xFFFF
                R[r + 1] = v >> 16
                pc += 1
            elif op == WAIT:
                # after an interrupt the loop restarts from the top
                self.code_id, self.pc = cid, 0
                if drv.fast_forward():
                    self._service_interrupts()
                    irq_due = drv.irq_due
                    pc = 0
                else:
                    pc += 1
            elif op == HALT:
                self.code_id, self.pc = cid, pc
                return "halted"
            else:
                pc += 1

    def _trace(self, ins, cid, pc):
        op = ins[0]
        detail = ""
        if op in (WR, WRX):
            a = ins[2] if op == WR else self.R[ins[2]] + ins[3]
            detail = " w%d p%d" % (a, a // self.mem.wpp)
        elif op in (RD, RDX):
            a = ins[3] if op == RD else self.R[ins[3]] + ins[4]
            detail = " r%d" % a
        elif op in (EXEC, IO):
            detail = " " + str(ins[6] if op == EXEC else ins[7])
        where = "%d" % cid if cid < 0xFFF0 else {DISPATCH: "dispatch", CONSUME_CODE: "consume",
                                                  SLEEP_CODE: "sleep"}[cid]
        self.trace.append("%d %s %s %s:%d%s" % (self.drv.step, CATEGORIES[ins[1]], OP_NAMES[op],
                                                 where, pc, detail))

    # inspection
    def read_cell(self, slot):
        a = self.cp.addr(slot)
        w = self.mem.words
        return w[a] | (w[a + 1] << 16)

    def globals(self):
        out = {}
        for name, (slot, tstr) in self.cp.globals.items():
            if tstr.startswith("Array"):
                st = slot + "[]"
                elem, n = self.cp.arrays[st]
                a = self.cp.addr(st)
                w = self.mem.words
                out[name] = [catalog.decode(w[a + 2 * i] | (w[a + 2 * i + 1] << 16), elem)
                             for i in range(n)]
            else:
                out[name] = catalog.decode(self.read_cell(slot), tstr)
        return out

    def global_value(self, name):
        return self.globals()[name]

    def queue_entries(self):
        w = self.mem.words
        rt = self.rt
        head, tail = w[rt["QHEAD"]], w[rt["QTAIL"]]
        out = []
        i = head
        while i != tail:
            e = rt["QENTRIES"] + (i % self.qcap) * 4
            out.append(tuple(w[e:e + 4]))
            i = (i + 1) % (2 * self.qcap)
        return out

    def reboot_blocks(self):
        if self._reboot_blocks is None:
            self._reboot_blocks = lw._reachable(self.cp, self.cp.handler_entry["reboot"])
        return self._reboot_blocks

    def block_stream(self, exclude_reboot=True):
        if self.records is None:
            return None
        skip = self.reboot_blocks() if exclude_reboot else set()
        return [r for r in self.records if (r >> 16) not in skip]

    def state_key(self):
        """Normalized NVM state between handlers, used by the crash fuzzer.

        Sequence numbers, the undo area, the checkpoint area, drop counters and
        pending no-op reboot events do not influence later outputs, so they are
        left out.  Only meaningful when the stack is empty.
        """
        w = self.mem.words
        rt = self.rt
        if w[rt["SP"]] != 0:
            stack = tuple(w[rt["STACK"]:rt["STACK"] + w[rt["SP"]]])
            flow = tuple(w[rt["FLOW"]:rt["FLOW"] + 2])
        else:
            stack = flow = ()
        reboot_entry = self.cp.handler_entry["reboot"]
        q = tuple(e for e in self.queue_entries()
                  if not (self.cp.reboot_noop and e[0] == reboot_entry))
        lo, hi = self.mem.region_words("GLOBALS")
        skip = self._reboot_slot_words()
        g = bytearray(w[lo:hi].tobytes())
        for a in skip:
            g[2 * (a - lo):2 * (a - lo) + 2] = b"\0\0"
        return (w[rt["SLEEP_DONE"]], w[rt["IOIDX"]], w[rt["IOIDX"] + 1], stack, flow, q, bytes(g))

    def _reboot_slot_words(self):
        if not hasattr(self, "_rb_words"):
            out = []
            if self.cp.reboot_noop:
                owners = {self.cp.blocks[b].owner for b in self.reboot_blocks()}
                for s, (_, page, off) in self.cp.slot_layout.items():
                    if s.split(":", 1)[0] in owners:
                        a = page * self.cp.wpp + off
                        out.extend(range(a, a + self.cp.slot_words.get(s, 2)))
            self._rb_words = out
        return self._rb_words

    # snapshots (between transactions)
    def snapshot(self):
        return {"mem": self.mem.snapshot(), "code": (self.code_id, self.pc),
                "R": list(self.R), "counters": self.counters.copy(),
                "outputs": list(self.env.outputs), "live_reads": self.env.live_reads,
                "drv": self.drv.state() if self.drv is not None else None,
                "booted": self.booted, "need_reboot": self.need_reboot,
                "tags": dict(self.tags)}

    def restore(self, snap):
        self.mem.restore(snap["mem"])
        self.code_id, self.pc = snap["code"]
        self.R = list(snap["R"])
        self.counters = snap["counters"].copy()
        self.env.outputs = list(snap["outputs"])
        self.env.live_reads = snap["live_reads"]
        if self.drv is not None and snap["drv"] is not None:
            self.drv.restore(snap["drv"])
        self.booted = snap["booted"]
        self.need_reboot = snap["need_reboot"]
        self.tags = dict(snap["tags"])
        self.logged = []
        self.logged_set = set()


class TestVM(VM):
    def __init__(self, cp, **kw):
        super().__init__(cp, backend="TEST", **kw)


class RewindingVM(VM):
    def __init__(self, cp, **kw):
        super().__init__(cp, backend="REWINDING", **kw)


class JustInTimeVM(VM):
    def __init__(self, cp, **kw):
        super().__init__(cp, backend="JUST_IN_TIME", **kw)


def boot(cp, backend=None, env=None, **kw):
    return VM(cp, backend=backend, env=env, **kw).boot()


def run(cp, backend=None, driver=None, env=None, **kw):
    """Deploy and run to idle; returns the :class:`RunReport`."""
    h = boot(cp, backend, env, **kw)
    return h.run_until_idle(driver)
