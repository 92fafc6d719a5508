"""Lowering of typed programs into continuation blocks, and block passes.

Every named object and temporary gets a fixed cell (two words) in the
GLOBALS region.  User functions receive their arguments by value: a
continuation template copies the argument cells into the callee's
parameter slots when the continuation is pushed.  Primitives operate in
place on the cells they are handed.

Function values never exist at run time.  A function whose parameters are
bound to statically known functions is specialized per binding; a value
chosen by ``select`` between two functions becomes a :class:`SelectCont`
terminator when it is applied.

Block shape: a block is a straight-line list of primitive calls followed by
a terminator.  ``Return`` writes the flow register; ``PushCont`` pushes
templates (listed bottom to top); ``SelectCont`` pushes ``rest`` and then
one of two arm templates.  A continuation that consumes a returned value
begins with ``move %FLOW -> t``.
"""

from __future__ import annotations

import copy
import itertools
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Optional

import networkx as nx

from . import catalog
from . import frontend as fe
from . import types as ty
from .errors import (InvalidProgram, LayoutOverflow, LoweringError, NonTailRecursion,
                     UnknownPrimitive)

FLOW = "%FLOW"

# RUNTIME region word offsets (the transactional part)
RT_SP = 0
RT_QHEAD = 1
RT_SLEEP_DONE = 2
RT_FLOW = 4
RT_SEQ = 6
RT_IOIDX = 8
RT_WORDS = 10
CKPT_HDR = 3  # per buffer: sequence copy, code id, pc
ENGINE_REGS = 8
MAX_FUSED_CALLS = 64
MAX_LEAF_CALLS = 24

# --- IR ------------------------------------------------------------------------


@dataclass
class PrimitiveCall:
    callee: str
    flow_in: str
    params: list = field(default_factory=list)
    result: Optional[str] = None
    writes: frozenset = frozenset()
    is_io: bool = False

    def operands(self):
        return [self.flow_in] + list(self.params)


@dataclass(frozen=True)
class ContinuationTemplate:
    target: int
    flow_in: Optional[str] = None
    params: tuple = ()

    def sources(self):
        out = [] if self.flow_in is None else [self.flow_in]
        return out + [p for p in self.params if p is not None]


@dataclass
class Return:
    slot: str


@dataclass
class PushCont:
    templates: list


@dataclass
class SelectCont:
    cond: str
    then: ContinuationTemplate
    else_: ContinuationTemplate
    rest: list = field(default_factory=list)


@dataclass
class BasicBlock:
    id: int
    calls: list
    terminator: object = None
    owner: str = ""
    note: str = ""
    group: Optional[int] = None

    @property
    def has_io(self):
        return any(c.is_io for c in self.calls)


@dataclass(frozen=True)
class Entry:
    """Slots a template targeting this block fills (None = statically bound)."""

    flow: Optional[str]
    params: tuple = ()

    def dests(self):
        out = [] if self.flow is None else [self.flow]
        return out + [p for p in self.params if p is not None]


@dataclass
class IsrProgram:
    name: str
    flow: str
    flow_type: str
    calls: list
    enqueues: list  # (handler name, operand, type name)


@dataclass
class ContinuationProgram:
    blocks: dict
    handler_entry: dict
    slot_layout: dict
    primitive_catalog: dict
    cfg: fe.VmConfig
    entries: dict = field(default_factory=dict)
    handler_flow: dict = field(default_factory=dict)
    slot_types: dict = field(default_factory=dict)
    slot_words: dict = field(default_factory=dict)
    globals: dict = field(default_factory=dict)  # name -> (slot, type string)
    arrays: dict = field(default_factory=dict)  # storage slot -> (elem, length)
    inits: dict = field(default_factory=dict)  # slot -> list of cells
    interrupts: dict = field(default_factory=dict)
    regions: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    undo_capacity: int = 0
    nreg: int = 16
    reboot_noop: bool = False
    slot_order: list = field(default_factory=list)

    @property
    def wpp(self):
        return self.cfg.words_per_page

    def addr(self, slot):
        """Word index of a slot's first word."""
        region, page, off = self.slot_layout[slot]
        return page * self.wpp + off

    def slot_pages(self, slot):
        a = self.addr(slot)
        n = self.slot_words.get(slot, 2)
        return set(range(a // self.wpp, (a + n - 1) // self.wpp + 1))

    def region_pages(self, name):
        first, n = self.regions[name]
        return set(range(first, first + n))

    @property
    def runtime_pages(self):
        return set(range(0, self.runtime["tx_pages"]))


# --- operands --------------------------------------------------------------------


def is_imm(s):
    return isinstance(s, str) and s.startswith("#")


def imm(type_name, value):
    if type_name == "Float":
        return "#Float:%r" % float(value)
    if type_name == "Bool":
        return "#Bool:%d" % (1 if value else 0)
    if type_name == "Void":
        return "#Void:0"
    return "#Int:%d" % int(value)


def imm_type(s):
    return s[1:].split(":", 1)[0]


def imm_cell(s):
    t, v = s[1:].split(":", 1)
    return catalog.encode(float(v) if t == "Float" else int(v), t)


def base_of(type_str):
    """Base name of a rendered slot type, or None when polymorphic."""
    if not type_str or type_str.startswith("%"):
        return None
    if type_str.startswith("Array"):
        return "Array"
    if "->" in type_str:
        return None
    return type_str


def _tstr(t):
    return None if t is None else str(t)


@dataclass(frozen=True)
class FnRef:
    kind: str  # "prim" | "func"
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Choice:
    cond: str
    a: object
    b: object

    def __str__(self):
        return "(%s ? %s : %s)" % (self.cond, self.a, self.b)


def _is_fn(v):
    return isinstance(v, (FnRef, Choice))


def refs(term):
    """Templates referenced by a terminator."""
    if isinstance(term, PushCont):
        return list(term.templates)
    if isinstance(term, SelectCont):
        return [term.then, term.else_] + list(term.rest)
    return []


# --- lowering --------------------------------------------------------------------


@dataclass
class _Inst:
    label: str
    decl: object
    binds: dict
    entry: int
    flow_slot: Optional[str]
    param_slots: list
    temps: itertools.count = field(default_factory=lambda: itertools.count())


class _Lowerer:
    def __init__(self, tp, cfg, defines=None):
        self.tp = tp
        self.cfg = cfg
        self.defines = dict(defines or {})
        self.blocks = {}
        self.entries = {}
        self.ids = itertools.count()
        self.instances = {}
        self.queue = deque()
        self.slot_types = {}
        self.slot_words = {}
        self.owners = {}  # owner label -> list of slots, in creation order
        self.edges = []  # (caller label, callee label, tail)
        self.cur = None
        self.inst = None
        self.tramps = {}

    # slots and blocks
    def new_slot(self, owner, name, t, words=2):
        s = "%s:%s" % (owner, name)
        if s in self.slot_types:
            raise LoweringError("slot %s allocated twice" % s)
        self.slot_types[s] = t
        self.slot_words[s] = words
        self.owners.setdefault(owner, []).append(s)
        return s

    def temp(self, t):
        return self.temp_str(_tstr(t))

    def temp_str(self, tstr):
        return self.new_slot(self.inst.label, "t%d" % next(self.inst.temps), tstr)

    def new_block(self, note="", owner=None):
        bid = next(self.ids)
        self.blocks[bid] = BasicBlock(bid, [], None, owner or self.inst.label, note)
        return bid

    def emit(self, call):
        self.cur.calls.append(call)

    def end(self, term):
        self.cur.terminator = term
        self.cur = None

    def switch(self, bid):
        self.cur = self.blocks[bid]

    # instances
    def instance(self, name, binds):
        key = (name, binds)
        if key in self.instances:
            return self.instances[key]
        d = self.tp.decls[name]
        label = name
        if binds:
            label += "<%s>" % ",".join("%d=%s" % (p, f) for p, f in binds)
        sc = self.tp.schemes[name]
        bmap = dict(binds)
        entry = self.new_block("entry", owner=label)
        flow_slot = None
        if 0 not in bmap:
            flow_slot = self.new_slot(label, sc.flow_name, _tstr(sc.flow))
        pslots = []
        for i, (pn, pt) in enumerate(zip(sc.param_names, sc.params), 1):
            pslots.append(None if i in bmap else self.new_slot(label, pn, _tstr(pt)))
        self.entries[entry] = Entry(flow_slot, tuple(pslots))
        inst = _Inst(label, d, bmap, entry, flow_slot, pslots)
        self.instances[key] = inst
        self.queue.append(inst)
        return inst

    def run(self):
        tp, cfg = self.tp, self.cfg
        handler_entry, handler_flow = {}, {}
        for h in cfg.event_handlers:
            d = tp.decls.get(h)
            if d is None or d.kind != fe.EVENT:
                raise LoweringError("configured handler %r is not a declared event" % h)
            inst = self.instance(h, ())
            handler_entry[h] = inst.entry
            handler_flow[h] = inst.flow_slot
        while self.queue:
            self.lower_instance(self.queue.popleft())
        self.check_recursion()
        interrupts = {}
        for d in tp.source.declarations:
            if d.kind == fe.INTERRUPT:
                interrupts[d.name] = self.lower_isr(d)
        return handler_entry, handler_flow, interrupts

    def lower_instance(self, inst):
        self.inst = inst
        d = inst.decl
        env = {}
        if d.flow_in is not None:
            env[d.flow_in.name] = inst.binds.get(0, inst.flow_slot)
        for i, p in enumerate(d.params, 1):
            env[p.name] = inst.binds.get(i, inst.param_slots[i - 1])
        self.switch(inst.entry)
        v = env[d.flow_in.name] if d.flow_in is not None else imm("Void", 0)
        for i, st in enumerate(d.body):
            v = self.chain(st.chain, env, tail=(i == len(d.body) - 1))
            if st.binding:
                env[st.binding] = v
        if self.cur is not None:
            if _is_fn(v):
                raise LoweringError("%s returns a function value, which cannot be stored"
                                    % inst.label)
            self.end(Return(v))
        self.inst = None

    def chain(self, e, env, tail=False):
        v = self.atom(e.head, env)
        n = len(e.calls)
        for j, c in enumerate(e.calls):
            if self.cur is None:
                raise LoweringError("code after a tail call in %s" % self.inst.label)
            v = self.call(c, v, env, tail and j == n - 1)
        return v

    def atom(self, e, env):
        if isinstance(e, fe.IntLit):
            return imm("Int", e.value)
        if isinstance(e, fe.FloatLit):
            return imm("Float", e.value)
        if isinstance(e, fe.BoolLit):
            return imm("Bool", e.value)
        if isinstance(e, fe.UnitLit):
            return imm("Void", 0)
        if isinstance(e, fe.Chain):
            return self.chain(e, env)
        n = e.ident
        if n in env:
            return env[n]
        if n in self.tp.globals:
            return "g:" + n
        d = self.tp.decls[n]
        return FnRef("prim" if d.kind == fe.PRIMITIVE else "func", n)

    def call(self, c, flow, env, tail):
        d = self.tp.decls[c.callee]
        args = [self.atom(a, env) for a in c.args]
        if d.kind == fe.PRIMITIVE:
            return self.prim(c.callee, flow, args, c.ty, tail)
        return self.user_call(c.callee, flow, args, c.ty, tail)

    def prim(self, name, flow, args, rty, tail=False):
        spec = catalog.lookup(name)
        if spec is None:
            raise UnknownPrimitive(name)
        ops = [flow] + args
        if spec.special == "apply":
            return self.apply(flow, args[0], rty, tail)
        if spec.special == "addEventQ":
            raise LoweringError("addEventQ is only available in interrupt handlers")
        if any(_is_fn(v) for v in ops):
            if name == "select":
                if is_imm(flow):
                    return args[0] if imm_cell(flow) else args[1]
                t = self.temp(ty.BOOL)
                self.emit(PrimitiveCall("move", flow, [], t))
                return Choice(t, args[0], args[1])
            if name == "id":
                return flow
            if name == "ignore":
                return imm("Void", 0)
            raise LoweringError("primitive %s cannot take a function value" % name)
        writes = set()
        for w in spec.writes:
            if is_imm(ops[w]):
                t = self.temp_str(imm_type(ops[w]))
                self.emit(PrimitiveCall("move", ops[w], [], t))
                ops[w] = t
            writes.add(ops[w])
        result = None
        if not spec.returns_flow:
            result = self.temp(rty)
        self.emit(PrimitiveCall(name, ops[0], ops[1:], result, frozenset(writes), spec.is_io))
        return ops[0] if spec.returns_flow else result

    def apply(self, a, fv, rty, tail):
        if isinstance(fv, FnRef) and fv.kind == "prim":
            spec = catalog.lookup(fv.name)
            if spec is not None and spec.writes and not is_imm(a):
                # function values receive their argument by value
                t = self.temp_str(self.slot_types.get(a))
                self.emit(PrimitiveCall("move", a, [], t))
                a = t
            return self.prim(fv.name, a, [], rty)
        if isinstance(fv, FnRef):
            return self.user_call(fv.name, a, [], rty, tail)
        if isinstance(fv, Choice):
            then_t = self.arm(fv.a, a, tail)
            else_t = self.arm(fv.b, a, tail)
            if tail:
                self.end(SelectCont(fv.cond, then_t, else_t, []))
                return None
            rest = self.new_block("rest")
            self.end(SelectCont(fv.cond, then_t, else_t, [ContinuationTemplate(rest)]))
            self.switch(rest)
            return self.read_flow(rty)
        raise LoweringError("apply needs a function value")

    def arm(self, fv, a, tail):
        if isinstance(fv, FnRef) and fv.kind == "func":
            inst = self.instance(fv.name, ())
            self.edges.append((self.inst.label, inst.label, tail))
            return ContinuationTemplate(inst.entry, a, ())
        # primitive or nested choice: a small trampoline block
        saved_cur = self.cur
        bid = self.new_block("trampoline")
        x = self.new_slot(self.inst.label, "k%d" % bid, self.slot_types.get(a)
                          if not is_imm(a) else imm_type(a))
        self.entries[bid] = Entry(x, ())
        self.switch(bid)
        if isinstance(fv, Choice):
            self.end(SelectCont(fv.cond, self.arm(fv.a, x, True), self.arm(fv.b, x, True), []))
        else:
            self.end(Return(self.prim(fv.name, x, [], self.tp.schemes[fv.name].out)))
        self.cur = saved_cur
        return ContinuationTemplate(bid, a, ())

    def user_call(self, name, flow, args, rty, tail):
        binds = []
        for pos, v in enumerate([flow] + args):
            if isinstance(v, Choice):
                raise LoweringError("argument %d of %s must be a statically known function; "
                                    "apply the choice instead" % (pos, name))
            if isinstance(v, FnRef):
                binds.append((pos, v))
        if rty is not None and isinstance(rty, ty.Arrow):
            raise LoweringError("%s returns a function value, which cannot be stored" % name)
        inst = self.instance(name, tuple(binds))
        tmpl = ContinuationTemplate(inst.entry, None if _is_fn(flow) else flow,
                                    tuple(None if _is_fn(v) else v for v in args))
        self.edges.append((self.inst.label, inst.label, tail))
        if tail:
            self.end(PushCont([tmpl]))
            return None
        rest = self.new_block("rest")
        self.end(PushCont([ContinuationTemplate(rest), tmpl]))
        self.switch(rest)
        return self.read_flow(rty)

    def read_flow(self, rty):
        t = self.temp(rty)
        self.emit(PrimitiveCall("move", FLOW, [], t))
        return t

    def check_recursion(self):
        g = nx.DiGraph()
        for a, b, _ in self.edges:
            g.add_edge(a, b)
        comp = {}
        for i, scc in enumerate(nx.strongly_connected_components(g)):
            for n in scc:
                comp[n] = i
        for a, b, tail in self.edges:
            if not tail and comp[a] == comp[b]:
                raise NonTailRecursion("recursive call %s -> %s is not in tail position; "
                                       "continuations must not grow the stack" % (a, b))

    # interrupt handlers compile to register-only code
    def lower_isr(self, d):
        regs = itertools.count()
        calls, enq = [], []
        flow_t = "Void"
        env = {}
        flow = "r:%d" % next(regs)
        if d.flow_in is not None:
            env[d.flow_in.name] = flow
            flow_t = base_of(_tstr(self.tp.schemes[d.name].flow)) or "Void"
        rtype = {flow: flow_t}

        def vtype(v):
            return imm_type(v) if is_imm(v) else rtype.get(v)

        def atom(e):
            if isinstance(e, fe.Chain):
                return chain(e)
            if isinstance(e, fe.Name):
                if e.ident in env:
                    return env[e.ident]
                if e.ident in self.tp.globals:
                    raise LoweringError("interrupt handler %s may not read global %s"
                                        % (d.name, e.ident))
            return self.atom(e, {})

        def chain(e):
            v = atom(e.head)
            for c in e.calls:
                dd = self.tp.decls[c.callee]
                args = [atom(a) for a in c.args]
                if dd.kind != fe.PRIMITIVE:
                    raise LoweringError("interrupt handler %s may only call primitives (%s)"
                                        % (d.name, c.callee))
                name = c.callee
                if name == "apply" and isinstance(args[0], FnRef) and args[0].kind == "prim":
                    name, args = args[0].name, []
                spec = catalog.lookup(name)
                if spec is None:
                    raise UnknownPrimitive(name)
                if spec.special == "addEventQ":
                    h = args[0]
                    if not isinstance(h, FnRef) or h.name not in self.cfg.event_handlers:
                        raise LoweringError("addEventQ target must be a configured event handler")
                    enq.append((h.name, v, vtype(v) or "Void"))
                    v = imm("Void", 0)
                    continue
                if spec.special or spec.io == "emit" or any(_is_fn(x) for x in [v] + args):
                    raise LoweringError("primitive %s is not allowed in interrupt handler %s"
                                        % (name, d.name))
                ops = [v] + args
                for w in spec.writes:
                    if is_imm(ops[w]):
                        r = "r:%d" % next(regs)
                        rtype[r] = imm_type(ops[w])
                        calls.append(PrimitiveCall("move", ops[w], [], r))
                        ops[w] = r
                res = None
                if not spec.returns_flow:
                    res = "r:%d" % next(regs)
                    rtype[res] = base_of(_tstr(c.ty))
                calls.append(PrimitiveCall(name, ops[0], ops[1:], res,
                                           frozenset(ops[w] for w in spec.writes), spec.is_io))
                v = ops[0] if spec.returns_flow else res
            return v

        for st in d.body:
            v = chain(st.chain)
            if st.binding:
                env[st.binding] = v
        return IsrProgram(d.name, flow, flow_t, calls, enq)


def _global_inits(tp, cfg, defines):
    out = {}
    for d in tp.source.declarations:
        if d.kind != fe.GLOBAL:
            continue
        t = tp.globals[d.name]
        init = defines.get(d.name, d.init)
        if isinstance(t, ty.Array):
            vals = []
            if init is not None:
                vals = [x.value if hasattr(x, "value") else x for x in init]
            if len(vals) > t.len.n:
                raise LoweringError("too many initializers for %s" % d.name)
            elem = str(t.elem)
            out[d.name] = [catalog.encode(v, elem) for v in vals] + [0] * (t.len.n - len(vals))
        else:
            v = 0 if init is None else (init.value if hasattr(init, "value") else init)
            out[d.name] = [catalog.encode(v, str(t))]
    return out


def lower(tp, cfg, defines=None):
    """Typed program -> laid-out :class:`ContinuationProgram` (before split_io)."""
    lw = _Lowerer(tp, cfg, defines)
    gslots = {}
    arrays = {}
    for d in tp.source.declarations:
        if d.kind == fe.GLOBAL:
            t = tp.globals[d.name]
            s = lw.new_slot("g", d.name, str(t))
            gslots[d.name] = (s, str(t))
            if isinstance(t, ty.Array):
                st = lw.new_slot("g", d.name + "[]", str(t.elem), 2 * t.len.n)
                arrays[st] = (str(t.elem), t.len.n)
    handler_entry, handler_flow, interrupts = lw.run()
    cells = _global_inits(tp, cfg, lw.defines)
    inits = {}
    for name, (s, tstr) in gslots.items():
        if tstr.startswith("Array"):
            inits[s + "[]"] = cells[name]
        else:
            inits[s] = cells[name]
    cp = ContinuationProgram(
        blocks=lw.blocks, handler_entry=handler_entry, slot_layout={},
        primitive_catalog={n: n for n in catalog.CATALOG}, cfg=cfg,
        entries=lw.entries, handler_flow=handler_flow, slot_types=lw.slot_types,
        slot_words=lw.slot_words, globals=gslots, arrays=arrays, inits=inits,
        interrupts=interrupts)
    cp.slot_order = [s for owner in lw.owners for s in lw.owners[owner]]
    _drop_unreachable(cp)
    finalize(cp)
    return cp


def _drop_unreachable(cp):
    seen = set()
    todo = list(cp.handler_entry.values())
    while todo:
        b = todo.pop()
        if b in seen:
            continue
        seen.add(b)
        todo.extend(t.target for t in refs(cp.blocks[b].terminator))
    for b in list(cp.blocks):
        if b not in seen:
            del cp.blocks[b]
            cp.entries.pop(b, None)


# --- layout ----------------------------------------------------------------------


def _pages(words, wpp):
    return max(1, -(-words // wpp))


def register_demand(cp):
    need = 0
    for b in cp.blocks.values():
        for c in b.calls:
            need = max(need, 2 * (1 + len(c.params)) + 2 + 2 * len(c.writes) + 1)
        srcs = sum(len(t.sources()) for t in refs(b.terminator))
        need = max(need, 2 * srcs + 2)
    return ENGINE_REGS + max(need, 8)


def _assign_layout(cp):
    cfg = cp.cfg
    wpp = cfg.words_per_page
    cp.nreg = register_demand(cp)
    page = 0
    tx = _pages(RT_WORDS, wpp)
    ck_words = 1 + 2 * (CKPT_HDR + cp.nreg)
    ck = _pages(ck_words, wpp)
    regions = {"RUNTIME": (0, tx + ck)}
    rt = {"SP": RT_SP, "QHEAD": RT_QHEAD, "SLEEP_DONE": RT_SLEEP_DONE, "FLOW": RT_FLOW,
          "SEQ": RT_SEQ, "IOIDX": RT_IOIDX, "tx_pages": tx, "CKPT": tx * wpp}
    page = tx + ck
    n = _pages(cfg.stack_depth, wpp)
    regions["STACK"] = (page, n)
    rt["STACK"] = page * wpp
    page += n
    n = _pages(2 + 4 * cfg.event_queue_capacity, wpp)
    regions["QUEUE"] = (page, n)
    rt["QTAIL"] = page * wpp
    rt["DROPS"] = page * wpp + 1
    rt["QENTRIES"] = page * wpp + 2
    page += n
    base = page * wpp
    off = 0
    layout = {}
    order = cp.slot_order or sorted(cp.slot_types)
    for s in order:
        w = cp.slot_words.get(s, 2)
        a = base + off
        layout[s] = ("GLOBALS", a // wpp, a % wpp)
        off += w + (w % 2)
    n = _pages(off, wpp)
    regions["GLOBALS"] = (page, n)
    page += n
    cp.slot_layout = layout
    cp.regions = regions
    cp.runtime = rt
    for s, (elem, length) in cp.arrays.items():
        cp.inits[s[:-2]] = [catalog.array_ref(cp.addr(s), length)]
    # UNDO sized last, from the static write sets
    cap = undo_demand(cp)
    cp.undo_capacity = cap
    n = _pages(1 + cap * (1 + wpp), wpp)
    regions["UNDO"] = (page, n)
    rt["UNDO"] = page * wpp
    page += n
    if page > cfg.page_count:
        raise LayoutOverflow(page * cfg.page_size_bytes, cfg.nvm_size_bytes)
    return cp


def finalize(cp):
    _assign_layout(cp)
    cp.reboot_noop = _reboot_is_noop(cp)
    validate(cp)
    return cp


def _reachable(cp, start):
    seen, todo = set(), [start]
    while todo:
        b = todo.pop()
        if b in seen or b not in cp.blocks:
            continue
        seen.add(b)
        todo.extend(t.target for t in refs(cp.blocks[b].terminator))
    return seen


def _reboot_is_noop(cp):
    """True when the reboot handler can neither touch globals nor do IO."""
    for b in _reachable(cp, cp.handler_entry["reboot"]):
        for c in cp.blocks[b].calls:
            if c.is_io or c.callee == "setAt":
                return False
            for s in set(c.writes) | {c.result}:
                if s is not None and s.startswith("g:"):
                    return False
    return True


# --- write sets ------------------------------------------------------------------


def _array_pages(cp, slot):
    t = cp.slot_types.get(slot) if slot is not None and not is_imm(slot) else None
    want = None
    if t and t.startswith("Array<"):
        elem, ln = t[6:-1].split(", ")
        want = (elem if not elem.startswith("%") else None,
                int(ln) if ln.isdigit() else None)
    pages = set()
    for s, (elem, length) in cp.arrays.items():
        if want is not None:
            if want[0] is not None and want[0] != elem:
                continue
            if want[1] is not None and want[1] != length:
                continue
        pages |= cp.slot_pages(s)
    return pages


def write_pages(cp, block_id):
    """Static superset of the pages one execution of the block may modify."""
    b = cp.blocks[block_id]
    pages = cp.runtime_pages | cp.region_pages("STACK")
    for c in b.calls:
        for s in set(c.writes) | {c.result}:
            if s is not None and s in cp.slot_layout:
                pages |= cp.slot_pages(s)
        if c.callee == "setAt":
            pages |= _array_pages(cp, c.flow_in)
    for t in refs(b.terminator):
        e = cp.entries.get(t.target)
        if e is not None:
            for d in e.dests():
                pages |= cp.slot_pages(d)
    return pages


def group_pages(cp, gid):
    out = set()
    for b in cp.blocks.values():
        if b.group == gid:
            out |= write_pages(cp, b.id)
    return out


def transaction_pages(cp, block_id):
    """Pages a transaction starting at this block may log (groups chain)."""
    g = cp.blocks[block_id].group
    return group_pages(cp, g) if g is not None else write_pages(cp, block_id)


def consume_pages(cp):
    pages = cp.runtime_pages | cp.region_pages("STACK")
    for s in cp.handler_flow.values():
        if s is not None:
            pages |= cp.slot_pages(s)
    return pages


def undo_demand(cp):
    need = len(consume_pages(cp))
    seen_groups = set()
    for b in cp.blocks.values():
        if b.group is not None:
            if b.group in seen_groups:
                continue
            seen_groups.add(b.group)
            need = max(need, len(group_pages(cp, b.group)))
        else:
            need = max(need, len(write_pages(cp, b.id)))
    return need


# --- validation ------------------------------------------------------------------


def validate(cp, after_split=False):
    known = set(cp.slot_layout)

    def slot_ok(s, where):
        if s is None or is_imm(s) or s == FLOW:
            return
        if s not in known:
            raise InvalidProgram("%s refers to unknown slot %r" % (where, s))

    for bid, b in cp.blocks.items():
        where = "block %d" % bid
        if b.terminator is None:
            raise InvalidProgram("%s has no terminator" % where)
        ios = [c for c in b.calls if c.is_io]
        if after_split and ios and len(b.calls) != 1:
            raise InvalidProgram("%s mixes an IO call with other calls" % where)
        for c in b.calls:
            spec = catalog.lookup(c.callee)
            if spec is None:
                raise UnknownPrimitive(c.callee)
            for s in c.operands() + [c.result]:
                slot_ok(s, where)
            if not set(c.writes) <= set(c.operands()):
                raise InvalidProgram("%s: %s writes outside its operands" % (where, c.callee))
        if isinstance(b.terminator, Return):
            slot_ok(b.terminator.slot, where)
        if isinstance(b.terminator, SelectCont):
            slot_ok(b.terminator.cond, where)
        for t in refs(b.terminator):
            if t.target not in cp.blocks:
                raise InvalidProgram("%s continues to missing block %d" % (where, t.target))
            for s in t.sources():
                slot_ok(s, where)
            e = cp.entries.get(t.target)
            if e is None:
                if t.flow_in is not None or t.params:
                    raise InvalidProgram("%s passes arguments to non-entry block %d"
                                         % (where, t.target))
            else:
                if (t.flow_in is None) != (e.flow is None) or len(t.params) != len(e.params):
                    raise InvalidProgram("%s: template arity mismatch for block %d"
                                         % (where, t.target))
                for p, q in zip(t.params, e.params):
                    if (p is None) != (q is None):
                        raise InvalidProgram("%s: template arity mismatch for block %d"
                                             % (where, t.target))
        if b.group is not None and b.group not in cp.groups:
            raise InvalidProgram("%s in unknown loop group %d" % (where, b.group))
    if set(cp.handler_entry) != set(cp.cfg.event_handlers):
        raise InvalidProgram("handler table does not match the configured handlers")
    for h, bid in cp.handler_entry.items():
        if bid not in cp.blocks:
            raise InvalidProgram("handler %s has no entry block" % h)
    for isr in cp.interrupts.values():
        for h, _, _ in isr.enqueues:
            if h not in cp.handler_entry:
                raise InvalidProgram("interrupt %s posts to unknown handler %s" % (isr.name, h))
    return cp


# --- passes ----------------------------------------------------------------------


def _clone(cp):
    out = copy.copy(cp)
    out.blocks = {k: copy.deepcopy(v) for k, v in cp.blocks.items()}
    out.entries = dict(cp.entries)
    out.groups = dict(cp.groups)
    out.inits = dict(cp.inits)
    return out


def split_io(cp):
    """Give every IO call a block of its own."""
    cp = _clone(cp)
    nxt = max(cp.blocks) + 1
    for bid in sorted(cp.blocks):
        b = cp.blocks[bid]
        if not b.has_io or len(b.calls) == 1:
            continue
        sections, cur = [], []
        for c in b.calls:
            if c.is_io:
                if cur:
                    sections.append(cur)
                    cur = []
                sections.append([c])
            else:
                cur.append(c)
        if cur:
            sections.append(cur)
        ids = [bid] + list(range(nxt, nxt + len(sections) - 1))
        nxt += len(sections) - 1
        term = b.terminator
        for i, sec in enumerate(sections):
            last = i == len(sections) - 1
            t = term if last else PushCont([ContinuationTemplate(ids[i + 1])])
            note = "io" if sec[0].is_io else ("pre-io" if i == 0 else "post-io")
            if i == 0:
                b.calls, b.terminator, b.note = sec, t, note
            else:
                cp.blocks[ids[i]] = BasicBlock(ids[i], sec, t, b.owner, note, b.group)
    finalize(cp)
    validate(cp, after_split=True)
    return cp


def _predecessors(cp):
    preds = Counter()
    for b in cp.blocks.values():
        for t in refs(b.terminator):
            preds[t.target] += 1
    for bid in cp.handler_entry.values():
        preds[bid] += 1
    return preds


def _copies(cp, tmpl):
    """Template copies as move calls, or None when they cannot be sequential."""
    e = cp.entries.get(tmpl.target)
    if e is None:
        return []
    pairs = []
    if e.flow is not None:
        pairs.append((tmpl.flow_in, e.flow))
    pairs += [(s, d) for s, d in zip(tmpl.params, e.params) if d is not None]
    written = set()
    for s, d in pairs:
        if s in written:
            return None
        written.add(d)
    return [PrimitiveCall("move", s, [], d) for s, d in pairs]


def fuse_blocks(cp, cfg=None):
    """Merge straight-line block chains and inline small leaf callees."""
    cfg = cfg or cp.cfg
    cp = _clone(cp)
    changed = True
    while changed:
        changed = False
        preds = _predecessors(cp)
        for bid in sorted(cp.blocks):
            a = cp.blocks.get(bid)
            if a is None or a.has_io or not isinstance(a.terminator, PushCont):
                continue
            ts = a.terminator.templates
            if len(ts) == 1:
                b = cp.blocks[ts[0].target]
                if (b.id == a.id or preds[b.id] != 1 or b.has_io
                        or len(a.calls) + len(b.calls) > MAX_FUSED_CALLS):
                    continue
                moves = _copies(cp, ts[0])
                if moves is None:
                    continue
                a.calls = a.calls + moves + b.calls
                a.terminator = b.terminator
                del cp.blocks[b.id]
                cp.entries.pop(b.id, None)
                changed = True
                preds = _predecessors(cp)
            elif len(ts) >= 2:
                rt, ct = ts[-2], ts[-1]
                c, r = cp.blocks[ct.target], cp.blocks[rt.target]
                if (not isinstance(c.terminator, Return) or c.has_io or r.has_io
                        or c.id in (a.id, r.id) or r.id == a.id or preds[r.id] != 1
                        or len(c.calls) > MAX_LEAF_CALLS
                        or len(a.calls) + len(c.calls) + len(r.calls) > MAX_FUSED_CALLS):
                    continue
                if rt.flow_in is not None or rt.params or not r.calls:
                    continue
                first = r.calls[0]
                if first.callee != "move" or first.flow_in != FLOW:
                    continue
                rest = ts[:-2]
                if rest:
                    if isinstance(r.terminator, Return):
                        continue
                    if isinstance(r.terminator, PushCont):
                        term = PushCont(rest + list(r.terminator.templates))
                    else:
                        s = r.terminator
                        term = SelectCont(s.cond, s.then, s.else_, rest + list(s.rest))
                else:
                    term = r.terminator
                moves = _copies(cp, ct)
                if moves is None:
                    continue
                body = [copy.deepcopy(x) for x in c.calls]
                ret = PrimitiveCall("move", c.terminator.slot, [], first.result)
                a.calls = a.calls + moves + body + [ret] + r.calls[1:]
                a.terminator = term
                del cp.blocks[r.id]
                changed = True
                preds = _predecessors(cp)
        _drop_unreachable(cp)
    finalize(cp)
    validate(cp, after_split=True)
    return cp


def loop_optimize(cp, cfg=None):
    """Let loop bodies chain several iterations inside one transaction.

    A loop group is a strongly connected set of blocks plus the leaf blocks
    it calls.  At run time the engine keeps the transaction open while the
    next block on the stack belongs to the same group, up to
    ``loop_unroll`` times the group size; the undo region is sized for the
    union of the group's write sets.
    """
    cfg = cfg or cp.cfg
    cp = _clone(cp)
    g = nx.DiGraph()
    for b in cp.blocks.values():
        g.add_node(b.id)
        for t in refs(b.terminator):
            g.add_edge(b.id, t.target)
    sccs = [s for s in nx.strongly_connected_components(g)
            if len(s) > 1 or g.has_edge(next(iter(s)), next(iter(s)))]
    sccs.sort(key=min)
    gid = max(cp.groups, default=0)
    for s in sccs:
        if any(cp.blocks[b].has_io or cp.blocks[b].group is not None for b in s):
            continue
        members = set(s)
        for b in sorted(s):
            for t in refs(cp.blocks[b].terminator):
                tb = cp.blocks[t.target]
                if (t.target not in s and isinstance(tb.terminator, Return) and not tb.has_io
                        and tb.group is None):
                    members.add(t.target)
        gid += 1
        cp.groups[gid] = cfg.loop_unroll * len(s)
        for b in members:
            cp.blocks[b].group = gid
    finalize(cp)
    validate(cp, after_split=True)
    return cp


def compile_program(tp, cfg, defines=None):
    """The full pipeline used by the toolchain and the benchmarks."""
    cp = split_io(lower(tp, cfg, defines))
    if "BLOCK_FUSION" in cfg.optimizations:
        cp = fuse_blocks(cp, cfg)
    if "LOOP_OPT" in cfg.optimizations:
        cp = loop_optimize(cp, cfg)
    return cp


def compile_source(text, cfg, source_name="<input>", defines=None):
    return compile_program(ty.check_source(text, source_name), cfg, defines)


# --- listing ---------------------------------------------------------------------


def _tmpl_text(t, cp):
    e = cp.entries.get(t.target)
    args = []
    if e is not None:
        if e.flow is not None:
            args.append("%s=%s" % (e.flow, t.flow_in))
        args += ["%s=%s" % (d, s) for s, d in zip(t.params, e.params) if d is not None]
    return "%d(%s)" % (t.target, ", ".join(args))


def render_listing(cp):
    """Human-readable listing, one block per paragraph, stable ordering."""
    out = ["handlers: " + " ".join("%s=%d" % (h, cp.handler_entry[h])
                                   for h in cp.cfg.event_handlers)]
    out.append("regions: " + " ".join("%s=%d+%d" % (r, *cp.regions[r]) for r in cp.regions))
    out.append("undo_capacity: %d  registers: %d" % (cp.undo_capacity, cp.nreg))
    out.append("")
    for bid in sorted(cp.blocks):
        b = cp.blocks[bid]
        head = "block %d  %s" % (bid, b.owner)
        if b.note:
            head += "  [%s]" % b.note
        if b.group is not None:
            head += "  group=%d" % b.group
        out.append(head)
        for c in b.calls:
            s = "  %s%s %s" % ("io " if c.is_io else "", c.callee, " ".join(c.operands()))
            if c.result:
                s += " -> " + c.result
            if c.writes:
                s += "  writes " + ",".join(sorted(c.writes))
            out.append(s)
        t = b.terminator
        if isinstance(t, Return):
            out.append("  return " + t.slot)
        elif isinstance(t, PushCont):
            out.append("  push " + " ".join(_tmpl_text(x, cp) for x in t.templates))
        else:
            out.append("  select %s ? %s : %s%s" % (
                t.cond, _tmpl_text(t.then, cp), _tmpl_text(t.else_, cp),
                "  rest " + " ".join(_tmpl_text(x, cp) for x in t.rest) if t.rest else ""))
        out.append("  pages " + ",".join(str(p) for p in sorted(write_pages(cp, bid))))
        out.append("")
    for name in sorted(cp.interrupts):
        isr = cp.interrupts[name]
        out.append("interrupt %s  flow=%s:%s" % (name, isr.flow, isr.flow_type))
        for c in isr.calls:
            out.append("  %s %s%s" % (c.callee, " ".join(c.operands()),
                                      " -> " + c.result if c.result else ""))
        for h, v, t in isr.enqueues:
            out.append("  post %s %s:%s" % (h, v, t))
        out.append("")
    return "\n".join(out)
