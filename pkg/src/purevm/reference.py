"""Direct AST interpreter used as an independent oracle.

It shares nothing with the lowering or the engines except the primitive
functions on cells: no slots, no continuations, no NVM.  Variables are
mutable boxes; user functions get copies of their arguments, writing
primitives update the box they were handed, and flow-returning primitives
hand the same box on.  Event handlers run to completion in FIFO order,
interrupts fire whenever the queue is empty, and the sleep event is
delivered once when nothing else is left.
"""

import sys
import threading
from collections import deque
from dataclasses import dataclass, field

from . import catalog
from . import frontend as fe
from . import types as ty
from .errors import PureVMError, TrapIndexOutOfBounds


class Box:
    __slots__ = ("v",)

    def __init__(self, v):
        self.v = v

    def __repr__(self):
        return "Box(%r)" % (self.v,)


class ArrayObj:
    __slots__ = ("cells",)

    def __init__(self, cells):
        self.cells = list(cells)


@dataclass(frozen=True)
class Fn:
    name: str


@dataclass
class RefReport:
    outputs: list = field(default_factory=list)  # cells
    globals: dict = field(default_factory=dict)
    events: int = 0
    dropped: int = 0


def _lit(e):
    if isinstance(e, fe.IntLit):
        return catalog.encode(e.value, "Int")
    if isinstance(e, fe.FloatLit):
        return catalog.encode(e.value, "Float")
    if isinstance(e, fe.BoolLit):
        return catalog.encode(e.value, "Bool")
    return 0


class Reference:
    def __init__(self, tp, cfg, sensor=(), defines=None, interrupts=()):
        self.tp = tp
        self.cfg = cfg
        self.sensor = list(sensor)
        self.interrupts = list(interrupts)
        self.ioidx = 0
        self.report = RefReport()
        self.globals = {}
        defines = defines or {}
        for d in tp.source.declarations:
            if d.kind != fe.GLOBAL:
                continue
            t = tp.globals[d.name]
            init = defines.get(d.name, d.init)
            if isinstance(t, ty.Array):
                vals = [x.value if hasattr(x, "value") else x for x in (init or [])]
                cells = [catalog.encode(v, str(t.elem)) for v in vals]
                cells += [0] * (t.len.n - len(cells))
                self.globals[d.name] = Box(ArrayObj(cells))
            else:
                v = 0 if init is None else (init.value if hasattr(init, "value") else init)
                self.globals[d.name] = Box(catalog.encode(v, str(t)))

    # evaluation
    def atom(self, e, env):
        if isinstance(e, (fe.IntLit, fe.FloatLit, fe.BoolLit, fe.UnitLit)):
            return Box(_lit(e))
        if isinstance(e, fe.Chain):
            return self.chain(e, env)
        if e.ident in env:
            return env[e.ident]
        if e.ident in self.globals:
            return self.globals[e.ident]
        return Fn(e.ident)

    def chain(self, e, env):
        v = self.atom(e.head, env)
        for c in e.calls:
            args = [self.atom(a, env) for a in c.args]
            v = self.call(c.callee, v, args)
        return v

    def call(self, name, v, args):
        d = self.tp.decls[name]
        if d.kind == fe.PRIMITIVE:
            return self.prim(name, v, args)
        return self.user(d, v, args)

    def user(self, d, v, args):
        env = {}

        def by_value(x):
            return x if isinstance(x, Fn) else Box(x.v)

        if d.flow_in is not None:
            env[d.flow_in.name] = by_value(v)
        for p, a in zip(d.params, args):
            env[p.name] = by_value(a)
        out = env[d.flow_in.name] if d.flow_in is not None else Box(0)
        for st in d.body:
            out = self.chain(st.chain, env)
            if st.binding:
                env[st.binding] = out
        return out if isinstance(out, Fn) else Box(out.v)

    def apply(self, f, v):
        if not isinstance(f, Fn):
            raise PureVMError("apply needs a function value")
        d = self.tp.decls[f.name]
        if d.kind == fe.PRIMITIVE:
            spec = catalog.lookup(f.name)
            if spec.writes and isinstance(v, Box):
                v = Box(v.v)
            return self.prim(f.name, v, [])
        return self.user(d, v, [])

    def prim(self, name, v, args):
        spec = catalog.lookup(name)
        if name == "apply":
            return self.apply(args[0], v)
        if name == "select":
            pick = args[0] if v.v else args[1]
            return pick if isinstance(pick, Fn) else Box(pick.v)
        if name == "id":
            return v
        if name == "ignore":
            return Box(0)
        if name == "getAt":
            arr = v.v.cells
            i = catalog.c2i(args[0].v)
            if not 0 <= i < len(arr):
                raise TrapIndexOutOfBounds("array", i)
            return Box(arr[i])
        if name == "setAt":
            arr = v.v.cells
            i = catalog.c2i(args[0].v)
            if not 0 <= i < len(arr):
                raise TrapIndexOutOfBounds("array", i)
            arr[i] = args[1].v
            return v
        if name == "length":
            return Box(len(v.v.cells))
        if spec.io == "sensor":
            cell = self.read_sensor(self.ioidx, spec.sensor_type)
            self.ioidx += 1
            if spec.writes:
                v.v = cell
                return v
            return Box(cell)
        if spec.io == "emit":
            self.report.outputs.append(v.v)
            return v
        ops = [v] + list(args)
        res = spec.fn(*[o.v for o in ops])
        if spec.writes:
            res, news = res
            for w, nv in zip(spec.writes, news):
                ops[w].v = nv
        return v if spec.returns_flow else Box(res)

    def read_sensor(self, k, type_name):
        if not self.sensor:
            return catalog.sensor_cell(0, type_name)
        return catalog.sensor_cell(self.sensor[k % len(self.sensor)], type_name)

    # interrupt handlers: primitives plus addEventQ
    def isr(self, d, irq, ordinal, post):
        env = {}
        flow_t = ty.Base("Void")
        if d.flow_in is not None:
            flow_t = self.tp.schemes[d.name].flow
        is_void = str(flow_t) == "Void"
        if d.flow_in is not None:
            env[d.flow_in.name] = Box(0 if is_void or irq.value is None
                                      else catalog.encode(irq.value, str(flow_t)))

        def chain(e):
            v = atom(e.head)
            for c in e.calls:
                args = [atom(a) for a in c.args]
                spec = catalog.lookup(c.callee)
                if spec is not None and spec.special == "addEventQ":
                    post(args[0].name, v.v)
                    v = Box(0)
                elif spec is not None and spec.io == "sensor":
                    if is_void and irq.value is not None:
                        cell = catalog.sensor_cell(irq.value, spec.sensor_type)
                    else:
                        cell = self.read_sensor(ordinal, spec.sensor_type)
                    if spec.writes:
                        v.v = cell
                    else:
                        v = Box(cell)
                else:
                    v = self.prim(c.callee, v, args)
            return v

        def atom(e):
            if isinstance(e, fe.Chain):
                return chain(e)
            if isinstance(e, fe.Name) and e.ident in env:
                return env[e.ident]
            return self.atom(e, {})

        for st in d.body:
            v = chain(st.chain)
            if st.binding:
                env[st.binding] = v

    def run(self):
        cap = self.cfg.event_queue_capacity
        q = deque()
        rep = self.report

        def post(h, cell):
            if len(q) >= cap:
                rep.dropped += 1
                return
            q.append((h, cell))

        post("boot", 0)
        pos = 0
        slept = False
        while True:
            if q:
                h, cell = q.popleft()
                rep.events += 1
                self.user(self.tp.decls[h], Box(cell), [])
            elif pos < len(self.interrupts):
                irq = self.interrupts[pos]
                d = self.tp.decls.get(irq.name)
                if d is not None and d.kind == fe.INTERRUPT:
                    self.isr(d, irq, pos, post)
                else:
                    t = self.tp.schemes[irq.name].flow
                    post(irq.name, catalog.encode(irq.value or 0, str(t)))
                pos += 1
            elif not slept:
                slept = True
                post("sleep", 0)
            else:
                break
        for name, box in self.globals.items():
            t = self.tp.globals[name]
            if isinstance(t, ty.Array):
                rep.globals[name] = [catalog.decode(c, str(t.elem)) for c in box.v.cells]
            else:
                rep.globals[name] = catalog.decode(box.v, str(t))
        return rep


def run_reference(tp, cfg, sensor=(), defines=None, interrupts=()):
    """Loops are tail recursion, so the interpreter runs on a thread with a
    large stack and a raised recursion limit."""
    box = {}

    def work():
        try:
            box["rep"] = Reference(tp, cfg, sensor, defines, interrupts).run()
        except BaseException as e:  # re-raised on the caller's thread
            box["err"] = e

    old_limit = sys.getrecursionlimit()
    old_size = threading.stack_size()
    sys.setrecursionlimit(max(old_limit, 2_000_000))
    threading.stack_size(1 << 30)
    try:
        t = threading.Thread(target=work)
        t.start()
        t.join()
    finally:
        threading.stack_size(old_size)
        sys.setrecursionlimit(old_limit)
    if "err" in box:
        raise box["err"]
    return box["rep"]
