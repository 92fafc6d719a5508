"""Type terms, unification and inference over the surface AST.

Top-level declarations carry annotated signatures which are generalized
over their ``%var`` names; every use site instantiates fresh variables.
Inside a declaration's own body its annotation variables are rigid, so a
body cannot silently specialize its declared polymorphism.  A function may
omit its flow-out type, in which case it is inferred (mutually recursive
groups are handled together, monomorphically).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Union

import networkx as nx

from . import catalog
from . import frontend as fe
from .errors import (DuplicateName, NonGroundHandler, OccursCheck, TypeCheckError,
                     TypeMismatch, UnboundName)

# --- terms ---------------------------------------------------------------------


@dataclass(frozen=True)
class Base:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Var:
    id: object

    def __str__(self):
        return "%" + (self.id if isinstance(self.id, str) else "t%d" % self.id)


@dataclass(frozen=True)
class Rigid:
    """An annotation variable while checking its own declaration."""

    name: str
    owner: str = ""

    def __str__(self):
        return "%" + self.name


@dataclass(frozen=True)
class Nat:
    n: int

    def __str__(self):
        return str(self.n)


@dataclass(frozen=True)
class Arrow:
    arg: object
    res: object

    def __str__(self):
        a = str(self.arg)
        if isinstance(self.arg, Arrow):
            a = "(" + a + ")"
        return "%s -> %s" % (a, self.res)


@dataclass(frozen=True)
class Array:
    elem: object
    len: object  # Nat | Var | Rigid

    def __str__(self):
        return "Array<%s, %s>" % (self.elem, self.len)


Term = Union[Base, Var, Rigid, Nat, Arrow, Array]
INT, FLOAT, BOOL, VOID = Base("Int"), Base("Float"), Base("Bool"), Base("Void")


def free_vars(t, acc=None):
    acc = [] if acc is None else acc
    if isinstance(t, Var):
        if t not in acc:
            acc.append(t)
    elif isinstance(t, Arrow):
        free_vars(t.arg, acc)
        free_vars(t.res, acc)
    elif isinstance(t, Array):
        free_vars(t.elem, acc)
        free_vars(t.len, acc)
    return acc


def has_vars(t):
    if isinstance(t, (Var, Rigid)):
        return True
    if isinstance(t, Arrow):
        return has_vars(t.arg) or has_vars(t.res)
    if isinstance(t, Array):
        return has_vars(t.elem) or has_vars(t.len)
    return False


def occurs(v, t):
    if t == v:
        return True
    if isinstance(t, Arrow):
        return occurs(v, t.arg) or occurs(v, t.res)
    if isinstance(t, Array):
        return occurs(v, t.elem) or occurs(v, t.len)
    return False


def _subst(t, b):
    if isinstance(t, Var):
        return b.get(t, t)
    if isinstance(t, Arrow):
        return Arrow(_subst(t.arg, b), _subst(t.res, b))
    if isinstance(t, Array):
        return Array(_subst(t.elem, b), _subst(t.len, b))
    return t


class Substitution:
    """Idempotent map from variables to terms."""

    def __init__(self, bindings=None):
        self.bindings = dict(bindings or {})

    def apply(self, t):
        return _subst(t, self.bindings) if self.bindings else t

    def copy(self):
        return Substitution(self.bindings)

    def bind(self, v, t):
        t = self.apply(t)
        if t == v:
            return
        if occurs(v, t):
            raise OccursCheck(v, t)
        one = {v: t}
        for k in self.bindings:
            self.bindings[k] = _subst(self.bindings[k], one)
        self.bindings[v] = t

    def __eq__(self, other):
        return isinstance(other, Substitution) and self.bindings == other.bindings

    def __repr__(self):
        inner = ", ".join("%s: %s" % (k, v) for k, v in sorted(self.bindings.items(), key=str))
        return "{" + inner + "}"


def _unify_into(a, b, s, span=None, top=None):
    a, b = s.apply(a), s.apply(b)
    if a == b:
        return
    top = top or (a, b)
    try:
        if isinstance(a, Var):
            s.bind(a, b)
            return
        if isinstance(b, Var):
            s.bind(b, a)
            return
    except OccursCheck as e:
        raise OccursCheck(e.var, e.term, span) from None
    if isinstance(a, Arrow) and isinstance(b, Arrow):
        _unify_into(a.arg, b.arg, s, span, top)
        _unify_into(a.res, b.res, s, span, top)
        return
    if isinstance(a, Array) and isinstance(b, Array):
        _unify_into(a.elem, b.elem, s, span, top)
        _unify_into(a.len, b.len, s, span, top)
        return
    raise TypeMismatch(s.apply(top[0]), s.apply(top[1]), span)


def unify(a, b, s=None):
    """Return a substitution extending ``s`` that makes ``a`` and ``b`` equal."""
    out = Substitution() if s is None else s.copy()
    _unify_into(a, b, out)
    return out


# --- schemes -------------------------------------------------------------------


@dataclass(frozen=True)
class Scheme:
    """Generalized declaration signature ``flow -> params -> out``."""

    vars: tuple
    flow: object
    params: tuple
    out: object
    flow_name: str = "x"
    param_names: tuple = ()

    def as_value(self):
        return Arrow(self.flow, self.out)


_counter = itertools.count(1)


def fresh():
    return Var(next(_counter))


def instantiate(sc):
    if not sc.vars:
        return sc.flow, sc.params, sc.out
    m = {v: fresh() for v in sc.vars}
    return _subst(sc.flow, m), tuple(_subst(p, m) for p in sc.params), _subst(sc.out, m)


def canonical(terms):
    """Rename variables in order of first appearance to %a, %b, ..."""
    order = []
    for t in terms:
        free_vars(t, order)
    names = {}
    for i, v in enumerate(order):
        names[v] = Var(_letter(i))
    return [_subst(t, names) for t in terms]


def _letter(i):
    s = ""
    while True:
        s = chr(ord("a") + i % 26) + s
        i = i // 26 - 1
        if i < 0:
            return s


def from_texpr(t, varmap, rigid_owner=None):
    """Surface type -> term; ``varmap`` collects %name variables."""
    if isinstance(t, fe.TName):
        return Base(t.name)
    if isinstance(t, fe.TVar):
        if t.name not in varmap:
            varmap[t.name] = Rigid(t.name, rigid_owner) if rigid_owner is not None else Var(t.name)
        return varmap[t.name]
    if isinstance(t, fe.TArrow):
        return Arrow(from_texpr(t.arg, varmap, rigid_owner), from_texpr(t.res, varmap, rigid_owner))
    if isinstance(t, fe.TArray):
        n = t.length
        ln = Nat(n) if isinstance(n, int) else from_texpr(n, varmap, rigid_owner)
        return Array(from_texpr(t.elem, varmap, rigid_owner), ln)
    raise TypeError(t)


def base_name(t):
    """'Int' | 'Float' | 'Bool' | 'Void' | 'Array' | 'Arrow' | None."""
    if isinstance(t, Base):
        return t.name
    if isinstance(t, Array):
        return "Array"
    if isinstance(t, Arrow):
        return "Arrow"
    return None


# --- typed program -------------------------------------------------------------


@dataclass
class TypedProgram:
    source: fe.SourceProgram  # merged: prelude (unshadowed) then user declarations
    schemes: dict  # name -> Scheme for primitives, functions, handlers
    globals: dict  # name -> term
    write_sets: dict  # name -> frozenset of object names
    user_names: list = field(default_factory=list)
    decls: dict = field(default_factory=dict)

    def decl(self, name):
        return self.decls[name]

    def signature(self, name):
        return render_signature(self.decls[name], self)


def render_signature(d, tp):
    if d.kind == fe.GLOBAL:
        (t,) = canonical([tp.globals[d.name]])
        return "global %s: %s" % (d.name, t)
    sc = tp.schemes[d.name]
    terms = canonical([sc.flow] + list(sc.params) + [sc.out])
    flow, params, out = terms[0], terms[1:-1], terms[-1]
    s = "%s %s(%s: %s)" % (d.kind, d.name, sc.flow_name, flow)
    if d.kind in (fe.PRIMITIVE, fe.FUNCTION) and params:
        s += "(%s)" % ", ".join("%s: %s" % (n, t) for n, t in zip(sc.param_names, params))
    s += " -> %s" % out
    for m in d.metadata:
        if m.kind == "IO":
            s += " [IO]"
        elif m.kind == "write":
            s += " [write %s]" % m.target
    return s


# --- inference -----------------------------------------------------------------


def _calls_in(e, out):
    if isinstance(e, fe.Chain):
        _calls_in(e.head, out)
        for c in e.calls:
            out.append(c.callee)
            for a in c.args:
                _calls_in(a, out)
    return out


def _names_in(e, out):
    if isinstance(e, fe.Name):
        out.append(e.ident)
    elif isinstance(e, fe.Chain):
        _names_in(e.head, out)
        for c in e.calls:
            for a in c.args:
                _names_in(a, out)
    return out


class _Checker:
    def __init__(self, prog):
        self.prog = prog
        self.decls = {d.name: d for d in prog.declarations}
        self.s = Substitution()
        self.schemes = {}
        self.globals = {}
        self.mono = {}  # name -> (flow, params, out) while its group is being checked

    def scheme_of(self, d, out_override=None):
        vm = {}
        flow = from_texpr(d.flow_in.type, vm) if d.flow_in else VOID
        params = tuple(from_texpr(p.type, vm) for p in d.params)
        if out_override is not None:
            out = out_override
        elif d.flow_out is not None:
            out = from_texpr(d.flow_out, vm)
        else:
            out = VOID
        fv = free_vars(flow)
        for p in params:
            free_vars(p, fv)
        free_vars(out, fv)
        return Scheme(tuple(fv), flow, params, out,
                      d.flow_in.name if d.flow_in else "v",
                      tuple(p.name for p in d.params))

    def run(self):
        prog = self.prog
        for d in prog.declarations:
            if d.kind == fe.GLOBAL:
                t = from_texpr(d.gtype, {})
                if has_vars(t):
                    raise TypeCheckError("global %r must have a ground type" % d.name, d.span)
                if isinstance(t, Arrow):
                    raise TypeCheckError("global %r cannot hold a function" % d.name, d.span)
                self.globals[d.name] = t
                self.check_init(d, t)
        pending = []
        for d in prog.declarations:
            if d.kind == fe.PRIMITIVE:
                self.schemes[d.name] = self.scheme_of(d)
            elif d.kind in (fe.EVENT, fe.INTERRUPT):
                sc = self.scheme_of(d)
                if d.flow_out is not None and from_texpr(d.flow_out, {}) != VOID:
                    raise TypeMismatch(from_texpr(d.flow_out, {}), VOID, d.flow_out.span or d.span,
                                       "handler %r must return Void" % d.name)
                if has_vars(sc.flow):
                    raise NonGroundHandler(d.name, sc.flow, d.flow_in.span if d.flow_in else d.span)
                self.schemes[d.name] = sc
            elif d.kind == fe.FUNCTION:
                if d.flow_out is not None:
                    self.schemes[d.name] = self.scheme_of(d)
                else:
                    pending.append(d)
        # functions with inferred flow-out, in dependency order
        g = nx.DiGraph()
        for d in pending:
            g.add_node(d.name)
        pend = {d.name for d in pending}
        for d in pending:
            for st in d.body:
                for c in _calls_in(st.chain, []) + _names_in(st.chain, []):
                    if c in pend:
                        g.add_edge(d.name, c)
        cond = nx.condensation(g)
        for comp in reversed(list(nx.topological_sort(cond))):
            members = sorted(cond.nodes[comp]["members"], key=lambda n: self.prog.names().index(n))
            self.infer_group([self.decls[n] for n in members])
        for d in prog.declarations:
            if d.kind in (fe.FUNCTION, fe.EVENT, fe.INTERRUPT) and d.name not in self.done:
                self.check_body(d)

    done = frozenset()

    def check_init(self, d, t):
        if d.init is None:
            return
        if isinstance(d.init, list):
            if not isinstance(t, Array):
                raise TypeMismatch(t, "array literal", d.span,
                                   "array initializer for non-array global %r" % d.name)
            if len(d.init) > t.len.n:
                raise TypeCheckError("too many initializers for %r" % d.name, d.span)
            for x in d.init:
                self.expect_literal(x, t.elem)
        else:
            if isinstance(t, Array):
                raise TypeMismatch(t, self.lit_type(d.init), d.init.span)
            self.expect_literal(d.init, t)

    def lit_type(self, x):
        return {fe.IntLit: INT, fe.FloatLit: FLOAT, fe.BoolLit: BOOL}[type(x)]

    def expect_literal(self, x, t):
        lt = self.lit_type(x)
        if lt != t:
            raise TypeMismatch(t, lt, x.span)
        x.ty = lt

    def infer_group(self, decls):
        self.s = Substitution()
        for d in decls:
            vm = {}
            flow = from_texpr(d.flow_in.type, vm, d.name)
            params = tuple(from_texpr(p.type, vm, d.name) for p in d.params)
            self.mono[d.name] = (flow, params, fresh(), vm)
        for d in decls:
            flow, params, out, vm = self.mono[d.name]
            self.check_body(d, (flow, params, out, vm))
        for d in decls:
            for st in d.body:
                _annotate(st.chain, self.s)
        for d in decls:
            flow, params, out, vm = self.mono.pop(d.name)
            out = self.s.apply(out)
            # rigid annotation vars become quantified named vars again
            back = {}
            terms = [self._unrigid(t, back) for t in (flow,) + params + (out,)]
            fv = []
            for t in terms:
                free_vars(t, fv)
            self.schemes[d.name] = Scheme(tuple(fv), terms[0], tuple(terms[1:-1]), terms[-1],
                                          d.flow_in.name, tuple(p.name for p in d.params))
        self.done = self.done | {d.name for d in decls}

    def _unrigid(self, t, back):
        if isinstance(t, Rigid):
            return back.setdefault(t, Var(t.name))
        if isinstance(t, Arrow):
            return Arrow(self._unrigid(t.arg, back), self._unrigid(t.res, back))
        if isinstance(t, Array):
            return Array(self._unrigid(t.elem, back), self._unrigid(t.len, back))
        return t

    def check_body(self, d, mono=None):
        if mono is None:
            self.s = Substitution()
            vm = {}
            flow = from_texpr(d.flow_in.type, vm, d.name) if d.flow_in else VOID
            params = tuple(from_texpr(p.type, vm, d.name) for p in d.params)
            out = from_texpr(d.flow_out, vm, d.name) if d.flow_out is not None else VOID
        else:
            flow, params, out, vm = mono
        env = {}
        if d.flow_in:
            env[d.flow_in.name] = flow
        for p, t in zip(d.params, params):
            if p.name in env:
                raise DuplicateName(p.name, p.span.line, p.span.col, p.span.source)
            env[p.name] = t
        self.cur = d
        t = flow
        span = d.span
        for st in d.body:
            t = self.infer_chain(st.chain, env)
            span = st.chain.span
            if st.binding:
                env[st.binding] = t
        _unify_into(t, out, self.s, span)
        if mono is None:
            for st in d.body:
                _annotate(st.chain, self.s)
        self.done = self.done | {d.name}

    def lookup_callable(self, name, span):
        if name in self.mono:
            flow, params, out, _ = self.mono[name]
            return flow, params, out
        if name in self.schemes:
            d = self.decls[name]
            if d.kind == fe.INTERRUPT:
                raise TypeCheckError("interrupt handler %r cannot be called" % name, span)
            return instantiate(self.schemes[name])
        if name in self.globals:
            raise TypeCheckError("%r is a global object, not a function" % name, span)
        raise UnboundName(name, span)

    def infer_atom(self, e, env):
        if isinstance(e, fe.IntLit):
            t = INT
        elif isinstance(e, fe.FloatLit):
            t = FLOAT
        elif isinstance(e, fe.BoolLit):
            t = BOOL
        elif isinstance(e, fe.UnitLit):
            t = VOID
        elif isinstance(e, fe.Name):
            t = self.infer_name(e, env)
        elif isinstance(e, fe.Chain):
            t = self.infer_chain(e, env)
        else:
            raise TypeError(e)
        e.ty = t
        return t

    def infer_name(self, e, env):
        n = e.ident
        if n in env:
            return env[n]
        if n in self.globals:
            return self.globals[n]
        if n in self.mono or n in self.schemes:
            d = self.decls[n]
            if d.kind == fe.INTERRUPT:
                raise TypeCheckError("interrupt handler %r is not a value" % n, e.span)
            flow, params, out = self.lookup_callable(n, e.span)
            if params:
                raise TypeCheckError("%r takes parameters and cannot be used as a value" % n,
                                     e.span)
            return Arrow(flow, out)
        raise UnboundName(n, e.span)

    def infer_chain(self, e, env):
        t = self.infer_atom(e.head, env)
        for c in e.calls:
            if c.callee in env:
                raise TypeCheckError("%r is a local object; use apply to call it" % c.callee,
                                     c.span)
            flow, params, out = self.lookup_callable(c.callee, c.span)
            try:
                _unify_into(t, flow, self.s, c.span)
            except TypeMismatch as err:
                raise TypeMismatch(err.a, err.b, c.span,
                                   "flow-in of %s: expected %s, got %s"
                                   % (c.callee, self.s.apply(flow), self.s.apply(t))) from None
            if len(c.args) != len(params):
                raise TypeCheckError("%s expects %d argument(s), got %d"
                                     % (c.callee, len(params), len(c.args)), c.span)
            for a, pt in zip(c.args, params):
                at = self.infer_atom(a, env)
                try:
                    _unify_into(at, pt, self.s, a.span)
                except TypeMismatch as err:
                    raise TypeMismatch(err.a, err.b, a.span,
                                       "argument of %s: expected %s, got %s"
                                       % (c.callee, self.s.apply(pt), self.s.apply(at))) from None
            c.ty = out
            t = out
        e.ty = t
        return t


def _annotate(e, s):
    if e is None:
        return
    if getattr(e, "ty", None) is not None:
        e.ty = s.apply(e.ty)
    if isinstance(e, fe.Chain):
        _annotate(e.head, s)
        for c in e.calls:
            c.ty = s.apply(c.ty) if c.ty is not None else None
            for a in c.args:
                _annotate(a, s)


def merge_prelude(prog, prelude=None):
    """Prelude declarations not shadowed by the user, followed by the user's."""
    if prelude is None:
        prelude = fe.parse(catalog.prelude_text(), "<prelude>")
    user = set(prog.names())
    decls = [d for d in prelude.declarations if d.name not in user] + list(prog.declarations)
    return fe.SourceProgram(decls, prog.source_name)


def infer_program(prog, use_prelude=True):
    """Type-check ``prog``; returns a :class:`TypedProgram`."""
    merged = merge_prelude(prog) if use_prelude else prog
    ck = _Checker(merged)
    ck.run()
    tp = TypedProgram(merged, ck.schemes, ck.globals, {}, [d.name for d in prog.declarations],
                      {d.name: d for d in merged.declarations})
    tp.write_sets = compute_write_sets(tp)
    return tp


# --- write sets ----------------------------------------------------------------


def _identity(e, aliases, tp, local):
    """Static object an expression denotes (a global or local name) or None."""
    if isinstance(e, fe.Name):
        if e.ident in aliases:
            return aliases[e.ident]
        if e.ident in local or e.ident in tp.globals:
            return e.ident
        return None
    if isinstance(e, fe.Chain):
        cur = _identity(e.head, aliases, tp, local)
        for c in e.calls:
            d = tp.decls.get(c.callee)
            spec = catalog.lookup(c.callee) if d is not None and d.kind == fe.PRIMITIVE else None
            cur = cur if (spec is not None and spec.returns_flow) else None
        return cur
    return None


def _writes_of_chain(e, aliases, tp, local, ws, out):
    if not isinstance(e, fe.Chain):
        return
    _writes_of_chain(e.head, aliases, tp, local, ws, out)
    cur = _identity(e.head, aliases, tp, local)
    for c in e.calls:
        for a in c.args:
            _writes_of_chain(a, aliases, tp, local, ws, out)
        d = tp.decls.get(c.callee)
        if d is None:
            cur = None
            continue
        if d.kind == fe.PRIMITIVE:
            names = [d.flow_in.name] + [p.name for p in d.params]
            targets = [cur] + [_identity(a, aliases, tp, local) for a in c.args]
            for w in d.write_targets:
                obj = targets[names.index(w)]
                if obj is not None:
                    out.add(obj)
            spec = catalog.lookup(c.callee)
            cur = cur if (spec is not None and spec.returns_flow) else None
        else:
            # user functions receive copies; only their global effects escape
            out.update(x for x in ws.get(c.callee, ()) if x in tp.globals)
            cur = None


def compute_write_sets(tp):
    ws = {}
    for d in tp.source.declarations:
        if d.kind == fe.PRIMITIVE:
            ws[d.name] = frozenset(d.write_targets)
        elif d.kind != fe.GLOBAL:
            ws[d.name] = frozenset(d.write_targets)
    changed = True
    while changed:
        changed = False
        for d in tp.source.declarations:
            if d.kind not in (fe.FUNCTION, fe.EVENT, fe.INTERRUPT):
                continue
            local = set(p.name for p in d.params)
            if d.flow_in:
                local.add(d.flow_in.name)
            aliases = {}
            out = set(ws[d.name])
            for st in d.body:
                _writes_of_chain(st.chain, aliases, tp, local, ws, out)
                if st.binding:
                    ident = _identity(st.chain, aliases, tp, local)
                    if ident is not None:
                        aliases[st.binding] = ident
                    else:
                        aliases.pop(st.binding, None)
                        local.add(st.binding)
            # locals bound by let are not part of the interface
            out = frozenset(x for x in out
                            if x in tp.globals or x in {p.name for p in d.params}
                            or (d.flow_in is not None and x == d.flow_in.name))
            if out != ws[d.name]:
                ws[d.name] = out
                changed = True
    return ws


def check_source(text, source_name="<input>", use_prelude=True):
    return infer_program(fe.parse(text, source_name), use_prelude)
