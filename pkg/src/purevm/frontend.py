"""Surface syntax: lexer, recursive-descent parser, pretty-printer and the
``.vmcfg`` reader.

Grammar (EBNF, version 1)::

    program   := decl*
    decl      := 'primitive' IDENT sig meta*
               | 'func' IDENT sig meta* block
               | 'event' IDENT '(' param ')' ('->' type)? block
               | 'interrupt' IDENT '(' param? ')' ('->' type)? block
               | 'global' IDENT ':' type ('=' init)?
    sig       := '(' param ')' ('(' [param (',' param)*] ')')? ('->' type)?
    param     := IDENT ':' type
    meta      := '[' ('IO' | 'builtin' | 'write' IDENT) ']'
    block     := '{' [stmt (';' stmt)* ';'?] '}'
    stmt      := 'let' IDENT '=' expr | expr
    expr      := atom ('.' IDENT '(' args ')')*
    atom      := literal | IDENT | IDENT '(' args ')' | '(' expr ')' | '(' ')'
    type      := atype ('->' type)?
    atype     := 'Int' | 'Float' | 'Bool' | 'Void' | TVAR
               | 'Array' '<' type ',' (INT | TVAR) '>' | '(' type ')'
    init      := literal | '[' [literal (',' literal)*] ']'

Declaration keywords are contextual: ``func`` is an ordinary identifier
inside a body, so ``let func = ...`` works.  A head call ``f(a)`` is sugar
for ``().f(a)`` (flow-in of type Void).  Comments start with ``//``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import ConfigError, DuplicateName, SourceSyntaxError

GRAMMAR_VERSION = 1

# --- AST -----------------------------------------------------------------------


@dataclass(frozen=True)
class Span:
    source: str
    line: int
    col: int


def _span():
    return field(default=None, compare=False, repr=False)


@dataclass
class TName:
    name: str  # Int | Float | Bool | Void
    span: Optional[Span] = _span()


@dataclass
class TVar:
    name: str  # without the leading %
    span: Optional[Span] = _span()


@dataclass
class TArrow:
    arg: "TypeExpr"
    res: "TypeExpr"
    span: Optional[Span] = _span()


@dataclass
class TArray:
    elem: "TypeExpr"
    length: Union[int, TVar]
    span: Optional[Span] = _span()


TypeExpr = Union[TName, TVar, TArrow, TArray]
BASE_TYPES = ("Int", "Float", "Bool", "Void")


@dataclass
class IntLit:
    value: int
    span: Optional[Span] = _span()
    ty: object = field(default=None, compare=False, repr=False)


@dataclass
class FloatLit:
    value: float
    span: Optional[Span] = _span()
    ty: object = field(default=None, compare=False, repr=False)


@dataclass
class BoolLit:
    value: bool
    span: Optional[Span] = _span()
    ty: object = field(default=None, compare=False, repr=False)


@dataclass
class UnitLit:
    span: Optional[Span] = _span()
    ty: object = field(default=None, compare=False, repr=False)


@dataclass
class Name:
    ident: str
    span: Optional[Span] = _span()
    ty: object = field(default=None, compare=False, repr=False)


@dataclass
class Call:
    callee: str
    args: list
    span: Optional[Span] = _span()
    ty: object = field(default=None, compare=False, repr=False)


@dataclass
class Chain:
    """``head.c1(...).c2(...)``; the value of element i is the flow-in of i+1."""

    head: object
    calls: list
    span: Optional[Span] = _span()
    ty: object = field(default=None, compare=False, repr=False)


Atom = Union[IntLit, FloatLit, BoolLit, UnitLit, Name, Chain]


@dataclass
class Stmt:
    chain: Chain
    binding: Optional[str] = None
    span: Optional[Span] = _span()


@dataclass
class Param:
    name: str
    type: TypeExpr
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Meta:
    kind: str  # IO | builtin | write
    target: Optional[str] = None


PRIMITIVE, FUNCTION, GLOBAL, EVENT, INTERRUPT = "primitive", "func", "global", "event", "interrupt"
DECL_KINDS = (PRIMITIVE, FUNCTION, GLOBAL, EVENT, INTERRUPT)


@dataclass
class Declaration:
    kind: str
    name: str
    params: list = field(default_factory=list)
    flow_in: Optional[Param] = None
    flow_out: Optional[TypeExpr] = None
    metadata: tuple = ()
    body: list = field(default_factory=list)
    gtype: Optional[TypeExpr] = None  # globals only
    init: object = None  # literal, list of literals, or None
    span: Optional[Span] = _span()

    @property
    def is_io(self):
        return any(m.kind == "IO" for m in self.metadata)

    @property
    def write_targets(self):
        return tuple(m.target for m in self.metadata if m.kind == "write")


@dataclass
class SourceProgram:
    declarations: list
    source_name: str = "<input>"

    def names(self):
        return [d.name for d in self.declarations]

    def get(self, name):
        for d in self.declarations:
            if d.name == name:
                return d
        return None


# --- lexer ---------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>//[^\n]*)
  | (?P<float>\d+\.\d+(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+)
  | (?P<int>0[xX][0-9a-fA-F]+|\d+)
  | (?P<tvar>%[A-Za-z_][A-Za-z_0-9]*)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<arrow>->)
  | (?P<punct>[(){}\[\]<>,:;.=\-])
    """,
    re.VERBOSE,
)


@dataclass
class Token:
    kind: str  # int float tvar ident punct eof
    text: str
    line: int
    col: int


def tokenize(text, source_name="<input>"):
    toks = []
    pos, line, col = 0, 1, 1
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise SourceSyntaxError("unexpected character %r" % text[pos], line, col,
                                    source_name=source_name)
        kind = m.lastgroup
        s = m.group()
        if kind == "nl":
            line += 1
            col = 1
        elif kind not in ("ws", "comment"):
            if kind == "arrow":
                kind = "punct"
            toks.append(Token(kind, s, line, col))
            col += len(s)
        else:
            col += len(s)
        pos = m.end()
    toks.append(Token("eof", "", line, col))
    return toks


def _int(text):
    return int(text, 16) if text[:2] in ("0x", "0X") else int(text)


# --- parser --------------------------------------------------------------------


class Parser:
    def __init__(self, text, source_name="<input>"):
        self.source_name = source_name
        self.toks = tokenize(text, source_name)
        self.i = 0

    # token helpers
    @property
    def tok(self):
        return self.toks[self.i]

    def peek(self, k=1):
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def span(self, tok=None):
        tok = tok or self.tok
        return Span(self.source_name, tok.line, tok.col)

    def error(self, msg, expected=(), tok=None):
        tok = tok or self.tok
        raise SourceSyntaxError(msg, tok.line, tok.col, expected, self.source_name)

    def at(self, text):
        t = self.tok
        return t.kind in ("punct", "ident") and t.text == text

    def accept(self, text):
        if self.at(text):
            self.i += 1
            return True
        return False

    def expect(self, text):
        if not self.at(text):
            got = self.tok.text or "end of input"
            self.error("unexpected %r" % got, (repr(text),))
        tok = self.tok
        self.i += 1
        return tok

    def ident(self, what="identifier"):
        t = self.tok
        if t.kind != "ident":
            self.error("unexpected %r" % (t.text or "end of input"), (what,))
        self.i += 1
        return t

    # declarations
    def program(self):
        decls = []
        seen = {}
        while self.tok.kind != "eof":
            d = self.declaration()
            if d.name in seen:
                raise DuplicateName(d.name, d.span.line, d.span.col, self.source_name)
            seen[d.name] = d
            decls.append(d)
        return SourceProgram(decls, self.source_name)

    def declaration(self):
        t = self.tok
        if t.kind != "ident" or t.text not in DECL_KINDS:
            self.error("unexpected %r" % (t.text or "end of input"),
                       tuple(repr(k) for k in DECL_KINDS))
        self.i += 1
        kind = t.text
        name = self.ident("declaration name").text
        sp = self.span(t)
        if kind == GLOBAL:
            self.expect(":")
            gtype = self.type_expr()
            init = None
            if self.accept("="):
                init = self.initializer()
            return Declaration(GLOBAL, name, gtype=gtype, init=init, span=sp)
        self.expect("(")
        flow_in = None
        if kind == INTERRUPT:
            if not self.at(")"):
                flow_in = self.param()
        else:
            flow_in = self.param()
        self.expect(")")
        params = []
        if kind in (PRIMITIVE, FUNCTION) and self.at("("):
            self.i += 1
            if not self.at(")"):
                params.append(self.param())
                while self.accept(","):
                    params.append(self.param())
            self.expect(")")
        elif kind in (EVENT, INTERRUPT) and self.at("("):
            self.error("%s handlers take exactly one flow-in object" % kind, ("'->'", "'{'"))
        flow_out = None
        if self.accept("->"):
            flow_out = self.type_expr()
        elif kind == PRIMITIVE:
            self.error("primitive declarations need a flow-out type", ("'->'",))
        meta = []
        while self.at("["):
            meta.append(self.meta(kind, flow_in, params))
        body = []
        if kind == PRIMITIVE:
            if self.at("{"):
                self.error("primitive bodies are not supported; semantics come from the catalog",
                           ("declaration",))
        else:
            body = self.block()
        return Declaration(kind, name, params=params, flow_in=flow_in, flow_out=flow_out,
                           metadata=tuple(meta), body=body, span=sp)

    def param(self):
        t = self.ident("parameter name")
        self.expect(":")
        return Param(t.text, self.type_expr(), self.span(t))

    def meta(self, kind, flow_in, params):
        start = self.expect("[")
        t = self.ident("metadata")
        if t.text == "IO":
            if kind != PRIMITIVE:
                self.error("IO metadata is only allowed on primitives", (), tok=t)
            m = Meta("IO")
        elif t.text == "builtin":
            if kind != PRIMITIVE:
                self.error("builtin metadata is only allowed on primitives", (), tok=t)
            m = Meta("builtin")
        elif t.text == "write":
            if kind not in (PRIMITIVE, FUNCTION):
                self.error("write metadata is not allowed on handlers", (), tok=t)
            tgt = self.ident("write target")
            names = [p.name for p in params] + ([flow_in.name] if flow_in else [])
            if tgt.text not in names:
                self.error("write target %r is not a parameter" % tgt.text,
                           tuple(sorted(names)), tok=tgt)
            m = Meta("write", tgt.text)
        else:
            self.error("unknown metadata %r" % t.text, ("IO", "builtin", "write"), tok=t)
        self.expect("]")
        del start
        return m

    def block(self):
        self.expect("{")
        stmts = []
        while not self.at("}"):
            stmts.append(self.statement())
            if not self.accept(";"):
                break
        self.expect("}")
        return stmts

    def statement(self):
        t = self.tok
        if t.kind == "ident" and t.text == "let":
            self.i += 1
            name = self.ident("binding name").text
            self.expect("=")
            return Stmt(self.expr(), name, self.span(t))
        return Stmt(self.expr(), None, self.span(t))

    # expressions
    def expr(self):
        start = self.tok
        head = self.atom()
        calls = []
        if isinstance(head, Call):
            calls.append(head)
            head = UnitLit(self.span(start))
        while self.at("."):
            self.i += 1
            t = self.ident("method name")
            calls.append(Call(t.text, self.args(), self.span(t)))
        return Chain(head, calls, self.span(start))

    def args(self):
        self.expect("(")
        out = []
        if not self.at(")"):
            out.append(self.expr())
            while self.accept(","):
                out.append(self.expr())
        self.expect(")")
        return out

    def atom(self):
        t = self.tok
        sp = self.span(t)
        if t.kind == "int":
            self.i += 1
            return IntLit(_int(t.text), sp)
        if t.kind == "float":
            self.i += 1
            return FloatLit(float(t.text), sp)
        if t.kind == "punct" and t.text == "-":
            nxt = self.peek()
            if nxt.kind in ("int", "float"):
                self.i += 2
                if nxt.kind == "int":
                    return IntLit(-_int(nxt.text), sp)
                return FloatLit(-float(nxt.text), sp)
            self.error("unexpected '-'", ("number",), tok=nxt)
        if t.kind == "ident":
            if t.text in ("true", "false"):
                self.i += 1
                return BoolLit(t.text == "true", sp)
            if t.text == "let":
                self.error("unexpected 'let'", ("expression",))
            self.i += 1
            if self.at("("):
                return Call(t.text, self.args(), sp)
            return Name(t.text, sp)
        if t.kind == "punct" and t.text == "(":
            self.i += 1
            if self.accept(")"):
                return UnitLit(sp)
            inner = self.expr()
            self.expect(")")
            return inner
        self.error("unexpected %r" % (t.text or "end of input"),
                   ("literal", "identifier", "'('"))

    # types
    def type_expr(self):
        start = self.tok
        a = self.atype()
        if self.accept("->"):
            return TArrow(a, self.type_expr(), self.span(start))
        return a

    def atype(self):
        t = self.tok
        sp = self.span(t)
        if t.kind == "tvar":
            self.i += 1
            return TVar(t.text[1:], sp)
        if t.kind == "ident" and t.text in BASE_TYPES:
            self.i += 1
            return TName(t.text, sp)
        if t.kind == "ident" and t.text == "Array":
            self.i += 1
            self.expect("<")
            elem = self.type_expr()
            self.expect(",")
            lt = self.tok
            if lt.kind == "int":
                self.i += 1
                n = _int(lt.text)
                if n <= 0:
                    self.error("array length must be positive", (), tok=lt)
                length = n
            elif lt.kind == "tvar":
                self.i += 1
                length = TVar(lt.text[1:], self.span(lt))
            else:
                self.error("unexpected %r" % (lt.text or "end of input"), ("array length",))
            self.expect(">")
            return TArray(elem, length, sp)
        if t.kind == "punct" and t.text == "(":
            self.i += 1
            inner = self.type_expr()
            self.expect(")")
            return inner
        self.error("unexpected %r" % (t.text or "end of input"),
                   ("type",) + tuple(BASE_TYPES) + ("Array", "%var"))

    def initializer(self):
        if self.accept("["):
            items = []
            if not self.at("]"):
                items.append(self.literal())
                while self.accept(","):
                    items.append(self.literal())
            self.expect("]")
            return items
        return self.literal()

    def literal(self):
        a = self.atom()
        if not isinstance(a, (IntLit, FloatLit, BoolLit)):
            self.error("initializers must be literals", ("literal",))
        return a


def parse(source, source_name="<input>"):
    """Parse source text into a :class:`SourceProgram`."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    return Parser(source, source_name).program()


def parse_expr(text):
    p = Parser(text)
    e = p.expr()
    if p.tok.kind != "eof":
        p.error("trailing input", ("end of input",))
    return e


def parse_type(text):
    p = Parser(text)
    t = p.type_expr()
    if p.tok.kind != "eof":
        p.error("trailing input", ("end of input",))
    return t


# --- pretty-printer ------------------------------------------------------------


def render_type(t):
    if isinstance(t, TName):
        return t.name
    if isinstance(t, TVar):
        return "%" + t.name
    if isinstance(t, TArrow):
        a = render_type(t.arg)
        if isinstance(t.arg, TArrow):
            a = "(" + a + ")"
        return "%s -> %s" % (a, render_type(t.res))
    if isinstance(t, TArray):
        n = t.length if isinstance(t.length, int) else "%" + t.length.name
        return "Array<%s, %s>" % (render_type(t.elem), n)
    raise TypeError(t)


def _render_float(v):
    s = repr(float(v))
    if "e" in s or "E" in s:
        if "." not in s.split("e")[0].split("E")[0]:
            mant, exp = re.split("[eE]", s)
            s = mant + ".0e" + exp
    if s in ("inf", "-inf", "nan"):
        raise ValueError("non-finite float literal")
    return s


def render_expr(e):
    if isinstance(e, IntLit):
        return str(e.value)
    if isinstance(e, FloatLit):
        return _render_float(e.value)
    if isinstance(e, BoolLit):
        return "true" if e.value else "false"
    if isinstance(e, UnitLit):
        return "()"
    if isinstance(e, Name):
        return e.ident
    if isinstance(e, Chain):
        calls = "".join(".%s(%s)" % (c.callee, ", ".join(render_expr(a) for a in c.args))
                        for c in e.calls)
        if isinstance(e.head, UnitLit) and e.calls:
            return calls[1:]
        if isinstance(e.head, Chain):
            return "(" + render_expr(e.head) + ")" + calls
        return render_expr(e.head) + calls
    raise TypeError(e)


def _render_param(p):
    return "%s: %s" % (p.name, render_type(p.type))


def _render_meta(m):
    if m.kind == "write":
        return "[write %s]" % m.target
    return "[%s]" % m.kind


def render_decl(d):
    if d.kind == GLOBAL:
        s = "global %s: %s" % (d.name, render_type(d.gtype))
        if d.init is not None:
            if isinstance(d.init, list):
                s += " = [%s]" % ", ".join(render_expr(x) for x in d.init)
            else:
                s += " = " + render_expr(d.init)
        return s
    s = "%s %s(%s)" % (d.kind, d.name, _render_param(d.flow_in) if d.flow_in else "")
    if d.kind in (PRIMITIVE, FUNCTION) and d.params:
        s += "(%s)" % ", ".join(_render_param(p) for p in d.params)
    if d.flow_out is not None:
        s += " -> " + render_type(d.flow_out)
    for m in d.metadata:
        s += " " + _render_meta(m)
    if d.kind == PRIMITIVE:
        return s
    if not d.body:
        return s + " {}"
    lines = []
    for st in d.body:
        e = render_expr(st.chain)
        lines.append("  let %s = %s" % (st.binding, e) if st.binding else "  " + e)
    return s + " {\n" + ";\n".join(lines) + "\n}"


def render(prog):
    """Pretty-print a program; ``parse(render(p)) == p``."""
    return "\n\n".join(render_decl(d) for d in prog.declarations) + ("\n" if prog.declarations else "")


# --- configuration -------------------------------------------------------------

PAGE_SIZES = (16, 32, 64, 128)
OPTIMIZATIONS = ("BLOCK_FUSION", "LOOP_OPT")
BACKENDS = ("REWINDING", "JUST_IN_TIME", "TEST")
MANDATORY_EVENTS = ("boot", "reboot", "sleep")


@dataclass(frozen=True)
class VmConfig:
    event_handlers: tuple = MANDATORY_EVENTS
    platform_name: str = "sim"
    nvm_size_bytes: int = 4096
    event_queue_capacity: int = 8
    page_size_bytes: int = 32
    optimizations: frozenset = frozenset()
    vm_backend: str = "REWINDING"
    loop_unroll: int = 8
    stack_depth: int = 32
    step_budget: int = 10 ** 8

    @property
    def page_count(self):
        return self.nvm_size_bytes // self.page_size_bytes

    @property
    def words_per_page(self):
        return self.page_size_bytes // 2

    def replace(self, **kw):
        import dataclasses
        cfg = dataclasses.replace(self, **kw)
        validate_config(cfg)
        return cfg


_INT_KEYS = {
    "nvm_size": "nvm_size_bytes",
    "queue_capacity": "event_queue_capacity",
    "page_size": "page_size_bytes",
    "loop_unroll": "loop_unroll",
    "stack_depth": "stack_depth",
    "step_budget": "step_budget",
}
CONFIG_KEYS = ("events", "platform", "backend", "optimize") + tuple(_INT_KEYS)


def _comma_list(value):
    return [v.strip() for v in value.split(",") if v.strip()]


def validate_config(cfg):
    for name in MANDATORY_EVENTS:
        if name not in cfg.event_handlers:
            raise ConfigError("events", "missing mandatory handler: %s" % name)
    if len(set(cfg.event_handlers)) != len(cfg.event_handlers):
        raise ConfigError("events", "duplicate handler")
    for key, attr in _INT_KEYS.items():
        if getattr(cfg, attr) <= 0:
            raise ConfigError(key, "must be a positive integer")
    if cfg.page_size_bytes not in PAGE_SIZES:
        raise ConfigError("page_size", "must be one of %s" % (PAGE_SIZES,))
    if cfg.nvm_size_bytes % cfg.page_size_bytes:
        raise ConfigError("page_size", "does not divide nvm_size")
    if cfg.vm_backend not in BACKENDS:
        raise ConfigError("backend", "unknown backend %r" % cfg.vm_backend)
    for o in cfg.optimizations:
        if o not in OPTIMIZATIONS:
            raise ConfigError("optimize", "unknown optimization %r" % o)
    return cfg


def parse_config(text):
    """Read ``key = value`` lines into a :class:`VmConfig`."""
    vals = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, "expected 'key = value'", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(key, "unknown key", lineno)
        if key in seen:
            raise ConfigError(key, "duplicate key", lineno)
        seen.add(key)
        if key == "events":
            evs = _comma_list(value)
            for e in evs:
                if not re.fullmatch(r"[A-Za-z_][A-Za-z_0-9]*", e):
                    raise ConfigError(key, "bad handler name %r" % e, lineno)
            vals["event_handlers"] = tuple(evs)
        elif key == "platform":
            if not value:
                raise ConfigError(key, "empty platform name", lineno)
            vals["platform_name"] = value
        elif key == "backend":
            if value.upper() not in BACKENDS:
                raise ConfigError(key, "unknown backend %r" % value, lineno)
            vals["vm_backend"] = value.upper()
        elif key == "optimize":
            opts = [o.upper() for o in _comma_list(value)]
            if opts == ["NONE"]:
                opts = []
            for o in opts:
                if o not in OPTIMIZATIONS:
                    raise ConfigError(key, "unknown optimization %r" % o, lineno)
            vals["optimizations"] = frozenset(opts)
        else:
            try:
                n = int(value, 0)
            except ValueError:
                raise ConfigError(key, "not an integer: %r" % value, lineno) from None
            if n <= 0:
                raise ConfigError(key, "must be a positive integer", lineno)
            vals[_INT_KEYS[key]] = n
    vals.setdefault("event_handlers", ())
    return validate_config(VmConfig(**vals))


def render_config(cfg):
    lines = [
        "events = " + ", ".join(cfg.event_handlers),
        "platform = " + cfg.platform_name,
        "nvm_size = %d" % cfg.nvm_size_bytes,
        "queue_capacity = %d" % cfg.event_queue_capacity,
        "page_size = %d" % cfg.page_size_bytes,
        "optimize = " + (", ".join(o for o in OPTIMIZATIONS if o in cfg.optimizations) or "none"),
        "backend = " + cfg.vm_backend,
        "loop_unroll = %d" % cfg.loop_unroll,
        "stack_depth = %d" % cfg.stack_depth,
        "step_budget = %d" % cfg.step_budget,
    ]
    return "\n".join(lines) + "\n"
