"""Built-in primitive semantics.

Every runtime value is a raw 32-bit cell: Int is two's complement with
wrap-around, Float is IEEE binary32, Bool is 0/1, Void is 0, and arrays are
references packed as ``base | length << 16`` (word address of element 0 and
element count).

A primitive function takes the flow-in cell followed by the parameter cells.
Primitives with ``writes`` return ``(result, new_values)`` where
``new_values`` lines up with ``writes`` (0 = flow-in, k = k-th parameter).
When ``returns_flow`` is set the result *is* the flow-in object, so a chain
such as ``x.inc().inc()`` keeps operating on ``x``.
"""

import math
import struct
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import TrapDivideByZero

MASK = 0xFFFFFFFF
INT_MIN = -(1 << 31)
F32_NAN = 0x7FC00000

_pack_f = struct.Struct("<f")
_pack_I = struct.Struct("<I")


def f2c(x):
    """Python float -> binary32 cell (round to nearest, overflow to inf)."""
    try:
        return _pack_I.unpack(_pack_f.pack(x))[0]
    except OverflowError:
        return 0x7F800000 if x > 0 else 0xFF800000


def c2f(c):
    return _pack_f.unpack(_pack_I.pack(c & MASK))[0]


def i2c(x):
    return x & MASK


def c2i(c):
    c &= MASK
    return c - (1 << 32) if c & 0x80000000 else c


def b2c(b):
    return 1 if b else 0


def encode(value, type_name):
    """Python literal -> cell for a base type name."""
    if type_name == "Float":
        return f2c(float(value))
    if type_name == "Bool":
        return b2c(value)
    if type_name == "Void":
        return 0
    return i2c(int(value))


def decode(cell, type_name):
    if type_name == "Float":
        return c2f(cell)
    if type_name == "Bool":
        return bool(cell)
    if type_name == "Void":
        return None
    if type_name == "Int":
        return c2i(cell)
    return cell


def array_ref(base, length):
    return (base & 0xFFFF) | ((length & 0xFFFF) << 16)


# --- Int ---------------------------------------------------------------------


def _idiv(a, b):
    a, b = c2i(a), c2i(b)
    if b == 0:
        raise TrapDivideByZero()
    q = abs(a) // abs(b)
    return i2c(q if (a < 0) == (b < 0) else -q)


def _imod(a, b):
    a, b = c2i(a), c2i(b)
    if b == 0:
        raise TrapDivideByZero()
    r = abs(a) % abs(b)
    return i2c(r if a >= 0 else -r)


def _fdiv(a, b):
    x, y = c2f(a), c2f(b)
    if y == 0.0:
        if x == 0.0 or math.isnan(x):
            return F32_NAN
        neg = (math.copysign(1.0, x) < 0) != (math.copysign(1.0, y) < 0)
        return 0xFF800000 if neg else 0x7F800000
    return f2c(x / y)


def _fsqrt(a):
    x = c2f(a)
    if x < 0 or math.isnan(x):
        return F32_NAN
    return f2c(math.sqrt(x))


def _toint(a):
    x = c2f(a)
    if math.isnan(x):
        return 0
    if x >= 2147483647.0:
        return 0x7FFFFFFF
    if x <= -2147483648.0:
        return 0x80000000
    return i2c(int(x))


def _fcmp(op):
    def f(a, b):
        return b2c(op(c2f(a), c2f(b)))
    return f


def _icmp(op):
    def f(a, b):
        return b2c(op(c2i(a), c2i(b)))
    return f


def _farith(op):
    def f(a, b):
        return f2c(op(c2f(a), c2f(b)))
    return f


@dataclass(frozen=True)
class PrimSpec:
    name: str
    signature: str  # surface declaration, without the leading keyword
    fn: Optional[Callable] = None
    writes: tuple = ()
    returns_flow: bool = False
    io: Optional[str] = None  # "sensor" | "emit"
    special: Optional[str] = None  # apply | getAt | setAt | length | addEventQ | move
    sensor_type: Optional[str] = None

    @property
    def is_io(self):
        return self.io is not None


def _p(name, sig, fn=None, **kw):
    return PrimSpec(name, sig, fn, **kw)


_ENTRIES = [
    # control flow
    _p("select", "select(b: Bool)(t: %a, f: %a) -> %a", lambda b, t, f: t if b else f),
    _p("apply", "apply(a: %a)(func: %a -> %b) -> %b", special="apply"),
    _p("id", "id(x: %a) -> %a", lambda x: x, returns_flow=True),
    _p("ignore", "ignore(x: %a) -> Void", lambda x: 0),
    # object updates
    _p("set", "set(x: %a)(v: %a) -> %a [write x]", lambda x, v: (v, (v,)), writes=(0,),
       returns_flow=True),
    _p("inc", "inc(x: Int) -> Int [write x]",
       lambda x: ((x + 1) & MASK, ((x + 1) & MASK,)), writes=(0,), returns_flow=True),
    _p("dec", "dec(x: Int) -> Int [write x]",
       lambda x: ((x - 1) & MASK, ((x - 1) & MASK,)), writes=(0,), returns_flow=True),
    _p("postInc", "postInc(x: Int) -> Int [write x]",
       lambda x: (x, ((x + 1) & MASK,)), writes=(0,)),
    # arrays
    _p("getAt", "getAt(a: Array<%e, %n>)(i: Int) -> %e", special="getAt"),
    _p("setAt", "setAt(a: Array<%e, %n>)(i: Int, v: %e) -> Array<%e, %n> [write a]",
       special="setAt", writes=(0,), returns_flow=True),
    _p("length", "length(a: Array<%e, %n>) -> Int", lambda a: (a >> 16) & 0xFFFF),
    # Int arithmetic
    _p("add", "add(x: Int)(y: Int) -> Int", lambda a, b: (a + b) & MASK),
    _p("sub", "sub(x: Int)(y: Int) -> Int", lambda a, b: (a - b) & MASK),
    _p("mul", "mul(x: Int)(y: Int) -> Int", lambda a, b: (a * b) & MASK),
    _p("div", "div(x: Int)(y: Int) -> Int", _idiv),
    _p("mod", "mod(x: Int)(y: Int) -> Int", _imod),
    _p("neg", "neg(x: Int) -> Int", lambda a: (-a) & MASK),
    _p("band", "band(x: Int)(y: Int) -> Int", lambda a, b: a & b),
    _p("bor", "bor(x: Int)(y: Int) -> Int", lambda a, b: a | b),
    _p("bxor", "bxor(x: Int)(y: Int) -> Int", lambda a, b: a ^ b),
    _p("bnot", "bnot(x: Int) -> Int", lambda a: (~a) & MASK),
    _p("shl", "shl(x: Int)(n: Int) -> Int", lambda a, b: (a << (b & 31)) & MASK),
    _p("shr", "shr(x: Int)(n: Int) -> Int", lambda a, b: a >> (b & 31)),
    _p("sar", "sar(x: Int)(n: Int) -> Int", lambda a, b: i2c(c2i(a) >> (b & 31))),
    _p("eq", "eq(x: Int)(y: Int) -> Bool", lambda a, b: b2c(a == b)),
    _p("ne", "ne(x: Int)(y: Int) -> Bool", lambda a, b: b2c(a != b)),
    _p("lt", "lt(x: Int)(y: Int) -> Bool", _icmp(lambda a, b: a < b)),
    _p("le", "le(x: Int)(y: Int) -> Bool", _icmp(lambda a, b: a <= b)),
    _p("gt", "gt(x: Int)(y: Int) -> Bool", _icmp(lambda a, b: a > b)),
    _p("ge", "ge(x: Int)(y: Int) -> Bool", _icmp(lambda a, b: a >= b)),
    # Float arithmetic
    _p("fadd", "fadd(x: Float)(y: Float) -> Float", _farith(lambda a, b: a + b)),
    _p("fsub", "fsub(x: Float)(y: Float) -> Float", _farith(lambda a, b: a - b)),
    _p("fmul", "fmul(x: Float)(y: Float) -> Float", _farith(lambda a, b: a * b)),
    _p("fdiv", "fdiv(x: Float)(y: Float) -> Float", _fdiv),
    _p("fneg", "fneg(x: Float) -> Float", lambda a: a ^ 0x80000000),
    _p("fabs", "fabs(x: Float) -> Float", lambda a: a & 0x7FFFFFFF),
    _p("fsqrt", "fsqrt(x: Float) -> Float", _fsqrt),
    _p("feq", "feq(x: Float)(y: Float) -> Bool", _fcmp(lambda a, b: a == b)),
    _p("flt", "flt(x: Float)(y: Float) -> Bool", _fcmp(lambda a, b: a < b)),
    _p("fle", "fle(x: Float)(y: Float) -> Bool", _fcmp(lambda a, b: a <= b)),
    _p("fgt", "fgt(x: Float)(y: Float) -> Bool", _fcmp(lambda a, b: a > b)),
    _p("fge", "fge(x: Float)(y: Float) -> Bool", _fcmp(lambda a, b: a >= b)),
    _p("toFloat", "toFloat(x: Int) -> Float", lambda a: f2c(float(c2i(a)))),
    _p("toInt", "toInt(x: Float) -> Int", _toint),
    # Bool
    _p("and", "and(x: Bool)(y: Bool) -> Bool", lambda a, b: a & b),
    _p("or", "or(x: Bool)(y: Bool) -> Bool", lambda a, b: a | b),
    _p("xor", "xor(x: Bool)(y: Bool) -> Bool", lambda a, b: a ^ b),
    _p("not", "not(x: Bool) -> Bool", lambda a: a ^ 1),
    # IO
    _p("getTemp", "getTemp(x: Float) -> Float [IO] [write x]", writes=(0,), returns_flow=True,
       io="sensor", sensor_type="Float"),
    _p("readTemp", "readTemp(v: Void) -> Float [IO]", io="sensor", sensor_type="Float"),
    _p("readSensor", "readSensor(v: Void) -> Int [IO]", io="sensor", sensor_type="Int"),
    _p("emit", "emit(x: %a) -> %a [IO]", returns_flow=True, io="emit"),
    # event posting, interrupt handlers only
    _p("addEventQ", "addEventQ(e: %a)(handler: %a -> Void) -> Void", special="addEventQ"),
]

CATALOG = {e.name: e for e in _ENTRIES}

# internal copy used by the lowering for parameter passing and flow reads
MOVE = PrimSpec("move", "move(x: %a) -> %a", lambda x: x, special="move")


def lookup(name):
    if name == "move":
        return MOVE
    return CATALOG.get(name)


def sensor_cell(value, type_name):
    """Sensor sample (python number) as the cell an IO read returns."""
    if type_name == "Float":
        return f2c(float(value))
    return i2c(int(value))


def prelude_text():
    from importlib import resources
    return resources.files(__package__).joinpath("prelude.pl").read_text()
