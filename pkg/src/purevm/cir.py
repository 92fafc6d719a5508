"""Binary container for compiled continuation programs.

Layout: magic ``CIR1``, u16 format version, u16 section count, then
sections of (4-byte tag, u32 length, payload).  ``META`` holds a small JSON
header, ``PROG`` the program as tagged JSON.  All integers little-endian.
"""

import json
import struct

from . import frontend as fe
from . import lowering as lw
from .errors import PureVMError

MAGIC = b"CIR1"
VERSION = 1

_DATACLASSES = {c.__name__: c for c in (
    lw.PrimitiveCall, lw.ContinuationTemplate, lw.Return, lw.PushCont, lw.SelectCont,
    lw.BasicBlock, lw.Entry, lw.IsrProgram, lw.ContinuationProgram, fe.VmConfig)}


class CirFormatError(PureVMError):
    pass


def _enc(x):
    if x is None or isinstance(x, (bool, int, float, str)):
        return x
    if isinstance(x, tuple):
        return {"t": [_enc(v) for v in x]}
    if isinstance(x, list):
        return [_enc(v) for v in x]
    if isinstance(x, (set, frozenset)):
        return {"s": [_enc(v) for v in sorted(x, key=repr)],
                "f": isinstance(x, frozenset)}
    if isinstance(x, dict):
        return {"d": [[_enc(k), _enc(v)] for k, v in x.items()]}
    name = type(x).__name__
    if name in _DATACLASSES:
        return {"c": name, "v": {k: _enc(v) for k, v in vars(x).items()}}
    raise CirFormatError("cannot serialize %s" % name)


def _dec(x):
    if not isinstance(x, (list, dict)):
        return x
    if isinstance(x, list):
        return [_dec(v) for v in x]
    if "t" in x:
        return tuple(_dec(v) for v in x["t"])
    if "s" in x:
        vals = [_dec(v) for v in x["s"]]
        return frozenset(vals) if x["f"] else set(vals)
    if "d" in x:
        return {_dec(k): _dec(v) for k, v in x["d"]}
    cls = _DATACLASSES.get(x.get("c"))
    if cls is None:
        raise CirFormatError("unknown record %r" % x.get("c"))
    return cls(**{k: _dec(v) for k, v in x["v"].items()})


def _section(tag, payload):
    return tag + struct.pack("<I", len(payload)) + payload


def dumps(cp, source_name=""):
    meta = json.dumps({"version": VERSION, "source": source_name,
                       "blocks": len(cp.blocks)}, sort_keys=True).encode()
    prog = json.dumps(_enc(cp), separators=(",", ":")).encode()
    return MAGIC + struct.pack("<HH", VERSION, 2) + _section(b"META", meta) + \
        _section(b"PROG", prog)


def loads(data):
    if data[:4] != MAGIC:
        raise CirFormatError("bad magic")
    if len(data) < 8:
        raise CirFormatError("truncated header")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise CirFormatError("unsupported version %d" % version)
    pos = 8
    sections = {}
    for _ in range(count):
        if pos + 8 > len(data):
            raise CirFormatError("truncated section header")
        tag = data[pos:pos + 4]
        (n,) = struct.unpack_from("<I", data, pos + 4)
        pos += 8
        if pos + n > len(data):
            raise CirFormatError("truncated section %r" % tag)
        sections[tag] = data[pos:pos + n]
        pos += n
    if b"PROG" not in sections:
        raise CirFormatError("missing PROG section")
    try:
        cp = _dec(json.loads(sections[b"PROG"]))
    except (ValueError, TypeError, KeyError) as e:
        raise CirFormatError("corrupt PROG section: %s" % e) from None
    if not isinstance(cp, lw.ContinuationProgram):
        raise CirFormatError("PROG is not a program")
    return cp


def save(path, cp, source_name=""):
    with open(path, "wb") as f:
        f.write(dumps(cp, source_name))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
