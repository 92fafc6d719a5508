"""Simulated paged non-volatile memory and the page-granular undo log.

The atomic unit is one aligned 16-bit word.  ``fault_after`` arms a
word-level fault injector: that many further ``write_word`` calls succeed
and the next one raises :class:`PowerFailure` before touching memory.
``arm_faults`` does the same for every word write, including the engine's
direct array accesses, by swapping ``words`` for a counting view.

Undo log layout inside the UNDO region (word offsets)::

    +0              count_word
    +1 + i*(1+W)    entry i: page index, then W words of pre-image

An entry is completely written before ``count_word`` is bumped to cover
it, and ``count_word`` is cleared last, so every crash leaves either the
old or the new log state.
"""

import struct
import sys
from array import array

from .errors import CorruptState, LogFull, OutOfRange, PowerFailure

REGIONS = ("RUNTIME", "STACK", "QUEUE", "GLOBALS", "UNDO")
WORD = 2
DUMP_MAGIC = b"NVM1"
_HDR = struct.Struct("<4sIII")  # magic, page size, page count, word size


class FaultingWords:
    """Word array view that counts writes and fails chosen ones.

    ``faults`` holds global write ordinals (0-based, counting every attempted
    write); the write with that ordinal raises :class:`PowerFailure` without
    touching memory, every other write goes through.  Slice assignments are
    split into single words.
    """

    def __init__(self, words, faults=()):
        self.words = words
        self.faults = set(faults)
        self.count = 0
        self.fired = []

    def _one(self, i, v):
        n = self.count
        self.count = n + 1
        if n in self.faults:
            self.faults.discard(n)
            self.fired.append(n)
            raise PowerFailure("injected fault at word write %d" % n)
        self.words[i] = v

    def __setitem__(self, i, v):
        if isinstance(i, slice):
            for k, x in zip(range(*i.indices(len(self.words))), v):
                self._one(k, x)
        else:
            self._one(i, v)

    def __getitem__(self, i):
        return self.words[i]

    def __len__(self):
        return len(self.words)

    def __iter__(self):
        return iter(self.words)

    def tobytes(self):
        return self.words.tobytes()


class ObjectMemory:
    def __init__(self, nvm_size, page_size, regions=None):
        if nvm_size % page_size or page_size % WORD:
            raise ValueError("page size must divide nvm size")
        self.nvm_size = nvm_size
        self.page_size = page_size
        self.wpp = page_size // WORD
        self.page_count = nvm_size // page_size
        self.words = array("H", bytes(nvm_size))
        self.regions = dict(regions or {})
        self.fault_after = None
        self.write_count = 0
        self._check_regions()

    def _check_regions(self):
        used = set()
        for name, (first, n) in self.regions.items():
            if name not in REGIONS:
                raise ValueError("unknown region %r" % name)
            pages = set(range(first, first + n))
            if pages & used:
                raise ValueError("region %s overlaps another region" % name)
            if first + n > self.page_count:
                raise ValueError("region %s exceeds memory" % name)
            used |= pages

    # word access by byte address
    def _index(self, addr):
        if addr < 0 or addr + WORD > self.nvm_size or addr % WORD:
            raise OutOfRange(addr)
        return addr // WORD

    def read_word(self, addr):
        return self.words[self._index(addr)]

    def write_word(self, addr, value):
        self.store(self._index(addr), value)

    # word access by word index (used by the engine)
    def load(self, widx):
        if widx < 0 or widx >= len(self.words):
            raise OutOfRange(widx * WORD)
        return self.words[widx]

    def store(self, widx, value):
        if widx < 0 or widx >= len(self.words):
            raise OutOfRange(widx * WORD)
        if self.fault_after is not None:
            if self.fault_after <= 0:
                raise PowerFailure("injected fault at word write")
            self.fault_after -= 1
        self.write_count += 1
        self.words[widx] = value & 0xFFFF

    def arm_faults(self, faults=()):
        """Route every word write through a :class:`FaultingWords` view."""
        if not isinstance(self.words, FaultingWords):
            self.words = FaultingWords(self.words)
        self.words.faults = set(faults)
        return self.words

    def disarm(self):
        if isinstance(self.words, FaultingWords):
            self.words = self.words.words

    def page_of_word(self, widx):
        return widx // self.wpp

    def page_words(self, page):
        lo = page * self.wpp
        return self.words[lo:lo + self.wpp]

    def region_of_page(self, page):
        for name, (first, n) in self.regions.items():
            if first <= page < first + n:
                return name
        return None

    def region_words(self, name):
        first, n = self.regions[name]
        return first * self.wpp, (first + n) * self.wpp

    def snapshot(self):
        return self.words.tobytes()

    def restore(self, blob):
        self.words = array("H")
        self.words.frombytes(blob)

    def dump(self):
        """Raw page dump with a 16-byte header."""
        hdr = _HDR.pack(DUMP_MAGIC, self.page_size, self.page_count, WORD)
        body = array("H", self.words)
        if sys.byteorder == "big":
            body.byteswap()
        return hdr + body.tobytes()

    @classmethod
    def from_dump(cls, blob):
        magic, page_size, page_count, word = _HDR.unpack_from(blob)
        if magic != DUMP_MAGIC or word != WORD:
            raise CorruptState("not an NVM1 dump")
        mem = cls(page_size * page_count, page_size)
        mem.words = array("H")
        mem.words.frombytes(blob[_HDR.size:])
        if sys.byteorder == "big":
            mem.words.byteswap()
        if len(mem.words) * WORD != page_size * page_count:
            raise CorruptState("truncated NVM1 dump")
        return mem


class UndoLog:
    """Page pre-image log stored in the UNDO region of ``mem``."""

    def __init__(self, mem, base_word, capacity):
        self.mem = mem
        self.base = base_word
        self.capacity = capacity
        self.stride = 1 + mem.wpp

    @classmethod
    def in_region(cls, mem):
        lo, hi = mem.region_words("UNDO")
        cap = (hi - lo - 1) // (1 + mem.wpp)
        return cls(mem, lo, cap)

    @property
    def count(self):
        return self.mem.words[self.base]

    def entry_addr(self, i):
        return self.base + 1 + i * self.stride

    def pages(self):
        w = self.mem.words
        return [w[self.entry_addr(i)] for i in range(self.count)]

    def find(self, page):
        """Sequential search; returns the number of entries inspected and a hit flag."""
        w = self.mem.words
        n = w[self.base]
        for i in range(n):
            if w[self.entry_addr(i)] == page:
                return i + 1, True
        return n, False

    def append(self, page):
        """Write the next entry (not yet covered by count_word)."""
        mem = self.mem
        n = mem.words[self.base]
        if n >= self.capacity:
            raise LogFull(self.capacity)
        at = self.entry_addr(n)
        mem.store(at, page)
        src = page * mem.wpp
        for k in range(mem.wpp):
            mem.store(at + 1 + k, mem.words[src + k])

    def bump(self):
        self.mem.store(self.base, self.mem.words[self.base] + 1)


def log_page(log, mem, page_index):
    """Save ``page_index``'s pre-image unless already logged; True if copied."""
    first, n = mem.regions.get("UNDO", (None, 0))
    if first is not None and first <= page_index < first + n:
        raise ValueError("cannot log a page of the UNDO region")
    _, hit = log.find(page_index)
    if hit:
        return False
    log.append(page_index)
    log.bump()
    return True


def undo_restore(log, mem):
    """Copy every logged pre-image back, then clear count_word."""
    w = mem.words
    n = w[log.base]
    if n > log.capacity:
        raise CorruptState("undo count %d exceeds capacity %d" % (n, log.capacity))
    for i in range(n):
        at = log.entry_addr(i)
        page = w[at]
        dst = page * mem.wpp
        for k in range(mem.wpp):
            mem.store(dst + k, w[at + 1 + k])
    if n:
        mem.store(log.base, 0)
    return n


def commit_clear(log):
    """Single-word commit."""
    if log.mem.words[log.base]:
        log.mem.store(log.base, 0)
