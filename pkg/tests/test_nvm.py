"""Word-level crash atomicity of the undo log and of the engine's queue and
consume sequences: a fault is injected at every single word write."""

import pytest
from hypothesis import given, settings, strategies as st

from purevm import bench as B
from purevm import nvm
from purevm import powersim as P
from purevm import vm as V
from purevm.errors import CorruptState, LogFull, OutOfRange, PowerFailure

PAGE = 16  # bytes, 8 words
PAGES = 16
REGIONS = {"GLOBALS": (0, 10), "UNDO": (10, 6)}


def fresh_mem(seed=0):
    mem = nvm.ObjectMemory(PAGE * PAGES, PAGE, REGIONS)
    for i in range(10 * mem.wpp):
        mem.words[i] = (i * 7919 + seed) & 0xFFFF
    return mem


def transaction(mem, log, pages, delta):
    """Log each page, then overwrite it, then commit."""
    for p in pages:
        nvm.log_page(log, mem, p)
        for k in range(mem.wpp):
            a = p * mem.wpp + k
            mem.store(a, (mem.words[a] + delta + k) & 0xFFFF)
    nvm.commit_clear(log)


def count_writes(fn):
    mem = fresh_mem()
    fw = mem.arm_faults()
    fn(mem, nvm.UndoLog.in_region(mem))
    return fw.count


def test_memory_basics():
    mem = fresh_mem()
    mem.write_word(4, 0xBEEF)
    assert mem.read_word(4) == 0xBEEF
    with pytest.raises(OutOfRange):
        mem.read_word(PAGE * PAGES)
    with pytest.raises(OutOfRange):
        mem.read_word(3)
    with pytest.raises(ValueError):
        nvm.ObjectMemory(100, 16)
    with pytest.raises(ValueError):
        nvm.ObjectMemory(256, 16, {"GLOBALS": (0, 10), "UNDO": (9, 3)})


def test_dump_round_trip():
    mem = fresh_mem(3)
    blob = mem.dump()
    assert blob[:4] == b"NVM1" and len(blob) == 16 + PAGE * PAGES
    back = nvm.ObjectMemory.from_dump(blob)
    assert back.words == mem.words and back.page_size == PAGE
    with pytest.raises(CorruptState):
        nvm.ObjectMemory.from_dump(b"XXXX" + blob[4:])
    with pytest.raises(CorruptState):
        nvm.ObjectMemory.from_dump(blob[:-2])


def test_log_page_skips_logged_page_and_refuses_undo_region():
    mem = fresh_mem()
    log = nvm.UndoLog.in_region(mem)
    assert nvm.log_page(log, mem, 2) is True
    assert nvm.log_page(log, mem, 2) is False
    assert log.pages() == [2]
    with pytest.raises(ValueError):
        nvm.log_page(log, mem, 11)


def test_log_full():
    mem = fresh_mem()
    log = nvm.UndoLog.in_region(mem)
    for p in range(log.capacity):
        nvm.log_page(log, mem, p)
    with pytest.raises(LogFull):
        nvm.log_page(log, mem, log.capacity)


def test_undo_restore_detects_corrupt_count():
    mem = fresh_mem()
    log = nvm.UndoLog.in_region(mem)
    mem.words[log.base] = log.capacity + 1
    with pytest.raises(CorruptState):
        nvm.undo_restore(log, mem)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=5, unique=True),
       st.integers(1, 0xFFFF))
def test_crash_at_every_word_write_is_all_or_nothing(pages, delta):
    before = fresh_mem().words.tolist()
    ref = fresh_mem()
    transaction(ref, nvm.UndoLog.in_region(ref), pages, delta)
    after = ref.words.tolist()
    total = count_writes(lambda m, l: transaction(m, l, pages, delta))
    globals_words = 10 * ref.wpp
    for n in range(total):
        mem = fresh_mem()
        log = nvm.UndoLog.in_region(mem)
        mem.arm_faults({n})
        with pytest.raises(PowerFailure):
            transaction(mem, log, pages, delta)
        nvm.undo_restore(log, mem)
        # every fault, the commit write included, leaves the old state
        assert mem.words[:globals_words].tolist() == before[:globals_words], n
        assert log.count == 0
    # with no fault the new state is published
    assert after[:globals_words] != before[:globals_words]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=4, unique=True),
       st.integers(1, 0xFFFF), st.data())
def test_crash_during_undo_restore_is_idempotent(pages, delta, data):
    """Crash in a transaction, then crash again at every word write of the
    recovery: a second recovery still yields the pre-transaction state."""
    before = fresh_mem().words.tolist()
    total = count_writes(lambda m, l: transaction(m, l, pages, delta))
    first = data.draw(st.integers(0, total - 2))  # crash before the commit write
    # length of the recovery that follows this crash
    mem = fresh_mem()
    log = nvm.UndoLog.in_region(mem)
    fw = mem.arm_faults({first})
    with pytest.raises(PowerFailure):
        transaction(mem, log, pages, delta)
    start = fw.count
    nvm.undo_restore(log, mem)
    rec_len = fw.count - start
    for j in range(rec_len):
        mem = fresh_mem()
        log = nvm.UndoLog.in_region(mem)
        fw = mem.arm_faults({first})
        with pytest.raises(PowerFailure):
            transaction(mem, log, pages, delta)
        mem.arm_faults({fw.count + j})
        with pytest.raises(PowerFailure):
            nvm.undo_restore(log, mem)
        nvm.undo_restore(log, mem)
        assert mem.words[:10 * mem.wpp].tolist() == before[:10 * mem.wpp]


def test_commit_clear_is_one_word():
    mem = fresh_mem()
    log = nvm.UndoLog.in_region(mem)
    nvm.log_page(log, mem, 1)
    fw = mem.arm_faults()
    nvm.commit_clear(log)
    assert fw.count == 1 and log.count == 0
    nvm.commit_clear(log)  # nothing to clear: no write
    assert fw.count == 1


# --- engine sequences: enqueue and consume --------------------------------------------


class Tracer(nvm.FaultingWords):
    """Records which engine sequence each word write belongs to."""

    def __init__(self, words, vm):
        super().__init__(words)
        self.vm = vm
        self.kinds = []

    def _one(self, i, v):
        vm = self.vm
        if vm.in_post:
            kind = "enqueue"
        elif vm.code_id == V.CONSUME_CODE:
            kind = "consume"
        elif vm.in_recovery:
            kind = "recovery"
        else:
            kind = "block"
        super()._one(i, v)
        self.kinds.append(kind)


def _traced_vm(cp, spec):
    h = V.VM(cp, backend="REWINDING", env=spec.env())
    h.in_post = False
    orig = h._post

    def post(*a, **kw):
        h.in_post = True
        try:
            return orig(*a, **kw)
        finally:
            h.in_post = False
    h._post = post
    return h


@pytest.mark.parametrize("name", ["SENSE", "ALARM"])
def test_every_word_write_of_enqueue_and_consume(name):
    spec = B.benchmark(name)
    cp = spec.compile()
    want = V.VM(cp, backend="TEST", env=spec.env()).boot().run_until_idle(
        P.continuous(spec.interrupts))
    h = _traced_vm(cp, spec)
    h.boot()
    tr = Tracer(h.mem.words, h)
    h.mem.words = tr
    h.run_until_idle(P.continuous(spec.interrupts))
    kinds = tr.kinds
    targets = [n for n, k in enumerate(kinds) if k in ("enqueue", "consume")]
    assert {"enqueue", "consume"} <= set(kinds)
    for n in targets:
        h = V.VM(cp, backend="REWINDING", env=spec.env()).boot()
        h.mem.arm_faults({n})
        r = h.run_until_idle(P.continuous(spec.interrupts))
        assert r.counters.crashes == 1
        assert r.values() == want.values(), (n, kinds[n])
        assert r.globals == want.globals, (n, kinds[n])
        # the queue keeps FIFO order and drops nothing
        assert r.queue_drops == want.queue_drops
