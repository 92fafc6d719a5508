import math
import struct
import time

import pytest

from purevm import bench as B

from conftest import run_cp

M32 = 0xFFFFFFFF


def test_lcg_is_deterministic_and_32_bit():
    a = B.lcg_words(50)
    assert a == B.lcg_words(50)
    assert a != B.lcg_words(50, seed=1)
    assert all(0 <= x <= M32 for x in a)
    assert len(set(a)) == 50


def test_ar_samples_layout():
    xs, labels = B.ar_samples(4, 6)
    assert len(xs) == 3 * (2 * 4 + 6)
    assert labels == [0, 1, 0, 1, 0, 1]
    assert all(0.9 < x < 1.3 for x in xs[:12]) and all(3.9 < x < 6.1 for x in xs[12:24])


# --- independent models of the three benchmarks --------------------------------------


def bc_model(words):
    counts = [bin(w).count("1") for w in words]
    return counts + [len(words)]


def cf_model(keys):
    def fp(x):
        return (((x * 1640531527) & M32) >> 24) % 255 + 1

    def idx(x):
        return (((x * 1103515245) & M32) >> 16) & 31

    def alt(f):
        return ((f * 1540483477) & M32) >> 27

    table = [0] * 128
    evictions = failed = 0

    def free(b):
        return next((s for s in range(4) if table[4 * b + s] == 0), None)

    for x in keys:
        f, b = fp(x), idx(x)
        s = free(b)
        if s is None:
            b ^= alt(f)
            s = free(b)
        if s is not None:
            table[4 * b + s] = f
            continue
        k = 0
        while True:
            pos = 4 * b + (k & 3)
            table[pos], f = f, table[pos]
            k += 1
            evictions += 1
            b ^= alt(f)
            s = free(b)
            if s is not None:
                table[4 * b + s] = f
                break
            if k >= 32:
                failed += 1
                break
    found = 0
    for x in keys:
        f, b = fp(x), idx(x)
        b2 = b ^ alt(f)
        if f in table[4 * b:4 * b + 4] or f in table[4 * b2:4 * b2 + 4]:
            found += 1
    return [found, failed, evictions]


def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def ar_model(samples, per, ntest):
    it = iter(samples)

    def window():
        w = [f32(next(it)) for _ in range(3)]
        m = f32(f32(f32(w[0] + w[1]) + w[2]) / 3.0)
        d = [f32(v - m) for v in w]
        sq = f32(f32(f32(d[0] * d[0]) + f32(d[1] * d[1])) + f32(d[2] * d[2]))
        return m, f32(math.sqrt(f32(sq / 3.0)))

    feats = []
    for c in (0, 1):
        for _ in range(per):
            feats.append(window() + (c,))
    out, counts = [], [0, 0]
    for _ in range(ntest):
        m, s = window()
        best, label = 1.0e30, 0
        for fm, fs, fl in feats:
            dm, ds = f32(fm - m), f32(fs - s)
            dist = f32(f32(dm * dm) + f32(ds * ds))
            if dist < best:
                best, label = dist, fl
        out.append(label)
        counts[label] += 1
    return out + counts


@pytest.mark.parametrize("truncated", [True, False])
def test_bc_matches_model(truncated):
    spec = B.benchmark("BC", truncated)
    rep, _ = run_cp(spec.compile(), "REWINDING", spec.sensor)
    assert rep.decoded() == bc_model(spec.sensor)


@pytest.mark.parametrize("truncated", [True, False])
def test_cf_matches_model(truncated):
    spec = B.benchmark("CF", truncated)
    rep, _ = run_cp(spec.compile(), "REWINDING", spec.sensor)
    assert rep.decoded() == cf_model(spec.sensor)


@pytest.mark.parametrize("truncated", [True, False])
def test_ar_matches_model(truncated):
    spec = B.benchmark("AR", truncated)
    p = spec.defines
    rep, _ = run_cp(spec.compile(), "REWINDING", spec.sensor)
    assert rep.decoded() == ar_model(spec.sensor, p["per"], p["ntest"])


def test_ar_classifies_its_test_set():
    spec = B.benchmark("AR")
    _, labels = B.ar_samples(spec.defines["per"], spec.defines["ntest"])
    rep, _ = run_cp(spec.compile(), "REWINDING", spec.sensor)
    assert rep.decoded()[:-2] == labels


def test_full_benchmarks_finish_quickly():
    for name in B.BENCHMARKS:
        spec = B.benchmark(name)
        t0 = time.perf_counter()
        B.run_benchmark(spec)
        assert time.perf_counter() - t0 < 60, name


def test_run_benchmark_overhead_split_adds_up():
    spec = B.benchmark("BC", truncated=True)
    rep, split = B.run_benchmark(spec)
    assert split.total == sum(rep.counters.by_category().values())
    assert split.useful_primitive_steps > 0 and split.undo_log_steps > 0


def test_minimize_schedule_none_when_consistent():
    spec = B.benchmark("WAR")
    assert B.minimize_schedule(spec, spec.compile(), [10, 30, 50]) is None


def test_optimizations_reduce_work():
    spec = B.benchmark("BC", truncated=True)
    rows = B.compare_optimizations(spec)
    by = {r.opt: r for r in rows}
    assert all(r.result == "PASS" for r in rows)
    assert len({tuple(r.outputs) for r in rows}) == 1
    assert by["fusion"].commits <= by["none"].commits
    assert by["fusion+loop"].commits <= by["fusion"].commits
    assert 2 * by["fusion+loop"].page_copies <= by["none"].page_copies


def test_render_rows_is_stable():
    spec = B.benchmark("SENSE")
    a = B.render_rows(B.compare_optimizations(spec))
    assert a == B.render_rows(B.compare_optimizations(spec))
    assert a.splitlines()[0].split()[:3] == ["name", "backend", "opt"]


def test_page_size_does_not_change_results():
    spec = B.benchmark("CF", truncated=True)
    rows = B.page_size_report(spec)
    assert all(r["outputs"] == rows[0]["outputs"] for r in rows)
    assert all(r["globals"] == rows[0]["globals"] for r in rows)
    text = B.render_page_size_report("CF", rows)
    assert text.count("\n") == 2 + len(rows)
