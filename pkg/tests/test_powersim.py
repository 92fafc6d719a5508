import random

import pytest
from hypothesis import given, settings, strategies as st

from purevm import bench as B
from purevm import powersim as P
from purevm import vm as V
from purevm.errors import ConfigError, CostUnknown, NonTermination

from conftest import run_cp


def test_continuous_never_crashes():
    d = P.continuous()
    assert all(d.tick(P.K_WRITE) == P.CONTINUE for _ in range(1000))
    assert d.step == 1000


def test_schedule_crashes_exactly_at_listed_steps():
    d = P.schedule([3, 7])
    got = [d.tick(P.K_PRIM) for _ in range(10)]
    assert [i + 1 for i, x in enumerate(got) if x == P.CRASH] == [3, 7]


def test_schedule_becomes_signal_for_jit():
    d = P.schedule([2])
    d.jit = True
    assert [d.tick(P.K_READ) for _ in range(3)] == [P.CONTINUE, P.SIGNAL, P.CONTINUE]


def test_schedule_must_increase():
    with pytest.raises(ConfigError):
        P.CrashSchedule([5, 5])
    with pytest.raises(ConfigError):
        P.CrashSchedule([0])


@given(st.lists(st.sampled_from([P.K_READ, P.K_WRITE, P.K_COPY, P.K_PRIM, P.K_IO]),
                max_size=300))
def test_energy_is_conserved_without_harvest(kinds):
    m = P.EnergyModel(1000.0, 900.0, 100.0, harvest=[])
    d = P.energy(m, words_per_page=8)
    cost = m.table(8)
    spent = 0.0
    for k in kinds:
        before = d.level
        r = d.tick(k)
        if r == P.CRASH:
            # a crash happens only when the op would dip below threshold_off
            assert before - cost[k] < m.threshold_off
            assert d.level == before
            return
        spent += cost[k]
        assert d.level == pytest.approx(900.0 - spent)
        assert d.level >= m.threshold_off


@given(st.lists(st.floats(0, 3), min_size=1, max_size=4), st.integers(1, 500))
def test_harvest_never_exceeds_capacity(rates, n):
    m = P.EnergyModel(500.0, 400.0, 50.0, costs={"word_read": 1, "word_write": 1,
                                                 "primitive_exec": 1, "io_exec": 1},
                      harvest=[(7, r) for r in rates])
    d = P.energy(m)
    for _ in range(n):
        if d.tick(P.K_READ) == P.CRASH:
            d.recharge()
        assert 0 <= d.level <= m.capacity


def test_unknown_cost_is_reported():
    m = P.EnergyModel(costs={"word_read": 1, "word_write": 2, "primitive_exec": 4})
    with pytest.raises(CostUnknown):
        P.energy(m)


def test_energy_model_rejects_bad_thresholds():
    with pytest.raises(ConfigError):
        P.EnergyModel(100.0, 50.0, 60.0)
    with pytest.raises(ConfigError):
        P.EnergyModel(costs={"word_read": 0, "word_write": 1, "primitive_exec": 1,
                             "io_exec": 1})


def test_parse_interrupts():
    irqs = P.parse_interrupts("# header\n10 control 21.5\n10 tick\n30 tick 0x10  # c\n")
    assert [(i.step, i.name, i.value) for i in irqs] == [
        (10, "control", 21.5), (10, "tick", None), (30, "tick", 16)]
    for bad in ("x tick", "10", "10 tick 1 2", "20 a\n10 b", "5 t zz"):
        with pytest.raises(ConfigError):
            P.parse_interrupts(bad)


def test_parse_trace():
    assert P.parse_trace("100 0.5\n\n# off\n20 0\n") == [(100, 0.5), (20, 0.0)]
    with pytest.raises(ConfigError):
        P.parse_trace("100")


def test_capacitor_smaller_than_a_transaction_livelocks():
    spec = B.benchmark("BC", truncated=True)
    cp = spec.compile(spec.config.replace(step_budget=200_000))
    tiny = P.EnergyModel(40.0, 30.0, 10.0, harvest=[(10, 0.0)])
    with pytest.raises(NonTermination):
        run_cp(cp, "REWINDING", spec.sensor, spec.interrupts, driver=P.energy(tiny))


def test_driver_state_round_trip():
    m = P.EnergyModel()
    d = P.energy(m, [P.Interrupt(5, "x")])
    for _ in range(40):
        d.tick(P.K_PRIM)
    d.collect_due()
    st_ = d.state()
    a = [d.tick(P.K_WRITE) for _ in range(50)] + [d.level]
    e = P.energy(m, [P.Interrupt(5, "x")])
    e.restore(st_)
    assert [e.tick(P.K_WRITE) for _ in range(50)] + [e.level] == a


def test_random_energy_model_window_covers_transactions():
    rng = random.Random(1)
    for _ in range(200):
        m = P.random_energy_model(rng, 300)
        assert m.threshold_on - m.threshold_off > 300


# --- fuzzers ---------------------------------------------------------------------------


def test_exhaustive_memo_agrees_with_full_runs():
    spec = B.benchmark("WAR")
    cp = spec.compile()
    kw = dict(interrupts=spec.interrupts, env_factory=spec.env)
    a = P.exhaustive_single_crash(cp, memo=True, **kw)
    b = P.exhaustive_single_crash(cp, memo=False, **kw)
    assert a.ok and b.ok
    assert a.crash_points == b.crash_points > 0
    assert a.memo_hits > 0 and b.memo_hits == 0


def test_exhaustive_catches_a_broken_log(monkeypatch):
    # with undo logging switched off, some crash point must break WAR
    spec = B.benchmark("WAR")
    cp = spec.compile()
    monkeypatch.setattr(V.VM, "_log", lambda self, widx: None)
    rep = P.exhaustive_single_crash(cp, spec.interrupts, env_factory=spec.env, memo=False)
    assert rep.mismatches


def test_random_fuzz_jit_has_no_reexecution():
    for name in ("ALARM", "BC"):
        spec = B.benchmark(name, truncated=True)
        cp = spec.compile()
        rep = P.random_crash_fuzz(cp, range(20), spec.interrupts, backend="JUST_IN_TIME",
                                  env_factory=spec.env, check_trace=True)
        assert rep.ok, rep.to_text()
        assert rep.crashes > 0


def test_random_fuzz_is_seed_deterministic():
    spec = B.benchmark("WAR")
    cp = spec.compile()
    a = P.random_crash_fuzz(cp, range(10), spec.interrupts, env_factory=spec.env)
    b = P.random_crash_fuzz(cp, range(10), spec.interrupts, env_factory=spec.env)
    a.seconds = b.seconds = 0.0
    assert a == b


def test_merge_reports_is_order_independent():
    spec = B.benchmark("WAR")
    cp = spec.compile()
    parts = [P.exhaustive_single_crash(cp, spec.interrupts, env_factory=spec.env,
                                       ks=range(i + 1, 200, 3)) for i in range(3)]
    for p in parts:
        p.seconds = 0.0
    whole = P.exhaustive_single_crash(cp, spec.interrupts, env_factory=spec.env,
                                      ks=range(1, 200))
    m1 = P.merge_reports(parts)
    m2 = P.merge_reports(parts[::-1])
    assert m1.to_text() == m2.to_text()
    assert m1.crash_points == whole.crash_points
    assert m1.mismatches == whole.mismatches
    assert m1.crashes == whole.crashes


def test_never_all_predicate():
    spec = B.benchmark("ALARM")
    cp = spec.compile()
    rep = P.exhaustive_single_crash(cp, spec.interrupts, env_factory=spec.env,
                                    predicate=P.NeverAll(("alarm", "tempOK")), ks=range(1, 400))
    assert not rep.violations
    # a predicate that is always false is reported at every commit
    bad = P.exhaustive_single_crash(cp, spec.interrupts, env_factory=spec.env,
                                    predicate=lambda vm: False, ks=range(1, 5))
    assert bad.violations and not bad.ok
