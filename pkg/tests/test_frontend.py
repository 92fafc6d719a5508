import pytest
from hypothesis import given, settings, strategies as st

from purevm import frontend as fe
from purevm.errors import ConfigError, DuplicateName, SourceSyntaxError


def test_hex_and_exponent_literals():
    toks = [(t.kind, t.text) for t in fe.tokenize("0x1F 2.5e3 1e-2 7")]
    kinds = [k for k, _ in toks if k not in ("eof",)]
    assert kinds[:4] == ["int", "float", "float", "int"]
    prog = fe.parse("global a: Int = 0x1F\nglobal b: Float = 2.5e3")
    assert prog.get("a").init.value == 31
    assert prog.get("b").init.value == 2500.0


def test_contextual_keywords_as_names():
    src = "func f(x: Int) -> Int { let func = x.add(1); func }"
    d = fe.parse(src).get("f")
    assert d.body[0].binding == "func"


def test_head_call_is_sugar_for_unit_flow():
    d = fe.parse("func f(v: Void) -> Int { readSensor() }").get("f")
    chain = d.body[0].chain
    assert isinstance(chain.head, fe.UnitLit)
    assert chain.calls[0].callee == "readSensor"


def test_primitive_metadata():
    d = fe.parse("primitive getTemp(x: Float) -> Float [IO] [write x]").get("getTemp")
    assert d.is_io and d.write_targets == ("x",)


def test_syntax_error_has_position():
    with pytest.raises(SourceSyntaxError) as ei:
        fe.parse("func f(x: Int) -> Int {\n  x.add(1\n}", "bad.pl")
    assert ei.value.position == (3, 1)
    assert "bad.pl:3:1" in str(ei.value)


def test_duplicate_declaration():
    with pytest.raises(DuplicateName) as ei:
        fe.parse("global a: Int = 1\nglobal a: Int = 2")
    assert ei.value.position == (2, 1)


def test_config_defaults_and_keys():
    cfg = fe.parse_config("events = boot, reboot, sleep, tick\nnvm_size = 8192\n")
    assert cfg.page_size_bytes == 32
    assert cfg.optimizations == frozenset()
    assert cfg.vm_backend == "REWINDING"
    assert cfg.event_handlers[-1] == "tick"
    cfg = fe.parse_config("events = boot, reboot, sleep\noptimize = block_fusion, loop_opt\n"
                          "backend = just_in_time\npage_size = 64")
    assert cfg.optimizations == {"BLOCK_FUSION", "LOOP_OPT"}
    assert cfg.vm_backend == "JUST_IN_TIME"
    assert cfg.words_per_page == 32


@pytest.mark.parametrize("text,key", [
    ("events = boot, reboot", "events"),
    ("events = boot, reboot, sleep\ncolour = red", "colour"),
    ("events = boot, reboot, sleep\nnvm_size = big", "nvm_size"),
    ("events = boot, reboot, sleep\nnvm_size = 4000\npage_size = 64", "page_size"),
    ("events = boot, reboot, sleep\npage_size = 48", "page_size"),
    ("events = boot, reboot, sleep\nbackend = quantum", "backend"),
    ("events = boot, reboot, sleep\noptimize = turbo", "optimize"),
    ("events = boot, reboot, sleep\nqueue_capacity = 0", "queue_capacity"),
])
def test_config_errors(text, key):
    with pytest.raises(ConfigError) as ei:
        fe.parse_config(text)
    assert ei.value.key == key


def test_config_round_trip():
    cfg = fe.parse_config("events = boot, reboot, sleep, tick\nnvm_size = 8192\n"
                          "optimize = BLOCK_FUSION\npage_size = 16")
    assert fe.parse_config(fe.render_config(cfg)) == cfg


# --- property: render then parse is the identity ------------------------------------

IDENT = st.sampled_from(["a", "b", "x", "y", "count", "limit", "func", "event"])
LIT = st.one_of(
    st.integers(0, 2 ** 31 - 1).map(fe.IntLit),
    st.floats(0, 1e6, allow_nan=False, allow_infinity=False).map(fe.FloatLit),
    st.booleans().map(fe.BoolLit),
)
CALLEE = st.sampled_from(["add", "sub", "emit", "set", "ifElse", "select"])


def _expr(depth):
    atom = st.one_of(LIT, IDENT.map(fe.Name), st.just(fe.UnitLit()))
    if depth == 0:
        return atom
    inner = _expr(depth - 1)
    call = st.builds(fe.Call, CALLEE, st.lists(inner, max_size=2))
    return st.builds(fe.Chain, st.one_of(atom, inner.filter(lambda e: isinstance(e, fe.Chain))),
                     st.lists(call, min_size=1, max_size=3))


STMT = st.builds(fe.Stmt, _expr(2).filter(lambda e: isinstance(e, fe.Chain)),
                 st.one_of(st.none(), IDENT))


@st.composite
def declarations(draw):
    n = draw(st.integers(1, 3))
    out = []
    for i in range(n):
        body = draw(st.lists(STMT, max_size=3))
        out.append(fe.Declaration(fe.FUNCTION, "f%d" % i, flow_in=fe.Param("p", fe.TName("Int")),
                                  params=[fe.Param("q", fe.TName("Float"))],
                                  flow_out=fe.TName("Int"), body=body))
    return fe.SourceProgram(out)


@settings(max_examples=150, deadline=None)
@given(declarations())
def test_render_parse_round_trip(prog):
    text = fe.render(prog)
    again = fe.parse(text)
    assert fe.render(again) == text
    assert fe.parse(fe.render(again)) == again
