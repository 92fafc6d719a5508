import pytest
from hypothesis import given, settings, strategies as st

from purevm import types as ty
from purevm.errors import (NonGroundHandler, OccursCheck, PureVMError, TypeCheckError,
                           TypeMismatch, UnboundName)

from conftest import HANDLERS

H = "\nevent boot(v: Void) {}" + HANDLERS


def check(src):
    return ty.check_source(src + H, "t.pl")


# --- control-flow builtins --------------------------------------------------------

BUILTIN_SIGNATURES = {
    # returns one of two objects t or f of the same parametric type
    "select": "primitive select(b: Bool)(t: %a, f: %a) -> %a",
    # applies func : %a -> %b to the flow-in object
    "apply": "primitive apply(a: %a)(func: %a -> %b) -> %b",
    # IO primitive that modifies its flow-in object x
    "getTemp": "primitive getTemp(x: Float) -> Float [IO] [write x]",
    # apply(s) then select(t, f) then apply
    "ifElse": "func ifElse(p: %a)(s: %a -> Bool, t: %a -> %b, f: %a -> %b) -> %b",
}


@pytest.mark.parametrize("name", sorted(BUILTIN_SIGNATURES))
def test_builtin_signatures(name):
    tp = check("")
    assert tp.signature(name) == BUILTIN_SIGNATURES[name]


def test_signatures_inferred_without_flow_out_annotations():
    # bodies only: flow-out types must be inferred, and match up to renaming
    tp = check("""
func sel(b: Bool)(t: %x, f: %x) { b.select(t, f) }
func app(a: %q)(g: %q -> %r) { a.apply(g) }
func branch(p: %a)(s: %a -> Bool, t: %a -> %b, f: %a -> %b) {
  let func = p.apply(s).select(t, f);
  p.apply(func)
}
func sense(x: Float) { x.getTemp() }
""")
    assert tp.signature("sel") == "func sel(b: Bool)(t: %a, f: %a) -> %a"
    assert tp.signature("app") == "func app(a: %a)(g: %a -> %b) -> %b"
    assert tp.signature("branch") == BUILTIN_SIGNATURES["ifElse"].replace("ifElse", "branch")
    assert tp.signature("sense") == "func sense(x: Float) -> Float"


def test_getTemp_write_set():
    tp = check("func sense(x: Float) { x.getTemp() }")
    assert tp.write_sets["getTemp"] == {"x"}
    assert tp.write_sets["sense"] == {"x"}


def test_polymorphic_use_sites_instantiate_fresh():
    tp = check("""
func isPos(x: Int) -> Bool { x.gt(0) }
func neg(x: Int) -> Int { x.neg() }
func keep(x: Int) -> Int { x }
func yes(b: Bool) -> Bool { b }
func no(b: Bool) -> Bool { b.not() }
func f(x: Int) -> Bool {
  let y = x.ifElse(isPos, keep, neg);
  y.gt(3).ifElse(yes, yes, no)
}
""")
    assert tp.signature("f") == "func f(x: Int) -> Bool"


# --- ill-typed programs: rejected with positions ----------------------------------
# Each case names the snippet the diagnostic must point at; the expected
# line/column is where that snippet first occurs in the source.

ILL_TYPED = [
    ("int_plus_float", "func f(x: Int) -> Int { x.add(1.5) }", "1.5", TypeMismatch),
    ("predicate_not_bool", "func t(x: Int) -> Int { x }\nfunc f(x: Int) -> Int { x.ifElse(t, t, t) }",
     "t, t, t", TypeMismatch),
    ("wrong_return", "func f(x: Int) -> Bool { x.add(1) }", "x.add(1)", TypeMismatch),
    ("unbound_name", "func f(x: Int) -> Int { x.add(y) }", "y", UnboundName),
    ("unknown_function", "func f(x: Int) -> Int { x.frobnicate() }", "frobnicate", UnboundName),
    ("arity", "func f(x: Int) -> Int { x.add(1, 2) }", "add", TypeCheckError),
    ("apply_non_function", "func f(x: Int) -> Int { x.apply(3) }", "3", TypeMismatch),
    ("float_op_on_int", "func f(x: Int) -> Float { x.fadd(1.0) }", "fadd", TypeMismatch),
    ("global_init_type", "global g: Int = true", "true", TypeMismatch),
    ("array_elem", "global a: Array<Int, 4> = [1, 2.5]", "2.5", TypeMismatch),
    ("array_index_float", "global a: Array<Int, 4> = []\nfunc f(x: Float) -> Int { a.getAt(x) }",
     "x)", TypeMismatch),
    ("set_type", "global g: Float = 1.0\nfunc f(x: Int) -> Float { g.set(x) }", "x)", TypeMismatch),
    ("handler_return", "event tick(v: Int) -> Int { v }", "Int { v }", TypeMismatch),
    ("handler_polymorphic", "event tick(v: %a) { v.ignore() }", "v: %a", NonGroundHandler),
    ("occurs_check", "func f(x: Int) { let k = id; k.apply(k) }", "k)", OccursCheck),
    ("rigid_specialization", "func f(x: %a) -> %a { x.add(1) }", "add", TypeMismatch),
    ("branch_result_mismatch",
     "func p(x: Int) -> Bool { true }\nfunc a(x: Int) -> Int { x }\n"
     "func b(x: Int) -> Float { 1.0 }\nfunc f(x: Int) -> Int { x.ifElse(p, a, b) }", "b)",
     TypeMismatch),
    ("void_flow_into_add", "func f(x: Int) -> Int { x.ignore().add(1) }", "add", TypeMismatch),
    ("global_function", "global g: Int -> Int", "global", TypeCheckError),
    ("user_param_mismatch", "func g(x: Int)(y: Bool) -> Int { x }\nfunc f(x: Int) -> Int { x.g(2) }",
     "2)", TypeMismatch),
]


def test_suite_has_twenty_programs():
    assert len(ILL_TYPED) == 20
    assert len({c[0] for c in ILL_TYPED}) == 20


def _where(text, snippet):
    i = text.index(snippet)
    return text.count("\n", 0, i) + 1, i - (text.rfind("\n", 0, i) + 1) + 1


@pytest.mark.parametrize("name,src,snippet,err", ILL_TYPED, ids=[c[0] for c in ILL_TYPED])
def test_ill_typed_rejected_with_position(name, src, snippet, err):
    text = src + H
    with pytest.raises(err) as ei:
        ty.check_source(text, "t.pl")
    e = ei.value
    assert e.span is not None
    assert (e.span.line, e.span.col) == _where(text, snippet)
    assert str(e).startswith("t.pl:%d:%d:" % _where(text, snippet))


# --- unification properties ---------------------------------------------------------

BASES = st.sampled_from([ty.INT, ty.FLOAT, ty.BOOL, ty.VOID])
VARS = st.sampled_from(["a", "b", "c", "d"]).map(ty.Var)


def terms(depth=3):
    leaf = st.one_of(BASES, VARS)
    if depth == 0:
        return leaf
    sub = terms(depth - 1)
    return st.one_of(leaf, st.builds(ty.Arrow, sub, sub),
                     st.builds(ty.Array, sub, st.one_of(st.integers(1, 4).map(ty.Nat), VARS)))


@settings(max_examples=300, deadline=None)
@given(terms(), terms())
def test_unifier_makes_terms_equal(a, b):
    try:
        s = ty.unify(a, b)
    except PureVMError:
        return
    assert s.apply(a) == s.apply(b)
    # idempotent
    assert s.apply(s.apply(a)) == s.apply(a)


@settings(max_examples=200, deadline=None)
@given(terms())
def test_unify_reflexive_is_empty(a):
    assert ty.unify(a, a).bindings == {}


@settings(max_examples=200, deadline=None)
@given(terms(), terms())
def test_unify_symmetric_success(a, b):
    def ok(x, y):
        try:
            ty.unify(x, y)
            return True
        except PureVMError:
            return False
    assert ok(a, b) == ok(b, a)


@settings(max_examples=200, deadline=None)
@given(terms())
def test_canonical_is_rename_invariant(t):
    ren = {ty.Var(x): ty.Var(x + "_r") for x in "abcd"}
    assert ty.canonical([t]) == ty.canonical([ty._subst(t, ren)])
