import pytest

from purevm import frontend as fe
from purevm import lowering as lw
from purevm import powersim as P
from purevm import vm as V

HANDLERS = """
event reboot(v: Void) {}
event sleep(v: Void) {}
"""


def program(decls, boot="", handlers=HANDLERS):
    """Source with the mandatory handlers; ``boot`` is the boot body."""
    return "%s\nevent boot(v: Void) { %s }\n%s" % (decls, boot, handlers)


def config(**kw):
    return fe.VmConfig().replace(**kw)


def compile_text(src, defines=None, **kw):
    return lw.compile_source(src, config(**kw), "<test>", defines)


def run_cp(cp, backend="TEST", sensor=(), interrupts=(), driver=None, **vmkw):
    h = V.VM(cp, backend=backend, env=V.Environment(sensor=list(sensor)), **vmkw).boot()
    rep = h.run_until_idle(driver or P.continuous(list(interrupts)))
    return rep, h


def run_text(src, backend="TEST", sensor=(), interrupts=(), driver=None, defines=None,
             checked=False, **cfgkw):
    cp = compile_text(src, defines, **cfgkw)
    return run_cp(cp, backend, sensor, interrupts, driver, checked=checked)[0]


@pytest.fixture
def sense_spec():
    from purevm import bench as B
    return B.benchmark("SENSE")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
