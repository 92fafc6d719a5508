import struct

import pytest

from purevm import bench as B
from purevm import cir

from conftest import run_cp


@pytest.mark.parametrize("name", B.CORPUS)
def test_round_trip_preserves_program_and_behaviour(name, tmp_path):
    spec = B.benchmark(name, truncated=True)
    cp = spec.compile(spec.config.replace(optimizations=frozenset({"BLOCK_FUSION"})))
    path = tmp_path / "p.cir"
    cir.save(path, cp, spec.source_name)
    cp2 = cir.load(path)
    assert cp2 == cp
    assert cir.dumps(cp2, spec.source_name) == path.read_bytes()
    a, _ = run_cp(cp, "REWINDING", spec.sensor, spec.interrupts)
    b, _ = run_cp(cp2, "REWINDING", spec.sensor, spec.interrupts)
    assert a.to_text() == b.to_text()


@pytest.fixture(scope="module")
def blob():
    return cir.dumps(B.benchmark("WAR").compile(), "war.pl")


def test_header(blob):
    assert blob[:4] == b"CIR1"
    assert struct.unpack_from("<HH", blob, 4) == (cir.VERSION, 2)


def test_bad_magic(blob):
    with pytest.raises(cir.CirFormatError, match="magic"):
        cir.loads(b"XXXX" + blob[4:])


def test_wrong_version(blob):
    bad = blob[:4] + struct.pack("<H", 99) + blob[6:]
    with pytest.raises(cir.CirFormatError, match="version"):
        cir.loads(bad)


@pytest.mark.parametrize("cut", [6, 12, 40, -1])
def test_truncated(blob, cut):
    with pytest.raises(cir.CirFormatError):
        cir.loads(blob[:cut])


def test_corrupt_payload(blob):
    i = blob.index(b"PROG") + 8
    with pytest.raises(cir.CirFormatError):
        cir.loads(blob[:i] + b"{" * 4 + blob[i + 4:])
