import numpy as np
import pytest
from hypothesis import given, settings

from strategies import paramsets
from fedseg.paramset import ParamSet, ParamSetError, decode_paramset


def test_layout_is_little_endian():
    ps = ParamSet([("w", np.array([1.0], dtype=np.float32))])
    raw = ps.to_bytes()
    assert raw[:4] == b"FPS1"
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:10] == (1).to_bytes(2, "little")
    assert raw[10:11] == b"w"
    assert raw[11:13] == bytes([0, 1])
    assert raw[13:17] == (1).to_bytes(4, "little")
    assert raw[17:] == np.float32(1.0).tobytes()


def test_empty_paramset_roundtrip():
    assert ParamSet.from_bytes(ParamSet().to_bytes()) == ParamSet()


@settings(max_examples=200)
@given(paramsets())
def test_roundtrip(ps):
    back = ParamSet.from_bytes(ps.to_bytes())
    assert back.names == ps.names
    for a, b in zip(back.arrays, ps.arrays):
        assert a.dtype == b.dtype and a.shape == b.shape
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("cut", [1, 4, 9, 15, 20])
def test_truncation_rejected(cut):
    raw = ParamSet([("w", np.ones((2, 2))), ("b", np.zeros(2))]).to_bytes()
    with pytest.raises(ParamSetError):
        ParamSet.from_bytes(raw[:-cut])


def test_bad_magic_and_trailing_bytes():
    raw = ParamSet([("w", np.ones(2))]).to_bytes()
    with pytest.raises(ParamSetError):
        ParamSet.from_bytes(b"XPS1" + raw[4:])
    with pytest.raises(ParamSetError):
        ParamSet.from_bytes(raw + b"\0")
    ps, end = decode_paramset(raw + b"\0")
    assert end == len(raw)


def test_unknown_dtype_code():
    raw = bytearray(ParamSet([("w", np.ones(1, np.float32))]).to_bytes())
    raw[11] = 7
    with pytest.raises(ParamSetError):
        ParamSet.from_bytes(bytes(raw))


def test_duplicate_names_rejected():
    with pytest.raises(ParamSetError):
        ParamSet([("a", np.ones(1)), ("a", np.ones(1))])


def test_compatibility():
    a = ParamSet([("w", np.ones((2, 3))), ("b", np.ones(3))])
    assert a.compatible(a.map(lambda x: x * 2))
    assert not a.compatible(ParamSet([("b", np.ones(3)), ("w", np.ones((2, 3)))]))
    assert not a.compatible(ParamSet([("w", np.ones((3, 2))), ("b", np.ones(3))]))
    with pytest.raises(ParamSetError):
        a.check_compatible(ParamSet([("w", np.ones((2, 3)))]))
