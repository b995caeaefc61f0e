import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tsrelab.container import MAGIC, ContainerError, decode, encode, load, save


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text("abc/", min_size=1, max_size=6),
                       arrays(np.float64, st.lists(st.integers(0, 4), max_size=3).map(tuple),
                              elements=st.floats(allow_nan=False, width=64)),
                       max_size=4),
       st.dictionaries(st.text(max_size=4), st.integers(), max_size=3))
def test_roundtrip(arrs, meta):
    back, m = decode(encode(arrs, meta))
    assert m == meta and list(back) == list(arrs)
    for k in arrs:
        assert back[k].shape == arrs[k].shape
        np.testing.assert_array_equal(back[k], arrs[k])


def test_layout_by_hand():
    blob = encode({"a": np.array([1.0, 2.0])}, {"x": 1})
    header = b'{"arrays":[{"offset":0,"path":"a","shape":[2]}],"meta":{"x":1}}'
    assert blob == MAGIC + struct.pack("<Q", len(header)) + header + struct.pack("<2d", 1.0, 2.0)


def test_meta_key_order_does_not_change_bytes():
    a = encode({"w": np.ones(2)}, {"b": 1, "a": 2})
    b = encode({"w": np.ones(2)}, {"a": 2, "b": 1})
    assert a == b


def test_bad_magic_and_truncation():
    with pytest.raises(ContainerError):
        decode(b"NOTMAGIC" + bytes(16))
    blob = encode({"a": np.ones(4)})
    with pytest.raises(ContainerError):
        decode(blob[:-8])


def test_save_is_atomic_and_loadable(tmp_path):
    path = tmp_path / "sub" / "c.bin"
    save(path, {"a": np.arange(3.0)}, {"kind": "test"})
    arrs, meta = load(path)
    assert meta == {"kind": "test"} and arrs["a"].tolist() == [0.0, 1.0, 2.0]
    assert [p.name for p in path.parent.iterdir()] == ["c.bin"]
