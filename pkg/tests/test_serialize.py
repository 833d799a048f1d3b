import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from micap.serialize import MAGIC, dumps, load_tensors, loads, save_tensors

dtypes = st.sampled_from([np.float32, np.float64, np.int64])


@st.composite
def tensor_dicts(draw):
    names = draw(st.lists(st.text(min_size=1, max_size=12), min_size=0, max_size=4, unique=True))
    return {n: draw(arrays(draw(dtypes), array_shapes(min_dims=0, max_dims=3, max_side=4),
                           elements=st.integers(-1000, 1000))) for n in names}


@given(tensor_dicts())
def test_round_trip_preserves_names_dtypes_and_bytes(tensors):
    back = loads(dumps(tensors))
    assert list(back) == list(tensors)
    for name, arr in tensors.items():
        assert back[name].dtype == arr.dtype and back[name].shape == arr.shape
        assert back[name].tobytes() == np.ascontiguousarray(arr).tobytes()


def test_encoding_is_byte_stable(tmp_path):
    t = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "step": np.array(3, dtype=np.int64)}
    save_tensors(tmp_path / "a.bin", t)
    save_tensors(tmp_path / "b.bin", t)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.bin").read_bytes()[:4] == MAGIC
    assert np.array_equal(load_tensors(tmp_path / "a.bin")["w"], t["w"])


def test_rejects_foreign_blobs_and_dtypes():
    with pytest.raises(ValueError, match="magic"):
        loads(b"NOPE" + bytes(20))
    with pytest.raises(TypeError):
        dumps({"x": np.ones(2, dtype=np.int8)})
