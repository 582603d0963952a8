"""Container format: round trips, error taxonomy, naming helpers."""

import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obsprune.tensorstore import (
    BadMagicError,
    ContainerError,
    GradientSet,
    Tensor,
    TensorContainer,
    TruncatedError,
    UnknownDtypeError,
    UnsupportedVersionError,
    grads_name,
    layer_ids,
    mask_name,
    read_container,
    weight_name,
    write_container,
)


def roundtrip(tmp_path, box):
    path = tmp_path / "t.ovpt"
    write_container(path, box)
    return read_container(path)


def test_roundtrip_preserves_everything(tmp_path):
    box = TensorContainer()
    box.add("layer.0.weight", np.arange(12, dtype=np.float64).reshape(3, 4))
    box.add("layer.0.mask", np.array([0, 1, 1], dtype=np.uint8))
    box.add("layer.1.weight", np.float32([[1.5, -2.5]]))
    out = roundtrip(tmp_path, box)
    assert out.names() == ["layer.0.weight", "layer.0.mask", "layer.1.weight"]
    assert out == box
    assert out["layer.1.weight"].dtype == "f32"
    assert out["layer.0.weight"].dims == (3, 4)


def test_roundtrip_is_bit_exact_for_awkward_floats(tmp_path):
    vals = np.array([0.1, -0.0, np.nextafter(1.0, 2.0), 1e-300, np.nan, np.inf])
    box = TensorContainer()
    box.add("layer.0.weight", vals)
    out = roundtrip(tmp_path, box)
    assert out["layer.0.weight"].data.tobytes() == vals.tobytes()


@settings(max_examples=50, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=3),
    seed=st.integers(0, 2**32 - 1),
    dtype=st.sampled_from(["f32", "f64"]),
)
def test_roundtrip_property(tmp_path_factory, shape, seed, dtype):
    rng = np.random.default_rng(seed)
    arr = rng.standard_normal(shape)
    arr = arr.astype(np.float32 if dtype == "f32" else np.float64)
    box = TensorContainer()
    box.add("layer.0.weight", arr)
    path = tmp_path_factory.mktemp("rt") / "t.ovpt"
    write_container(path, box)
    back = read_container(path)["layer.0.weight"]
    assert back.dtype == dtype
    assert back.dims == tuple(shape)
    np.testing.assert_array_equal(back.array(), arr)


def test_write_then_read_twice_identical_bytes(tmp_path):
    box = TensorContainer()
    box.add("layer.0.weight", np.linspace(0, 1, 7))
    p1, p2 = tmp_path / "a.ovpt", tmp_path / "b.ovpt"
    write_container(p1, box)
    write_container(p2, box)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ovpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(BadMagicError):
        read_container(path)


def test_unsupported_version(tmp_path):
    box = TensorContainer()
    box.add("layer.0.weight", np.zeros(2))
    path = tmp_path / "t.ovpt"
    write_container(path, box)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersionError):
        read_container(path)


def test_unknown_dtype_code(tmp_path):
    box = TensorContainer()
    box.add("x", np.zeros(2))
    path = tmp_path / "t.ovpt"
    write_container(path, box)
    raw = bytearray(path.read_bytes())
    # dtype byte sits right after magic+version+count+name_len+name
    off = 4 + 4 + 4 + 4 + len("x")
    assert raw[off] in (0, 1, 2)
    raw[off] = 77
    path.write_bytes(bytes(raw))
    with pytest.raises(UnknownDtypeError):
        read_container(path)


@pytest.mark.parametrize("cut", [2, 5, 9, 16, -1])
def test_truncation_always_raises_truncated(tmp_path, cut):
    box = TensorContainer()
    box.add("layer.0.weight", np.arange(6, dtype=np.float64))
    box.add("layer.0.mask", np.ones(6, dtype=np.uint8))
    path = tmp_path / "t.ovpt"
    write_container(path, box)
    raw = path.read_bytes()
    path.write_bytes(raw[:cut] if cut > 0 else raw[:-1])
    with pytest.raises(TruncatedError):
        read_container(path)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_truncation_fuzz_never_misparses(tmp_path_factory, data):
    """Any strict prefix of a valid file must raise a container error,
    never return garbage or crash with an unrelated exception."""
    box = TensorContainer()
    box.add("layer.0.weight", np.arange(5, dtype=np.float32))
    path = tmp_path_factory.mktemp("fz") / "t.ovpt"
    write_container(path, box)
    raw = path.read_bytes()
    cut = data.draw(st.integers(0, len(raw) - 1))
    path.write_bytes(raw[:cut])
    with pytest.raises(ContainerError):
        read_container(path)


def test_trailing_garbage_rejected(tmp_path):
    box = TensorContainer()
    box.add("x", np.zeros(3))
    path = tmp_path / "t.ovpt"
    write_container(path, box)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ContainerError):
        read_container(path)


def test_duplicate_name_rejected():
    box = TensorContainer()
    box.add("x", np.zeros(2))
    with pytest.raises(ContainerError):
        box.add("x", np.zeros(2))


def test_mask_values_validated():
    with pytest.raises(ContainerError):
        Tensor.from_array(np.array([0, 1, 2], dtype=np.uint8))


def test_gradient_set_shape_checks():
    g = GradientSet("0", np.ones((4, 3)))
    assert g.num_samples == 4 and g.dim == 3
    with pytest.raises(ValueError):
        GradientSet("0", np.ones(3))
    with pytest.raises(ValueError):
        GradientSet("0", np.ones((0, 3)))


def test_layer_naming_and_discovery():
    box = TensorContainer()
    box.add(weight_name("2"), np.zeros(2))
    box.add(weight_name("0"), np.zeros(2))
    box.add(grads_name("0"), np.zeros((1, 2)))
    box.add(mask_name("0"), np.zeros(2, dtype=np.uint8))
    assert layer_ids(box) == ["0", "2"]
