import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from corrfabr.tensor_io import (TensorFormatError, as_tensor, decode_tensor, derive_seed,
                                encode_tensor, image_to_tensor, load_tensor, make_rng,
                                save_tensor, stable_hash)


def test_known_layout_five_float64(tmp_path):
    # 4 magic + 3 header bytes + one uint64 extent + 5 * 8 payload = 55 bytes
    path = tmp_path / "v.cftn"
    save_tensor([1.0, 2.0, 3.0, 4.0, 5.0], path)
    raw = path.read_bytes()
    assert len(raw) == 55
    assert raw[:7] == b"CFTN\x01\x02\x01"
    assert struct.unpack("<Q", raw[7:15]) == (5,)
    assert struct.unpack("<5d", raw[15:]) == (1.0, 2.0, 3.0, 4.0, 5.0)


def test_float32_widens_on_load(tmp_path):
    path = tmp_path / "m.cftn"
    save_tensor(np.array([[0.1, 0.2], [0.3, 0.4]]), path, dtype="f32")
    raw = path.read_bytes()
    assert raw[5] == 1 and len(raw) == 7 + 16 + 16
    back = load_tensor(path)
    assert back.dtype == np.float64
    np.testing.assert_array_equal(back, np.float32([[0.1, 0.2], [0.3, 0.4]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple),
              elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_roundtrip_is_bit_exact(a):
    np.testing.assert_array_equal(decode_tensor(encode_tensor(a)), a)


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XFTN" + b[4:], "bad magic"),
    (lambda b: b[:4] + b"\x02" + b[5:], "unsupported version"),
    (lambda b: b[:5] + b"\x07" + b[6:], "unsupported dtype"),
    (lambda b: b[:10], "truncated header"),
    (lambda b: b[:-1], "truncated payload"),
    (lambda b: b + b"\x00", "trailing bytes"),
])
def test_corrupt_buffers_rejected(mutate, message):
    buf = encode_tensor(np.arange(6.0).reshape(2, 3))
    with pytest.raises(TensorFormatError, match=message):
        decode_tensor(mutate(buf))


def test_as_tensor_validation():
    with pytest.raises(TensorFormatError, match="shape/data mismatch"):
        as_tensor([1, 2, 3], (2, 2))
    with pytest.raises(TensorFormatError, match="non-finite"):
        as_tensor([1.0, np.nan])
    with pytest.raises(TensorFormatError, match="positive"):
        as_tensor(np.zeros((0, 3)))
    assert as_tensor(range(6), (2, 3)).shape == (2, 3)


def test_rng_is_seeded_pcg64():
    a = make_rng(7).standard_normal(5)
    b = np.random.Generator(np.random.PCG64(7)).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        make_rng(-1)


def test_derived_seeds_are_stable_and_distinct():
    assert stable_hash("case001") == stable_hash("case001")
    assert derive_seed(3, "a") != derive_seed(3, "b")
    assert derive_seed(3, "a") == 3 ^ stable_hash("a")


def test_image_conversion(tmp_path):
    from PIL import Image
    rgb = np.random.default_rng(0).integers(0, 256, (6, 5, 3), dtype=np.uint8)
    Image.fromarray(rgb).save(tmp_path / "x.png")
    Image.fromarray(rgb[..., 0]).save(tmp_path / "g.png")
    out = image_to_tensor(tmp_path / "x.png", tmp_path / "x.cftn")
    np.testing.assert_array_equal(out, rgb)
    np.testing.assert_array_equal(load_tensor(tmp_path / "x.cftn"), rgb)
    assert image_to_tensor(tmp_path / "g.png").shape == (6, 5)
