import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from adacs.ingestion import (
    KIND_FIELD, KIND_IMAGE, KIND_MASK, KIND_SCORE, FormatError, decode_grid,
    encode_grid, read_grid, read_mask_pgm, read_pgm, write_grid, write_pgm,
)

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=finite))
def test_grid_round_trip_is_bit_exact(arr):
    for kind in (KIND_IMAGE, KIND_SCORE):
        k, out = decode_grid(encode_grid(arr, kind))
        assert k == kind and out.tobytes() == arr.tobytes()


def test_field_and_mask_round_trip(tmp_path, rng):
    u = rng.normal(size=(2, 5, 7))
    write_grid(tmp_path / "u.adcs", u, KIND_FIELD)
    assert read_grid(tmp_path / "u.adcs", expect=KIND_FIELD).tobytes() == u.tobytes()
    m = rng.random((4, 3)) > 0.5
    write_grid(tmp_path / "m.adcs", m, KIND_MASK)
    np.testing.assert_array_equal(read_grid(tmp_path / "m.adcs", expect=KIND_MASK), m)
    with pytest.raises(FormatError):
        read_grid(tmp_path / "m.adcs", expect=KIND_IMAGE)


def test_grid_header_layout():
    buf = encode_grid(np.zeros((2, 3)), KIND_IMAGE)
    assert buf[:4] == b"ADCS" and buf[4] == 0
    assert int.from_bytes(buf[5:9], "little") == 3
    assert int.from_bytes(buf[9:13], "little") == 2
    assert len(buf) == 13 + 6 * 8
    field = encode_grid(np.stack([np.zeros((2, 3)), np.ones((2, 3))]), KIND_FIELD)
    # channel-sequential payload: all dx then all dy
    payload = np.frombuffer(field, "<f8", offset=13)
    np.testing.assert_array_equal(payload, [0] * 6 + [1] * 6)


def test_grid_corruption():
    buf = encode_grid(np.ones((3, 3)), KIND_IMAGE)
    with pytest.raises(FormatError, match="offset"):
        decode_grid(buf[:-1])
    with pytest.raises(FormatError, match="offset"):
        decode_grid(buf + b"x")
    with pytest.raises(FormatError, match="offset 0"):
        decode_grid(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_grid(buf[:5])


def test_read_p5(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 1\n255\n" + bytes([128, 255]))
    np.testing.assert_allclose(read_pgm(p), [[128 / 255, 1.0]])
    assert read_pgm(p)[0, 0] == pytest.approx(0.50196, abs=1e-5)


def test_p2_with_comments_matches_p5(tmp_path):
    raster = np.array([[0, 17, 255], [128, 3, 90]], dtype=np.uint8)
    (tmp_path / "b.pgm").write_bytes(b"P5\n3 2\n255\n" + raster.tobytes())
    (tmp_path / "a.pgm").write_text("P2\n# made by hand\n3 # width\n2\n255\n0 17 255\n# row two\n128 3 90\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), read_pgm(tmp_path / "b.pgm"))


def test_read_16_bit(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5 2 1 65535\n" + np.array([65535, 257], ">u2").tobytes())
    np.testing.assert_allclose(read_pgm(p), [[1.0, 257 / 65535]])


@pytest.mark.parametrize("content", [
    b"P5\n4 4\n255\n" + bytes(10),
    b"P6\n1 1\n255\n\x00",
    b"P5\n4 x\n255\n" + bytes(16),
    b"P2\n2 2\n255\n1 2 3",
    b"P5\n2",
])
def test_pgm_errors_name_offsets(tmp_path, content):
    p = tmp_path / "bad.pgm"
    p.write_bytes(content)
    with pytest.raises(FormatError, match="offset"):
        read_pgm(p)


def test_write_pgm_rounding(tmp_path):
    p = tmp_path / "w.pgm"
    write_pgm(np.zeros((2, 2)), p)
    assert p.read_bytes().endswith(bytes(4))
    write_pgm(np.array([[0.5, 1.0]]), p)
    assert p.read_bytes()[-2:] == bytes([128, 255])


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.floats(0, 1)))
def test_pgm_round_trip_bound(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("pgm") / "x.pgm"
    write_pgm(img, p)
    back = read_pgm(p)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 510 + 1e-15


def test_mask_threshold(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P5\n3 1\n255\n" + bytes([255, 0, 127]))
    np.testing.assert_array_equal(read_mask_pgm(p), [[True, False, False]])
    p.write_bytes(b"P5\n1 1\n255\n" + bytes([128]))
    assert read_mask_pgm(p)[0, 0]
