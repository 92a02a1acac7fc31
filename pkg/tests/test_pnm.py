import numpy as np
import pytest

from ovseg.pnm import PnmParseError, read_pgm, read_pnm, read_ppm, write_pgm, write_ppm


def test_reads_handwritten_p6(tmp_path):
    # 2x2 RGB raster spelled out byte by byte.
    raw = b"P6\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 9, 9, 9])
    p = tmp_path / "tiny.ppm"
    p.write_bytes(raw)
    arr = read_ppm(p)
    assert arr.shape == (2, 2, 3)
    assert arr.dtype == np.uint8
    assert arr[0, 0].tolist() == [255, 0, 0]
    assert arr[1, 1].tolist() == [9, 9, 9]


def test_reads_handwritten_p5(tmp_path):
    raw = b"P5\n3 1\n255\n" + bytes([0, 128, 255])
    p = tmp_path / "tiny.pgm"
    p.write_bytes(raw)
    arr = read_pgm(p)
    assert arr.shape == (1, 3)
    assert arr.tolist() == [[0, 128, 255]]


def test_header_comments_and_odd_whitespace(tmp_path):
    raw = b"P5 # a comment\n# another\n 2\t2 \n255 " + bytes([1, 2, 3, 4])
    p = tmp_path / "weird.pgm"
    p.write_bytes(raw)
    arr = read_pgm(p)
    assert arr.tolist() == [[1, 2], [3, 4]]


def test_roundtrip_ppm(tmp_path):
    rgb = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    p = tmp_path / "rt.ppm"
    write_ppm(p, rgb)
    assert np.array_equal(read_ppm(p), rgb)
    # header is the canonical single-spaced form
    assert p.read_bytes().startswith(b"P6\n3 2\n255\n")


def test_roundtrip_pgm(tmp_path):
    g = np.array([[0, 255], [7, 130]], dtype=np.uint8)
    p = tmp_path / "rt.pgm"
    write_pgm(p, g)
    assert np.array_equal(read_pgm(p), g)


def test_bad_magic_reports_offset(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P3\n1 1\n255\n abc")
    with pytest.raises(PnmParseError) as ei:
        read_pnm(p)
    assert "byte 0" in str(ei.value)


def test_truncated_raster_is_an_error(tmp_path):
    p = tmp_path / "short.ppm"
    p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(PnmParseError):
        read_pnm(p)


def test_wrong_magic_for_typed_reader(tmp_path):
    p = tmp_path / "gray.pgm"
    write_pgm(p, np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(PnmParseError):
        read_ppm(p)


def test_maxval_mismatch(tmp_path):
    p = tmp_path / "odd.pgm"
    p.write_bytes(b"P5\n1 1\n100\n" + bytes([200]))
    with pytest.raises(PnmParseError):
        read_pnm(p)
