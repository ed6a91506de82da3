import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from cass.errors import CassError
from cass.exif import (
    ExifRecord,
    SensorSpec,
    _TiffView,
    exif_app1,
    focal_length_mm,
    insert_exif,
    parse_exif,
    parse_tiff,
    seed_intrinsics,
    tiff_bytes,
)

RECORD = ExifRecord(focal_length_mm=4.15, focal_length_35mm=29, pixel_width=3264, pixel_height=2448, orientation=6)


def plain_jpeg(w=16, h=12):
    buf = io.BytesIO()
    Image.fromarray(np.full((h, w), 128, np.uint8)).save(buf, format="JPEG")
    return buf.getvalue()


@pytest.fixture
def guarded(monkeypatch):
    """Record every read made through the bounds-checked view."""
    reads = []
    original = _TiffView._unpack

    def spy(self, fmt, offset):
        value = original(self, fmt, offset)
        reads.append((offset, struct.calcsize(fmt), len(self.buf)))
        return value

    monkeypatch.setattr(_TiffView, "_unpack", spy)
    return reads


def assert_in_bounds(reads):
    # only reads that returned a value are recorded; each must lie in the buffer
    for offset, size, n in reads:
        assert 0 <= offset and offset + size <= n


@pytest.mark.parametrize("big_endian", [False, True])
def test_tiff_focal_rational_matches_reference_reader(big_endian):
    blob = tiff_bytes(ExifRecord(focal_length_mm=4.15), big_endian)
    assert blob[:2] == (b"MM" if big_endian else b"II")
    rec = parse_tiff(blob)
    assert rec.focal_length_mm == 415 / 100
    # Pillow's EXIF reader as the independent oracle
    ref = Image.Exif()
    ref.load(blob)
    assert float(ref.get_ifd(0x8769)[0x920A]) == 4.15


def test_little_and_big_endian_identical():
    assert parse_tiff(tiff_bytes(RECORD, False)) == parse_tiff(tiff_bytes(RECORD, True)) == RECORD


@pytest.mark.parametrize("big_endian", [False, True])
def test_jpeg_round_trip(big_endian):
    jpeg = insert_exif(plain_jpeg(), RECORD, big_endian)
    assert parse_exif(jpeg) == RECORD
    with Image.open(io.BytesIO(jpeg)) as im:
        exif = im.getexif()
        assert exif[0x0112] == 6
        sub = exif.get_ifd(0x8769)
        assert float(sub[0x920A]) == 4.15 and sub[0xA405] == 29
        assert (sub[0xA002], sub[0xA003]) == (3264, 2448)


@settings(max_examples=60, deadline=None)
@given(
    num=st.integers(1, 10**6), den=st.integers(1, 1000), f35=st.one_of(st.none(), st.integers(1, 2000)),
    w=st.one_of(st.none(), st.integers(1, 2**31)), orient=st.integers(1, 8), be=st.booleans(),
)
def test_round_trip_property(num, den, f35, w, orient, be):
    rec = ExifRecord(num / den, f35, w, w, orient)
    assert parse_exif(insert_exif(plain_jpeg(), rec, be)) == rec


def test_missing_focal_tags():
    rec = parse_exif(insert_exif(plain_jpeg(), ExifRecord(pixel_width=10, pixel_height=10)))
    assert rec.focal_length_mm is None and rec.focal_length_35mm is None and not rec.usable
    with pytest.raises(CassError) as exc:
        focal_length_mm(rec, SensorSpec(4.8, 3.6))
    assert exc.value.code == "no-focal-length"


def test_jpeg_without_app1():
    with pytest.raises(CassError) as exc:
        parse_exif(plain_jpeg())
    assert exc.value.code == "no-exif-segment"


def test_bad_magic():
    for data in (b"", b"GIF89a....", b"\x89PNG\r\n\x1a\n"):
        with pytest.raises(CassError) as exc:
            parse_exif(data)
        assert exc.value.code == "not-an-image"


def test_zero_denominator_is_absent():
    blob = bytearray(tiff_bytes(ExifRecord(focal_length_mm=4.0)))
    # the rational payload is the last 8 bytes; zero the denominator
    blob[-4:] = b"\x00\x00\x00\x00"
    assert parse_tiff(bytes(blob)).focal_length_mm is None


@pytest.mark.parametrize("cut", range(0, 80, 3))
def test_truncated_ifd(cut, guarded):
    blob = tiff_bytes(RECORD)
    try:
        parse_tiff(blob[:cut])
    except CassError as exc:
        assert exc.code == "malformed-ifd"
    assert_in_bounds(guarded)


def test_out_of_range_offsets():
    blob = bytearray(tiff_bytes(RECORD))
    blob[4:8] = struct.pack("<I", 10_000)  # IFD0 past the end
    with pytest.raises(CassError) as exc:
        parse_tiff(bytes(blob))
    assert exc.value.code == "malformed-ifd"


def test_fuzzed_streams_only_raise_typed_errors(guarded):
    rng = np.random.default_rng(0)
    base = insert_exif(plain_jpeg(), RECORD, True)
    tiff = tiff_bytes(RECORD)
    for i in range(3000):
        src = bytearray(base if i % 2 else tiff)
        for _ in range(int(rng.integers(1, 8))):
            src[int(rng.integers(len(src)))] = int(rng.integers(256))
        data = bytes(src[: int(rng.integers(0, len(src) + 1))])
        try:
            parse_exif(data)
        except CassError:
            pass
    assert guarded
    assert_in_bounds(guarded)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_arbitrary_bytes(data):
    for blob in (data, b"II*\x00" + data, b"MM\x00*" + data, b"\xff\xd8\xff\xe1" + data):
        try:
            parse_exif(blob)
        except CassError:
            pass


def test_app1_segment_layout():
    seg = exif_app1(RECORD)
    assert seg[:2] == b"\xff\xe1" and seg[4:10] == b"Exif\x00\x00"
    assert struct.unpack(">H", seg[2:4])[0] == len(seg) - 2


def test_seed_intrinsics_example():
    intr = seed_intrinsics(ExifRecord(focal_length_mm=4.15), SensorSpec(4.80, 3.60), 3264, 2448)
    assert intr.fx == pytest.approx(2821.9, abs=0.1)
    assert intr.fx == intr.fy
    assert (intr.cx, intr.cy, intr.k1, intr.k2) == (1632, 1224, 0, 0)


def test_35mm_conversion():
    assert focal_length_mm(ExifRecord(focal_length_35mm=29), SensorSpec(4.80, 3.60)) == pytest.approx(29 * 6.0 / 43.267)
    assert focal_length_mm(ExifRecord(focal_length_35mm=29), SensorSpec(4.80, 3.60)) == pytest.approx(4.021, abs=1e-3)


def test_direct_focal_wins():
    rec = ExifRecord(focal_length_mm=5.0, focal_length_35mm=29)
    assert focal_length_mm(rec, SensorSpec(4.8, 3.6)) == 5.0


def test_portrait_pairs_long_sides():
    sensor = SensorSpec(3.6, 4.8)  # swapped to landscape on construction
    assert (sensor.sensor_width_mm, sensor.sensor_height_mm) == (4.8, 3.6)
    land = seed_intrinsics(ExifRecord(4.0), sensor, 4000, 3000)
    port = seed_intrinsics(ExifRecord(4.0), sensor, 3000, 4000)
    assert land.fx == pytest.approx(port.fx)


@settings(max_examples=50, deadline=None)
@given(w=st.integers(1, 5000), h=st.integers(1, 5000), f=st.floats(0.5, 50))
def test_halving_raster_halves_intrinsics(w, h, f):
    sensor = SensorSpec(6.4, 4.8)
    full = seed_intrinsics(ExifRecord(f), sensor, 2 * w, 2 * h)
    half = seed_intrinsics(ExifRecord(f), sensor, w, h)
    assert (half.fx, half.fy, half.cx, half.cy) == (full.fx / 2, full.fy / 2, full.cx / 2, full.cy / 2)


def test_invalid_sensor():
    with pytest.raises(CassError):
        SensorSpec(0, 3)
