"""Minimal EXIF reader/writer and EXIF-seeded camera intrinsics.

Only the handful of tags needed to seed a pinhole model are extracted.
Every read goes through a bounds-checked view of the input, so a corrupt or
hostile file produces a ``CassError`` rather than an out-of-range access.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction

from .camera import CameraIntrinsics
from .errors import CassError

FULL_FRAME_DIAGONAL_MM = 43.267

TAG_ORIENTATION = 0x0112
TAG_EXIF_IFD = 0x8769
TAG_FOCAL_LENGTH = 0x920A
TAG_FOCAL_35MM = 0xA405
TAG_PIXEL_X = 0xA002
TAG_PIXEL_Y = 0xA003

# TIFF field type -> size in bytes
TYPE_SIZES = {1: 1, 2: 1, 3: 2, 4: 4, 5: 8, 6: 1, 7: 1, 8: 2, 9: 4, 10: 8, 11: 4, 12: 8}
SHORT, LONG, RATIONAL = 3, 4, 5


@dataclass(frozen=True)
class ExifRecord:
    focal_length_mm: float | None = None
    focal_length_35mm: float | None = None
    pixel_width: int | None = None
    pixel_height: int | None = None
    orientation: int = 1

    @property
    def usable(self) -> bool:
        return self.focal_length_mm is not None or self.focal_length_35mm is not None


@dataclass(frozen=True)
class SensorSpec:
    sensor_width_mm: float
    sensor_height_mm: float

    def __post_init__(self) -> None:
        w, h = float(self.sensor_width_mm), float(self.sensor_height_mm)
        if not (w > 0 and h > 0 and math.isfinite(w) and math.isfinite(h)):
            raise CassError("config-invalid", "sensor dimensions must be positive")
        if w < h:
            w, h = h, w
        object.__setattr__(self, "sensor_width_mm", w)
        object.__setattr__(self, "sensor_height_mm", h)

    @property
    def diagonal_mm(self) -> float:
        return math.hypot(self.sensor_width_mm, self.sensor_height_mm)


class _TiffView:
    """Endian-aware, bounds-checked reads from a TIFF blob."""

    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        if len(buf) < 8:
            raise CassError("malformed-ifd", "TIFF header truncated")
        order = buf[:2]
        if order == b"II":
            self.endian = "<"
        elif order == b"MM":
            self.endian = ">"
        else:
            raise CassError("malformed-ifd", f"bad byte-order mark {order!r}")
        if self.u16(2) != 42:
            raise CassError("malformed-ifd", "bad TIFF magic")

    def _unpack(self, fmt: str, offset: int):
        size = struct.calcsize(fmt)
        if offset < 0 or offset + size > len(self.buf):
            raise CassError("malformed-ifd", f"read of {size} bytes at {offset} exceeds {len(self.buf)}")
        return struct.unpack_from(self.endian + fmt, self.buf, offset)[0]

    def u16(self, offset: int) -> int:
        return self._unpack("H", offset)

    def u32(self, offset: int) -> int:
        return self._unpack("I", offset)

    def i32(self, offset: int) -> int:
        return self._unpack("i", offset)

    def entries(self, offset: int) -> dict[int, tuple[int, int, int]]:
        """``tag -> (type, count, value_offset)`` for one IFD."""
        n = self.u16(offset)
        if offset + 2 + 12 * n > len(self.buf):
            raise CassError("malformed-ifd", f"IFD at {offset} claims {n} entries past end of data")
        out = {}
        for i in range(n):
            pos = offset + 2 + 12 * i
            tag, typ, count = self.u16(pos), self.u16(pos + 2), self.u32(pos + 4)
            size = TYPE_SIZES.get(typ)
            if size is None or count == 0:
                continue
            value_at = pos + 8 if size * count <= 4 else self.u32(pos + 8)
            out.setdefault(tag, (typ, count, value_at))
        return out

    def scalar(self, entry: tuple[int, int, int]) -> float | int | None:
        """First value of an integer or rational field; None for other types or zero denominators."""
        typ, _, at = entry
        if typ == SHORT:
            return self.u16(at)
        if typ == LONG:
            return self.u32(at)
        if typ == RATIONAL:
            num, den = self.u32(at), self.u32(at + 4)
            return num / den if den else None
        if typ == 10:
            num, den = self.i32(at), self.i32(at + 4)
            return num / den if den else None
        return None


def _positive(value: float | int | None) -> float | None:
    if value is None or not value > 0 or not math.isfinite(value):
        return None
    return value


def parse_tiff(buf: bytes) -> ExifRecord:
    view = _TiffView(buf)
    ifd0 = view.entries(view.u32(4))
    tags = dict(ifd0)
    if TAG_EXIF_IFD in ifd0:
        exif_at = view.scalar(ifd0[TAG_EXIF_IFD])
        if not isinstance(exif_at, int):
            raise CassError("malformed-ifd", "Exif IFD pointer has the wrong type")
        for tag, entry in view.entries(exif_at).items():
            tags.setdefault(tag, entry)

    def get(tag: int):
        return view.scalar(tags[tag]) if tag in tags else None

    orientation = get(TAG_ORIENTATION)
    if not isinstance(orientation, int) or not 1 <= orientation <= 8:
        orientation = 1
    width, height = get(TAG_PIXEL_X), get(TAG_PIXEL_Y)
    return ExifRecord(
        focal_length_mm=_positive(get(TAG_FOCAL_LENGTH)),
        focal_length_35mm=_positive(get(TAG_FOCAL_35MM)),
        pixel_width=int(width) if _positive(width) else None,
        pixel_height=int(height) if _positive(height) else None,
        orientation=orientation,
    )


def _find_exif_segment(data: bytes) -> bytes:
    pos = 2
    n = len(data)
    while pos + 4 <= n:
        if data[pos] != 0xFF:
            break
        marker = data[pos + 1]
        if marker == 0xFF:  # fill byte
            pos += 1
            continue
        if marker in (0x01, 0xD8) or 0xD0 <= marker <= 0xD7:
            pos += 2
            continue
        if marker in (0xDA, 0xD9):  # image data follows; metadata is over
            break
        length = (data[pos + 2] << 8) | data[pos + 3]
        if length < 2:
            break
        seg = data[pos + 4 : pos + 2 + length]
        if marker == 0xE1 and seg[:6] == b"Exif\x00\x00":
            if pos + 2 + length > n:
                raise CassError("malformed-ifd", "APP1 segment truncated")
            return seg[6:]
        pos += 2 + length
    raise CassError("no-exif-segment", "no APP1 Exif segment before image data")


def parse_exif(data: bytes) -> ExifRecord:
    """Extract focal length, pixel dimensions and orientation from JPEG or TIFF bytes."""
    data = bytes(data)
    if data[:2] == b"\xff\xd8":
        return parse_tiff(_find_exif_segment(data))
    if data[:4] in (b"II*\x00", b"MM\x00*"):
        return parse_tiff(data)
    raise CassError("not-an-image", "neither a JPEG nor a TIFF stream")


def tiff_bytes(record: ExifRecord, big_endian: bool = False) -> bytes:
    """Serialise ``record`` as a minimal TIFF blob: IFD0 plus one Exif IFD."""
    e = ">" if big_endian else "<"

    ifd0: list[tuple[int, int, int, bytes]] = [(TAG_ORIENTATION, SHORT, 1, struct.pack(e + "HH", record.orientation, 0))]
    exif: list[tuple[int, int, int, bytes]] = []
    extra = b""
    if record.focal_length_mm is not None:
        frac = Fraction(record.focal_length_mm).limit_denominator(100_000)
        exif.append((TAG_FOCAL_LENGTH, RATIONAL, 1, struct.pack(e + "II", frac.numerator, frac.denominator)))
    if record.pixel_width is not None:
        exif.append((TAG_PIXEL_X, LONG, 1, struct.pack(e + "I", record.pixel_width)))
    if record.pixel_height is not None:
        exif.append((TAG_PIXEL_Y, LONG, 1, struct.pack(e + "I", record.pixel_height)))
    if record.focal_length_35mm is not None:
        exif.append((TAG_FOCAL_35MM, SHORT, 1, struct.pack(e + "HH", int(round(record.focal_length_35mm)), 0)))

    ifd0_at = 8
    exif_at = ifd0_at + 2 + 12 * (len(ifd0) + 1) + 4
    data_at = exif_at + 2 + 12 * len(exif) + 4
    ifd0.append((TAG_EXIF_IFD, LONG, 1, struct.pack(e + "I", exif_at)))

    def pack_ifd(entries, data_offset):
        nonlocal extra
        out = struct.pack(e + "H", len(entries))
        for tag, typ, count, payload in sorted(entries):
            if len(payload) > 4:
                out += struct.pack(e + "HHII", tag, typ, count, data_offset + len(extra))
                extra += payload
            else:
                out += struct.pack(e + "HHI", tag, typ, count) + payload.ljust(4, b"\x00")
        return out + struct.pack(e + "I", 0)

    header = (b"MM" if big_endian else b"II") + struct.pack(e + "HI", 42, ifd0_at)
    body0 = pack_ifd(ifd0, data_at)
    body1 = pack_ifd(exif, data_at)
    return header + body0 + body1 + extra


def exif_app1(record: ExifRecord, big_endian: bool = False) -> bytes:
    """Complete APP1 segment (marker, length, ``Exif\\0\\0`` and TIFF payload)."""
    payload = b"Exif\x00\x00" + tiff_bytes(record, big_endian)
    if len(payload) + 2 > 0xFFFF:
        raise CassError("invalid-parameters", "Exif payload too large for one APP1 segment")
    return b"\xff\xe1" + struct.pack(">H", len(payload) + 2) + payload


def insert_exif(jpeg: bytes, record: ExifRecord, big_endian: bool = False) -> bytes:
    """Return ``jpeg`` with an Exif APP1 segment placed right after SOI."""
    if jpeg[:2] != b"\xff\xd8":
        raise CassError("not-an-image", "not a JPEG stream")
    return jpeg[:2] + exif_app1(record, big_endian) + jpeg[2:]


def focal_length_mm(exif: ExifRecord, sensor: SensorSpec) -> float:
    """Physical focal length; the direct tag wins over the 35 mm equivalent."""
    if exif.focal_length_mm is not None:
        return float(exif.focal_length_mm)
    if exif.focal_length_35mm is not None:
        return exif.focal_length_35mm * sensor.diagonal_mm / FULL_FRAME_DIAGONAL_MM
    raise CassError("no-focal-length", "neither FocalLength nor FocalLengthIn35mmFilm is present")


def seed_intrinsics(
    exif: ExifRecord, sensor: SensorSpec, image_width_px: int, image_height_px: int
) -> CameraIntrinsics:
    """Initial pinhole model: square pixels, centred principal point, no distortion.

    The raster's long side is paired with the sensor's long side, so a
    portrait raster divides its width by the sensor height.
    """
    f_mm = focal_length_mm(exif, sensor)
    if image_width_px < 1 or image_height_px < 1:
        raise CassError("invalid-raster", "image dimensions must be positive")
    sensor_side = sensor.sensor_width_mm if image_width_px >= image_height_px else sensor.sensor_height_mm
    f_px = f_mm * image_width_px / sensor_side
    return CameraIntrinsics(f_px, f_px, image_width_px / 2.0, image_height_px / 2.0, 0.0, 0.0)
