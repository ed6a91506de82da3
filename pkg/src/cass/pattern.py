"""Marker dictionaries, board layouts and printable board rasters.

Board coordinates are millimetres with the origin at the top-left corner
of the printed sheet, +X to the right and +Y down.  Every marker sits
centred in a square cell of side ``pitch = square * (1 + margin_ratio)``,
so neighbouring markers are separated by ``margin_ratio * square`` of white
and the sheet edge carries half that gap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import CassError

MAX_ATTEMPTS = 1_000_000

WHITE = 255
BLACK = 0


def _rotation_perms(bit_size: int) -> np.ndarray:
    """Index permutations of a flattened bit grid for 0..3 quarter turns."""
    idx = np.arange(bit_size * bit_size).reshape(bit_size, bit_size)
    return np.stack([np.rot90(idx, k).ravel() for k in range(4)])


@dataclass(frozen=True)
class MarkerDictionary:
    bit_size: int
    codes: tuple[np.ndarray, ...]
    min_distance: int

    def __post_init__(self) -> None:
        frozen = []
        for code in self.codes:
            arr = np.array(code, dtype=np.uint8).reshape(self.bit_size, self.bit_size)
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "codes", tuple(frozen))

    def __len__(self) -> int:
        return len(self.codes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MarkerDictionary):
            return NotImplemented
        return (
            self.bit_size == other.bit_size
            and self.min_distance == other.min_distance
            and len(self.codes) == len(other.codes)
            and all(np.array_equal(a, b) for a, b in zip(self.codes, other.codes))
        )

    def __hash__(self) -> int:
        return hash((self.bit_size, self.min_distance, self.as_array().tobytes()))

    def as_array(self) -> np.ndarray:
        """Codes stacked into a ``(N, bit_size, bit_size)`` uint8 array."""
        if not self.codes:
            return np.zeros((0, self.bit_size, self.bit_size), dtype=np.uint8)
        return np.stack(self.codes)


def generate_dictionary(
    bit_size: int, count: int, min_distance: int, seed: int, max_attempts: int = MAX_ATTEMPTS
) -> MarkerDictionary:
    """Greedy random dictionary synthesis.

    Candidates are drawn from a generator seeded with ``seed`` and accepted
    when their Hamming distance to every rotation of every accepted code,
    and to their own non-identity rotations, is at least ``min_distance``.
    Raises ``unsatisfiable-dictionary`` once ``max_attempts`` candidates have
    been examined without reaching ``count`` codes.
    """
    if bit_size < 3 or bit_size > 8:
        raise CassError("invalid-parameters", f"bit_size must be in [3, 8], got {bit_size}")
    if count < 1 or min_distance < 1:
        raise CassError("invalid-parameters", "count and min_distance must be >= 1")

    nbits = bit_size * bit_size
    perms = _rotation_perms(bit_size)
    rng = np.random.default_rng(seed)
    accepted: list[np.ndarray] = []
    # every accepted code in all four rotations, one row per rotation
    rotated = np.zeros((0, nbits), dtype=bool)
    attempts = 0

    while attempts < max_attempts:
        batch = max(64, min(4096, (1 << 24) // max(1, len(rotated) * nbits)))
        batch = min(batch, max_attempts - attempts)
        cand = rng.integers(0, 2, size=(batch, nbits), dtype=np.uint8).astype(bool)

        ok = np.ones(batch, dtype=bool)
        for k in (1, 2, 3):
            ok &= (cand != cand[:, perms[k]]).sum(axis=1) >= min_distance
        if len(rotated):
            dist = (cand[:, None, :] != rotated[None, :, :]).sum(axis=2).min(axis=1)
            ok &= dist >= min_distance

        fresh_start = len(rotated)
        for i in np.flatnonzero(ok):
            code = cand[i]
            fresh = rotated[fresh_start:]
            if len(fresh) and (fresh != code).sum(axis=1).min() < min_distance:
                continue
            accepted.append(code.reshape(bit_size, bit_size).astype(np.uint8))
            rotated = np.vstack([rotated, code[perms]])
            if len(accepted) == count:
                return MarkerDictionary(bit_size, tuple(accepted), min_distance)
        attempts += batch

    raise CassError(
        "unsatisfiable-dictionary",
        f"placed {len(accepted)} of {count} codes after {attempts} attempts",
    )


def dictionary_min_distance(dictionary: MarkerDictionary) -> int:
    """Exhaustive minimum over pairwise-rotation and self-rotation distances."""
    codes = dictionary.as_array().reshape(len(dictionary), -1).astype(bool)
    perms = _rotation_perms(dictionary.bit_size)
    best = dictionary.bit_size**2
    for k in range(4):
        rot = codes[:, perms[k]]
        dist = (codes[:, None, :] != rot[None, :, :]).sum(axis=2)
        if k == 0:
            np.fill_diagonal(dist, best)
        best = min(best, int(dist.min()))
    return best


@lru_cache(maxsize=1)
def default_dictionary() -> MarkerDictionary:
    """4x4 bits, 50 codes, minimum distance 4, seed 0."""
    return generate_dictionary(4, 50, 4, 0)


@dataclass(frozen=True)
class BoardSpec:
    rows: int
    cols: int
    square_length_mm: float
    margin_ratio: float = 0.25
    marker_ids: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise CassError("invalid-board", "rows and cols must be positive")
        if not self.square_length_mm > 0:
            raise CassError("invalid-board", "square_length_mm must be positive")
        if not 0 <= self.margin_ratio < 1:
            raise CassError("invalid-board", "margin_ratio must lie in [0, 1)")
        ids = tuple(int(i) for i in self.marker_ids) or tuple(range(self.rows * self.cols))
        if len(ids) != self.rows * self.cols:
            raise CassError("invalid-board", f"expected {self.rows * self.cols} marker ids, got {len(ids)}")
        if len(set(ids)) != len(ids) or min(ids) < 0:
            raise CassError("invalid-board", "marker ids must be distinct and non-negative")
        object.__setattr__(self, "marker_ids", ids)

    @property
    def pitch_mm(self) -> float:
        return self.square_length_mm * (1.0 + self.margin_ratio)

    @property
    def board_width_mm(self) -> float:
        return self.cols * self.pitch_mm

    @property
    def board_height_mm(self) -> float:
        return self.rows * self.pitch_mm

    def position(self, marker_id: int) -> tuple[int, int]:
        """Grid ``(row, col)`` of a marker."""
        try:
            k = self.marker_ids.index(marker_id)
        except ValueError:
            raise CassError("unknown-marker", f"marker {marker_id} is not on this board") from None
        return divmod(k, self.cols)

    def with_square_length(self, square_length_mm: float) -> BoardSpec:
        """Same layout rescaled so one marker square measures ``square_length_mm``."""
        return BoardSpec(self.rows, self.cols, square_length_mm, self.margin_ratio, self.marker_ids)


def corner_coords(spec: BoardSpec, marker_id: int) -> np.ndarray:
    """Outer corners of a marker in board mm, clockwise from top-left, shape (4, 2)."""
    r, c = spec.position(marker_id)
    s = spec.square_length_mm
    off = 0.5 * spec.margin_ratio * s
    x0 = c * spec.pitch_mm + off
    y0 = r * spec.pitch_mm + off
    return np.array([[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]], dtype=float)


def board_corner_table(spec: BoardSpec) -> dict[int, np.ndarray]:
    return {mid: corner_coords(spec, mid) for mid in spec.marker_ids}


def sample_board(
    dictionary: MarkerDictionary,
    spec: BoardSpec,
    x_mm: np.ndarray,
    y_mm: np.ndarray,
    background: int = 128,
) -> np.ndarray:
    """Point-sample the ideal board at arbitrary mm coordinates.

    Returns uint8 values: 0 for black modules, 255 for paper, ``background``
    outside the sheet.
    """
    codes = dictionary.as_array()
    if spec.marker_ids and max(spec.marker_ids) >= len(codes):
        raise CassError("id-out-of-range", f"board uses id {max(spec.marker_ids)}, dictionary has {len(codes)}")
    n = dictionary.bit_size
    x = np.asarray(x_mm, dtype=float)
    y = np.asarray(y_mm, dtype=float)
    pitch = spec.pitch_mm
    s = spec.square_length_mm
    off = 0.5 * spec.margin_ratio * s
    module = s / (n + 2)

    out = np.full(np.broadcast(x, y).shape, WHITE, dtype=np.uint8)
    x, y = np.broadcast_arrays(x, y)
    on_sheet = (x >= 0) & (x < spec.board_width_mm) & (y >= 0) & (y < spec.board_height_mm)
    out[~on_sheet] = background

    col = np.floor(x / pitch).astype(np.int64)
    row = np.floor(y / pitch).astype(np.int64)
    lx = x - col * pitch - off
    ly = y - row * pitch - off
    inside = on_sheet & (lx >= 0) & (lx < s) & (ly >= 0) & (ly < s)
    inside &= (col >= 0) & (col < spec.cols) & (row >= 0) & (row < spec.rows)

    mj = np.clip(np.floor(lx[inside] / module).astype(np.int64), 0, n + 1)
    mi = np.clip(np.floor(ly[inside] / module).astype(np.int64), 0, n + 1)
    ids = np.asarray(spec.marker_ids, dtype=np.int64).reshape(spec.rows, spec.cols)
    mid = ids[row[inside], col[inside]]
    border = (mi == 0) | (mi == n + 1) | (mj == 0) | (mj == n + 1)
    bits = np.zeros(mid.shape, dtype=np.uint8)
    data = ~border
    bits[data] = codes[mid[data], mi[data] - 1, mj[data] - 1]
    out[inside] = np.where(bits == 1, WHITE, BLACK).astype(np.uint8)
    return out


def board_raster_shape(spec: BoardSpec, px_per_mm: float) -> tuple[int, int]:
    """``(height, width)`` of the board raster at ``px_per_mm``."""
    return (
        max(1, int(round(spec.board_height_mm * px_per_mm))),
        max(1, int(round(spec.board_width_mm * px_per_mm))),
    )


def render_board(dictionary: MarkerDictionary, spec: BoardSpec, px_per_mm: float) -> np.ndarray:
    """Pure black/white raster of the board.

    Pixel ``[i, j]`` covers ``[j, j+1) x [i, i+1)`` in raster units and takes
    the board value at its centre, so a board point at ``(X, Y)`` mm lands at
    raster coordinate ``(X * px_per_mm, Y * px_per_mm)``.
    """
    if not px_per_mm > 0:
        raise CassError("invalid-parameters", "px_per_mm must be positive")
    h, w = board_raster_shape(spec, px_per_mm)
    xs = (np.arange(w) + 0.5) / px_per_mm
    ys = (np.arange(h) + 0.5) / px_per_mm
    return sample_board(dictionary, spec, xs[None, :], ys[:, None], background=WHITE)


def pack_code(code: np.ndarray) -> str:
    """Row-major, MSB-first bit packing, zero padded to whole bytes, as hex."""
    return np.packbits(np.asarray(code, dtype=np.uint8).ravel()).tobytes().hex()


def unpack_code(text: str, bit_size: int) -> np.ndarray:
    raw = np.frombuffer(bytes.fromhex(text), dtype=np.uint8)
    bits = np.unpackbits(raw)[: bit_size * bit_size]
    if bits.size != bit_size * bit_size:
        raise CassError("config-invalid", f"code {text!r} too short for {bit_size}x{bit_size} bits")
    return bits.reshape(bit_size, bit_size)


def board_to_json(dictionary: MarkerDictionary, spec: BoardSpec) -> dict:
    return {
        "bit_size": dictionary.bit_size,
        "min_distance": dictionary.min_distance,
        "codes": [pack_code(c) for c in dictionary.codes],
        "rows": spec.rows,
        "cols": spec.cols,
        "square_length_mm": spec.square_length_mm,
        "margin_ratio": spec.margin_ratio,
        "marker_ids": list(spec.marker_ids),
    }


def board_from_json(doc: dict) -> tuple[MarkerDictionary, BoardSpec]:
    try:
        n = int(doc["bit_size"])
        codes = tuple(unpack_code(c, n) for c in doc["codes"])
        spec = BoardSpec(
            rows=int(doc["rows"]),
            cols=int(doc["cols"]),
            square_length_mm=float(doc["square_length_mm"]),
            margin_ratio=float(doc["margin_ratio"]),
            marker_ids=tuple(int(i) for i in doc["marker_ids"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CassError):
            raise
        raise CassError("config-invalid", f"bad board document: {exc}") from exc
    dictionary = MarkerDictionary(n, codes, int(doc.get("min_distance", 1)))
    if "min_distance" not in doc:
        dictionary = MarkerDictionary(n, codes, dictionary_min_distance(dictionary))
    if max(spec.marker_ids) >= len(dictionary):
        raise CassError("id-out-of-range", "board references ids beyond the dictionary")
    return dictionary, spec


def save_board(path: str | Path, dictionary: MarkerDictionary, spec: BoardSpec) -> None:
    Path(path).write_text(json.dumps(board_to_json(dictionary, spec), indent=2) + "\n")


def load_board(path: str | Path) -> tuple[MarkerDictionary, BoardSpec]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CassError("config-invalid", f"cannot read board spec {path}: {exc}") from exc
    return board_from_json(doc)
