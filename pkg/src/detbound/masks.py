"""Binary mask machinery: RLE codec, polygon rasterization, box conversions.

Masks travel as column-major run-length counts (alternating zero/one runs,
first run may be empty) or as the compressed 6-bit string form used by the
standard COCO mask wire format. Polygon segmentations rasterize with the
even-odd scanline rule sampled at pixel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import Box
from .errors import CodecError, DetboundError


@dataclass(frozen=True, eq=False)
class Bitmask:
    """Dense boolean raster, shape (height, width), row-major."""

    array: np.ndarray

    @staticmethod
    def from_array(arr: np.ndarray) -> "Bitmask":
        a = np.ascontiguousarray(arr, dtype=bool)
        if a.ndim != 2:
            raise DetboundError(f"mask array must be 2-D, got shape {a.shape}")
        return Bitmask(a)

    @staticmethod
    def zeros(width: int, height: int) -> "Bitmask":
        return Bitmask(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def height(self) -> int:
        return self.array.shape[0]

    def count(self) -> int:
        return int(self.array.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, Bitmask) and np.array_equal(self.array, other.array)


@dataclass(frozen=True)
class RleMask:
    """Column-major run lengths, alternating 0-runs and 1-runs."""

    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise CodecError(f"negative run length in {self.counts[:8]}...")
        if sum(self.counts) != self.width * self.height:
            raise CodecError(
                f"run lengths sum to {sum(self.counts)}, expected {self.width * self.height}"
            )

    def area(self) -> int:
        return sum(self.counts[1::2])


def encode_rle(m: Bitmask) -> RleMask:
    """Run-length encode a raster; exact inverse of decode_rle."""
    flat = m.array.reshape(-1, order="F")
    n = flat.size
    if n == 0:
        return RleMask(m.width, m.height, ())
    breaks = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], breaks, [n]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts = [0] + counts
    return RleMask(m.width, m.height, tuple(int(c) for c in counts))


def decode_rle(r: RleMask) -> Bitmask:
    flat = np.zeros(r.width * r.height, dtype=bool)
    pos = 0
    for i, c in enumerate(r.counts):
        if i % 2 == 1:
            flat[pos : pos + c] = True
        pos += c
    return Bitmask(np.ascontiguousarray(flat.reshape((r.height, r.width), order="F")))


def rle_to_string(r: RleMask) -> str:
    """Compressed string form: 6-bit chunks offset by chr(48), counts
    delta-coded against the count two places back starting at index 3,
    negative deltas via sign extension of the final chunk."""
    cnts = r.counts
    out = []
    for i, c in enumerate(cnts):
        x = int(c)
        if i > 2:
            x -= int(cnts[i - 2])
        more = True
        while more:
            chunk = x & 0x1F
            x >>= 5
            more = (x != -1) if (chunk & 0x10) else (x != 0)
            if more:
                chunk |= 0x20
            out.append(chr(chunk + 48))
    return "".join(out)


def rle_from_string(s: str, width: int, height: int) -> RleMask:
    counts: list[int] = []
    p = 0
    n = len(s)
    while p < n:
        x = 0
        k = 0
        more = True
        while more:
            if p >= n:
                raise CodecError("truncated run-length string")
            c = ord(s[p]) - 48
            if not 0 <= c <= 63:
                raise CodecError(f"invalid character {s[p]!r} at position {p}")
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return RleMask(width, height, tuple(counts))


def rle_to_coco(r: RleMask, *, compressed: bool = True) -> dict:
    counts = rle_to_string(r) if compressed else list(r.counts)
    return {"size": [r.height, r.width], "counts": counts}


def rle_from_coco(d: dict, width: int | None = None, height: int | None = None) -> RleMask:
    size = d.get("size")
    if isinstance(size, (list, tuple)) and len(size) == 2:
        height, width = int(size[0]), int(size[1])
    if width is None or height is None:
        raise CodecError("run-length dict lacks a size and none was supplied")
    counts = d.get("counts")
    if isinstance(counts, str):
        return rle_from_string(counts, width, height)
    if isinstance(counts, (list, tuple)):
        return RleMask(width, height, tuple(int(c) for c in counts))
    raise CodecError(f"unsupported counts type {type(counts).__name__}")


# ---------------------------------------------------------------------------
# Run-interval set operations (exact, no rasterization)


def _one_runs(r: RleMask) -> list[tuple[int, int]]:
    runs = []
    pos = 0
    for i, c in enumerate(r.counts):
        if i % 2 == 1 and c > 0:
            runs.append((pos, pos + c))
        pos += c
    return runs


def _intersection_length(a: list[tuple[int, int]], b: list[tuple[int, int]]) -> int:
    i = j = 0
    total = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            total += hi - lo
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return total


def _check_same_dims(a: RleMask, b: RleMask) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise DetboundError(
            f"mask dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def iou_mask(a: RleMask, b: RleMask) -> float:
    """|a AND b| / |a OR b| over the run lists; exact integer arithmetic."""
    _check_same_dims(a, b)
    inter = _intersection_length(_one_runs(a), _one_runs(b))
    union = a.area() + b.area() - inter
    return inter / union if union else 0.0


def iof_mask(det: RleMask, crowd: RleMask) -> float:
    """Intersection over the detection mask's own area."""
    _check_same_dims(det, crowd)
    area = det.area()
    if area == 0:
        return 0.0
    return _intersection_length(_one_runs(det), _one_runs(crowd)) / area


# ---------------------------------------------------------------------------
# Box conversions


def mask_to_box(m: Bitmask) -> Box:
    """Tightest axis-aligned box covering all set pixels."""
    rows = np.flatnonzero(m.array.any(axis=1))
    if rows.size == 0:
        raise DetboundError("cannot fit a box to an empty mask")
    cols = np.flatnonzero(m.array.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    return Box(float(c0), float(r0), float(c1 - c0 + 1), float(r1 - r0 + 1))


def box_to_mask(b: Box, width: int, height: int) -> Bitmask:
    """Filled rectangle over the pixels whose centers fall inside the box."""
    c0 = max(0, math.ceil(b.x - 0.5))
    c1 = min(width, math.ceil(b.x2 - 0.5))
    r0 = max(0, math.ceil(b.y - 0.5))
    r1 = min(height, math.ceil(b.y2 - 0.5))
    out = np.zeros((height, width), dtype=bool)
    if c1 > c0 and r1 > r0:
        out[r0:r1, c0:c1] = True
    return Bitmask(out)


# ---------------------------------------------------------------------------
# Polygon rasterization


def rasterize_polygon(coords: list[float], width: int, height: int) -> Bitmask:
    """Even-odd scanline fill of one flat [x1,y1,x2,y2,...] polygon, sampled
    at pixel centers; edges are half-open in y so shared vertices count once."""
    if len(coords) < 6 or len(coords) % 2 != 0:
        raise CodecError(f"polygon needs >= 3 (x, y) vertices, got {len(coords)} values")
    xs = coords[0::2]
    ys = coords[1::2]
    n = len(xs)
    out = np.zeros((height, width), dtype=bool)
    for row in range(height):
        cy = row + 0.5
        crossings = []
        for i in range(n):
            x1, y1 = xs[i], ys[i]
            x2, y2 = xs[(i + 1) % n], ys[(i + 1) % n]
            if (y1 <= cy < y2) or (y2 <= cy < y1):
                crossings.append(x1 + (cy - y1) * (x2 - x1) / (y2 - y1))
        crossings.sort()
        for a, b in zip(crossings[0::2], crossings[1::2]):
            c0 = max(0, math.ceil(a - 0.5))
            c1 = min(width, math.ceil(b - 0.5))
            if c1 > c0:
                out[row, c0:c1] = True
    return Bitmask(out)


def decode_mask(segmentation, width: int, height: int) -> Bitmask:
    """Decode a COCO segmentation (polygon list or RLE dict) to a raster;
    multiple polygons are unioned."""
    if isinstance(segmentation, dict):
        return decode_rle(rle_from_coco(segmentation, width, height))
    if isinstance(segmentation, (list, tuple)):
        if not segmentation:
            raise CodecError("empty polygon list")
        acc = np.zeros((height, width), dtype=bool)
        for poly in segmentation:
            if not isinstance(poly, (list, tuple)):
                raise CodecError(f"polygon must be a flat coordinate list, got {type(poly).__name__}")
            acc |= rasterize_polygon(list(poly), width, height).array
        return Bitmask(acc)
    raise CodecError(f"unsupported segmentation type {type(segmentation).__name__}")


def segmentation_to_rle(segmentation, width: int, height: int) -> RleMask:
    """Normalize any accepted segmentation form to run lengths."""
    if isinstance(segmentation, dict):
        return rle_from_coco(segmentation, width, height)
    return encode_rle(decode_mask(segmentation, width, height))
