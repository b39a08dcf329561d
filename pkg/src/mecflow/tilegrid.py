"""Web-Mercator tile and quadkey math.

A quadkey encodes a tile's zoom level, column, and row as a string of
quadrant digits 0-3; the prefix relation between two keys is exactly
spatial containment between their tiles.  Edge nodes register the tile
they serve and region-of-interest filters are expressed as sets of keys,
so everything geographic in the platform reduces to the handful of pure
functions below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

TILE_SIZE = 256
MIN_LEVEL = 1
MAX_LEVEL = 23

# Latitude where the square Web-Mercator map is cut off: atan(sinh(pi)).
LAT_CLIP = 85.05112878

# Guard against accidentally enumerating continent-sized covers.
MAX_COVER_TILES = 4096


class InvalidDigit(ValueError):
    """A quadkey contains a character outside {0,1,2,3}."""


class CoverTooLarge(ValueError):
    """A bounding box covers more tiles than the enumeration guard allows."""


@dataclass(frozen=True)
class GeoPosition:
    """WGS-84 position in degrees: lat in [-90, 90], lon in [-180, 180)."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError("latitude and longitude must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180)")


@dataclass(frozen=True)
class Tile:
    """Tile column/row at a zoom level; indices run 0 .. 2^level - 1."""

    x: int
    y: int
    level: int

    def __post_init__(self) -> None:
        if not MIN_LEVEL <= self.level <= MAX_LEVEL:
            raise ValueError(f"level {self.level} outside [{MIN_LEVEL}, {MAX_LEVEL}]")
        n = 1 << self.level
        if not 0 <= self.x < n:
            raise ValueError(f"tile x {self.x} outside [0, {n})")
        if not 0 <= self.y < n:
            raise ValueError(f"tile y {self.y} outside [0, {n})")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned geographic box; antimeridian-crossing boxes are rejected."""

    south: float
    west: float
    north: float
    east: float

    def __post_init__(self) -> None:
        for name, value in (("south", self.south), ("west", self.west),
                            ("north", self.north), ("east", self.east)):
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite")
        if not (-90.0 <= self.south <= self.north <= 90.0):
            raise ValueError("need -90 <= south <= north <= 90")
        if not (-180.0 <= self.west <= self.east <= 180.0):
            raise ValueError("need -180 <= west <= east <= 180")


def validate_quadkey(quadkey: str) -> str:
    """Return ``quadkey`` if it is a well-formed key, else raise.

    Raises:
        InvalidDigit: empty key, key longer than the maximum level, or any
            character outside the quadrant alphabet.
    """
    if not quadkey or len(quadkey) > MAX_LEVEL:
        raise InvalidDigit(f"quadkey length must be in [1, {MAX_LEVEL}]: {quadkey!r}")
    for ch in quadkey:
        if ch not in "0123":
            raise InvalidDigit(f"invalid quadkey digit {ch!r} in {quadkey!r}")
    return quadkey


def map_size(level: int) -> int:
    """Width (= height) of the world map in pixels at ``level``."""
    return TILE_SIZE << level


def _check_level(level: int) -> None:
    if not MIN_LEVEL <= level <= MAX_LEVEL:
        raise ValueError(f"level {level} outside [{MIN_LEVEL}, {MAX_LEVEL}]")


def _pixel_xy(lat: float, lon: float, level: int) -> tuple[int, int]:
    """Project raw lat/lon onto pixel coordinates, clipping and clamping.

    Latitude is clipped to the Mercator cutoff, and the resulting pixel is
    clamped into [0, map_size - 1] so every finite input lands on the map.
    """
    lat = min(max(lat, -LAT_CLIP), LAT_CLIP)
    lon = min(max(lon, -180.0), 180.0)

    x = (lon + 180.0) / 360.0
    sin_lat = math.sin(lat * math.pi / 180.0)
    y = 0.5 - math.log((1.0 + sin_lat) / (1.0 - sin_lat)) / (4.0 * math.pi)

    size = map_size(level)
    pixel_x = int(min(max(x * size, 0.0), size - 1))
    pixel_y = int(min(max(y * size, 0.0), size - 1))
    return pixel_x, pixel_y


def latlon_to_tile(pos: GeoPosition, level: int) -> Tile:
    """Tile containing ``pos`` at ``level``.

    Total for every valid position: poles and the antimeridian edge clamp
    into the outermost rows/columns instead of failing.
    """
    _check_level(level)
    pixel_x, pixel_y = _pixel_xy(pos.lat, pos.lon, level)
    return Tile(pixel_x // TILE_SIZE, pixel_y // TILE_SIZE, level)


def tile_to_quadkey(tile: Tile) -> str:
    """Interleave the bits of column and row into quadrant digits."""
    digits = []
    for i in range(tile.level, 0, -1):
        mask = 1 << (i - 1)
        digit = 0
        if tile.x & mask:
            digit += 1
        if tile.y & mask:
            digit += 2
        digits.append(str(digit))
    return "".join(digits)


def quadkey_to_tile(quadkey: str) -> Tile:
    """Exact inverse of :func:`tile_to_quadkey`; level is the digit count."""
    validate_quadkey(quadkey)
    x = y = 0
    for ch in quadkey:
        digit = ord(ch) - ord("0")
        x = (x << 1) | (digit & 1)
        y = (y << 1) | (digit >> 1)
    return Tile(x, y, len(quadkey))


def quadkey_contains(ancestor: str, other: str) -> bool:
    """True iff ``ancestor``'s tile spatially contains ``other``'s (or equals it)."""
    validate_quadkey(ancestor)
    validate_quadkey(other)
    return other.startswith(ancestor)


def quadkey_parent(quadkey: str) -> str:
    """Key of the enclosing tile one level up."""
    validate_quadkey(quadkey)
    if len(quadkey) == 1:
        raise InvalidDigit(f"level-1 key {quadkey!r} has no parent")
    return quadkey[:-1]


def tile_center(tile: Tile) -> GeoPosition:
    """Geographic center of a tile (inverse Mercator of its middle pixel)."""
    size = map_size(tile.level)
    px = tile.x * TILE_SIZE + TILE_SIZE // 2
    py = tile.y * TILE_SIZE + TILE_SIZE // 2
    x = px / size - 0.5
    y = 0.5 - py / size
    lat = 90.0 - 360.0 * math.atan(math.exp(-y * 2.0 * math.pi)) / math.pi
    lon = 360.0 * x
    if lon >= 180.0:
        lon = math.nextafter(180.0, 0.0)
    return GeoPosition(lat, lon)


def cover_roi(box: BoundingBox, level: int) -> set[str]:
    """Quadkeys at ``level`` of every tile intersecting ``box``.

    The enumeration rectangle is spanned by the tiles of the box corners.
    Returns a flat single-level set; sibling keys are never coalesced into
    their parent.

    Raises:
        CoverTooLarge: more than ``MAX_COVER_TILES`` tiles would be returned.
    """
    _check_level(level)
    west_px, _ = _pixel_xy(box.south, box.west, level)
    east_px, _ = _pixel_xy(box.south, box.east, level)
    _, north_py = _pixel_xy(box.north, box.west, level)
    _, south_py = _pixel_xy(box.south, box.west, level)

    x_min, x_max = west_px // TILE_SIZE, east_px // TILE_SIZE
    y_min, y_max = north_py // TILE_SIZE, south_py // TILE_SIZE

    count = (x_max - x_min + 1) * (y_max - y_min + 1)
    if count > MAX_COVER_TILES:
        raise CoverTooLarge(f"box covers {count} tiles at level {level}, "
                            f"guard is {MAX_COVER_TILES}")
    return {
        tile_to_quadkey(Tile(x, y, level))
        for x in range(x_min, x_max + 1)
        for y in range(y_min, y_max + 1)
    }
