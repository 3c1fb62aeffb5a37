"""Web メルカトル XYZ タイルの座標計算。"""
from __future__ import annotations

import hashlib
import math
from pathlib import Path

from domain.errors import app_error
from domain.models import BBox, LonLat, TileBounds, TileId

MAX_LAT = math.degrees(math.atan(math.sinh(math.pi)))  # 85.0511287798...
MAX_ZOOM = 22
EARTH_CIRCUMFERENCE_M = 40075016.686
DEFAULT_ZOOM = 15
DEFAULT_TILE_SIZE = 64

# 浮動小数誤差でタイル境界の整数座標が僅かにずれるのを吸収する幅
_SNAP_EPS = 1e-9

RASTER_KINDS = ("target", "roads", "landuse")


def _check_zoom(z: int) -> None:
    if not 0 <= z <= MAX_ZOOM:
        raise app_error("E-GEO-DOMAIN", detail=f"zoom {z} outside [0, {MAX_ZOOM}]")


def _check_tile(t: TileId) -> None:
    _check_zoom(t.z)
    n = 1 << t.z
    if not (0 <= t.x < n and 0 <= t.y < n):
        raise app_error("E-GEO-DOMAIN", detail=f"tile {t} outside the z={t.z} grid")


def _fractional_xy(lon: float, lat: float, z: int) -> tuple[float, float]:
    n = float(1 << z)
    phi = math.radians(lat)
    fx = (lon + 180.0) / 360.0 * n
    fy = (1.0 - math.log(math.tan(phi) + 1.0 / math.cos(phi)) / math.pi) / 2.0 * n
    return fx, fy


def _lon_edge(i: float, z: int) -> float:
    return i / float(1 << z) * 360.0 - 180.0


def _lat_edge(j: float, z: int) -> float:
    return math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * j / float(1 << z)))))


def tile_for_lonlat(p: LonLat, z: int) -> TileId:
    """点を含むタイルを返す。タイルは半開区間 [west, east) × (south, north]。"""

    _check_zoom(z)
    if not -MAX_LAT < p.lat < MAX_LAT or not -180.0 <= p.lon < 180.0:
        raise app_error("E-GEO-DOMAIN", detail=f"({p.lon}, {p.lat}) outside the Mercator band")
    n = 1 << z
    fx, fy = _fractional_xy(p.lon, p.lat, z)
    x = min(max(int(math.floor(fx)), 0), n - 1)
    y = min(max(int(math.floor(fy)), 0), n - 1)
    return TileId(z=z, x=x, y=y)


def tile_center(t: TileId) -> LonLat:
    """タイル中心の経緯度 (メタデータ c_m)。"""

    _check_tile(t)
    return LonLat(lon=_lon_edge(t.x + 0.5, t.z), lat=_lat_edge(t.y + 0.5, t.z))


def ground_width_m(t: TileId) -> float:
    """タイル中心緯度における地上幅 (m)。"""

    center = tile_center(t)
    return EARTH_CIRCUMFERENCE_M * math.cos(math.radians(center.lat)) / float(1 << t.z)


def tile_bounds(t: TileId, tile_size: int = DEFAULT_TILE_SIZE) -> TileBounds:
    _check_tile(t)
    return TileBounds(
        west=_lon_edge(t.x, t.z),
        south=_lat_edge(t.y + 1, t.z),
        east=_lon_edge(t.x + 1, t.z),
        north=_lat_edge(t.y, t.z),
        meters_per_pixel=ground_width_m(t) / float(tile_size),
    )


def _snap(value: float) -> float:
    nearest = round(value)
    return float(nearest) if abs(value - nearest) < _SNAP_EPS else value


def enumerate_region(bbox: BBox, z: int) -> list[TileId]:
    """bbox と交差する全タイルを行優先で返す。東端・南端がタイル境界に一致する場合は含めない。"""

    _check_zoom(z)
    if bbox.is_empty():
        return []
    n = 1 << z
    west = max(bbox.west, -180.0)
    east = min(bbox.east, 180.0)
    north = min(bbox.north, MAX_LAT)
    south = max(bbox.south, -MAX_LAT)
    if west > east or south > north:
        return []
    fx_w, fy_n = _fractional_xy(west, north, z)
    fx_e, fy_s = _fractional_xy(east, south, z)
    fx_w, fx_e, fy_n, fy_s = (_snap(v) for v in (fx_w, fx_e, fy_n, fy_s))

    x0 = int(math.floor(fx_w))
    x1 = int(math.ceil(fx_e)) - 1 if fx_e > fx_w else x0
    y0 = int(math.floor(fy_n))
    y1 = int(math.ceil(fy_s)) - 1 if fy_s > fy_n else y0
    x0, x1 = max(x0, 0), min(x1, n - 1)
    y0, y1 = max(y0, 0), min(y1, n - 1)
    return [TileId(z=z, x=x, y=y) for y in range(y0, y1 + 1) for x in range(x0, x1 + 1)]


def region_around(center: LonLat, z: int, n: int) -> BBox:
    """center を含むタイルを中心とした n×n タイル範囲の bbox (n は奇数)。"""

    if n < 1 or n % 2 == 0:
        raise app_error("E-USAGE", detail=f"region width must be a positive odd tile count, got {n}")
    mid = tile_for_lonlat(center, z)
    half = n // 2
    limit = (1 << z) - 1
    x0, x1 = max(mid.x - half, 0), min(mid.x + half, limit)
    y0, y1 = max(mid.y - half, 0), min(mid.y + half, limit)
    return BBox(
        west=_lon_edge(x0, z),
        south=_lat_edge(y1 + 1, z),
        east=_lon_edge(x1 + 1, z),
        north=_lat_edge(y0, z),
    )


def tile_children(t: TileId) -> list[TileId]:
    _check_tile(t)
    if t.z >= MAX_ZOOM:
        return []
    z, x, y = t.z + 1, t.x * 2, t.y * 2
    return [TileId(z, x, y), TileId(z, x + 1, y), TileId(z, x, y + 1), TileId(z, x + 1, y + 1)]


def tile_parent(t: TileId) -> TileId | None:
    _check_tile(t)
    if t.z == 0:
        return None
    return TileId(t.z - 1, t.x // 2, t.y // 2)


def lonlat_to_pixel(lon: float, lat: float, t: TileId, size: int) -> tuple[float, float]:
    """経緯度をタイル内ピクセル座標 (左上原点、連続値) に変換する。"""

    fx, fy = _fractional_xy(lon, min(max(lat, -MAX_LAT), MAX_LAT), t.z)
    return (fx - t.x) * size, (fy - t.y) * size


def pixel_to_lonlat(px: float, py: float, t: TileId, size: int) -> LonLat:
    return LonLat(lon=_lon_edge(t.x + px / size, t.z), lat=_lat_edge(t.y + py / size, t.z))


def tile_path(root: Path, kind: str, t: TileId) -> Path:
    """`{root}/{kind}/{z}/{x}/{y}.png`。"""

    return Path(root) / kind / str(t.z) / str(t.x) / f"{t.y}.png"


def tile_seed(seed: int, t: TileId) -> int:
    """タイルごとの乱数シード。処理順や並列度に依存しない。"""

    digest = hashlib.sha256(f"{seed}:{t}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)
