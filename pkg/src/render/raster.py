"""ベクタ地物をタイルラスタへ描画する。

建物マスクはピクセル中心の内外判定 (偶奇規則) で 0/255 の二値を作る。
道路・土地利用は RGB のスタイル画像として描画し、条件画像へ連結する。
"""
from __future__ import annotations

import logging
from typing import Any, Iterable, Sequence

import numpy as np
from shapely.geometry import LineString, MultiLineString, MultiPolygon, Polygon
from shapely.geometry.base import BaseGeometry

from domain.errors import app_error
from domain.models import BuildingPolygon, ConditionImage, GeoFeature, RasterTile, TileId
from domain.settings import RasterSettings
from geo.tilegrid import MAX_LAT

logger = logging.getLogger(__name__)

ROAD_CHANNELS = 3
LANDUSE_CHANNELS = 3
CONDITION_CHANNELS = ROAD_CHANNELS + LANDUSE_CHANNELS


# -- 座標変換 ----------------------------------------------------------------------
def project_coords(coords: np.ndarray, t: TileId, size: int) -> np.ndarray:
    """(k, 2) の経緯度配列をタイル内ピクセル座標へ変換する。"""

    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = float(1 << t.z)
    lon = pts[:, 0]
    lat = np.clip(pts[:, 1], -MAX_LAT, MAX_LAT)
    phi = np.radians(lat)
    fx = (lon + 180.0) / 360.0 * n
    fy = (1.0 - np.log(np.tan(phi) + 1.0 / np.cos(phi)) / np.pi) / 2.0 * n
    return np.stack([(fx - t.x) * size, (fy - t.y) * size], axis=1)


def _geometry(item: Any) -> BaseGeometry | None:
    if isinstance(item, GeoFeature):
        return item.geometry
    return item


def _polygon_rings(geom: BaseGeometry | None) -> list[list[np.ndarray]]:
    """Polygon / MultiPolygon を「外周＋穴」のリングリストに分解する。"""

    if geom is None or geom.is_empty:
        return []
    if isinstance(geom, Polygon):
        rings = [np.asarray(geom.exterior.coords)]
        rings.extend(np.asarray(hole.coords) for hole in geom.interiors)
        return [rings]
    if isinstance(geom, MultiPolygon):
        return [ring for part in geom.geoms for ring in _polygon_rings(part)]
    if hasattr(geom, "geoms"):
        return [ring for part in geom.geoms for ring in _polygon_rings(part)]
    return []


def _line_parts(geom: BaseGeometry | None) -> list[np.ndarray]:
    if geom is None or geom.is_empty:
        return []
    if isinstance(geom, LineString):
        return [np.asarray(geom.coords)]
    if isinstance(geom, MultiLineString):
        return [np.asarray(part.coords) for part in geom.geoms]
    if isinstance(geom, Polygon):
        return [np.asarray(geom.exterior.coords)]
    if hasattr(geom, "geoms"):
        return [part for sub in geom.geoms for part in _line_parts(sub)]
    return []


# -- 走査線塗りつぶし --------------------------------------------------------------
def fill_rings(rings_px: Sequence[np.ndarray], size: int) -> np.ndarray:
    """ピクセル座標のリング群を偶奇規則で塗りつぶした bool マスクを返す。

    ピクセル (r, c) は中心 (c+0.5, r+0.5) より左 (x_int <= xc) にある辺との交差が
    奇数回のとき内側とみなす。交差判定は ``(y1 > yc) != (y2 > yc)``、交点は
    ``x1 + (yc - y1) * (x2 - x1) / (y2 - y1)``。
    """

    toggles = np.zeros((size, size + 1), dtype=np.int32)
    yc = np.arange(size, dtype=np.float64) + 0.5
    for ring in rings_px:
        pts = np.asarray(ring, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            continue
        x1, y1 = pts[:, 0], pts[:, 1]
        x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
        active = (y1[None, :] > yc[:, None]) != (y2[None, :] > yc[:, None])
        rows, edges = np.nonzero(active)
        if rows.size == 0:
            continue
        ex1, ey1, ex2, ey2 = x1[edges], y1[edges], x2[edges], y2[edges]
        x_int = ex1 + (yc[rows] - ey1) * (ex2 - ex1) / (ey2 - ey1)
        # x_int <= c + 0.5 を満たす最小の列 c から右側が反転する
        col = np.ceil(x_int - 0.5)
        col = np.where(col + 0.5 < x_int, col + 1, col)
        col = np.where(col - 0.5 >= x_int, col - 1, col)
        col = np.clip(col, 0, size).astype(np.int64)
        np.add.at(toggles, (rows, col), 1)
    parity = np.cumsum(toggles[:, :size], axis=1) & 1
    return parity.astype(bool)


def _mask_tile(mask: np.ndarray) -> RasterTile:
    return RasterTile(np.where(mask, 255, 0).astype(np.uint8)[:, :, None])


def rasterize_polygons(polys: Iterable[Any], t: TileId, size: int) -> RasterTile:
    """建物ポリゴン (WGS84) の二値マスク。いずれかのポリゴンに中心が含まれる画素を 255 にする。"""

    mask = np.zeros((size, size), dtype=bool)
    for item in polys:
        for rings in _polygon_rings(_geometry(item)):
            mask |= fill_rings([project_coords(ring, t, size) for ring in rings], size)
    return _mask_tile(mask)


def rasterize_rings(polys: Iterable[BuildingPolygon], size: int) -> np.ndarray:
    """ピクセル座標のポリゴン (外周＋穴) を (size, size) の 0/255 マスクへ戻す。"""

    mask = np.zeros((size, size), dtype=bool)
    for poly in polys:
        rings = [np.asarray(poly.ring, dtype=np.float64)]
        rings.extend(np.asarray(hole, dtype=np.float64) for hole in poly.holes)
        mask |= fill_rings(rings, size)
    return np.where(mask, 255, 0).astype(np.uint8)


# -- 道路 --------------------------------------------------------------------------
def _stroke(canvas: np.ndarray, line_px: np.ndarray, width: float, color: tuple[int, int, int]) -> None:
    """中心からの距離が width/2 以下の画素を color で塗る。"""

    size = canvas.shape[0]
    half = width / 2.0
    for (ax, ay), (bx, by) in zip(line_px[:-1], line_px[1:]):
        c0 = max(int(np.floor(min(ax, bx) - half - 0.5)), 0)
        c1 = min(int(np.ceil(max(ax, bx) + half - 0.5)), size - 1)
        r0 = max(int(np.floor(min(ay, by) - half - 0.5)), 0)
        r1 = min(int(np.ceil(max(ay, by) + half - 0.5)), size - 1)
        if c0 > c1 or r0 > r1:
            continue
        px = np.arange(c0, c1 + 1, dtype=np.float64)[None, :] + 0.5
        py = np.arange(r0, r1 + 1, dtype=np.float64)[:, None] + 0.5
        dx, dy = bx - ax, by - ay
        length2 = dx * dx + dy * dy
        if length2 == 0.0:
            dist2 = (px - ax) ** 2 + (py - ay) ** 2
        else:
            u = np.clip(((px - ax) * dx + (py - ay) * dy) / length2, 0.0, 1.0)
            dist2 = (px - (ax + u * dx)) ** 2 + (py - (ay + u * dy)) ** 2
        hit = dist2 <= half * half
        window = canvas[r0 : r1 + 1, c0 : c1 + 1]
        window[hit] = color


def rasterize_roads(lines: Iterable[GeoFeature], t: TileId, size: int, settings: RasterSettings | None = None) -> RasterTile:
    """道路を 3 クラスの色・線幅で描く。細い class 3 から描き、class 1 を最上面に置く。"""

    settings = settings or RasterSettings()
    canvas = np.zeros((size, size, ROAD_CHANNELS), dtype=np.uint8)
    by_class: dict[int, list[GeoFeature]] = {1: [], 2: [], 3: []}
    for feature in lines:
        road_class = feature.road_class if feature.road_class in by_class else 3
        by_class[road_class].append(feature)
    for road_class in (3, 2, 1):
        width = settings.road_width(road_class, size)
        color = settings.road_colors[road_class]
        for feature in by_class[road_class]:
            for part in _line_parts(feature.geometry):
                if len(part) >= 2:
                    _stroke(canvas, project_coords(part, t, size), width, color)
    return RasterTile(canvas)


# -- 土地利用 ----------------------------------------------------------------------
def rasterize_landuse(polys: Iterable[GeoFeature], t: TileId, size: int, settings: RasterSettings | None = None) -> RasterTile:
    """土地利用ポリゴンをパレット色で塗る。パレットの後ろのカテゴリほど上に描く。

    未知のカテゴリはフォールバック色で、既知カテゴリより下に描く。
    """

    settings = settings or RasterSettings()
    order = {name: index for index, name in enumerate(settings.landuse_palette)}
    canvas = np.zeros((size, size, LANDUSE_CHANNELS), dtype=np.uint8)
    unknown: set[str] = set()
    ranked: list[tuple[int, int, GeoFeature]] = []
    for seq, feature in enumerate(polys):
        category = feature.category or ""
        if category not in order:
            unknown.add(category)
        ranked.append((order.get(category, -1), seq, feature))
    for category in sorted(unknown):
        logger.warning("Unknown landuse category %r at tile %s; using fallback color", category, t)
    for rank, _, feature in sorted(ranked, key=lambda item: (item[0], item[1])):
        color = settings.landuse_fallback_color if rank < 0 else settings.landuse_palette[feature.category]
        for rings in _polygon_rings(feature.geometry):
            mask = fill_rings([project_coords(ring, t, size) for ring in rings], size)
            canvas[mask] = color
    return RasterTile(canvas)


# -- 条件画像 ----------------------------------------------------------------------
def concat_condition(roads: RasterTile, landuse: RasterTile) -> ConditionImage:
    """道路 → 土地利用の順にチャネル連結し [0, 1] に正規化する。"""

    if roads.data.shape[:2] != landuse.data.shape[:2]:
        raise app_error(
            "E-RASTER-SHAPE",
            detail=f"roads {roads.data.shape[:2]} vs landuse {landuse.data.shape[:2]}",
        )
    stacked = np.concatenate([roads.data, landuse.data], axis=2)
    data = np.ascontiguousarray(stacked.transpose(2, 0, 1)).astype(np.float32) / np.float32(255.0)
    return ConditionImage(data=data, road_channels=roads.channels)


def split_condition(cond: ConditionImage) -> tuple[RasterTile, RasterTile]:
    """concat_condition の逆変換。uint8 値を正確に復元する。"""

    restored = np.rint(cond.data.astype(np.float64) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    roads = np.ascontiguousarray(restored[:, :, : cond.road_channels])
    landuse = np.ascontiguousarray(restored[:, :, cond.road_channels :])
    return RasterTile(roads), RasterTile(landuse)


def blank_condition(size: int, road_channels: int = ROAD_CHANNELS, landuse_channels: int = LANDUSE_CHANNELS) -> ConditionImage:
    """画像条件を外すアブレーション用の全ゼロ条件。"""

    return ConditionImage(
        data=np.zeros((road_channels + landuse_channels, size, size), dtype=np.float32),
        road_channels=road_channels,
    )


def to_model_target(mask: RasterTile | np.ndarray) -> np.ndarray:
    """0/255 マスクを (1, H, W) の [-1, 1] float32 へ。"""

    data = mask.data[:, :, 0] if isinstance(mask, RasterTile) else np.asarray(mask)
    if data.ndim == 3:
        data = data[:, :, 0]
    return (data.astype(np.float32) / np.float32(127.5) - np.float32(1.0))[None, :, :]


def from_model_output(x: np.ndarray) -> np.ndarray:
    """[-1, 1] の出力を [-1, 1] にクランプして 0..255 の uint8 (H, W) へ。"""

    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    arr = np.clip(arr, -1.0, 1.0)
    return np.rint((arr + 1.0) * 127.5).astype(np.uint8)


def render_layers(
    buildings: Sequence[GeoFeature],
    roads: Sequence[GeoFeature],
    landuse: Sequence[GeoFeature],
    t: TileId,
    size: int,
    settings: RasterSettings | None = None,
) -> tuple[RasterTile, RasterTile, RasterTile]:
    """1 タイル分の (建物マスク, 道路画像, 土地利用画像) を描画する。"""

    settings = settings or RasterSettings()
    return (
        rasterize_polygons(buildings, t, size),
        rasterize_roads(roads, t, size, settings),
        rasterize_landuse(landuse, t, size, settings),
    )
