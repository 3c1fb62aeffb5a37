"""学習・検証用の手続き的な合成都市。

道路網 (格子状 / 曲線状) で領域を街区に分け、街区ごとに土地利用ゾーンを決め、
ゾーンに応じた建物フットプリントを道路から離して配置する。
座標計算は描画と同じ Web メルカトルのグローバルピクセル座標で行い、最後に経緯度へ戻す。
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import shapely
from shapely import STRtree
from shapely.affinity import rotate
from shapely.geometry import LineString, Polygon, box
from shapely.geometry.base import BaseGeometry

from domain.models import BBox, CitySpec, CityStyle, FeatureSet, GeoFeature, Layer, LonLat, TileId
from domain.settings import RasterSettings
from geo.tilegrid import DEFAULT_TILE_SIZE, DEFAULT_ZOOM, MAX_LAT, ground_width_m, tile_for_lonlat

logger = logging.getLogger(__name__)

# ゾーン → (建物タグ候補, ゾーン選択の重み)
ZONE_BUILDINGS: dict[str, tuple[str, ...]] = {
    "residential": ("house", "apartments"),
    "commercial": ("commercial", "retail"),
    "industrial": ("industrial",),
    "grass": (),
}
ZONE_WEIGHTS: dict[str, float] = {"residential": 0.5, "commercial": 0.25, "industrial": 0.15, "grass": 0.1}
ROAD_HIGHWAY = {1: "primary", 2: "secondary", 3: "residential"}
# 描画時の投影誤差を吸収する余白 (px)
_CLEARANCE_PX = 0.25
# 何本おきに幹線・補助幹線にするか
_ARTERIAL_EVERY = 5
_COLLECTOR_EVERY = 2
_SUPERBLOCK = 3


@dataclass(slots=True)
class _Frame:
    """グローバルピクセル座標系 (ズーム z、タイル size px)。"""

    z: int
    size: int

    def forward(self, lon: np.ndarray, lat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = float(1 << self.z) * self.size
        phi = np.radians(np.clip(lat, -MAX_LAT, MAX_LAT))
        x = (lon + 180.0) / 360.0 * n
        y = (1.0 - np.log(np.tan(phi) + 1.0 / np.cos(phi)) / np.pi) / 2.0 * n
        return x, y

    def inverse(self, coords: np.ndarray) -> np.ndarray:
        n = float(1 << self.z) * self.size
        lon = coords[:, 0] / n * 360.0 - 180.0
        lat = np.degrees(np.arctan(np.sinh(np.pi * (1.0 - 2.0 * coords[:, 1] / n))))
        return np.stack([lon, lat], axis=1)


def _road_lines(
    rng: np.random.Generator,
    start: float,
    stop: float,
    block_px: tuple[float, float],
) -> list[float]:
    """start から stop まで街区幅を乱数で刻んだ道路位置。両端の外側まで含める。"""

    positions = [start - rng.uniform(*block_px) * 0.5]
    while positions[-1] < stop:
        positions.append(positions[-1] + rng.uniform(*block_px))
    return positions


def _road_class(index: int) -> int:
    if index % _ARTERIAL_EVERY == 0:
        return 1
    if index % _COLLECTOR_EVERY == 0:
        return 2
    return 3


def _wavy(fixed: float, span: tuple[float, float], vertical: bool, amplitude: float, phase: float, wavelength: float) -> LineString:
    steps = max(int((span[1] - span[0]) / max(wavelength / 16.0, 1.0)), 2)
    along = np.linspace(span[0], span[1], steps + 1)
    offset = fixed + amplitude * np.sin(2.0 * math.pi * along / wavelength + phase)
    pts = np.stack([offset, along], axis=1) if vertical else np.stack([along, offset], axis=1)
    return LineString(pts)


def _building_shapes(
    rng: np.random.Generator,
    zone: str,
    cx: float,
    cy: float,
    m_px: float,
) -> BaseGeometry:
    """ゾーンに応じたフットプリント。住宅は小さく整形、商業は大きく不整形。"""

    if zone == "residential":
        side = rng.uniform(9.0, 14.0) * m_px
        return box(cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2)
    if zone == "commercial":
        w, h = rng.uniform(18.0, 34.0) * m_px, rng.uniform(14.0, 28.0) * m_px
        main = box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        wing = box(cx - w / 2, cy - h / 2, cx - w / 2 + w * 0.45, cy + h / 2 + h * 0.4)
        shape = main.union(wing)
        return rotate(shape, rng.uniform(-20.0, 20.0), origin=(cx, cy))
    w, h = rng.uniform(28.0, 50.0) * m_px, rng.uniform(20.0, 36.0) * m_px
    return box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _slot_pitch(zone: str, m_px: float) -> float:
    return {"residential": 20.0, "commercial": 42.0, "industrial": 58.0}.get(zone, 40.0) * m_px


def generate_city(
    spec: CitySpec,
    region: BBox,
    *,
    zoom: int = DEFAULT_ZOOM,
    tile_size: int = DEFAULT_TILE_SIZE,
    raster: RasterSettings | None = None,
) -> FeatureSet:
    """region を覆う合成都市を生成する。同じ spec と seed からは同一の FeatureSet になる。"""

    raster = raster or RasterSettings()
    rng = np.random.default_rng(spec.seed)
    frame = _Frame(zoom, tile_size)
    xs, ys = frame.forward(np.array([region.west, region.east]), np.array([region.north, region.south]))
    x0, x1 = float(min(xs)), float(max(xs))
    y0, y1 = float(min(ys)), float(max(ys))

    center = LonLat((region.west + region.east) / 2.0, (region.south + region.north) / 2.0)
    center_tile: TileId = tile_for_lonlat(center, zoom)
    mpp = ground_width_m(center_tile) / float(tile_size)
    m_px = 1.0 / mpp
    block_px = (spec.block_min_m * m_px, spec.block_max_m * m_px)

    col_pos = _road_lines(rng, x0, x1, block_px)
    row_pos = _road_lines(rng, y0, y1, block_px)
    span_x = (col_pos[0], col_pos[-1])
    span_y = (row_pos[0], row_pos[-1])
    mid_x = (x0 + x1) / 2.0

    def organic_at(x: float) -> bool:
        if spec.style is CityStyle.ORGANIC:
            return True
        if spec.style is CityStyle.MIXED:
            return x >= mid_x
        return False

    wavelength = 6.0 * block_px[1]
    amplitude = 0.15 * block_px[0]
    roads: list[tuple[LineString, int]] = []
    for index, x in enumerate(col_pos):
        cls = _road_class(index)
        if organic_at(x):
            line = _wavy(x, span_y, True, amplitude, rng.uniform(0, 2 * math.pi), wavelength)
        else:
            line = LineString([(x, span_y[0]), (x, span_y[1])])
        roads.append((line, cls))
    for index, y in enumerate(row_pos):
        cls = _road_class(index)
        if spec.style is CityStyle.ORGANIC:
            line = _wavy(y, span_x, False, amplitude, rng.uniform(0, 2 * math.pi), wavelength)
        else:
            line = LineString([(span_x[0], y), (span_x[1], y)])
        roads.append((line, cls))

    tree = STRtree([line for line, _ in roads])
    setbacks = np.array([raster.road_width(cls, tile_size) / 2.0 + _CLEARANCE_PX for _, cls in roads])
    max_setback = float(setbacks.max())

    def clear_of_roads(geom: BaseGeometry) -> bool:
        for i in tree.query(geom.buffer(max_setback)):
            if geom.distance(roads[int(i)][0]) <= setbacks[int(i)]:
                return False
        return True

    zones = list(ZONE_WEIGHTS)
    weights = np.array([ZONE_WEIGHTS[z] for z in zones])
    weights = weights / weights.sum()
    super_cols = (len(col_pos) + _SUPERBLOCK - 1) // _SUPERBLOCK
    super_rows = (len(row_pos) + _SUPERBLOCK - 1) // _SUPERBLOCK
    zone_grid = rng.choice(len(zones), size=(super_rows, super_cols), p=weights)

    features = FeatureSet()
    pixel_geoms: list[tuple[BaseGeometry, dict[str, str], Layer, int | None, str | None]] = []
    for line, cls in roads:
        pixel_geoms.append((line, {"highway": ROAD_HIGHWAY[cls]}, Layer.ROADS, cls, None))

    for r in range(len(row_pos) - 1):
        for c in range(len(col_pos) - 1):
            zone = zones[int(zone_grid[r // _SUPERBLOCK, c // _SUPERBLOCK])]
            cell = box(col_pos[c], row_pos[r], col_pos[c + 1], row_pos[r + 1])
            pixel_geoms.append((cell, {"landuse": zone}, Layer.LANDUSE, None, zone))
            density = float(spec.densities.get(zone, 0.0))
            kinds = ZONE_BUILDINGS.get(zone, ())
            if density <= 0.0 or not kinds:
                continue
            pitch = _slot_pitch(zone, m_px)
            minx, miny, maxx, maxy = cell.bounds
            nx = max(int((maxx - minx) // pitch), 1)
            ny = max(int((maxy - miny) // pitch), 1)
            for j in range(ny):
                for i in range(nx):
                    cx = minx + (i + 0.5) * (maxx - minx) / nx
                    cy = miny + (j + 0.5) * (maxy - miny) / ny
                    # 乱数の消費順を固定するため、採否に関わらず同じ回数だけ引く
                    keep = rng.random() < density
                    kind = kinds[int(rng.integers(len(kinds)))]
                    shape = _building_shapes(rng, zone, cx, cy, m_px)
                    if not keep:
                        continue
                    shape = shapely.intersection(shape, box(cx - pitch / 2, cy - pitch / 2, cx + pitch / 2, cy + pitch / 2))
                    if shape.is_empty or shape.area <= 0 or not clear_of_roads(shape):
                        continue
                    pixel_geoms.append((shape, {"building": kind}, Layer.BUILDINGS, None, None))

    for geom, tags, layer, road_class, category in pixel_geoms:
        wgs = shapely.transform(geom, frame.inverse)
        features.add(GeoFeature(wgs, tags, layer, road_class=road_class, category=category))
    logger.info(
        "Generated %s city %s: %d roads, %d landuse blocks, %d buildings",
        spec.style.value,
        spec.resolved_city_name,
        len(features.roads),
        len(features.landuse),
        len(features.buildings),
    )
    return features
