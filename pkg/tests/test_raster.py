from __future__ import annotations

import logging

import numpy as np
import pytest
from matplotlib.path import Path as MplPath
from shapely.geometry import LineString, Polygon

from domain.errors import AppError
from domain.models import GeoFeature, Layer, RasterTile, TileId
from domain.settings import RasterSettings
from geo.tilegrid import pixel_to_lonlat
from render.raster import (
    blank_condition,
    concat_condition,
    fill_rings,
    from_model_output,
    rasterize_landuse,
    rasterize_polygons,
    rasterize_roads,
    split_condition,
    to_model_target,
)

TILE = TileId(15, 17601, 10747)
SIZE = 64


def _lonlat_ring(points_px):
    return [(p.lon, p.lat) for p in (pixel_to_lonlat(x, y, TILE, SIZE) for x, y in points_px)]


def _polygon_px(points_px) -> Polygon:
    return Polygon(_lonlat_ring(points_px))


def _line_px(points_px) -> LineString:
    return LineString(_lonlat_ring(points_px))


def _centers(size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


# -- 建物マスク ---------------------------------------------------------------------
def test_polygon_covering_tile_sets_every_pixel():
    tile = rasterize_polygons([_polygon_px([(-2, -2), (66, -2), (66, 66), (-2, 66)])], TILE, SIZE)
    assert tile.channels == 1
    assert (tile.data == 255).all()


def test_zero_area_polygon_sets_nothing():
    tile = rasterize_polygons([_polygon_px([(5, 5), (20, 5), (30, 5)])], TILE, SIZE)
    assert not tile.data.any()


def test_left_half_rectangle_matches_pixel_center_rule():
    tile = rasterize_polygons([_polygon_px([(-1, -1), (32, -1), (32, 65), (-1, 65)])], TILE, SIZE)
    mask = tile.mask()
    assert mask[:, :32].all()
    assert not mask[:, 32:].any()
    assert set(np.unique(tile.data)) <= {0, 255}


def test_fill_rings_agrees_with_brute_force_oracle():
    rng = np.random.default_rng(3)
    centers = _centers(SIZE)
    for _ in range(50):
        k = int(rng.integers(3, 12))
        angles = np.sort(rng.uniform(0, 2 * np.pi, k))
        radii = rng.uniform(5, 30, k)
        cx, cy = rng.uniform(10, 54, 2)
        ring = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        expected = MplPath(ring).contains_points(centers).reshape(SIZE, SIZE)
        assert np.array_equal(fill_rings([ring], SIZE), expected)


def test_fill_rings_even_odd_hole():
    outer = np.array([[4, 4], [60, 4], [60, 60], [4, 60]], dtype=float)
    hole = np.array([[20, 20], [40, 20], [40, 40], [20, 40]], dtype=float)
    mask = fill_rings([outer, hole], SIZE)
    assert mask[10, 10]
    assert not mask[30, 30]
    assert mask.sum() == 56 * 56 - 20 * 20


def test_rectangle_area_converges():
    size = 256
    rect = np.array([[10.3, 20.7], [200.1, 20.7], [200.1, 150.2], [10.3, 150.2]])
    frac = fill_rings([rect], size).mean()
    analytic = (200.1 - 10.3) * (150.2 - 20.7) / size**2
    assert abs(frac - analytic) <= 2.0 / size


# -- 道路 --------------------------------------------------------------------------
def _road(points_px, road_class: int) -> GeoFeature:
    return GeoFeature(geometry=_line_px(points_px), tags={"highway": "primary"}, layer=Layer.ROADS, road_class=road_class)


def test_no_roads_gives_black_tile():
    tile = rasterize_roads([], TILE, SIZE)
    assert tile.channels == 3
    assert not tile.data.any()


def test_horizontal_class_one_band():
    settings = RasterSettings()
    tile = rasterize_roads([_road([(-5, 32), (70, 32)], 1)], TILE, SIZE, settings)
    width = settings.road_width(1, SIZE)
    rows = np.nonzero(tile.data[:, :, 0].any(axis=1))[0]
    expected = [r for r in range(SIZE) if abs(r + 0.5 - 32) <= width / 2]
    assert list(rows) == expected
    assert tuple(tile.data[32, 10]) == settings.road_colors[1]


def test_class_one_drawn_over_class_three():
    settings = RasterSettings()
    roads = [_road([(-5, 32), (70, 32)], 1), _road([(10.5, -5), (10.5, 70)], 3)]
    tile = rasterize_roads(roads, TILE, SIZE, settings)
    assert tuple(tile.data[32, 10]) == settings.road_colors[1]
    assert tuple(tile.data[5, 10]) == settings.road_colors[3]
    assert settings.road_width(1, SIZE) >= settings.road_width(3, SIZE)


def test_styled_rasters_are_deterministic():
    roads = [_road([(0, 0), (64, 64)], 2)]
    a = rasterize_roads(roads, TILE, SIZE)
    b = rasterize_roads(roads, TILE, SIZE)
    assert a.data.tobytes() == b.data.tobytes()


# -- 土地利用 ----------------------------------------------------------------------
def _landuse(points_px, category: str) -> GeoFeature:
    return GeoFeature(geometry=_polygon_px(points_px), tags={"landuse": category}, layer=Layer.LANDUSE, category=category)


FULL = [(-2, -2), (66, -2), (66, 66), (-2, 66)]


def test_landuse_uniform_fill_and_palette_order():
    settings = RasterSettings()
    single = rasterize_landuse([_landuse(FULL, "residential")], TILE, SIZE, settings)
    assert (single.data == np.array(settings.landuse_palette["residential"], dtype=np.uint8)).all()

    # commercial はパレット上で residential より後なので、入力順に関係なく上に描かれる
    both = rasterize_landuse([_landuse(FULL, "commercial"), _landuse(FULL, "residential")], TILE, SIZE, settings)
    assert (both.data == np.array(settings.landuse_palette["commercial"], dtype=np.uint8)).all()


def test_unknown_landuse_uses_fallback_and_warns(caplog):
    settings = RasterSettings()
    with caplog.at_level(logging.WARNING):
        tile = rasterize_landuse([_landuse(FULL, "quarry")], TILE, SIZE, settings)
    assert tuple(tile.data[10, 10]) == settings.landuse_fallback_color
    assert any("quarry" in record.getMessage() for record in caplog.records)


# -- 条件画像 ----------------------------------------------------------------------
def test_concat_condition_shape_and_split_round_trip():
    rng = np.random.default_rng(0)
    roads = RasterTile(rng.integers(0, 256, (SIZE, SIZE, 3), dtype=np.uint8))
    landuse = RasterTile(rng.integers(0, 256, (SIZE, SIZE, 3), dtype=np.uint8))
    cond = concat_condition(roads, landuse)
    assert cond.data.shape == (6, SIZE, SIZE)
    assert cond.data.dtype == np.float32
    assert 0.0 <= cond.data.min() and cond.data.max() <= 1.0
    back_roads, back_landuse = split_condition(cond)
    assert np.array_equal(back_roads.data, roads.data)
    assert np.array_equal(back_landuse.data, landuse.data)


def test_black_inputs_give_blank_condition():
    black = RasterTile(np.zeros((SIZE, SIZE, 3), dtype=np.uint8))
    cond = concat_condition(black, black)
    assert np.array_equal(cond.data, blank_condition(SIZE).data)


def test_concat_condition_rejects_size_mismatch():
    with pytest.raises(AppError) as exc:
        concat_condition(RasterTile(np.zeros((64, 64, 3), np.uint8)), RasterTile(np.zeros((32, 32, 3), np.uint8)))
    assert exc.value.code == "E-RASTER-SHAPE"


def test_model_target_round_trip():
    mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
    mask[10:20, 5:50] = 255
    target = to_model_target(mask)
    assert target.shape == (1, SIZE, SIZE)
    assert target.min() == -1.0 and target.max() == 1.0
    assert np.array_equal(from_model_output(target), mask)
    assert from_model_output(np.full((SIZE, SIZE), 3.0)).max() == 255
