from __future__ import annotations

import math

import numpy as np
import pytest

from domain.errors import AppError
from domain.models import BBox, LonLat, TileId
from geo.tilegrid import (
    EARTH_CIRCUMFERENCE_M,
    MAX_LAT,
    enumerate_region,
    ground_width_m,
    lonlat_to_pixel,
    pixel_to_lonlat,
    region_around,
    tile_bounds,
    tile_center,
    tile_children,
    tile_for_lonlat,
    tile_parent,
    tile_path,
    tile_seed,
)


def _reference_tile(lon: float, lat: float, z: int) -> tuple[int, int]:
    phi = math.radians(lat)
    n = 2**z
    x = math.floor((lon + 180.0) / 360.0 * n)
    y = math.floor((1.0 - math.asinh(math.tan(phi)) / math.pi) / 2.0 * n)
    return x, y


def test_tile_for_lonlat_simple_cases():
    assert tile_for_lonlat(LonLat(0.0, 0.0), 1) == TileId(1, 1, 1)
    assert tile_for_lonlat(LonLat(139.7, 35.6), 0) == TileId(0, 0, 0)


def test_tile_for_lonlat_matches_reference_formula_for_berlin():
    t = tile_for_lonlat(LonLat(13.3777, 52.5163), 15)
    assert (t.x, t.y) == _reference_tile(13.3777, 52.5163, 15)
    # fy = 10746.988
    assert t == TileId(15, 17601, 10746)


def test_tile_for_lonlat_rejects_polar_latitude():
    with pytest.raises(AppError) as exc:
        tile_for_lonlat(LonLat(0.0, 86.0), 3)
    assert exc.value.code == "E-GEO-DOMAIN"


def test_tile_center_world_and_symmetry():
    c = tile_center(TileId(0, 0, 0))
    assert c.lon == pytest.approx(0.0)
    assert c.lat == pytest.approx(0.0, abs=1e-12)
    north = tile_center(TileId(1, 1, 0))
    south = tile_center(TileId(1, 1, 1))
    assert north.lon == pytest.approx(90.0)
    assert south.lat == pytest.approx(-north.lat)


def test_center_round_trip_over_random_tiles():
    rng = np.random.default_rng(0)
    for _ in range(20000):
        z = int(rng.integers(0, 19))
        n = 1 << z
        t = TileId(z, int(rng.integers(0, n)), int(rng.integers(0, n)))
        c = tile_center(t)
        assert tile_for_lonlat(c, z) == t
        b = tile_bounds(t)
        # 中心は境界の中点 (経度) に 1e-9 度以内で一致
        assert abs(c.lon - (b.west + b.east) / 2.0) < 1e-9
        assert b.south < c.lat < b.north


def test_point_lies_inside_its_tile_bounds():
    rng = np.random.default_rng(1)
    for _ in range(5000):
        p = LonLat(float(rng.uniform(-180, 180)), float(rng.uniform(-85, 85)))
        z = int(rng.integers(0, 19))
        b = tile_bounds(tile_for_lonlat(p, z))
        assert b.west <= p.lon < b.east or math.isclose(p.lon, b.east)
        assert b.south <= p.lat <= b.north


def test_tile_bounds_world_and_shared_edges():
    world = tile_bounds(TileId(0, 0, 0))
    assert world.west == -180.0 and world.east == 180.0
    assert world.north == pytest.approx(MAX_LAT)
    a = tile_bounds(TileId(15, 100, 200))
    b = tile_bounds(TileId(15, 101, 200))
    c = tile_bounds(TileId(15, 100, 201))
    assert a.east == b.west
    assert a.south == c.north


def test_equatorial_ground_width_at_zoom_15():
    t = TileId(15, 16384, 16383)
    width = ground_width_m(t)
    assert abs(width - 1223.0) / 1223.0 < 0.03
    assert width == pytest.approx(EARTH_CIRCUMFERENCE_M / 2**15, rel=1e-6)
    assert tile_bounds(t, 64).meters_per_pixel == pytest.approx(width / 64)


def test_enumerate_region_single_tile_and_block():
    t = TileId(15, 17601, 10747)
    assert enumerate_region(tile_bounds(t).as_bbox(), 15) == [t]

    region = region_around(LonLat(13.3777, 52.5163), 15, 7)
    tiles = enumerate_region(region, 15)
    assert len(tiles) == 49
    assert len(set(tiles)) == 49
    assert tiles == sorted(tiles, key=lambda item: item.row_major_key())
    assert tile_for_lonlat(LonLat(13.3777, 52.5163), 15) == tiles[24]


def test_enumerate_region_degenerate_and_empty():
    column = enumerate_region(BBox(13.3777, 52.50, 13.3777, 52.52), 15)
    assert len({t.x for t in column}) == 1
    assert len(column) >= 2
    assert enumerate_region(BBox(10.0, 0.0, 9.0, 1.0), 5) == []


def test_region_around_requires_odd_width():
    with pytest.raises(AppError):
        region_around(LonLat(0.0, 0.0), 10, 4)


def test_children_and_parent():
    t = TileId(3, 5, 2)
    kids = tile_children(t)
    assert len(kids) == 4
    assert all(tile_parent(k) == t for k in kids)
    assert tile_parent(TileId(0, 0, 0)) is None


def test_pixel_round_trip_and_tile_path(tmp_path):
    t = TileId(15, 17601, 10747)
    p = pixel_to_lonlat(10.5, 20.25, t, 64)
    px, py = lonlat_to_pixel(p.lon, p.lat, t, 64)
    assert px == pytest.approx(10.5, abs=1e-6)
    assert py == pytest.approx(20.25, abs=1e-6)
    assert tile_path(tmp_path, "roads", t) == tmp_path / "roads" / "15" / "17601" / "10747.png"


def test_tile_seed_is_stable_and_distinct():
    a = TileId(15, 1, 2)
    b = TileId(15, 2, 1)
    assert tile_seed(0, a) == tile_seed(0, a)
    assert tile_seed(0, a) != tile_seed(0, b)
    assert tile_seed(0, a) != tile_seed(1, a)
    assert 0 <= tile_seed(7, a) < 2**63
