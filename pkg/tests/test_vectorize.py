from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage

from analysis.vectorize import (
    binarize,
    count_and_area,
    polygonize,
    signed_area,
    simplify,
    to_geojson,
)
from domain.models import TileId
from geo.tilegrid import ground_width_m
from render.raster import rasterize_rings

TILE = TileId(15, 17601, 10747)


def _flood_fill_count(mask: np.ndarray) -> int:
    """素朴な 4 近傍の塗りつぶしで連結成分を数える。"""

    seen = np.zeros(mask.shape, dtype=bool)
    h, w = mask.shape
    count = 0
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            count += 1
            stack = [(r, c)]
            seen[r, c] = True
            while stack:
                y, x = stack.pop()
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
    return count


def test_binarize_threshold_rule():
    img = np.array([[0, 127], [128, 255]], dtype=np.uint8)
    out = binarize(img)
    assert out.tolist() == [[0, 0], [255, 255]]
    assert not binarize(np.zeros((4, 4), np.uint8)).any()
    assert (binarize(np.full((4, 4), 255, np.uint8)) == 255).all()


def test_empty_mask_has_no_polygons():
    assert polygonize(np.zeros((16, 16), np.uint8)) == []
    assert count_and_area([], 16) == (0, 0, 0.0)


def test_single_square():
    mask = np.zeros((32, 32), np.uint8)
    mask[5:15, 7:17] = 255
    polys = polygonize(mask)
    assert len(polys) == 1
    poly = polys[0]
    assert poly.area_px == 100
    assert poly.ring[0] == poly.ring[-1]
    assert len(poly.ring) == 5
    assert signed_area(poly.ring) == pytest.approx(100.0)


def test_two_squares_and_diagonal_contact_are_separate():
    mask = np.zeros((16, 16), np.uint8)
    mask[1:4, 1:4] = 255
    mask[4:6, 4:6] = 255  # 角だけで接する
    mask[10:14, 10:14] = 255
    polys = polygonize(mask)
    assert len(polys) == 3 == _flood_fill_count(mask > 0)
    assert sorted(p.area_px for p in polys) == [4, 9, 16]


def test_full_and_half_tile_site_cover():
    full = np.full((8, 8), 255, np.uint8)
    assert count_and_area(polygonize(full), 8) == (1, 64, 1.0)
    half = np.zeros((8, 8), np.uint8)
    half[:, :4] = 255
    assert count_and_area(polygonize(half), 8)[2] == 0.5


def test_courtyard_is_hole_and_not_counted():
    mask = np.zeros((12, 12), np.uint8)
    mask[2:10, 2:10] = 255
    mask[4:8, 4:8] = 0
    (poly,) = polygonize(mask)
    assert poly.area_px == 64 - 16
    assert len(poly.holes) == 1
    assert signed_area(poly.holes[0]) < 0
    assert np.array_equal(rasterize_rings([poly], 12), mask)


def _check_random_masks(count: int, seed: int, sizes=(8, 16, 24)) -> None:
    rng = np.random.default_rng(seed)
    for _ in range(count):
        size = int(rng.choice(sizes))
        mask = np.where(rng.random((size, size)) < rng.uniform(0.2, 0.7), 255, 0).astype(np.uint8)
        polys = polygonize(mask)
        assert np.array_equal(rasterize_rings(polys, size), mask)
        assert len(polys) == _flood_fill_count(mask > 0)
        assert sum(p.area_px for p in polys) == int((mask > 0).sum())
        assert all(p.area_px > 0 and p.ring[0] == p.ring[-1] for p in polys)


def test_round_trip_and_oracle_on_random_masks():
    _check_random_masks(200, seed=11)


@pytest.mark.slow
def test_round_trip_and_oracle_on_many_random_masks():
    _check_random_masks(1000, seed=12, sizes=(8, 16, 24, 64))


def test_area_m2_uses_tile_ground_resolution():
    mask = np.zeros((64, 64), np.uint8)
    mask[0:2, 0:5] = 255
    (poly,) = polygonize(mask, tile=TILE)
    mpp = ground_width_m(TILE) / 64
    assert poly.area_m2 == pytest.approx(10 * mpp**2)


def test_simplify_only_affects_export():
    ring = ((0, 0), (5, 0), (10, 0), (10, 10), (0, 10), (0, 0))
    simplified = simplify(ring, 0.5)
    assert len(simplified) < len(ring)
    assert simplify(ring, 0.0) == tuple((float(x), float(y)) for x, y in ring)


def test_to_geojson_tile_and_wgs84_coordinates():
    mask = np.zeros((64, 64), np.uint8)
    mask[10:20, 10:20] = 255
    polys = polygonize(mask, tile=TILE)
    local = to_geojson(polys, TILE, 64)
    feature = local["features"][0]
    assert feature["properties"]["area_px"] == 100
    assert feature["properties"]["tile"] == str(TILE)
    assert [10.0, 10.0] in feature["geometry"]["coordinates"][0]

    world = to_geojson(polys, TILE, 64, coords="wgs84")
    lon, lat = world["features"][0]["geometry"]["coordinates"][0][0]
    assert 13.0 < lon < 14.0 and 52.0 < lat < 53.0


def test_polygonize_agrees_with_scipy_component_count():
    rng = np.random.default_rng(5)
    mask = rng.random((40, 40)) < 0.45
    _, expected = ndimage.label(mask)
    assert len(polygonize(mask.astype(np.uint8) * 255)) == expected
