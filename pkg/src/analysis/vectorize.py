"""生成ラスタの二値化とポリゴン化。

連結成分は 4 近傍で分け、成分ごとに画素境界の辺をつないでリングにする。
同一成分の画素が対角で接する頂点では左折を選び、外周 1 本と穴 (0 本以上) に分解する。
"""
from __future__ import annotations

import logging
from typing import Any, Iterable, Literal, Sequence

import numpy as np
from scipy import ndimage
from shapely.geometry import Polygon

from domain.errors import app_error
from domain.models import BuildingPolygon, TileId
from geo.tilegrid import ground_width_m, pixel_to_lonlat

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 128
# 4 近傍
_CROSS = ndimage.generate_binary_structure(2, 1)

Ring = tuple[tuple[int, int], ...]


def binarize(img: np.ndarray, threshold: int = DEFAULT_THRESHOLD) -> np.ndarray:
    """threshold 以上を 255、それ以外を 0 にした uint8 マスク。"""

    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return np.where(arr >= threshold, 255, 0).astype(np.uint8)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    labels, count = ndimage.label(np.asarray(mask) > 0, structure=_CROSS)
    return labels, int(count)


# -- 境界追跡 ------------------------------------------------------------------------
def _boundary_edges(component: np.ndarray) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """画素を画面上で時計回りに囲む向きの境界辺 (始点, 終点)。座標は (x, y)。"""

    padded = np.pad(component, 1)
    inner = padded[1:-1, 1:-1]
    up = inner & ~padded[:-2, 1:-1]
    down = inner & ~padded[2:, 1:-1]
    left = inner & ~padded[1:-1, :-2]
    right = inner & ~padded[1:-1, 2:]

    edges: list[tuple[tuple[int, int], tuple[int, int]]] = []
    for r, c in zip(*np.nonzero(up)):
        edges.append(((int(c), int(r)), (int(c) + 1, int(r))))
    for r, c in zip(*np.nonzero(right)):
        edges.append(((int(c) + 1, int(r)), (int(c) + 1, int(r) + 1)))
    for r, c in zip(*np.nonzero(down)):
        edges.append(((int(c) + 1, int(r) + 1), (int(c), int(r) + 1)))
    for r, c in zip(*np.nonzero(left)):
        edges.append(((int(c), int(r) + 1), (int(c), int(r))))
    return edges


def _direction(a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    return (b[0] - a[0], b[1] - a[1])


def _link_rings(edges: Sequence[tuple[tuple[int, int], tuple[int, int]]]) -> list[list[tuple[int, int]]]:
    """各入射辺に出射辺を 1 本対応させ (対角接触では左折)、その巡回をリングとして取り出す。"""

    outgoing: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for start, end in edges:
        outgoing.setdefault(start, []).append(end)

    def successor(edge: tuple[tuple[int, int], tuple[int, int]]) -> tuple[tuple[int, int], tuple[int, int]]:
        start, end = edge
        options = outgoing[end]
        if len(options) == 1:
            return (end, options[0])
        dx, dy = _direction(start, end)
        turn = (dy, -dx)
        return (end, next(o for o in options if _direction(end, o) == turn))

    used: set[tuple[tuple[int, int], tuple[int, int]]] = set()
    rings: list[list[tuple[int, int]]] = []
    for first in edges:
        if first in used:
            continue
        ring = [first[0]]
        edge = first
        while True:
            used.add(edge)
            ring.append(edge[1])
            edge = successor(edge)
            if edge == first:
                break
        rings.append(ring)
    return rings


def _compress(ring: list[tuple[int, int]]) -> Ring:
    """直線上の中間頂点を落とし、始点 = 終点の閉リングにする。"""

    pts = ring[:-1] if ring[0] == ring[-1] else ring
    n = len(pts)
    kept = [
        pts[i]
        for i in range(n)
        if _direction(pts[i - 1], pts[i]) != _direction(pts[i], pts[(i + 1) % n])
    ]
    kept.append(kept[0])
    return tuple(kept)


def signed_area(ring: Sequence[tuple[float, float]]) -> float:
    """靴紐公式。画面座標 (y 下向き) で時計回りの外周が正。"""

    pts = np.asarray(ring, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) / 2.0)


def polygonize(
    mask: np.ndarray,
    *,
    tile: TileId | None = None,
    meters_per_pixel: float | None = None,
) -> list[BuildingPolygon]:
    """4 連結成分ごとに 1 ポリゴン。area_px は成分の画素数 (穴の画素は含まない)。"""

    labels, count = label_components(mask)
    if count == 0:
        return []
    if meters_per_pixel is None and tile is not None:
        meters_per_pixel = ground_width_m(tile) / float(labels.shape[0])
    areas = np.bincount(labels.ravel(), minlength=count + 1)
    slices = ndimage.find_objects(labels)
    polys: list[BuildingPolygon] = []
    for index, window in enumerate(slices, start=1):
        r0, c0 = window[0].start, window[1].start
        component = labels[window] == index
        rings = [_compress(ring) for ring in _link_rings(_boundary_edges(component))]
        rings = [tuple((x + c0, y + r0) for x, y in ring) for ring in rings]
        outer = [ring for ring in rings if signed_area(ring) > 0]
        holes = tuple(ring for ring in rings if signed_area(ring) < 0)
        if len(outer) != 1:
            raise app_error("E-UNEXPECTED", detail=f"component {index} traced into {len(outer)} outer rings")
        polys.append(
            BuildingPolygon(
                ring=outer[0],
                area_px=int(areas[index]),
                tile=tile,
                meters_per_pixel=meters_per_pixel,
                holes=holes,
            )
        )
    return polys


def count_and_area(polys: Sequence[BuildingPolygon], size: int) -> tuple[int, int, float]:
    """(ポリゴン数, 総面積 px, サイトカバー率)。"""

    total = sum(p.area_px for p in polys)
    return len(polys), int(total), total / float(size * size)


# -- 書き出し ------------------------------------------------------------------------
def simplify(ring: Sequence[tuple[float, float]], tolerance: float) -> tuple[tuple[float, float], ...]:
    """Douglas–Peucker 簡略化。書き出し用で、指標計算には使わない。"""

    if tolerance <= 0:
        return tuple((float(x), float(y)) for x, y in ring)
    simplified = Polygon(ring).simplify(tolerance, preserve_topology=True)
    if simplified.is_empty or not isinstance(simplified, Polygon):
        return tuple((float(x), float(y)) for x, y in ring)
    return tuple((float(x), float(y)) for x, y in simplified.exterior.coords)


def _coords(
    ring: Sequence[tuple[float, float]],
    tile: TileId | None,
    size: int,
    coords: Literal["tile", "wgs84"],
) -> list[list[float]]:
    if coords == "tile":
        return [[float(x), float(y)] for x, y in ring]
    if tile is None:
        raise app_error("E-USAGE", detail="WGS84 export needs the tile id of every polygon")
    out = []
    for x, y in ring:
        p = pixel_to_lonlat(float(x), float(y), tile, size)
        out.append([p.lon, p.lat])
    return out


def to_geojson(
    polys: Iterable[BuildingPolygon],
    tile: TileId | None,
    size: int,
    *,
    coords: Literal["tile", "wgs84"] = "tile",
    tolerance: float = 0.0,
) -> dict[str, Any]:
    """建物 1 つにつき Polygon Feature 1 つの FeatureCollection。"""

    if coords not in ("tile", "wgs84"):
        raise app_error("E-USAGE", detail=f"unknown coordinate mode {coords!r}")
    features = []
    for poly in polys:
        t = poly.tile or tile
        rings = [simplify(poly.ring, tolerance), *(simplify(h, tolerance) for h in poly.holes)]
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [_coords(r, t, size, coords) for r in rings]},
                "properties": {
                    "tile": None if t is None else str(t),
                    "area_px": poly.area_px,
                    "area_m2": poly.area_m2,
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}
