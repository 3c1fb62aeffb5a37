"""GeoJSON FeatureCollection の読み書きと地物の分類。"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Mapping

import shapely
from shapely.geometry import GeometryCollection, LineString, MultiLineString, MultiPolygon, Polygon, mapping, shape
from shapely.geometry.base import BaseGeometry

from domain.errors import app_error
from domain.models import FeatureSet, GeoFeature, Layer, TagAllowlist
from domain.settings import IngestSettings

logger = logging.getLogger(__name__)

# landuse 以外のキーで土地利用として扱うもの
_LANDUSE_ALIASES = {
    ("leisure", "park"): "park",
    ("leisure", "garden"): "park",
    ("natural", "water"): "water",
    ("natural", "grassland"): "grass",
}


def load_allowlist(path: Path) -> TagAllowlist:
    """`#` コメントと空行を除いた 1 行 1 パターンの許可リストを読み込む。"""

    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise app_error("E-PATH-NOTFOUND", detail=str(exc), subject=str(path)) from exc
    entries = frozenset(
        line.strip() for line in text.splitlines() if line.strip() and not line.strip().startswith("#")
    )
    if not entries:
        raise app_error("E-CONFIG-INVALID", detail="tag allowlist is empty", subject=str(path))
    return TagAllowlist(entries)


def read_document(path: Path) -> dict[str, Any]:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise app_error("E-PATH-NOTFOUND", detail=str(exc), subject=str(path)) from exc
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise app_error("E-GEO-PARSE", detail=str(exc), subject=str(path)) from exc


def _clean_polygonal(geom: BaseGeometry) -> BaseGeometry | None:
    geom = shapely.remove_repeated_points(geom)
    if not geom.is_valid:
        geom = shapely.make_valid(geom)
        if isinstance(geom, GeometryCollection):
            parts = [g for g in geom.geoms if isinstance(g, (Polygon, MultiPolygon))]
            geom = shapely.union_all(parts) if parts else None
    if geom is None or geom.is_empty or not isinstance(geom, (Polygon, MultiPolygon)) or geom.area <= 0:
        return None
    return geom


def _clean_linear(geom: BaseGeometry) -> BaseGeometry | None:
    geom = shapely.remove_repeated_points(geom)
    if geom.is_empty or geom.length <= 0:
        return None
    return geom


def _landuse_category(tags: Mapping[str, str]) -> str | None:
    if "landuse" in tags:
        return tags["landuse"]
    for (key, value), category in _LANDUSE_ALIASES.items():
        if tags.get(key) == value:
            return category
    return None


def classify_feature(geom: BaseGeometry, tags: dict[str, str], settings: IngestSettings) -> GeoFeature | None:
    """タグとジオメトリ種別から buildings / roads / landuse に振り分ける。該当なしは None。"""

    polygonal = isinstance(geom, (Polygon, MultiPolygon))
    linear = isinstance(geom, (LineString, MultiLineString))
    building = tags.get("building")
    if building and building != "no" and polygonal:
        cleaned = _clean_polygonal(geom)
        return GeoFeature(cleaned, tags, Layer.BUILDINGS) if cleaned is not None else None
    if "highway" in tags and linear:
        cleaned = _clean_linear(geom)
        road_class = settings.road_class_for(tags["highway"]) or 3
        return GeoFeature(cleaned, tags, Layer.ROADS, road_class=road_class) if cleaned is not None else None
    category = _landuse_category(tags)
    if category and polygonal:
        cleaned = _clean_polygonal(geom)
        return GeoFeature(cleaned, tags, Layer.LANDUSE, category=category) if cleaned is not None else None
    return None


def parse_geodata(document: Mapping[str, Any] | str | Path, settings: IngestSettings | None = None) -> FeatureSet:
    """FeatureCollection を FeatureSet に変換する。不正な地物は警告して読み飛ばす。"""

    settings = settings or IngestSettings()
    if isinstance(document, Path):
        document = read_document(document)
    elif isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise app_error("E-GEO-PARSE", detail=str(exc)) from exc
    if not isinstance(document, Mapping) or document.get("type") != "FeatureCollection":
        raise app_error("E-GEO-PARSE", detail="document is not a FeatureCollection")
    items = document.get("features")
    if not isinstance(items, list):
        raise app_error("E-GEO-PARSE", detail="'features' must be a list")

    features = FeatureSet()
    dropped = 0
    for index, item in enumerate(items):
        if not isinstance(item, Mapping):
            logger.warning("Feature #%d is not an object; dropped", index)
            dropped += 1
            continue
        props = item.get("properties") or {}
        tags = {str(k): str(v) for k, v in props.items() if v is not None}
        try:
            geom = shape(item.get("geometry"))
        except Exception as exc:  # shapely は形式不正で多様な例外を出す
            logger.warning("Feature #%d has malformed geometry (%s); dropped", index, exc)
            dropped += 1
            continue
        try:
            feature = classify_feature(geom, tags, settings)
        except Exception as exc:
            logger.warning("Feature #%d could not be cleaned (%s); dropped", index, exc)
            dropped += 1
            continue
        if feature is not None:
            features.add(feature)
    logger.info(
        "Parsed %d features: %d buildings, %d roads, %d landuse (%d malformed)",
        len(items),
        len(features.buildings),
        len(features.roads),
        len(features.landuse),
        dropped,
    )
    return features


def to_document(features: FeatureSet) -> dict[str, Any]:
    """FeatureSet を parse_geodata が読める FeatureCollection に戻す。"""

    return {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "properties": dict(feature.tags), "geometry": mapping(feature.geometry)}
            for feature in features.all()
        ],
    }


def write_document(document: Mapping[str, Any], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, ensure_ascii=False), encoding="utf-8")
    return path
