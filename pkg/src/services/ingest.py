"""四つ組データセット (画像・テキスト・メタデータ・建物) のタグ処理とマニフェスト管理。"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from PIL import Image
from shapely import STRtree
from shapely.geometry import box

from domain.errors import AppError, app_error
from domain.models import CaptionBundle, FeatureSet, GeoFeature, LonLat, Split, TagAllowlist, TileId, TileRecord
from geo.tilegrid import RASTER_KINDS, tile_bounds, tile_center, tile_path

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = (
    "z",
    "x",
    "y",
    "center_lon",
    "center_lat",
    "city",
    "caption",
    "fallback",
    "target_path",
    "roads_path",
    "landuse_path",
    "split",
)

_CITY_RE = re.compile(r"[^0-9a-z]+")


# -- タグ ----------------------------------------------------------------------------
def filter_tags(feature: GeoFeature, allow: TagAllowlist) -> GeoFeature:
    """許可リストに一致するタグだけを残す。ジオメトリと分類はそのまま。"""

    kept = {key: value for key, value in feature.tags.items() if allow.allows(key, value)}
    return replace(feature, tags=kept)


def filter_feature_set(features: FeatureSet, allow: TagAllowlist) -> FeatureSet:
    return FeatureSet(
        buildings=[filter_tags(f, allow) for f in features.buildings],
        roads=[filter_tags(f, allow) for f in features.roads],
        landuse=[filter_tags(f, allow) for f in features.landuse],
    )


class FeatureIndex:
    """タイル範囲と交差する地物を STRtree で引く。"""

    def __init__(self, features: FeatureSet) -> None:
        self.features = features.all()
        self._tree = STRtree([f.geometry for f in self.features]) if self.features else None

    def query(self, t: TileId, margin: float = 0.0) -> list[GeoFeature]:
        """タイル (外側へ幅の margin 倍だけ広げた範囲) と交差する地物を入力順で返す。"""

        if self._tree is None:
            return []
        b = tile_bounds(t)
        dx, dy = (b.east - b.west) * margin, (b.north - b.south) * margin
        area = box(b.west - dx, b.south - dy, b.east + dx, b.north + dy)
        hits = self._tree.query(area, predicate="intersects")
        return [self.features[i] for i in sorted(int(i) for i in hits)]

    def split_layers(self, t: TileId, margin: float = 0.0) -> FeatureSet:
        subset = FeatureSet()
        for feature in self.query(t, margin):
            subset.add(feature)
        return subset


def aggregate_tile_tags(features: FeatureSet | FeatureIndex, t: TileId) -> dict[str, int]:
    """タイルと交差する地物について `key=value` ごとの出現地物数を数える。"""

    if isinstance(features, FeatureIndex):
        candidates = features.query(t)
    else:
        b = tile_bounds(t)
        area = box(b.west, b.south, b.east, b.north)
        candidates = [f for f in features.all() if f.geometry.intersects(area)]
    counts: Counter[str] = Counter()
    for feature in candidates:
        counts.update(set(feature.tag_pairs()))
    return dict(sorted(counts.items()))


# -- キャプション ------------------------------------------------------------------
def render_osm_caption(counts: Mapping[str, int]) -> str:
    """属性カウントを「件数降順、同数はキー順」で ``12 building=house, 3 highway=residential`` と描画する。"""

    ordered = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return ", ".join(f"{count} {pair}" for pair, count in ordered)


def city_token(name: str) -> str:
    """都市名を 1 トークンへ正規化する (例: "New York" → "new_york")。"""

    token = _CITY_RE.sub("_", name.strip().lower()).strip("_")
    return token or "unknown"


def rewrite_city(caption: str, source_city: str, target_city: str) -> str:
    """キャプション内の都市トークンを差し替える (スタイル転写用)。"""

    src, dst = city_token(source_city), city_token(target_city)
    if src == dst:
        return caption
    return re.sub(rf"(?<![0-9a-z_]){re.escape(src)}(?![0-9a-z_])", dst, caption)


def truncate_tokens(text: str, budget: int) -> str:
    tokens = text.split()
    if len(tokens) <= budget:
        return " ".join(tokens)
    return " ".join(tokens[:budget])


# -- 分割 ----------------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class SplitPolicy:
    """タイルの train / eval 割り当て。eval_tiles 指定時はその集合を評価用に固定する。"""

    eval_fraction: float = 0.1
    seed: int = 0
    eval_tiles: frozenset[TileId] | None = None

    def assign(self, city: str, t: TileId) -> Split:
        if self.eval_tiles is not None:
            return Split.EVAL if t in self.eval_tiles else Split.TRAIN
        digest = hashlib.sha256(f"{self.seed}:{city_token(city)}:{t}".encode("ascii")).digest()
        draw = int.from_bytes(digest[:8], "big") / float(1 << 64)
        return Split.EVAL if draw < self.eval_fraction else Split.TRAIN


def records_for_split(records: Sequence[TileRecord], split: str | None) -> list[TileRecord]:
    """split (train / eval) のレコードだけを返す。None なら全件。"""

    if split is None:
        return list(records)
    try:
        wanted = Split(split)
    except ValueError as exc:
        raise app_error("E-USAGE", detail=f"unknown split {split!r}") from exc
    return [r for r in records if r.split is wanted]


# -- マニフェスト --------------------------------------------------------------------
def _raster_size(path: Path) -> tuple[int, int] | None:
    try:
        with Image.open(path) as img:
            return img.size
    except (FileNotFoundError, OSError):
        return None


def build_manifest(
    tiles: Sequence[TileId],
    root: Path,
    city_name: str,
    captions: Mapping[TileId, CaptionBundle],
    split_policy: SplitPolicy,
) -> list[TileRecord]:
    """描画済みラスタからタイルごとの TileRecord を作る。ラスタ欠損タイルは警告して除外する。"""

    root = Path(root)
    records: list[TileRecord] = []
    for t in sorted(set(tiles), key=lambda item: item.row_major_key()):
        paths = {kind: tile_path(root, kind, t) for kind in RASTER_KINDS}
        sizes = {kind: _raster_size(path) for kind, path in paths.items()}
        missing = [kind for kind, size in sizes.items() if size is None]
        if missing:
            logger.warning("Tile %s is missing rasters %s; skipped", t, ",".join(missing))
            continue
        if len(set(sizes.values())) != 1:
            logger.warning("Tile %s has rasters of differing size %s; skipped", t, sizes)
            continue
        caption = captions.get(t) or CaptionBundle("", "", f"city tile of {city_token(city_name)}", city_token(city_name), True)
        rel = {kind: path.relative_to(root) for kind, path in paths.items()}
        records.append(
            TileRecord(
                tile=t,
                center=tile_center(t),
                caption=caption,
                target_path=rel["target"],
                roads_path=rel["roads"],
                landuse_path=rel["landuse"],
                split=split_policy.assign(city_name, t),
            )
        )
    logger.info("Built manifest with %d records from %d tiles", len(records), len(tiles))
    return records


def write_manifest(records: Iterable[TileRecord], path: Path) -> Path:
    """1 行 1 レコードの JSON Lines。キー順と数値表現を固定してバイト単位で再現可能にする。"""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(record.as_dict(), ensure_ascii=False) for record in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def _record_from_row(row: Mapping[str, Any], base: Path, lineno: int, manifest: Path, check_rasters: bool) -> TileRecord:
    def invalid(detail: str) -> AppError:
        return app_error("E-MANIFEST-INVALID", detail=f"line {lineno}: {detail}", subject=str(manifest))

    missing = [name for name in MANIFEST_FIELDS if name not in row]
    if missing:
        raise invalid(f"missing fields {missing}")
    try:
        tile = TileId(int(row["z"]), int(row["x"]), int(row["y"]))
        center = LonLat(float(row["center_lon"]), float(row["center_lat"]))
        split = Split(str(row["split"]))
    except (TypeError, ValueError) as exc:
        raise invalid(str(exc)) from exc
    try:
        expected = tile_center(tile)
    except AppError as exc:
        raise invalid(f"invalid tile {tile}") from exc
    if center != expected:
        raise invalid(f"center ({center.lon}, {center.lat}) differs from tile center of {tile}")
    paths = {kind: base / str(row[f"{kind}_path"]) for kind in RASTER_KINDS}
    if check_rasters:
        sizes = {kind: _raster_size(path) for kind, path in paths.items()}
        absent = [str(path) for kind, path in paths.items() if sizes[kind] is None]
        if absent:
            raise invalid(f"missing rasters {absent}")
        if len(set(sizes.values())) != 1:
            raise invalid(f"raster sizes differ for {tile}: {sizes}")
    city = str(row["city"])
    caption = CaptionBundle(
        osm_caption="",
        wiki_caption="",
        final_caption=str(row["caption"]),
        city_name=city,
        fallback=bool(row["fallback"]),
        wiki_failed=bool(row.get("wiki_failed", False)),
    )
    return TileRecord(
        tile=tile,
        center=center,
        caption=caption,
        target_path=paths["target"],
        roads_path=paths["roads"],
        landuse_path=paths["landuse"],
        split=split,
    )


def load_manifest(path: Path, *, check_rasters: bool = True) -> list[TileRecord]:
    """マニフェストを読み込み検証する。ラスタパスはマニフェストの場所を基準に解決する。"""

    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise app_error("E-PATH-NOTFOUND", detail=str(exc), subject=str(path)) from exc
    records: list[TileRecord] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise app_error("E-MANIFEST-INVALID", detail=f"line {lineno}: {exc}", subject=str(path)) from exc
        if not isinstance(row, dict):
            raise app_error("E-MANIFEST-INVALID", detail=f"line {lineno}: not an object", subject=str(path))
        records.append(_record_from_row(row, path.parent, lineno, path, check_rasters))
    return records


def merge_manifests(paths: Sequence[Path], out_path: Path) -> list[TileRecord]:
    """都市別マニフェストを 1 つに連結する。順序は (city, z, x, y)、パスは出力先基準に書き換える。"""

    out_path = Path(out_path)
    merged: dict[tuple[str, TileId], TileRecord] = {}
    for manifest in paths:
        for record in load_manifest(manifest):
            key = (record.caption.city_name, record.tile)
            if key in merged:
                logger.warning("Duplicate tile %s for city %s in %s; keeping the first", record.tile, key[0], manifest)
                continue
            merged[key] = record
    base = out_path.parent.resolve()
    ordered: list[TileRecord] = []
    for (city, t) in sorted(merged, key=lambda k: (k[0], k[1].z, k[1].x, k[1].y)):
        record = merged[(city, t)]
        ordered.append(
            replace(
                record,
                target_path=Path(os.path.relpath(Path(record.target_path).resolve(), base)),
                roads_path=Path(os.path.relpath(Path(record.roads_path).resolve(), base)),
                landuse_path=Path(os.path.relpath(Path(record.landuse_path).resolve(), base)),
            )
        )
    write_manifest(ordered, out_path)
    logger.info("Merged %d manifests into %s (%d records)", len(paths), out_path, len(ordered))
    return ordered
