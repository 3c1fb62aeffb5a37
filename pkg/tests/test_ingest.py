from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from data.store import ResponseCache
from domain.errors import AppError
from domain.models import CaptionBundle, LonLat, Split, TagAllowlist, TileId
from domain.settings import IngestSettings
from geo.tilegrid import RASTER_KINDS, tile_bounds, tile_center, tile_path
from io_utils.geodata import load_allowlist, parse_geodata, to_document
from io_utils.tile_store import write_png
from services.captioner import Captioner, rule_based_caption
from services.ingest import (
    FeatureIndex,
    SplitPolicy,
    aggregate_tile_tags,
    build_manifest,
    city_token,
    filter_feature_set,
    load_manifest,
    merge_manifests,
    render_osm_caption,
    rewrite_city,
    truncate_tokens,
    write_manifest,
)

ROOT = Path(__file__).resolve().parents[1]
TILE = TileId(15, 17601, 10747)


def _box(t: TileId, x0: float, y0: float, x1: float, y1: float) -> list[list[float]]:
    """タイル内の相対位置 (0〜1) で矩形リングを作る。"""

    b = tile_bounds(t)
    def lon(f): return b.west + (b.east - b.west) * f
    def lat(f): return b.north - (b.north - b.south) * f
    return [[lon(x0), lat(y0)], [lon(x1), lat(y0)], [lon(x1), lat(y1)], [lon(x0), lat(y1)], [lon(x0), lat(y0)]]


def _document() -> dict:
    b = tile_bounds(TILE)
    mid = (b.north + b.south) / 2
    return {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "properties": {"building": "house", "name": "A", "roof:shape": "flat"},
             "geometry": {"type": "Polygon", "coordinates": [_box(TILE, 0.1, 0.1, 0.3, 0.3)]}},
            {"type": "Feature", "properties": {"building": "house"},
             "geometry": {"type": "Polygon", "coordinates": [_box(TILE, 0.5, 0.5, 0.7, 0.7)]}},
            {"type": "Feature", "properties": {"highway": "primary", "maxspeed": "50"},
             "geometry": {"type": "LineString", "coordinates": [[b.west - 0.01, mid], [b.east + 0.01, mid]]}},
            {"type": "Feature", "properties": {"leisure": "park"},
             "geometry": {"type": "Polygon", "coordinates": [_box(TILE, 0.0, 0.0, 1.0, 0.5)]}},
            {"type": "Feature", "properties": {"building": "no"},
             "geometry": {"type": "Polygon", "coordinates": [_box(TILE, 0.8, 0.8, 0.9, 0.9)]}},
            {"type": "Feature", "properties": {"building": "yes"}, "geometry": {"type": "Polygon", "coordinates": "bad"}},
            "not a feature",
        ],
    }


# -- 地理データの読み込み ----------------------------------------------------------
def test_parse_geodata_classifies_and_drops_malformed(caplog):
    features = parse_geodata(_document())
    assert len(features.buildings) == 2
    assert len(features.roads) == 1 and features.roads[0].road_class == 1
    assert len(features.landuse) == 1 and features.landuse[0].category == "park"
    assert sum("dropped" in r.getMessage() for r in caplog.records) == 2


def test_parse_geodata_rejects_non_collections(tmp_path):
    with pytest.raises(AppError) as exc:
        parse_geodata({"type": "Feature"})
    assert exc.value.code == "E-GEO-PARSE"
    with pytest.raises(AppError):
        parse_geodata("{not json")
    with pytest.raises(AppError) as exc:
        parse_geodata(tmp_path / "absent.geojson")
    assert exc.value.code == "E-PATH-NOTFOUND"


def test_to_document_round_trip():
    features = parse_geodata(_document())
    again = parse_geodata(json.dumps(to_document(features)))
    assert len(again.buildings) == 2 and len(again.roads) == 1 and len(again.landuse) == 1


def test_self_intersecting_building_is_repaired():
    bow = [[0, 0], [1, 1], [1, 0], [0, 1], [0, 0]]
    doc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"building": "yes"}, "geometry": {"type": "Polygon", "coordinates": [bow]}},
    ]}
    (building,) = parse_geodata(doc).buildings
    assert building.geometry.is_valid
    assert building.geometry.area > 0


# -- タグ ----------------------------------------------------------------------------
def test_allowlist_filters_tags_but_keeps_geometry():
    allow = load_allowlist(ROOT / "resources" / "tag_allowlist.txt")
    assert allow.allows("building", "house")
    assert not allow.allows("name", "A")
    features = filter_feature_set(parse_geodata(_document()), allow)
    first = features.buildings[0]
    assert "name" not in first.tags
    assert first.tags["building"] == "house"
    assert len(features.buildings) == 2


def test_aggregate_counts_distinct_features():
    features = parse_geodata(_document())
    features = filter_feature_set(features, TagAllowlist(frozenset({"building", "highway", "leisure=park"})))
    counts = aggregate_tile_tags(features, TILE)
    assert counts == {"building=house": 2, "highway=primary": 1, "leisure=park": 1}
    assert aggregate_tile_tags(FeatureIndex(features), TILE) == counts
    assert aggregate_tile_tags(features, TileId(15, 0, 0)) == {}
    assert render_osm_caption(counts) == "2 building=house, 1 highway=primary, 1 leisure=park"


def test_feature_index_returns_input_order():
    features = parse_geodata(_document())
    index = FeatureIndex(features)
    hits = index.query(TILE)
    assert [f.layer.value for f in hits] == ["buildings", "buildings", "roads", "landuse"]
    assert index.query(TileId(15, 100, 100)) == []


# -- キャプション文字列 ------------------------------------------------------------
def test_city_tokens_and_rewrite():
    assert city_token("New York") == "new_york"
    assert city_token("  ") == "unknown"
    caption = "berlin: dense blocks near berlinale"
    assert rewrite_city(caption, "Berlin", "Rome") == "rome: dense blocks near berlinale"
    assert truncate_tokens("a b  c d", 2) == "a b"


def test_rule_based_caption():
    assert rule_based_caption({}, "Berlin") == "city tile of berlin"
    text = rule_based_caption({"building=yes": 4, "highway=living_street": 2}, "Berlin")
    assert text == "berlin: 4 buildings, 2 living street roads"


class _FakeCache:
    def __init__(self):
        self.data = {}

    def get(self, key):
        return self.data.get(key)

    def put(self, key, kind, request, response):
        self.data[key] = response


class _FakeSearch:
    def __init__(self):
        self.calls = 0

    def search(self, center, radius, limit):
        self.calls += 1
        return [{"title": "Brandenburger Tor", "extract": "Gate.", "dist": 10.0}]


class _FakeLlm:
    def __init__(self, reply=None, error=None):
        self.reply, self.error, self.calls = reply, error, 0

    def complete(self, prompt):
        self.calls += 1
        if self.error:
            raise self.error
        return self.reply


def test_captioner_uses_cache_and_llm():
    cache, search, llm = _FakeCache(), _FakeSearch(), _FakeLlm(reply="Dense perimeter blocks")
    captioner = Captioner(IngestSettings(), cache=cache, geosearch_client=search, llm_client=llm)
    bundle = captioner.caption_tile({"building=house": 3}, tile_center(TILE), "Berlin")
    assert bundle.final_caption == "berlin: Dense perimeter blocks"
    assert not bundle.fallback
    assert "Brandenburger Tor" in bundle.wiki_caption

    replay = Captioner(IngestSettings(), cache=cache, offline=True)
    again = replay.caption_tile({"building=house": 3}, tile_center(TILE), "Berlin")
    assert again.final_caption == bundle.final_caption
    assert search.calls == 1 and llm.calls == 1


def test_cache_stats_counts_responses_by_kind(tmp_path):
    cache = ResponseCache(db_path=tmp_path / "responses.duckdb")
    captioner = Captioner(IngestSettings(), cache=cache, geosearch_client=_FakeSearch(), llm_client=_FakeLlm(reply="Blocks"))
    assert captioner.cache_stats() == {}
    captioner.caption_tile({"building=house": 3}, tile_center(TILE), "Berlin")
    captioner.caption_tile({"building=house": 3}, tile_center(TILE), "Berlin")
    assert captioner.cache_stats() == {"geosearch": 1, "llm": 1}
    assert Captioner(IngestSettings(), offline=True).cache_stats() == {}


def test_captioner_falls_back_on_llm_failure():
    llm = _FakeLlm(error=AppError("E-LLM-FAILED"))
    captioner = Captioner(IngestSettings(), geosearch_client=_FakeSearch(), llm_client=llm)
    bundle = captioner.caption_tile({"building=house": 3}, tile_center(TILE), "Berlin")
    assert bundle.fallback
    assert bundle.final_caption == "berlin: 3 house buildings"

    offline = Captioner(IngestSettings(), offline=True)
    assert offline.caption_tile({}, tile_center(TILE), "Rome").final_caption == "city tile of rome"


def test_caption_respects_token_budget():
    llm = _FakeLlm(reply="berlin " + "word " * 200)
    captioner = Captioner(IngestSettings(caption_token_budget=10), llm_client=llm)
    bundle = captioner.recaption("1 building=house", "", "Berlin")
    assert len(bundle.final_caption.split()) == 10


class _BrokenSearch:
    def search(self, center, radius, limit):
        raise AppError("E-NET-FETCH")


def test_geosearch_failure_is_flagged_in_manifest(tmp_path):
    llm = _FakeLlm(reply="Mid-rise blocks")
    captioner = Captioner(IngestSettings(), geosearch_client=_BrokenSearch(), llm_client=llm)
    bundle = captioner.caption_tile({"building=house": 3}, tile_center(TILE), "Berlin")
    assert bundle.wiki_failed
    assert bundle.wiki_caption == ""
    assert bundle.final_caption == "berlin: Mid-rise blocks"

    healthy = Captioner(IngestSettings(), geosearch_client=_FakeSearch(), llm_client=llm)
    assert not healthy.caption_tile({"building=house": 3}, tile_center(TILE), "Berlin").wiki_failed

    _write_rasters(tmp_path, [TILE])
    records = build_manifest([TILE], tmp_path, "Berlin", {TILE: bundle}, SplitPolicy(eval_fraction=0.0))
    path = write_manifest(records, tmp_path / "manifest.jsonl")
    assert json.loads(path.read_text(encoding="utf-8").splitlines()[0])["wiki_failed"] is True
    assert load_manifest(path)[0].caption.wiki_failed


# -- 分割とマニフェスト ------------------------------------------------------------
def test_split_policy_is_deterministic():
    policy = SplitPolicy(eval_fraction=0.5, seed=3)
    tiles = [TileId(15, x, 100) for x in range(200)]
    first = [policy.assign("Berlin", t) for t in tiles]
    assert first == [policy.assign("Berlin", t) for t in tiles]
    assert 40 < sum(s is Split.EVAL for s in first) < 160
    assert all(SplitPolicy(eval_fraction=0.0).assign("x", t) is Split.TRAIN for t in tiles)
    fixed = SplitPolicy(eval_tiles=frozenset({tiles[0]}))
    assert fixed.assign("x", tiles[0]) is Split.EVAL and fixed.assign("x", tiles[1]) is Split.TRAIN


def _write_rasters(root: Path, tiles, size: int = 8) -> None:
    for t in tiles:
        for kind in RASTER_KINDS:
            shape = (size, size) if kind == "target" else (size, size, 3)
            write_png(tile_path(root, kind, t), np.zeros(shape, np.uint8))


def test_manifest_round_trip_and_missing_rasters(tmp_path):
    tiles = [TileId(15, 10, 20), TileId(15, 11, 20), TileId(15, 12, 20)]
    _write_rasters(tmp_path, tiles[:2])
    captions = {tiles[0]: CaptionBundle("o", "w", "berlin: 3 buildings", "berlin")}
    records = build_manifest(tiles, tmp_path, "Berlin", captions, SplitPolicy(eval_fraction=0.0))
    assert [r.tile for r in records] == tiles[:2]
    assert records[1].caption.fallback
    path = write_manifest(records, tmp_path / "manifest.jsonl")
    assert path.read_bytes() == write_manifest(records, tmp_path / "again.jsonl").read_bytes()

    loaded = load_manifest(path)
    assert [r.tile for r in loaded] == tiles[:2]
    assert loaded[0].caption.final_caption == "berlin: 3 buildings"
    assert loaded[0].target_path == tmp_path / "target" / "15" / "10" / "20.png"


def test_load_manifest_validation(tmp_path):
    t = TileId(15, 10, 20)
    _write_rasters(tmp_path, [t])
    (record,) = build_manifest([t], tmp_path, "Berlin", {}, SplitPolicy())
    row = record.as_dict()
    path = tmp_path / "manifest.jsonl"

    bad_center = dict(row, center_lon=row["center_lon"] + 1.0)
    path.write_text(json.dumps(bad_center) + "\n", encoding="utf-8")
    with pytest.raises(AppError) as exc:
        load_manifest(path)
    assert exc.value.code == "E-MANIFEST-INVALID"

    path.write_text(json.dumps({k: v for k, v in row.items() if k != "split"}) + "\n", encoding="utf-8")
    with pytest.raises(AppError):
        load_manifest(path)

    tile_path(tmp_path, "roads", t).unlink()
    path.write_text(json.dumps(row) + "\n", encoding="utf-8")
    with pytest.raises(AppError):
        load_manifest(path)
    assert len(load_manifest(path, check_rasters=False)) == 1


def test_merge_manifests_orders_by_city(tmp_path):
    a_root, b_root = tmp_path / "rome", tmp_path / "berlin"
    ta, tb = TileId(15, 5, 5), TileId(15, 1, 1)
    _write_rasters(a_root, [ta])
    _write_rasters(b_root, [tb])
    write_manifest(build_manifest([ta], a_root, "Rome", {}, SplitPolicy()), a_root / "manifest.jsonl")
    write_manifest(build_manifest([tb], b_root, "Berlin", {}, SplitPolicy()), b_root / "manifest.jsonl")

    merged = merge_manifests([a_root / "manifest.jsonl", b_root / "manifest.jsonl"], tmp_path / "all" / "manifest.jsonl")
    assert [r.caption.city_name for r in merged] == ["berlin", "rome"]
    reloaded = load_manifest(tmp_path / "all" / "manifest.jsonl")
    assert reloaded[0].target_path.resolve() == tile_path(b_root, "target", tb).resolve()
    assert isinstance(reloaded[0].center, LonLat)
