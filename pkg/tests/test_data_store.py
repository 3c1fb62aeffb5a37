from data.store import ResponseCache, content_key
from domain.settings import CacheSettings


def test_content_key_ignores_key_order():
    a = content_key("geosearch", {"lat": 52.5, "lon": 13.4, "radius": 500})
    b = content_key("geosearch", {"radius": 500, "lon": 13.4, "lat": 52.5})
    assert a == b
    assert a != content_key("llm", {"lat": 52.5, "lon": 13.4, "radius": 500})
    assert len(a) == 64


def test_response_cache_put_and_get(tmp_path):
    cache = ResponseCache(db_path=tmp_path / "responses.duckdb")
    key = content_key("geosearch", {"lat": 1.0})
    assert cache.get(key) is None

    cache.put(key, "geosearch", {"lat": 1.0}, [{"title": "Brandenburger Tor", "dist": 12.5}])
    assert cache.get(key) == [{"title": "Brandenburger Tor", "dist": 12.5}]


def test_response_cache_upsert_overwrite(tmp_path):
    cache = ResponseCache(db_path=tmp_path / "responses.duckdb")
    cache.put("k", "llm", {"prompt": "a"}, "first")
    cache.put("k", "llm", {"prompt": "a"}, "second")
    cache.put("g", "geosearch", {}, [])

    assert cache.get("k") == "second"
    assert len(cache.entries()) == 2
    assert list(cache.entries("llm")["key"]) == ["k"]


def test_from_settings_prefers_cache_dir(tmp_path):
    settings = CacheSettings(duckdb_path=str(tmp_path / "a" / "x.duckdb"))
    assert ResponseCache.from_settings(settings).db_path == tmp_path / "a" / "x.duckdb"
    assert ResponseCache.from_settings(settings, tmp_path / "c").db_path == tmp_path / "c" / "responses.duckdb"
