"""OSM / Wikipedia キャプションの収集と LLM 再キャプション (キャッシュ優先)。"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping

from data.store import ResponseCache, content_key
from domain.errors import AppError
from domain.models import CaptionBundle, LonLat
from domain.settings import IngestSettings
from io_utils.remote import GeoSearchClient, LlmClient
from services.ingest import city_token, render_osm_caption, truncate_tokens

logger = logging.getLogger(__name__)

# ルールベース要約で使う語句。表に無いキーは "key=value" のまま描画する。
_PHRASES: dict[str, str] = {
    "building": "{value} buildings",
    "highway": "{value} roads",
    "landuse": "{value} areas",
    "leisure": "{value} areas",
    "natural": "{value} areas",
    "amenity": "{value} facilities",
    "shop": "{value} shops",
}
_RULE_ITEMS = 8


def _phrase(pair: str) -> str:
    key, _, value = pair.partition("=")
    if key == "building" and value in ("yes", ""):
        return "buildings"
    template = _PHRASES.get(key)
    return template.format(value=value.replace("_", " ")) if template else pair


def rule_based_caption(counts: Mapping[str, int], city_name: str) -> str:
    """``{city}: 12 house buildings, 3 primary roads, ...``。属性が無ければ ``city tile of {city}``。"""

    city = city_token(city_name)
    if not counts:
        return f"city tile of {city}"
    ordered = sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:_RULE_ITEMS]
    return f"{city}: " + ", ".join(f"{count} {_phrase(pair)}" for pair, count in ordered)


def wiki_caption(entries: list[tuple[str, str]]) -> str:
    return " | ".join(f"{title}: {extract}".strip() for title, extract in entries)


@dataclass(slots=True)
class Captioner:
    settings: IngestSettings
    cache: ResponseCache | None = None
    geosearch_client: GeoSearchClient | None = None
    llm_client: LlmClient | None = None
    offline: bool = False

    @classmethod
    def from_settings(cls, settings: IngestSettings, cache: ResponseCache | None, *, offline: bool = False) -> "Captioner":
        geosearch = None if offline else GeoSearchClient(settings)
        llm = None if offline or not settings.llm_url else LlmClient(settings)
        return cls(settings=settings, cache=cache, geosearch_client=geosearch, llm_client=llm, offline=offline)

    def cache_stats(self) -> dict[str, int]:
        """キャッシュ済み応答の種類別件数。"""

        if self.cache is None:
            return {}
        counts = self.cache.entries()["kind"].value_counts()
        return {str(kind): int(n) for kind, n in sorted(counts.items())}

    # ------------------------------------------------------------------
    def geosearch(self, center: LonLat, radius_m: float | None = None) -> list[tuple[str, str]]:
        """半径内の記事 (タイトル, 要約) を距離順で返す。キャッシュがあればそれを再生する。"""

        radius = self.settings.geosearch_radius_m if radius_m is None else float(radius_m)
        if radius <= 0:
            return []
        request = {"lon": center.lon, "lat": center.lat, "radius_m": radius, "limit": self.settings.geosearch_limit}
        key = content_key("geosearch", request)
        if self.cache is not None:
            cached = self.cache.get(key)
            if cached is not None:
                return [(str(item["title"]), str(item["extract"])) for item in cached]
        if self.geosearch_client is None:
            logger.debug("GeoSearch skipped for (%f, %f): offline and not cached", center.lon, center.lat)
            return []
        results = self.geosearch_client.search(center, radius, self.settings.geosearch_limit)
        if self.cache is not None:
            self.cache.put(key, "geosearch", request, results)
        return [(str(item["title"]), str(item["extract"])) for item in results]

    def recaption(
        self,
        osm_caption: str,
        wiki_text: str,
        city_name: str,
        *,
        counts: Mapping[str, int] | None = None,
    ) -> CaptionBundle:
        """OSM / Wikipedia テキストを LLM で 1 文に要約する。失敗時はルールベース要約 (fallback=True)。"""

        city = city_token(city_name)
        budget = self.settings.caption_token_budget
        osm_raw = osm_caption[: self.settings.raw_char_budget]
        wiki_raw = wiki_text[: self.settings.raw_char_budget]

        def fallback() -> CaptionBundle:
            text = truncate_tokens(rule_based_caption(counts or {}, city), budget)
            return CaptionBundle(osm_caption, wiki_text, text, city, fallback=True)

        if not osm_raw.strip() and not wiki_raw.strip():
            return fallback()

        prompt = self.settings.prompt_template.format(city=city, osm_caption=osm_raw, wiki_caption=wiki_raw)
        request = {"model": self.settings.llm_model, "prompt": prompt}
        key = content_key("llm", request)
        text: str | None = None
        if self.cache is not None:
            cached = self.cache.get(key)
            if cached is not None:
                text = str(cached)
        if text is None:
            if self.llm_client is None:
                return fallback()
            try:
                text = self.llm_client.complete(prompt)
            except AppError as err:
                logger.warning("Recaption failed for %s: %s; using rule-based caption", city, err.for_log())
                return fallback()
            if self.cache is not None:
                self.cache.put(key, "llm", request, text)
        if city not in text.lower():
            text = f"{city}: {text}"
        final = truncate_tokens(text, budget)
        if not final:
            return fallback()
        return CaptionBundle(osm_caption, wiki_text, final, city, fallback=False)

    def caption_tile(self, counts: Mapping[str, int], center: LonLat, city_name: str) -> CaptionBundle:
        """1 タイル分の OSM キャプション → GeoSearch → 再キャプションをまとめて行う。"""

        osm = render_osm_caption(counts)
        try:
            entries = self.geosearch(center)
        except AppError as err:
            logger.warning("GeoSearch failed near (%f, %f): %s", center.lon, center.lat, err.for_log())
            bundle = self.recaption(osm, "", city_name, counts=counts)
            return replace(bundle, wiki_failed=True)
        return self.recaption(osm, wiki_caption(entries), city_name, counts=counts)
