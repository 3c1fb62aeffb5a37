"""Wikipedia GeoSearch と LLM 再キャプション API の HTTP クライアント。"""
from __future__ import annotations

import logging
import time
from threading import BoundedSemaphore
from typing import Any, Callable, Mapping, TypeVar

import requests

from domain.errors import app_error
from domain.models import LonLat
from domain.settings import IngestSettings

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_WIKI_URL = "https://en.wikipedia.org/w/api.php"
USER_AGENT = "geoforge/0.1 (dataset builder)"
# GeoSearch API の半径上限
MAX_GEOSEARCH_RADIUS_M = 10000.0


def _with_retry(action: Callable[[], T], *, attempts: int, backoff: float, code: str, subject: str) -> T:
    """失敗時に指数バックオフで再試行し、上限到達で AppError(code) を送出する。"""

    attempt = 0
    delay = 1.0
    last_exc: Exception | None = None
    while attempt <= attempts:
        try:
            return action()
        except requests.RequestException as exc:
            last_exc = exc
            attempt += 1
            logger.warning("Request to %s failed (attempt %d/%d): %s", subject, attempt, attempts + 1, exc)
            if attempt > attempts:
                break
            time.sleep(delay)
            delay *= backoff
    raise app_error(code, detail=str(last_exc) if last_exc else None, subject=subject) from last_exc


class GeoSearchClient:
    """近傍の Wikipedia 記事 (タイトル・要約) を距離順で取得する。"""

    def __init__(self, settings: IngestSettings, session: requests.Session | None = None) -> None:
        self.settings = settings
        self.url = settings.wiki_url or DEFAULT_WIKI_URL
        self.session = session or requests.Session()
        self.session.headers.setdefault("User-Agent", USER_AGENT)
        self._slots = BoundedSemaphore(max(settings.max_in_flight, 1))

    def _get(self, params: Mapping[str, Any]) -> dict[str, Any]:
        def action() -> dict[str, Any]:
            with self._slots:
                response = self.session.get(self.url, params=dict(params), timeout=self.settings.timeout_s)
            response.raise_for_status()
            return response.json()

        return _with_retry(
            action,
            attempts=self.settings.retry.max_attempts,
            backoff=self.settings.retry.backoff,
            code="E-NET-FETCH",
            subject=self.url,
        )

    def search(self, center: LonLat, radius_m: float, limit: int) -> list[dict[str, Any]]:
        """``[{"title", "extract", "dist"}]`` を距離 → タイトル順で返す。"""

        radius = min(float(radius_m), MAX_GEOSEARCH_RADIUS_M)
        payload = self._get(
            {
                "action": "query",
                "list": "geosearch",
                "gscoord": f"{center.lat}|{center.lon}",
                "gsradius": int(round(radius)),
                "gslimit": limit,
                "format": "json",
            }
        )
        hits = payload.get("query", {}).get("geosearch", [])
        if not hits:
            return []
        page_ids = [str(hit["pageid"]) for hit in hits if "pageid" in hit]
        extracts: dict[str, str] = {}
        if page_ids:
            pages = self._get(
                {
                    "action": "query",
                    "prop": "extracts",
                    "explaintext": 1,
                    "exintro": 1,
                    "pageids": "|".join(page_ids),
                    "format": "json",
                }
            )
            for page_id, page in pages.get("query", {}).get("pages", {}).items():
                extracts[str(page_id)] = str(page.get("extract") or "")
        results = [
            {
                "title": str(hit.get("title", "")),
                "extract": extracts.get(str(hit.get("pageid")), ""),
                "dist": float(hit.get("dist", 0.0)),
            }
            for hit in hits
        ]
        results.sort(key=lambda item: (item["dist"], item["title"]))
        return results


class LlmClient:
    """OpenAI 互換の chat completions エンドポイントへ問い合わせる。"""

    def __init__(self, settings: IngestSettings, session: requests.Session | None = None) -> None:
        if not settings.llm_url:
            raise app_error("E-LLM-FAILED", detail="LLM endpoint is not configured")
        self.settings = settings
        self.url = settings.llm_url.rstrip("/") + "/chat/completions"
        self.session = session or requests.Session()
        self._slots = BoundedSemaphore(max(settings.max_in_flight, 1))

    def complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.settings.llm_key:
            headers["Authorization"] = f"Bearer {self.settings.llm_key}"
        body = {
            "model": self.settings.llm_model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        }

        def action() -> str:
            with self._slots:
                response = self.session.post(self.url, json=body, headers=headers, timeout=self.settings.timeout_s)
            response.raise_for_status()
            payload = response.json()
            try:
                return str(payload["choices"][0]["message"]["content"]).strip()
            except (KeyError, IndexError, TypeError) as exc:
                raise requests.RequestException(f"unexpected response shape: {exc}") from exc

        return _with_retry(
            action,
            attempts=self.settings.retry.max_attempts,
            backoff=self.settings.retry.backoff,
            code="E-LLM-FAILED",
            subject=self.url,
        )
