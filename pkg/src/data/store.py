"""DuckDB を利用した外部サービス応答キャッシュ。"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock
from typing import Any, ClassVar, Optional

import duckdb
import pandas as pd

from domain.settings import CacheSettings

logger = logging.getLogger(__name__)

CACHE_FILENAME = "responses.duckdb"


def content_key(kind: str, payload: Any) -> str:
    """リクエスト内容の SHA-256。キー順に依存しないよう JSON を正規化してから計算する。"""

    canonical = json.dumps({"kind": kind, "payload": payload}, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(slots=True)
class ResponseCache:
    """GeoSearch / LLM 応答をコンテンツハッシュで保存する。"""

    db_path: Path
    _schema_lock: ClassVar[Lock] = Lock()
    _db_lock: ClassVar[Lock] = Lock()  # DuckDB は同一ファイルへの並行書き込みに弱いため全操作を直列化
    _initialized: bool = field(default=False, init=False, repr=False)

    @classmethod
    def from_settings(cls, settings: CacheSettings, cache_dir: Path | None = None) -> "ResponseCache":
        if cache_dir is not None:
            return cls(Path(cache_dir) / CACHE_FILENAME)
        return cls(Path(settings.duckdb_path))

    # ------------------------------------------------------------------
    def _conn(self) -> duckdb.DuckDBPyConnection:
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        try:
            return duckdb.connect(str(self.db_path))
        except Exception:
            logger.exception("Failed to connect to DuckDB: %s", self.db_path)
            raise

    def _ensure_table(self, con: duckdb.DuckDBPyConnection) -> None:
        if self._initialized:
            return
        with self._schema_lock:
            if self._initialized:
                return
            con.execute(
                "CREATE TABLE IF NOT EXISTS responses ("
                "key TEXT PRIMARY KEY, kind TEXT, request TEXT, response TEXT, "
                "created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP)"
            )
            self._initialized = True

    def get(self, key: str) -> Optional[Any]:
        with self._db_lock:
            con = self._conn()
            try:
                self._ensure_table(con)
                row = con.execute("SELECT response FROM responses WHERE key=?", [key]).fetchone()
            except Exception:
                logger.exception("Failed to read cached response %s", key)
                raise
            finally:
                con.close()
        if not row:
            return None
        return json.loads(row[0])

    def put(self, key: str, kind: str, request: Any, response: Any) -> None:
        with self._db_lock:
            con = self._conn()
            try:
                self._ensure_table(con)
                con.execute(
                    "INSERT INTO responses(key, kind, request, response, created_at) VALUES (?, ?, ?, ?, now()) "
                    "ON CONFLICT(key) DO UPDATE SET response=excluded.response, created_at=now()",
                    [
                        key,
                        kind,
                        json.dumps(request, sort_keys=True, ensure_ascii=False),
                        json.dumps(response, ensure_ascii=False),
                    ],
                )
            except Exception:
                logger.exception("Failed to store response %s", key)
                raise
            finally:
                con.close()

    def entries(self, kind: str | None = None) -> pd.DataFrame:
        """キャッシュ内容の一覧 (件数集計・フィクスチャ作成用)。"""

        with self._db_lock:
            con = self._conn()
            try:
                self._ensure_table(con)
                if kind is None:
                    return con.execute("SELECT key, kind, request, response FROM responses ORDER BY key").df()
                return con.execute(
                    "SELECT key, kind, request, response FROM responses WHERE kind=? ORDER BY key",
                    [kind],
                ).df()
            finally:
                con.close()
