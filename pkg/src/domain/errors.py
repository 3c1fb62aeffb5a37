"""アプリ全体で共通利用するエラー定義。"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping

import yaml


_SUPPORT_DOC = "docs/usage.md"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


DEFAULT_ERROR_CATALOG: Mapping[str, dict[str, Any]] = {
    "E-CONFIG-INVALID": {
        "message": "設定値が不正です。",
        "guidance": "config.yaml の該当セクションを確認してください。埋め込み次元は偶数、β は 0 < β_start ≤ β_end < 1 が必要です。",
        "exit_code": EXIT_USAGE,
    },
    "E-USAGE": {
        "message": "コマンドの指定が不正です。",
        "guidance": "`python src/app.py <subcommand> --help` で利用可能なオプションを確認してください。",
        "exit_code": EXIT_USAGE,
    },
    "E-PATH-NOTFOUND": {
        "message": "入力パスが見つかりません。",
        "guidance": "ファイルパスとアクセス権を確認し、必要に応じてフルパスを指定してください。",
        "exit_code": EXIT_DATA,
    },
    "E-OUTDIR-EXISTS": {
        "message": "出力先ディレクトリが既に存在します。",
        "guidance": "上書きする場合は --force を指定してください。",
        "exit_code": EXIT_USAGE,
    },
    "E-GEO-DOMAIN": {
        "message": "座標が Web メルカトルの有効範囲外です。",
        "guidance": "緯度は ±85.0511 度の範囲、ズームは 0〜22 で指定してください。",
        "exit_code": EXIT_DATA,
    },
    "E-GEO-PARSE": {
        "message": "地理データを読み込めませんでした。",
        "guidance": "WGS84 の FeatureCollection 形式 (GeoJSON) か確認してください。",
        "exit_code": EXIT_DATA,
    },
    "E-RASTER-SHAPE": {
        "message": "ラスタのサイズが一致しません。",
        "guidance": "道路画像と土地利用画像は同じピクセルサイズで生成してください。",
        "exit_code": EXIT_DATA,
    },
    "E-NET-FETCH": {
        "message": "外部サービスからの取得に失敗しました。",
        "guidance": "ネットワーク状態と GEOFORGE_WIKI_URL を確認するか、キャッシュ済みのデータで再実行してください。",
        "exit_code": EXIT_DATA,
    },
    "E-LLM-FAILED": {
        "message": "キャプション生成サービスの呼び出しに失敗しました。",
        "guidance": "GEOFORGE_LLM_URL / GEOFORGE_LLM_KEY を確認してください。失敗時はルールベースのキャプションで代替されます。",
        "exit_code": EXIT_DATA,
    },
    "E-MANIFEST-INVALID": {
        "message": "マニフェストの内容が不正です。",
        "guidance": "build-dataset で生成したマニフェストを指定し、参照先のラスタが存在するか確認してください。",
        "exit_code": EXIT_DATA,
    },
    "E-MODEL-SHAPE": {
        "message": "モデル入力の形状が一致しません。",
        "guidance": "タイルサイズと条件チャネル数がチェックポイントの設定と一致しているか確認してください。",
        "exit_code": EXIT_DATA,
    },
    "E-SCHEDULE-INVALID": {
        "message": "ノイズスケジュールの指定が不正です。",
        "guidance": "T ≥ 1 かつ 0 < β_start ≤ β_end < 1 を満たすよう設定してください。",
        "exit_code": EXIT_USAGE,
    },
    "E-TRAIN-NONFINITE": {
        "message": "学習中に損失が発散しました。",
        "guidance": "学習率を下げるか、入力データに欠損や異常値がないか確認してください。",
        "exit_code": EXIT_NUMERIC,
    },
    "E-CKPT-FORMAT": {
        "message": "チェックポイントを読み込めませんでした。",
        "guidance": "train で保存したファイルか、バージョンが一致しているか確認してください。",
        "exit_code": EXIT_DATA,
    },
    "E-SAMPLE-STEPS": {
        "message": "サンプリングステップ列が不正です。",
        "guidance": "ステップは 1 で終わる狭義単調減少列で、T 以下である必要があります。",
        "exit_code": EXIT_USAGE,
    },
    "E-TILE-UNKNOWN": {
        "message": "指定したタイルがマニフェストに存在しません。",
        "guidance": "タイル指定とマニフェストの都市名を確認してください。",
        "exit_code": EXIT_DATA,
    },
    "E-EVAL-PAIRING": {
        "message": "生成タイルと正解タイルの対応が取れません。",
        "guidance": "両ディレクトリに同じ {z}/{x}/{y}.png が揃っているか確認してください。",
        "exit_code": EXIT_DATA,
    },
    "E-EVAL-EMPTY": {
        "message": "評価対象のタイルがありません。",
        "guidance": "生成ディレクトリと正解ディレクトリの指定を確認してください。",
        "exit_code": EXIT_DATA,
    },
    "E-FEATURES-FORMAT": {
        "message": "外部特徴量ファイルの形式が不正です。",
        "guidance": "1 行目に 'n d' のヘッダーを置き、続けて n 行 × d 列の数値を記述してください。",
        "exit_code": EXIT_DATA,
    },
    "E-LINALG": {
        "message": "行列計算に失敗しました。",
        "guidance": "サンプル数が特徴次元に比べて少なすぎないか確認してください。",
        "exit_code": EXIT_NUMERIC,
    },
    "E-ASSESS-EMPTY": {
        "message": "完全性評価の対象タイルがありません。",
        "guidance": "生成ディレクトリと欠損データディレクトリの指定を確認してください。",
        "exit_code": EXIT_DATA,
    },
    "E-UNEXPECTED": {
        "message": "予期しないエラーが発生しました。",
        "guidance": "ログを確認し、再実行しても改善しない場合は開発者に問い合わせてください。",
        "exit_code": EXIT_DATA,
    },
}


@lru_cache()
def _support_tables(config_path: Path = Path("config.yaml")) -> tuple[dict[str, str], dict[str, str]]:
    """config.yaml の (support_links, app.error_support) を返す。読めなければ空。"""

    try:
        data = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError):
        return {}, {}

    def as_map(value: Any) -> dict[str, str]:
        return {str(k): str(v) for k, v in value.items()} if isinstance(value, dict) else {}

    app_cfg = data.get("app") if isinstance(data, dict) else None
    links = data.get("support_links") if isinstance(data, dict) else None
    return as_map(links), as_map(app_cfg.get("error_support") if isinstance(app_cfg, dict) else None)


def clear_support_cache() -> None:
    _support_tables.cache_clear()


@dataclass(slots=True)
class AppError(Exception):
    """コード付きのアプリケーションエラー。"""

    code: str
    user_message: str | None = None
    detail: str | None = None
    subject: str | None = None
    payload: dict[str, Any] | None = None
    guidance: str | None = None
    support_url: str | None = None

    def __post_init__(self) -> None:
        meta = DEFAULT_ERROR_CATALOG.get(self.code, {})
        if not self.user_message:
            self.user_message = meta.get("message", "エラーが発生しました。")
        if self.guidance is None:
            self.guidance = meta.get("guidance")
        if self.support_url is None:
            self.support_url = _resolve_support_url(self.code, meta.get("support_url", _SUPPORT_DOC))

    def __str__(self) -> str:
        message = self.user_message or "エラーが発生しました。"
        base = f"[{self.code}] {message}"
        if self.subject:
            base = f"{self.subject}: {base}"
        if self.detail:
            return f"{base} ({self.detail})"
        return base

    @property
    def exit_code(self) -> int:
        meta = DEFAULT_ERROR_CATALOG.get(self.code, {})
        return int(meta.get("exit_code", EXIT_DATA))

    def for_log(self) -> str:
        base = str(self)
        if self.payload:
            return f"{base} | payload={self.payload}"
        return base

    def with_subject(self, subject: str) -> "AppError":
        return replace(self, subject=subject)

    def help_text(self) -> str:
        parts: list[str] = []
        if self.guidance:
            parts.append(self.guidance)
        if self.support_url:
            parts.append(f"サポート: {self.support_url}")
        return "\n".join(parts)


def app_error(code: str, **kwargs: Any) -> AppError:
    """カタログに基づき AppError を生成する。"""

    return AppError(code=code, **kwargs)


def ensure_app_error(
    exc: Exception,
    *,
    code: str = "E-UNEXPECTED",
    message: str | None = None,
    subject: str | None = None,
) -> AppError:
    """任意の例外を AppError へ正規化する。"""

    if isinstance(exc, AppError):
        return exc
    info = DEFAULT_ERROR_CATALOG.get(code, {})
    user_message = message or info.get("message", "予期しないエラーが発生しました。")
    return AppError(
        code=code,
        user_message=user_message,
        detail=str(exc) or None,
        subject=subject,
        guidance=info.get("guidance"),
        support_url=_resolve_support_url(code, info.get("support_url", _SUPPORT_DOC)),
    )


def _resolve_support_url(code: str, default_url: str | None) -> str | None:
    links, mapping = _support_tables()
    ref = mapping.get(code)
    if ref:
        return links.get(ref, default_url)
    return default_url
