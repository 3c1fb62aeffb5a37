"""logging 設定と実行ログバッファを初期化するヘルパー。"""
from __future__ import annotations

import logging
import sys
from collections import deque
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path

from domain.settings import LoggingSettings


_CONFIGURED = False
_RUN_HANDLER: "RunLogHandler" | None = None
# DEBUG 指定時も WARNING 未満を抑えるサードパーティのロガー
_QUIET_LOGGERS = ("matplotlib", "PIL", "urllib3")
_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


class RunLogHandler(logging.Handler):
    """直近の実行ログを保持するリングバッファ。失敗レポートに添付する。"""

    def __init__(self, capacity: int = 200) -> None:
        super().__init__()
        self._buffer: deque[str] = deque(maxlen=capacity)

    def emit(self, record: logging.LogRecord) -> None:
        # handle() が self.lock を保持した状態で呼ぶ
        self._buffer.append(self.format(record))

    def lines(self) -> tuple[str, ...]:
        self.acquire()
        try:
            return tuple(self._buffer)
        finally:
            self.release()


def configure_logging(settings: LoggingSettings | None = None, *, level_override: str | None = None) -> RunLogHandler:
    """設定に基づき logging を初期化し、実行ログ用ハンドラを返す。"""

    global _CONFIGURED, _RUN_HANDLER
    if _CONFIGURED and _RUN_HANDLER is not None:
        return _RUN_HANDLER

    settings = settings or LoggingSettings()

    # サポートリンクのキャッシュは設定変更に追随できるようクリア
    from domain.errors import clear_support_cache

    clear_support_cache()

    level_name = level_override or settings.level
    level = getattr(logging, str(level_name).upper(), logging.INFO)
    log_path = Path(settings.path)
    rotate_keep = max(int(settings.rotate_keep), 0)
    try:
        log_path.parent.mkdir(parents=True, exist_ok=True)
    except Exception:
        fallback = Path.cwd() / log_path.name
        fallback.parent.mkdir(parents=True, exist_ok=True)
        log_path = fallback

    logger = logging.getLogger()
    logger.setLevel(level)

    formatter = logging.Formatter(_FORMAT)

    file_handler = TimedRotatingFileHandler(
        filename=str(log_path),
        when="midnight",
        backupCount=rotate_keep,
        encoding="utf-8",
        utc=False,
    )
    file_handler.setLevel(level)
    file_handler.setFormatter(formatter)

    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(formatter)

    run_handler = RunLogHandler()
    run_handler.setLevel(level)
    run_handler.setFormatter(formatter)

    # 既存ハンドラを削除して二重登録を防ぐ
    for handler in list(logger.handlers):  # pragma: no cover - 初期化時のみ
        logger.removeHandler(handler)
        handler.close()

    logger.addHandler(file_handler)
    logger.addHandler(console)
    logger.addHandler(run_handler)

    for name in _QUIET_LOGGERS:
        logging.getLogger(name).setLevel(max(level, logging.WARNING))

    _CONFIGURED = True
    _RUN_HANDLER = run_handler
    return run_handler


def reset_logging() -> None:
    """テスト用: 初期化状態を解除しハンドラを閉じる。"""

    global _CONFIGURED, _RUN_HANDLER
    logger = logging.getLogger()
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    _CONFIGURED = False
    _RUN_HANDLER = None


def get_run_log_lines() -> tuple[str, ...]:
    """失敗レポート向けに直近のログラインを取得する。"""

    if _RUN_HANDLER is None:
        return ()
    return _RUN_HANDLER.lines()

