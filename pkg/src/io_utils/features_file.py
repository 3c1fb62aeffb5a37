"""外部で計算した特徴量行列 (FID 用) の読み書き。

形式: 1 行目に ASCII で ``n d``。続いて
  * テキスト: n 行 × d 列の数値 (空白またはカンマ区切り)
  * バイナリ (拡張子 ``.bin`` / ``.f64``): n*d 個のリトルエンディアン float64
"""
from __future__ import annotations

import io
import logging
from pathlib import Path

import numpy as np

from domain.errors import app_error

logger = logging.getLogger(__name__)

BINARY_SUFFIXES = (".bin", ".f64")


def _parse_header(line: bytes, path: Path) -> tuple[int, int]:
    try:
        n_text, d_text = line.decode("ascii").split()
        n, d = int(n_text), int(d_text)
    except (UnicodeDecodeError, ValueError) as exc:
        raise app_error("E-FEATURES-FORMAT", detail=f"bad header {line[:40]!r}", subject=str(path)) from exc
    if n < 0 or d <= 0:
        raise app_error("E-FEATURES-FORMAT", detail=f"invalid shape ({n}, {d})", subject=str(path))
    return n, d


def read_features(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise app_error("E-PATH-NOTFOUND", detail=str(exc), subject=str(path)) from exc
    header, sep, body = raw.partition(b"\n")
    if not sep:
        raise app_error("E-FEATURES-FORMAT", detail="missing header line", subject=str(path))
    n, d = _parse_header(header.strip(), path)

    if path.suffix.lower() in BINARY_SUFFIXES:
        if len(body) != n * d * 8:
            raise app_error(
                "E-FEATURES-FORMAT",
                detail=f"expected {n * d * 8} bytes of float64, got {len(body)}",
                subject=str(path),
            )
        matrix = np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)
    else:
        text = body.decode("utf-8", errors="strict").replace(",", " ")
        try:
            matrix = np.loadtxt(io.StringIO(text), dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise app_error("E-FEATURES-FORMAT", detail=str(exc), subject=str(path)) from exc
        if n == 0 and matrix.size == 0:
            matrix = np.zeros((0, d))
        if matrix.shape != (n, d):
            raise app_error(
                "E-FEATURES-FORMAT",
                detail=f"header says ({n}, {d}) but body is {matrix.shape}",
                subject=str(path),
            )
    if not np.all(np.isfinite(matrix)):
        raise app_error("E-FEATURES-FORMAT", detail="non-finite values", subject=str(path))
    logger.info("Loaded external features %s with shape %s", path, matrix.shape)
    return matrix


def write_features(path: Path, matrix: np.ndarray) -> Path:
    path = Path(path)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise app_error("E-FEATURES-FORMAT", detail="features must be a 2-D matrix", subject=str(path))
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"{matrix.shape[0]} {matrix.shape[1]}\n".encode("ascii")
    if path.suffix.lower() in BINARY_SUFFIXES:
        path.write_bytes(header + matrix.astype("<f8").tobytes())
    else:
        buffer = io.StringIO()
        np.savetxt(buffer, matrix, fmt="%.17g")
        path.write_bytes(header + buffer.getvalue().encode("utf-8"))
    return path
