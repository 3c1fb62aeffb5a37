"""評価表・サマリー・GeoJSON の書き出し。"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Mapping

import pandas as pd

from domain.errors import app_error


def export_table(df: pd.DataFrame, path: str | Path) -> Path:
    """拡張子で形式を切り替える (.csv / .json / .jsonl)。"""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    suffix = path.suffix.lower()
    if suffix == ".csv":
        df.to_csv(path, index=False, encoding="utf-8", float_format="%.10g")
    elif suffix == ".json":
        df.to_json(path, force_ascii=False, orient="records", indent=2)
    elif suffix == ".jsonl":
        df.to_json(path, force_ascii=False, orient="records", lines=True)
    else:
        raise app_error("E-USAGE", detail=f"unsupported table format {suffix or '(none)'}", subject=str(path))
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_json(payload: Mapping[str, Any], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return path


def write_geojson(collection: Mapping[str, Any], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(collection, ensure_ascii=False), encoding="utf-8")
    return path
