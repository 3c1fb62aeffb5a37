"""生成タイルディレクトリを建物ポリゴン (GeoJSON) へ変換するサービス。"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import pandas as pd

from analysis.vectorize import binarize, count_and_area, polygonize, to_geojson
from domain.errors import AppError, app_error, ensure_app_error
from domain.models import TileId
from domain.settings import VectorSettings
from export.exporter import export_table, write_geojson
from io_utils.tile_store import list_tiles, read_mask

logger = logging.getLogger(__name__)

SUMMARY_TABLE = "polygons.csv"


@dataclass(slots=True)
class VectorizeResult:
    table: pd.DataFrame
    written: dict[TileId, Path]
    errors: tuple[str, ...] = ()


@dataclass(slots=True)
class Vectorizer:
    settings: VectorSettings = field(default_factory=VectorSettings)
    jobs: int = 1
    _errors: list[AppError] = field(default_factory=list, init=False, repr=False)

    def _record_error(self, err: AppError) -> None:
        self._errors.append(err)
        logger.warning("Vectorization failed: %s", err.for_log())

    def vectorize_tile(
        self, t: TileId, png: Path, out_dir: Path, coords: Literal["tile", "wgs84"]
    ) -> tuple[dict[str, object], Path]:
        mask = binarize(read_mask(png), self.settings.threshold)
        size = mask.shape[0]
        polys = polygonize(mask, tile=t)
        count, area, cover = count_and_area(polys, size)
        collection = to_geojson(polys, t, size, coords=coords, tolerance=self.settings.simplify_tolerance)
        path = write_geojson(collection, Path(out_dir) / str(t.z) / str(t.x) / f"{t.y}.geojson")
        row = {"tile": str(t), "polygons": count, "area_px": area, "site_cover": cover}
        return row, path

    def run(
        self,
        gen_dir: Path,
        out_dir: Path,
        *,
        coords: Literal["tile", "wgs84"] = "tile",
        progress_callback: Callable[[int, int], None] | None = None,
    ) -> VectorizeResult:
        tiles = list_tiles(gen_dir)
        if not tiles:
            raise app_error("E-EVAL-EMPTY", subject=str(gen_dir))
        self._errors.clear()
        total = len(tiles)
        logger.info("Vectorizing %d tiles from %s (threshold %d, coords=%s)", total, gen_dir, self.settings.threshold, coords)

        rows: dict[TileId, dict[str, object]] = {}
        written: dict[TileId, Path] = {}
        with ThreadPoolExecutor(max_workers=max(self.jobs, 1)) as exe:
            future_map = {exe.submit(self.vectorize_tile, t, png, out_dir, coords): t for t, png in tiles.items()}
            completed = 0
            for future in as_completed(future_map):
                t = future_map[future]
                try:
                    rows[t], written[t] = future.result()
                except Exception as exc:
                    self._record_error(
                        ensure_app_error(exc, code="E-UNEXPECTED", message="ポリゴン化に失敗しました").with_subject(str(t))
                    )
                completed += 1
                if progress_callback:
                    progress_callback(completed, total)

        order = sorted(rows, key=lambda t: t.row_major_key())
        table = pd.DataFrame([rows[t] for t in order], columns=["tile", "polygons", "area_px", "site_cover"])
        export_table(table, Path(out_dir) / SUMMARY_TABLE)
        logger.info("Vectorized %d tiles, %d polygons in total", len(order), int(table["polygons"].sum()) if len(table) else 0)
        return VectorizeResult(table, {t: written[t] for t in order}, tuple(str(err) for err in self._errors))
