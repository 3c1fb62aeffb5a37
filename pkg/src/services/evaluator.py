"""生成タイルと正解タイルを突き合わせて形態指標を集計するサービス。"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from analysis.metrics import BUILTIN_EXTRACTOR, pair_tiles, region_report, tile_metrics
from analysis.vectorize import binarize
from domain.errors import AppError, ensure_app_error
from domain.models import RegionReport, TileId, TilePairMetrics
from domain.settings import AppConfig
from export.exporter import export_table, write_json
from io_utils.features_file import read_features
from io_utils.tile_store import list_tiles, read_mask
from services.ingest import load_manifest

logger = logging.getLogger(__name__)

PER_TILE_TABLE = "per_tile.jsonl"
SUMMARY_NAME = "summary.json"


@dataclass(slots=True)
class EvaluationResult:
    report: RegionReport
    table_path: Path | None
    summary_path: Path | None
    errors: tuple[str, ...] = ()


def cities_from_manifest(manifest: Path) -> dict[TileId, str]:
    return {record.tile: record.caption.city_name for record in load_manifest(Path(manifest), check_rasters=False)}


@dataclass(slots=True)
class Evaluator:
    config: AppConfig
    jobs: int = 1
    _errors: list[AppError] = field(default_factory=list, init=False, repr=False)

    def _record_error(self, err: AppError) -> None:
        self._errors.append(err)
        logger.warning("Tile evaluation failed: %s", err.for_log())

    def _load(self, paths: dict[TileId, Path]) -> dict[TileId, np.ndarray]:
        threshold = self.config.vector.threshold
        with ThreadPoolExecutor(max_workers=max(self.jobs, 1)) as exe:
            masks = list(exe.map(lambda p: binarize(read_mask(p), threshold), paths.values()))
        return dict(zip(paths.keys(), masks))

    def evaluate(
        self,
        gen_dir: Path,
        gt_dir: Path,
        out_dir: Path | None = None,
        *,
        manifest: Path | None = None,
        features_in: tuple[Path, Path] | None = None,
        gn_count_mode: str | None = None,
        progress_callback: Callable[[int, int], None] | None = None,
    ) -> EvaluationResult:
        """gen_dir と gt_dir の ``{z}/{x}/{y}.png`` を対にして RegionReport を作る。"""

        gen_paths, gt_paths = list_tiles(gen_dir), list_tiles(gt_dir)
        order = pair_tiles(gen_paths, gt_paths)
        gn_tiles, gt_tiles = self._load(gen_paths), self._load(gt_paths)
        cities = cities_from_manifest(manifest) if manifest is not None else {}
        mode = gn_count_mode or self.config.metrics.gn_count_mode
        self._errors.clear()
        total = len(order)
        logger.info("Evaluating %d tile pairs (%s vs %s), gn_count_mode=%s", total, gen_dir, gt_dir, mode)

        rows: dict[TileId, TilePairMetrics] = {}
        with ThreadPoolExecutor(max_workers=max(self.jobs, 1)) as exe:
            future_map = {exe.submit(tile_metrics, t, gn_tiles[t], gt_tiles[t], city=cities.get(t)): t for t in order}
            completed = 0
            for future in as_completed(future_map):
                t = future_map[future]
                try:
                    rows[t] = future.result()
                except Exception as exc:
                    self._record_error(
                        ensure_app_error(exc, code="E-UNEXPECTED", message="タイル指標の計算に失敗しました").with_subject(str(t))
                    )
                completed += 1
                if progress_callback:
                    progress_callback(completed, total)
        evaluated = [t for t in order if t in rows]

        features = None
        extractor = BUILTIN_EXTRACTOR
        if features_in is not None:
            gen_feats, gt_feats = read_features(features_in[0]), read_features(features_in[1])
            features = (gen_feats, gt_feats)
            extractor = f"{Path(features_in[0]).name}|{Path(features_in[1]).name}"

        report = region_report(
            {t: gn_tiles[t] for t in evaluated},
            {t: gt_tiles[t] for t in evaluated},
            cities=cities,
            gn_count_mode=mode,
            rows=[rows[t] for t in evaluated],
            features=features,
            feature_extractor=extractor,
        )

        table_path = summary_path = None
        if out_dir is not None:
            table = pd.DataFrame([row.as_dict() for row in report.tiles])
            table_path = export_table(table, Path(out_dir) / PER_TILE_TABLE)
            summary = report.summary() | {"gn_count_mode": mode, "errors": [str(err) for err in self._errors]}
            summary_path = write_json(summary, Path(out_dir) / SUMMARY_NAME)
        return EvaluationResult(report, table_path, summary_path, tuple(str(err) for err in self._errors))
