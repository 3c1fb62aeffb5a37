"""完全性評価のサービス層: 正解タイルの劣化 (degrade) と分類・採点 (assess)。"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import pandas as pd

from analysis.completeness import assess, format_report, report_dict, synthetic_degradation_plan
from analysis.completeness import degrade as degrade_polygons
from analysis.vectorize import binarize, polygonize
from domain.errors import AppError, app_error, ensure_app_error
from domain.models import CompletenessReport, MappingClass, TileId
from domain.settings import AppConfig
from export.exporter import export_table, write_json
from geo.tilegrid import tile_seed
from io_utils.tile_store import list_tiles, read_mask, write_png

logger = logging.getLogger(__name__)

TRUTH_TABLE = "truth.csv"
REPORT_TEXT = "assessment.txt"
REPORT_JSON = "assessment.json"
PER_TILE_TABLE = "assessment_tiles.jsonl"
DEGRADED_DIR = "degraded"


@dataclass(slots=True)
class DegradeResult:
    truth: pd.DataFrame
    truth_path: Path
    errors: tuple[str, ...] = ()


@dataclass(slots=True)
class AssessResult:
    report: CompletenessReport
    text: str
    text_path: Path | None = None
    json_path: Path | None = None


def read_truth_table(path: Path) -> dict[TileId, MappingClass]:
    path = Path(path)
    if not path.is_file():
        raise app_error("E-PATH-NOTFOUND", subject=str(path))
    frame = pd.read_csv(path, dtype={"tile": str, "true_class": str})
    try:
        return {TileId.parse(row.tile): MappingClass(row.true_class) for row in frame.itertuples(index=False)}
    except (AttributeError, ValueError) as exc:
        raise app_error("E-MANIFEST-INVALID", detail=f"bad truth table: {exc}", subject=str(path)) from exc


def _load_masks(paths: Mapping[TileId, Path], threshold: int, jobs: int) -> dict[TileId, np.ndarray]:
    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as exe:
        masks = list(exe.map(lambda p: binarize(read_mask(p), threshold), paths.values()))
    return dict(zip(paths.keys(), masks))


@dataclass(slots=True)
class Assessor:
    config: AppConfig
    jobs: int = 1
    _errors: list[AppError] = field(default_factory=list, init=False, repr=False)

    def _record_error(self, err: AppError) -> None:
        self._errors.append(err)
        logger.warning("Degradation failed: %s", err.for_log())

    # -- 劣化 --------------------------------------------------------------------------
    def _degrade_tile(self, t: TileId, png: Path, fraction: float, seed: int, out_dir: Path, area_weighted: bool) -> dict:
        mask = binarize(read_mask(png), self.config.vector.threshold)
        polys = polygonize(mask, tile=t)
        tile = degrade_polygons(
            polys,
            fraction,
            tile_seed(seed, t),
            size=mask.shape[0],
            tile=t,
            area_weighted=area_weighted,
            settings=self.config.completeness,
        )
        write_png(Path(out_dir) / str(t.z) / str(t.x) / f"{t.y}.png", tile.mask)
        n = len(polys)
        return {
            "tile": str(t),
            "removed_fraction": tile.removed_fraction,
            "polygons": n,
            "removed_count": tile.removed_count,
            "mapped_fraction": 1.0 if n == 0 else (n - tile.removed_count) / n,
            "mapped_area_fraction": tile.mapped_area_fraction,
            "true_class": tile.true_class.value,
        }

    def degrade(
        self,
        gt_dir: Path,
        out_dir: Path,
        *,
        fraction: float | None = None,
        synthetic: bool = False,
        seed: int = 0,
        area_weighted: bool | None = None,
        progress_callback: Callable[[int, int], None] | None = None,
    ) -> DegradeResult:
        """gt_dir の各タイルから建物を間引いて out_dir に書き、真のクラス表を残す。"""

        tiles = list_tiles(gt_dir)
        if not tiles:
            raise app_error("E-ASSESS-EMPTY", subject=str(gt_dir))
        if synthetic:
            plan = dict(zip(tiles, synthetic_degradation_plan(len(tiles), seed)))
        elif fraction is not None:
            plan = {t: float(fraction) for t in tiles}
        else:
            raise app_error("E-USAGE", detail="either a removal fraction or the synthetic plan is required")
        weighted = self.config.completeness.area_weighted if area_weighted is None else area_weighted
        self._errors.clear()
        total = len(tiles)
        logger.info(
            "Degrading %d tiles from %s (synthetic=%s, fraction=%s, area_weighted=%s)", total, gt_dir, synthetic, fraction, weighted
        )

        rows: dict[TileId, dict] = {}
        with ThreadPoolExecutor(max_workers=max(self.jobs, 1)) as exe:
            future_map = {
                exe.submit(self._degrade_tile, t, png, plan[t], seed, out_dir, weighted): t for t, png in tiles.items()
            }
            completed = 0
            for future in as_completed(future_map):
                t = future_map[future]
                try:
                    rows[t] = future.result()
                except Exception as exc:
                    self._record_error(
                        ensure_app_error(exc, code="E-UNEXPECTED", message="タイルの劣化処理に失敗しました").with_subject(str(t))
                    )
                completed += 1
                if progress_callback:
                    progress_callback(completed, total)

        order = sorted(rows, key=lambda t: t.row_major_key())
        truth = pd.DataFrame([rows[t] for t in order])
        truth_path = export_table(truth, Path(out_dir) / TRUTH_TABLE)
        counts = truth["true_class"].value_counts().to_dict() if len(truth) else {}
        logger.info("Degraded %d tiles: %s", len(order), counts)
        return DegradeResult(truth, truth_path, tuple(str(err) for err in self._errors))

    # -- 採点 --------------------------------------------------------------------------
    def assess(
        self,
        gen_dir: Path,
        degraded_dir: Path,
        *,
        truth_path: Path | None = None,
        complete_dir: Path | None = None,
        out_dir: Path | None = None,
    ) -> AssessResult:
        truths = read_truth_table(truth_path or Path(degraded_dir) / TRUTH_TABLE)
        threshold = self.config.vector.threshold
        gen = _load_masks(list_tiles(gen_dir), threshold, self.jobs)
        degraded = _load_masks(list_tiles(degraded_dir), threshold, self.jobs)
        complete = _load_masks(list_tiles(complete_dir), threshold, self.jobs) if complete_dir is not None else None
        report = assess(gen, degraded, truths, settings=self.config.completeness, complete=complete)
        text = format_report(report)

        text_path = json_path = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            text_path = out_dir / REPORT_TEXT
            text_path.write_text(text + "\n", encoding="utf-8")
            payload = report_dict(report) | {
                "thresholds": {
                    "mapped_max_ratio": self.config.completeness.mapped_max_ratio,
                    "partial_max_ratio": self.config.completeness.partial_max_ratio,
                }
            }
            json_path = write_json(payload, out_dir / REPORT_JSON)
            table = pd.DataFrame([item.as_dict() for item in report.tiles])
            table["site_cover_ratio"] = table["site_cover_ratio"].map(lambda v: "inf" if np.isinf(v) else v)
            export_table(table, out_dir / PER_TILE_TABLE)
        return AssessResult(report, text, text_path, json_path)

    def run_synthetic(self, gt_dir: Path, out_dir: Path, *, seed: int = 0, area_weighted: bool | None = None) -> AssessResult:
        """生成結果を完全な正解タイルで代用し、合成劣化に対して分類器を検証する。"""

        degraded_dir = Path(out_dir) / DEGRADED_DIR
        self.degrade(gt_dir, degraded_dir, synthetic=True, seed=seed, area_weighted=area_weighted)
        return self.assess(gt_dir, degraded_dir, complete_dir=gt_dir, out_dir=out_dir)
