"""ベクタ地物からタイルラスタ・キャプション・マニフェストを作るデータセット構築サービス。"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from domain.errors import AppError, app_error, ensure_app_error
from domain.models import BBox, CaptionBundle, FeatureSet, Split, TileId, TileRecord
from domain.settings import AppConfig
from geo.tilegrid import enumerate_region, tile_center
from io_utils.geodata import load_allowlist
from io_utils.tile_store import write_tile
from render.raster import render_layers
from services.captioner import Captioner
from services.ingest import (
    FeatureIndex,
    SplitPolicy,
    aggregate_tile_tags,
    build_manifest,
    city_token,
    filter_feature_set,
    records_for_split,
    write_manifest,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
CAPTIONS_NAME = "captions.jsonl"
SUMMARY_NAME = "dataset_summary.json"
# 道路の線幅ぶんタイル外の地物も描画対象に含める
_QUERY_MARGIN = 0.1


@dataclass(slots=True)
class DatasetResult:
    records: list[TileRecord]
    manifest_path: Path
    tiles: int
    skipped: int
    errors: tuple[str, ...] = ()


@dataclass(slots=True)
class DatasetBuilder:
    config: AppConfig
    captioner: Captioner
    jobs: int = 1
    _errors: list[AppError] = field(default_factory=list, init=False, repr=False)

    @property
    def errors(self) -> tuple[str, ...]:
        return tuple(str(err) for err in self._errors)

    def _record_error(self, err: AppError) -> None:
        self._errors.append(err)
        logger.warning("Tile failed: %s", err.for_log())

    # ------------------------------------------------------------------
    def build(
        self,
        features: FeatureSet,
        region: BBox,
        out_dir: Path,
        city_name: str,
        *,
        split_policy: SplitPolicy | None = None,
        force: bool = False,
        progress_callback: Callable[[int, int], None] | None = None,
    ) -> DatasetResult:
        out_dir = Path(out_dir)
        if out_dir.exists() and any(out_dir.iterdir()) and not force:
            raise app_error("E-OUTDIR-EXISTS", subject=str(out_dir))
        out_dir.mkdir(parents=True, exist_ok=True)
        self._errors.clear()

        z = self.config.tiles.zoom
        size = self.config.tiles.size
        city = city_token(city_name)
        split_policy = split_policy or SplitPolicy(self.config.ingest.eval_fraction, self.config.ingest.split_seed)
        allow = load_allowlist(Path(self.config.ingest.allowlist_path))
        filtered = filter_feature_set(features, allow)
        index = FeatureIndex(filtered)
        tiles = enumerate_region(region, z)
        total = len(tiles)
        logger.info("Building dataset for %s: %d tiles at z=%d, %dpx into %s", city, total, z, size, out_dir)

        captions: dict[TileId, CaptionBundle] = {}
        with ThreadPoolExecutor(max_workers=max(self.jobs, 1)) as exe:
            future_map = {exe.submit(self._build_tile, index, t, out_dir, city): t for t in tiles}
            completed = 0
            for future in as_completed(future_map):
                t = future_map[future]
                try:
                    captions[t] = future.result()
                except Exception as exc:
                    self._record_error(
                        ensure_app_error(exc, code="E-UNEXPECTED", message="タイルの処理に失敗しました").with_subject(str(t))
                    )
                completed += 1
                if progress_callback:
                    progress_callback(completed, total)

        records = build_manifest(tiles, out_dir, city, captions, split_policy)
        manifest_path = write_manifest(records, out_dir / MANIFEST_NAME)
        self._write_captions(captions, out_dir / CAPTIONS_NAME)
        summary = {
            "city": city,
            "zoom": z,
            "tile_size": size,
            "tiles": total,
            "records": len(records),
            "skipped": total - len(records),
            "eval_records": len(records_for_split(records, Split.EVAL.value)),
            "fallback_captions": sum(1 for r in records if r.caption.fallback),
            "wiki_failures": sum(1 for r in records if r.caption.wiki_failed),
            "cached_responses": self.captioner.cache_stats(),
            "errors": list(self.errors),
        }
        (out_dir / SUMMARY_NAME).write_text(json.dumps(summary, ensure_ascii=False, indent=2), encoding="utf-8")
        logger.info(
            "Dataset finished: %d records, %d skipped, %d errors", len(records), total - len(records), len(self._errors)
        )
        return DatasetResult(records, manifest_path, total, total - len(records), self.errors)

    # -- 内部処理 -----------------------------------------------------------------
    def _build_tile(self, index: FeatureIndex, t: TileId, out_dir: Path, city: str) -> CaptionBundle:
        size = self.config.tiles.size
        subset = index.split_layers(t, margin=_QUERY_MARGIN)
        target, roads, landuse = render_layers(subset.buildings, subset.roads, subset.landuse, t, size, self.config.raster)
        write_tile(out_dir, "target", t, target)
        write_tile(out_dir, "roads", t, roads)
        write_tile(out_dir, "landuse", t, landuse)
        counts = aggregate_tile_tags(index, t)
        return self.captioner.caption_tile(counts, tile_center(t), city)

    @staticmethod
    def _write_captions(captions: dict[TileId, CaptionBundle], path: Path) -> None:
        lines = []
        for t in sorted(captions, key=lambda item: item.row_major_key()):
            bundle = captions[t]
            lines.append(
                json.dumps(
                    {
                        "tile": str(t),
                        "osm_caption": bundle.osm_caption,
                        "wiki_caption": bundle.wiki_caption,
                        "final_caption": bundle.final_caption,
                        "fallback": bundle.fallback,
                        "wiki_failed": bundle.wiki_failed,
                    },
                    ensure_ascii=False,
                )
            )
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def eval_region_tiles(region: BBox, z: int) -> frozenset[TileId]:
    return frozenset(enumerate_region(region, z))
