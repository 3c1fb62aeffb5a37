"""マニフェストのレコードを TileSample として読み込む。"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from domain.errors import app_error
from domain.models import RasterTile, TileId, TileRecord, TileSample
from io_utils.tile_store import read_mask, read_png
from render.raster import concat_condition
from services.ingest import load_manifest, records_for_split

logger = logging.getLogger(__name__)


def load_sample(record: TileRecord, *, with_target: bool = True) -> TileSample:
    roads = RasterTile(read_png(Path(record.roads_path)))
    landuse = RasterTile(read_png(Path(record.landuse_path)))
    target = None
    if with_target:
        target = read_mask(Path(record.target_path))
    return TileSample(
        tile=record.tile,
        center=record.center,
        caption=record.caption.final_caption,
        city=record.caption.city_name,
        condition=concat_condition(roads, landuse),
        target=target,
    )


def load_samples(records: Sequence[TileRecord], *, jobs: int = 1, with_target: bool = True) -> list[TileSample]:
    """レコード順を保ったまま並列に読み込む。"""

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as exe:
        return list(exe.map(lambda r: load_sample(r, with_target=with_target), records))


def load_split(
    manifest: Path,
    split: str | None,
    *,
    jobs: int = 1,
    with_target: bool = True,
    tiles: Sequence[TileId] | None = None,
) -> list[TileSample]:
    records = records_for_split(load_manifest(Path(manifest)), split)
    if tiles is not None:
        known = {r.tile for r in records}
        unknown = [str(t) for t in tiles if t not in known]
        if unknown:
            raise app_error("E-TILE-UNKNOWN", detail=", ".join(unknown[:10]), subject=str(manifest))
        selected = set(tiles)
        records = [r for r in records if r.tile in selected]
    if not records:
        raise app_error("E-MANIFEST-INVALID", detail=f"no records for split {split!r}", subject=str(manifest))
    logger.info("Loading %d tiles from %s (split=%s)", len(records), manifest, split or "all")
    return load_samples(records, jobs=jobs, with_target=with_target)
