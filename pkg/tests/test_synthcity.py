from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from domain.errors import AppError
from domain.models import CitySpec, CityStyle, LonLat, TileId
from domain.settings import AppConfig
from geo.synthcity import generate_city
from geo.tilegrid import enumerate_region, region_around, tile_path
from io_utils.tile_store import read_mask, read_png
from render.raster import render_layers
from services.captioner import Captioner
from services.dataset_builder import DatasetBuilder, eval_region_tiles
from services.ingest import FeatureIndex, SplitPolicy, records_for_split
from services.tile_dataset import load_split

ROOT = Path(__file__).resolve().parents[1]
CENTER = LonLat(13.3777, 52.5163)
REGION = region_around(CENTER, 15, 3)


def _wkb(features) -> list[bytes]:
    return [f.geometry.wkb for f in features.all()]


def test_generate_city_is_deterministic_per_seed():
    a = generate_city(CitySpec(seed=4), REGION)
    b = generate_city(CitySpec(seed=4), REGION)
    c = generate_city(CitySpec(seed=5), REGION)
    assert _wkb(a) == _wkb(b)
    assert _wkb(a) != _wkb(c)
    assert a.buildings and a.roads and a.landuse


def test_styles_differ_in_road_shape():
    grid = generate_city(CitySpec(seed=1, style=CityStyle.GRID), REGION)
    organic = generate_city(CitySpec(seed=1, style=CityStyle.ORGANIC), REGION)
    assert all(len(f.geometry.coords) == 2 for f in grid.roads)
    assert any(len(f.geometry.coords) > 2 for f in organic.roads)
    assert CitySpec(style=CityStyle.ORGANIC).resolved_city_name == "curville"
    assert CitySpec().resolved_city_name == "gridtown"


def test_buildings_never_overlap_rendered_roads():
    features = generate_city(CitySpec(seed=2, style=CityStyle.MIXED), REGION)
    index = FeatureIndex(features)
    for t in enumerate_region(REGION, 15):
        subset = index.split_layers(t, margin=0.1)
        target, roads, _ = render_layers(subset.buildings, subset.roads, subset.landuse, t, 64)
        assert not (target.mask() & roads.data.any(axis=2)).any()


def test_zero_density_zone_has_no_buildings():
    spec = CitySpec(seed=0, densities={"residential": 0.0, "commercial": 0.0, "industrial": 0.0, "grass": 0.0})
    assert generate_city(spec, REGION).buildings == []
    with pytest.raises(ValueError):
        CitySpec(densities={"residential": 1.5})


# -- データセット構築 --------------------------------------------------------------
def _builder(jobs: int = 1) -> DatasetBuilder:
    config = AppConfig()
    config = replace(config, ingest=replace(config.ingest, allowlist_path=str(ROOT / "resources" / "tag_allowlist.txt")))
    return DatasetBuilder(config, Captioner(config.ingest, offline=True), jobs=jobs)


def test_build_dataset_writes_rasters_and_manifest(tmp_path):
    features = generate_city(CitySpec(seed=3), REGION)
    eval_tiles = eval_region_tiles(region_around(CENTER, 15, 1), 15)
    progress = []
    result = _builder(jobs=2).build(
        features,
        REGION,
        tmp_path / "ds",
        "Gridtown",
        split_policy=SplitPolicy(eval_tiles=eval_tiles),
        progress_callback=lambda done, total: progress.append((done, total)),
    )
    assert result.tiles == 9 and result.skipped == 0 and result.errors == ()
    assert progress[-1] == (9, 9)
    assert [r.split.value for r in result.records].count("eval") == 1
    assert len(records_for_split(result.records, "train")) == 8
    summary = json.loads((tmp_path / "ds" / "dataset_summary.json").read_text(encoding="utf-8"))
    assert (summary["eval_records"], summary["wiki_failures"], summary["cached_responses"]) == (1, 0, {})

    first = result.records[0]
    assert read_mask(tile_path(tmp_path / "ds", "target", first.tile)).shape == (64, 64)
    assert read_png(tile_path(tmp_path / "ds", "roads", first.tile)).shape == (64, 64, 3)
    assert all(r.caption.fallback for r in result.records)
    assert all(r.caption.final_caption.startswith(("gridtown", "city tile of gridtown")) for r in result.records)

    samples = load_split(result.manifest_path, "eval")
    assert len(samples) == 1
    assert samples[0].condition.data.shape == (6, 64, 64)
    assert set(np.unique(samples[0].target)) <= {0, 255}


def test_build_dataset_is_reproducible_and_guards_outdir(tmp_path):
    features = generate_city(CitySpec(seed=3), REGION)
    a = _builder(jobs=1).build(features, REGION, tmp_path / "a", "Gridtown")
    b = _builder(jobs=3).build(features, REGION, tmp_path / "b", "Gridtown")
    assert a.manifest_path.read_bytes() == b.manifest_path.read_bytes()
    for record in a.records:
        for kind in ("target", "roads", "landuse"):
            assert tile_path(tmp_path / "a", kind, record.tile).read_bytes() == tile_path(tmp_path / "b", kind, record.tile).read_bytes()

    with pytest.raises(AppError) as exc:
        _builder().build(features, REGION, tmp_path / "a", "Gridtown")
    assert exc.value.code == "E-OUTDIR-EXISTS"
    assert _builder().build(features, REGION, tmp_path / "a", "Gridtown", force=True).tiles == 9


def test_load_split_unknown_tile(tmp_path):
    features = generate_city(CitySpec(seed=3), REGION)
    result = _builder().build(features, REGION, tmp_path / "ds", "Gridtown")
    with pytest.raises(AppError) as exc:
        load_split(result.manifest_path, None, tiles=[TileId(15, 0, 0)])
    assert exc.value.code == "E-TILE-UNKNOWN"
