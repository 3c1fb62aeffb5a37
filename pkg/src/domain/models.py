"""共通で利用するドメインモデル定義。"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Mapping, Optional, Sequence

import numpy as np


@dataclass(frozen=True, slots=True)
class TileId:
    """XYZ タイルアドレス (原点は左上)。"""

    z: int
    x: int
    y: int

    def __str__(self) -> str:
        return f"{self.z}/{self.x}/{self.y}"

    def row_major_key(self) -> tuple[int, int, int]:
        return (self.z, self.y, self.x)

    @classmethod
    def parse(cls, text: str) -> "TileId":
        z, x, y = (int(part) for part in text.strip().split("/"))
        return cls(z=z, x=x, y=y)


@dataclass(frozen=True, slots=True)
class LonLat:
    lon: float
    lat: float


@dataclass(frozen=True, slots=True)
class BBox:
    """WGS84 の矩形範囲 (度)。"""

    west: float
    south: float
    east: float
    north: float

    def is_empty(self) -> bool:
        return self.west > self.east or self.south > self.north


@dataclass(frozen=True, slots=True)
class TileBounds:
    west: float
    south: float
    east: float
    north: float
    meters_per_pixel: float

    def as_bbox(self) -> BBox:
        return BBox(self.west, self.south, self.east, self.north)


class Layer(str, Enum):
    BUILDINGS = "buildings"
    ROADS = "roads"
    LANDUSE = "landuse"


@dataclass(slots=True)
class GeoFeature:
    """タグ付きベクタ地物。geometry は shapely のジオメトリ (WGS84)。"""

    geometry: Any
    tags: dict[str, str]
    layer: Layer
    road_class: int | None = None
    category: str | None = None

    def tag_pairs(self) -> Iterator[str]:
        for key, value in self.tags.items():
            yield f"{key}={value}"


@dataclass(slots=True)
class FeatureSet:
    buildings: list[GeoFeature] = field(default_factory=list)
    roads: list[GeoFeature] = field(default_factory=list)
    landuse: list[GeoFeature] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.buildings) + len(self.roads) + len(self.landuse)

    def all(self) -> list[GeoFeature]:
        return [*self.buildings, *self.roads, *self.landuse]

    def add(self, feature: GeoFeature) -> None:
        if feature.layer is Layer.BUILDINGS:
            self.buildings.append(feature)
        elif feature.layer is Layer.ROADS:
            self.roads.append(feature)
        else:
            self.landuse.append(feature)


@dataclass(frozen=True, slots=True)
class TagAllowlist:
    """`key` もしくは `key=value` 形式のパターン集合。"""

    entries: frozenset[str]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("allowlist must not be empty")

    def allows(self, key: str, value: str) -> bool:
        return key in self.entries or f"{key}={value}" in self.entries


@dataclass(slots=True)
class CaptionBundle:
    osm_caption: str
    wiki_caption: str
    final_caption: str
    city_name: str
    fallback: bool = False
    wiki_failed: bool = False


class Split(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(slots=True)
class TileRecord:
    """「画像・テキスト・メタデータ・建物フットプリント」の 4 つ組 1 件。"""

    tile: TileId
    center: LonLat
    caption: CaptionBundle
    target_path: Path
    roads_path: Path
    landuse_path: Path
    split: Split = Split.TRAIN

    def as_dict(self) -> dict[str, Any]:
        """マニフェスト 1 行分の辞書へ変換する。"""
        return {
            "z": self.tile.z,
            "x": self.tile.x,
            "y": self.tile.y,
            "center_lon": self.center.lon,
            "center_lat": self.center.lat,
            "city": self.caption.city_name,
            "caption": self.caption.final_caption,
            "fallback": self.caption.fallback,
            "wiki_failed": self.caption.wiki_failed,
            "target_path": self.target_path.as_posix(),
            "roads_path": self.roads_path.as_posix(),
            "landuse_path": self.landuse_path.as_posix(),
            "split": self.split.value,
        }


@dataclass(slots=True)
class RasterTile:
    """(H, W, C) の uint8 画素配列。"""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.shape[0] != self.data.shape[1]:
            raise ValueError(f"tile must be square, got {self.data.shape[:2]}")

    @property
    def size(self) -> int:
        return int(self.data.shape[0])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    def mask(self) -> np.ndarray:
        """1 チャネル目を bool マスクとして返す。"""
        return self.data[:, :, 0] > 0


@dataclass(slots=True)
class ConditionImage:
    """道路チャネル → 土地利用チャネルの順に連結した (C, H, W) float32 条件画像。"""

    data: np.ndarray
    road_channels: int

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])


@dataclass(slots=True)
class TileSample:
    """学習・生成に使う 1 タイル分の四つ組 (画像・条件・キャプション・メタデータ)。"""

    tile: TileId
    center: LonLat
    caption: str
    city: str
    condition: ConditionImage
    target: np.ndarray | None = None


@dataclass(slots=True)
class BuildingPolygon:
    ring: tuple[tuple[int, int], ...]
    area_px: int
    tile: TileId | None = None
    meters_per_pixel: float | None = None
    holes: tuple[tuple[tuple[int, int], ...], ...] = ()

    @property
    def area_m2(self) -> float | None:
        if self.meters_per_pixel is None:
            return None
        return self.area_px * self.meters_per_pixel ** 2


@dataclass(slots=True)
class TilePairMetrics:
    tile: TileId
    iou: float | None
    delta_site_cover: float
    gn_count_pct: float | None
    gn_count: int = 0
    gt_count: int = 0
    city: str | None = None

    def as_dict(self) -> dict[str, Any]:
        return {
            "tile": str(self.tile),
            "city": self.city,
            "iou": self.iou,
            "delta_site_cover": self.delta_site_cover,
            "gn_count_pct": self.gn_count_pct,
            "gn_count": self.gn_count,
            "gt_count": self.gt_count,
        }


@dataclass(slots=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


@dataclass(slots=True)
class RegionReport:
    mean_iou: float | None
    mean_abs_delta_site_cover: float
    mean_gn_count_pct: float | None
    fid: float | None
    feature_extractor: str
    tiles: Sequence[TilePairMetrics] = field(default_factory=tuple)
    undefined_iou: int = 0
    undefined_gn_count: int = 0
    per_city: Mapping[str, dict[str, float | None]] = field(default_factory=dict)

    def summary(self) -> dict[str, Any]:
        return {
            "tiles": len(self.tiles),
            "mean_iou": self.mean_iou,
            "mean_abs_delta_site_cover": self.mean_abs_delta_site_cover,
            "mean_gn_count_pct": self.mean_gn_count_pct,
            "fid": self.fid,
            "feature_extractor": self.feature_extractor,
            "undefined_iou": self.undefined_iou,
            "undefined_gn_count": self.undefined_gn_count,
            "per_city": dict(self.per_city),
        }


class MappingClass(str, Enum):
    MAPPED = "Mapped"
    PARTIALLY_MAPPED = "Partially Mapped"
    UNMAPPED = "Unmapped"

    @classmethod
    def ordered(cls) -> tuple["MappingClass", ...]:
        return (cls.MAPPED, cls.PARTIALLY_MAPPED, cls.UNMAPPED)


@dataclass(slots=True)
class DegradedTile:
    tile: TileId
    removed_fraction: float
    mask: np.ndarray
    true_class: MappingClass
    kept_polygons: Sequence[BuildingPolygon] = field(default_factory=tuple)
    removed_count: int = 0
    mapped_area_fraction: float = 1.0


@dataclass(slots=True)
class ClassificationResult:
    predictions: Sequence[MappingClass]
    confusion: np.ndarray
    precision: dict[MappingClass, float]
    recall: dict[MappingClass, float]
    f1: dict[MappingClass, float]
    support: dict[MappingClass, int]
    weighted: dict[str, float]
    accuracy: float
    never_predicted: tuple[MappingClass, ...] = ()


@dataclass(slots=True)
class AssessedTile:
    tile: TileId
    ratio: float
    predicted: MappingClass
    true_class: MappingClass
    iou: float | None = None

    def as_dict(self) -> dict[str, Any]:
        return {
            "tile": str(self.tile),
            "site_cover_ratio": self.ratio,
            "predicted": self.predicted.value,
            "true_class": self.true_class.value,
            "iou": self.iou,
        }


@dataclass(slots=True)
class CompletenessReport:
    """分類スコアとクラス別の平均 Site Cover Ratio / MIoU。"""

    result: ClassificationResult
    tiles: Sequence[AssessedTile]
    mean_ratio: dict[MappingClass, float | None]
    mean_iou: dict[MappingClass, float | None]

    @property
    def flagged(self) -> list[TileId]:
        """Unmapped と予測されたタイル (要マッピング箇所)。"""
        return [item.tile for item in self.tiles if item.predicted is MappingClass.UNMAPPED]


class CityStyle(str, Enum):
    GRID = "grid"
    ORGANIC = "organic"
    MIXED = "mixed"


@dataclass(frozen=True, slots=True)
class CitySpec:
    seed: int = 0
    style: CityStyle = CityStyle.GRID
    block_min_m: float = 80.0
    block_max_m: float = 140.0
    densities: Mapping[str, float] = field(
        default_factory=lambda: {"residential": 0.55, "commercial": 0.45, "industrial": 0.35, "grass": 0.0}
    )
    city_name: Optional[str] = None

    def __post_init__(self) -> None:
        if self.block_min_m <= 0 or self.block_max_m < self.block_min_m:
            raise ValueError("block sizes must be positive and ordered")
        for zone, density in self.densities.items():
            if not 0.0 <= float(density) <= 1.0:
                raise ValueError(f"density for {zone} must be in [0, 1]")

    @property
    def resolved_city_name(self) -> str:
        if self.city_name:
            return self.city_name
        return "curville" if self.style is CityStyle.ORGANIC else "gridtown"
