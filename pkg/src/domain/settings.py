from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any


@dataclass(slots=True)
class TileSettings:
    zoom: int = 15
    size: int = 64


@dataclass(slots=True)
class RasterSettings:
    road_widths_full: tuple[int, int, int] = (5, 3, 1)
    road_min_widths_px: tuple[float, float, float] = (2.0, 1.5, 1.0)
    road_colors: dict[int, tuple[int, int, int]] = field(
        default_factory=lambda: {1: (255, 64, 64), 2: (255, 200, 40), 3: (200, 200, 200)}
    )
    landuse_palette: dict[str, tuple[int, int, int]] = field(
        default_factory=lambda: {
            "residential": (90, 140, 60),
            "commercial": (60, 90, 200),
            "retail": (200, 90, 200),
            "industrial": (150, 110, 70),
            "grass": (40, 200, 40),
            "park": (20, 160, 90),
            "water": (30, 60, 240),
        }
    )
    landuse_fallback_color: tuple[int, int, int] = (128, 128, 128)

    def road_width(self, road_class: int, size: int) -> float:
        """1024px 基準の線幅をタイルサイズに比例させる。小タイルではクラス別の最小幅で下支えする。"""
        full = self.road_widths_full[road_class - 1] * size / 1024.0
        return max(float(full), float(self.road_min_widths_px[road_class - 1]))


@dataclass(slots=True)
class RetrySettings:
    max_attempts: int = 2
    backoff: float = 1.6


@dataclass(slots=True)
class IngestSettings:
    allowlist_path: str = "resources/tag_allowlist.txt"
    road_classes: dict[int, tuple[str, ...]] = field(
        default_factory=lambda: {
            1: ("motorway", "motorway_link", "trunk", "trunk_link", "primary", "primary_link"),
            2: ("secondary", "secondary_link", "tertiary", "tertiary_link"),
            3: ("residential", "service", "unclassified", "living_street", "pedestrian", "track", "road"),
        }
    )
    geosearch_radius_m: float = 500.0
    geosearch_limit: int = 10
    caption_token_budget: int = 77
    raw_char_budget: int = 4000
    llm_model: str = "gpt-4o-mini"
    prompt_template: str = (
        "Rewrite the following map-tile description of {city} into one short caption about "
        "the buildings, their density, shape and layout. Keep the city name.\n"
        "OSM attributes: {osm_caption}\nNearby places: {wiki_caption}\n"
    )
    eval_fraction: float = 0.1
    split_seed: int = 0
    max_in_flight: int = 4
    retry: RetrySettings = field(default_factory=RetrySettings)
    timeout_s: float = 20.0
    llm_url: str | None = None
    llm_key: str | None = None
    wiki_url: str | None = None

    def road_class_for(self, highway: str) -> int | None:
        for road_class, values in self.road_classes.items():
            if highway in values:
                return road_class
        return None


@dataclass(slots=True)
class CacheSettings:
    duckdb_path: str = "data/responses.duckdb"


@dataclass(slots=True)
class ConditionSettings:
    meta_dim: int = 64
    meta_base: float = 1000.0
    time_dim: int = 64
    time_base: float = 10000.0
    text_dim: int = 256
    cond_width: int = 128


@dataclass(slots=True)
class ModelSettings:
    channels: tuple[int, int, int] = (32, 64, 128)
    zero_init_output: bool = True
    image_channels: int = 1
    condition_channels: int = 6


@dataclass(slots=True)
class ScheduleSettings:
    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass(slots=True)
class TrainSettings:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    phases: str = "joint"
    align_steps: int = 0
    num_threads: int = 1
    log_every: int = 50


@dataclass(slots=True)
class SampleSettings:
    ddim_steps: int = 50
    seed: int = 0


@dataclass(slots=True)
class VectorSettings:
    threshold: int = 128
    simplify_tolerance: float = 0.0


@dataclass(slots=True)
class MetricsSettings:
    gn_count_mode: str = "per_tile"


@dataclass(slots=True)
class CompletenessSettings:
    mapped_max_ratio: float = 1.6
    partial_max_ratio: float = 5.0
    mapped_fraction: float = 0.80
    partial_fraction: float = 0.25
    area_weighted: bool = False


@dataclass(slots=True)
class SyntheticSettings:
    style: str = "grid"
    seed: int = 0
    block_min_m: float = 80.0
    block_max_m: float = 140.0
    densities: dict[str, float] = field(
        default_factory=lambda: {"residential": 0.55, "commercial": 0.45, "industrial": 0.35, "grass": 0.0}
    )


@dataclass(slots=True)
class LoggingSettings:
    level: str = "INFO"
    path: str = "logs/geoforge.log"
    rotate_keep: int = 7


@dataclass(slots=True)
class AppConfig:
    """config.yaml 全体を表す設定ツリー。"""

    jobs: int = 4
    tiles: TileSettings = field(default_factory=TileSettings)
    raster: RasterSettings = field(default_factory=RasterSettings)
    ingest: IngestSettings = field(default_factory=IngestSettings)
    cache: CacheSettings = field(default_factory=CacheSettings)
    condition: ConditionSettings = field(default_factory=ConditionSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    sample: SampleSettings = field(default_factory=SampleSettings)
    vector: VectorSettings = field(default_factory=VectorSettings)
    metrics: MetricsSettings = field(default_factory=MetricsSettings)
    completeness: CompletenessSettings = field(default_factory=CompletenessSettings)
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)
    logging: LoggingSettings = field(default_factory=LoggingSettings)

    def validate(self) -> list[str]:
        """不正な設定項目をメッセージのリストで返す (空なら妥当)。"""

        problems: list[str] = []
        if not 0 <= self.tiles.zoom <= 22:
            problems.append("tiles.zoom must be in [0, 22]")
        if self.tiles.size < 8 or self.tiles.size % 8 != 0:
            problems.append("tiles.size must be a positive multiple of 8")
        for name in ("meta_dim", "time_dim", "text_dim"):
            dim = getattr(self.condition, name)
            if dim <= 0 or dim % 2 != 0:
                problems.append(f"condition.{name} must be a positive even integer")
        if self.condition.meta_base <= 1 or self.condition.time_base <= 1:
            problems.append("condition bases must be > 1")
        if self.condition.cond_width <= 0:
            problems.append("condition.cond_width must be positive")
        raster = self.raster
        if len(raster.road_widths_full) != 3 or any(w <= 0 for w in raster.road_widths_full):
            problems.append("raster.road_widths_full must list three positive widths")
        if len(raster.road_min_widths_px) != 3 or any(w < 0 for w in raster.road_min_widths_px):
            problems.append("raster.road_min_widths_px must list three non-negative widths")
        if len(self.model.channels) != 3 or any(c <= 0 for c in self.model.channels):
            problems.append("model.channels must list three positive widths")
        sched = self.schedule
        if sched.kind != "linear":
            problems.append("schedule.kind supports only 'linear'")
        if sched.T < 1 or not (0 < sched.beta_start <= sched.beta_end < 1):
            problems.append("schedule requires T >= 1 and 0 < beta_start <= beta_end < 1")
        if self.train.lr <= 0 or self.train.batch_size <= 0 or self.train.steps < 0:
            problems.append("train.lr / batch_size must be positive and steps non-negative")
        if self.train.phases not in ("joint", "two_phase"):
            problems.append("train.phases must be 'joint' or 'two_phase'")
        if not 1 <= self.sample.ddim_steps <= sched.T:
            problems.append("sample.ddim_steps must be in [1, T]")
        if not 0 <= self.vector.threshold <= 255:
            problems.append("vector.threshold must be in [0, 255]")
        if self.metrics.gn_count_mode not in ("per_tile", "ratio_of_totals"):
            problems.append("metrics.gn_count_mode must be 'per_tile' or 'ratio_of_totals'")
        comp = self.completeness
        if not 0 < comp.mapped_max_ratio <= comp.partial_max_ratio:
            problems.append("completeness ratios must satisfy 0 < mapped_max_ratio <= partial_max_ratio")
        if not 0 <= comp.partial_fraction <= comp.mapped_fraction <= 1:
            problems.append("completeness fractions must satisfy 0 <= partial <= mapped <= 1")
        if not 0 <= self.ingest.eval_fraction <= 1:
            problems.append("ingest.eval_fraction must be in [0, 1]")
        if self.synthetic.style not in ("grid", "organic", "mixed"):
            problems.append("synthetic.style must be grid, organic or mixed")
        if any(not 0 <= float(v) <= 1 for v in self.synthetic.densities.values()):
            problems.append("synthetic.densities must be in [0, 1]")
        if self.jobs < 1:
            problems.append("app.jobs must be >= 1")
        return problems

    def as_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["ingest"]["llm_key"] = "***" if self.ingest.llm_key else None
        return payload


def rgb(values: Any) -> tuple[int, int, int]:
    items = tuple(values)
    if len(items) != 3:
        raise ValueError(f"RGB needs three components, got {list(items)}")
    return (int(items[0]), int(items[1]), int(items[2]))
