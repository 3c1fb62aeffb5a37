"""config.yaml を読み込み AppConfig へ正規化する。"""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Callable, Mapping, TypeVar

import yaml

from domain.errors import app_error
from domain.settings import (
    AppConfig,
    CacheSettings,
    CompletenessSettings,
    ConditionSettings,
    IngestSettings,
    LoggingSettings,
    MetricsSettings,
    ModelSettings,
    RasterSettings,
    RetrySettings,
    SampleSettings,
    ScheduleSettings,
    SyntheticSettings,
    TileSettings,
    TrainSettings,
    VectorSettings,
    rgb,
)

logger = logging.getLogger(__name__)
_T = TypeVar("_T")

ENV_LLM_URL = "GEOFORGE_LLM_URL"
ENV_LLM_KEY = "GEOFORGE_LLM_KEY"
ENV_WIKI_URL = "GEOFORGE_WIKI_URL"


def _safe_int(value, fallback: int) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        return fallback


def _safe_float(value, fallback: float) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        return fallback


def _safe_bool(value, fallback: bool) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return fallback


def _section(raw: Mapping[str, Any], name: str) -> dict[str, Any]:
    value = raw.get(name)
    return value if isinstance(value, dict) else {}


def load_config(config_path: Path = Path("config.yaml"), *, validate: bool = True) -> AppConfig:
    """YAML を読み込み、欠損値はデフォルトで補完した AppConfig を返す。"""

    try:
        raw = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        logger.warning("Config file %s not found; using defaults", config_path)
        raw = {}
    except yaml.YAMLError as exc:
        raise app_error("E-CONFIG-INVALID", detail=str(exc), subject=str(config_path)) from exc
    if not isinstance(raw, dict):
        raise app_error("E-CONFIG-INVALID", detail="top level must be a mapping", subject=str(config_path))

    def section(name: str, convert: Callable[[Mapping[str, Any]], _T]) -> _T:
        try:
            return convert(_section(raw, name))
        except (TypeError, ValueError, IndexError, AttributeError) as exc:
            raise app_error("E-CONFIG-INVALID", detail=f"{name}: {exc}", subject=str(config_path)) from exc

    config = AppConfig(
        jobs=_safe_int(_section(raw, "app").get("jobs"), AppConfig().jobs),
        tiles=section("tiles", _tiles),
        raster=section("raster", _raster),
        ingest=section("ingest", _ingest),
        cache=CacheSettings(
            duckdb_path=str(_section(raw, "cache").get("duckdb_path", CacheSettings().duckdb_path))
        ),
        condition=section("condition", _condition),
        model=section("model", _model),
        schedule=section("schedule", _schedule),
        train=section("train", _train),
        sample=_sample(_section(raw, "sample")),
        vector=_vector(_section(raw, "vector")),
        metrics=MetricsSettings(
            gn_count_mode=str(_section(raw, "metrics").get("gn_count_mode", MetricsSettings().gn_count_mode))
        ),
        completeness=_completeness(_section(raw, "completeness")),
        synthetic=section("synthetic", _synthetic),
        logging=_logging(_section(raw, "logging")),
    )
    if validate:
        validate_config(config)
    return config


def validate_config(config: AppConfig) -> AppConfig:
    problems = config.validate()
    if problems:
        raise app_error("E-CONFIG-INVALID", detail="; ".join(problems))
    return config


# -- セクション別の変換 ------------------------------------------------------------
def _tiles(cfg: Mapping[str, Any]) -> TileSettings:
    defaults = TileSettings()
    return TileSettings(
        zoom=_safe_int(cfg.get("zoom"), defaults.zoom),
        size=_safe_int(cfg.get("size"), defaults.size),
    )


def _raster(cfg: Mapping[str, Any]) -> RasterSettings:
    defaults = RasterSettings()
    widths = cfg.get("road_widths_full")
    min_widths = cfg.get("road_min_widths_px")
    colors = cfg.get("road_colors")
    palette = cfg.get("landuse_palette")
    return RasterSettings(
        road_widths_full=tuple(int(w) for w in widths) if isinstance(widths, list) else defaults.road_widths_full,
        road_min_widths_px=tuple(float(w) for w in min_widths)
        if isinstance(min_widths, list)
        else defaults.road_min_widths_px,
        road_colors={int(k): rgb(v) for k, v in colors.items()} if isinstance(colors, dict) else defaults.road_colors,
        # YAML の辞書順 = 描画順
        landuse_palette={str(k): rgb(v) for k, v in palette.items()} if isinstance(palette, dict) else defaults.landuse_palette,
        landuse_fallback_color=rgb(cfg["landuse_fallback_color"])
        if isinstance(cfg.get("landuse_fallback_color"), list)
        else defaults.landuse_fallback_color,
    )


def _ingest(cfg: Mapping[str, Any]) -> IngestSettings:
    defaults = IngestSettings()
    retry_cfg = cfg.get("retry") if isinstance(cfg.get("retry"), dict) else {}
    classes = cfg.get("road_classes")
    return IngestSettings(
        allowlist_path=str(cfg.get("allowlist_path", defaults.allowlist_path)),
        road_classes={int(k): tuple(str(v) for v in values) for k, values in classes.items()}
        if isinstance(classes, dict)
        else defaults.road_classes,
        geosearch_radius_m=_safe_float(cfg.get("geosearch_radius_m"), defaults.geosearch_radius_m),
        geosearch_limit=_safe_int(cfg.get("geosearch_limit"), defaults.geosearch_limit),
        caption_token_budget=_safe_int(cfg.get("caption_token_budget"), defaults.caption_token_budget),
        raw_char_budget=_safe_int(cfg.get("raw_char_budget"), defaults.raw_char_budget),
        llm_model=str(cfg.get("llm_model", defaults.llm_model)),
        prompt_template=str(cfg.get("prompt_template", defaults.prompt_template)),
        eval_fraction=_safe_float(cfg.get("eval_fraction"), defaults.eval_fraction),
        split_seed=_safe_int(cfg.get("split_seed"), defaults.split_seed),
        max_in_flight=_safe_int(cfg.get("max_in_flight"), defaults.max_in_flight),
        retry=RetrySettings(
            max_attempts=_safe_int(retry_cfg.get("max_attempts"), defaults.retry.max_attempts),
            backoff=_safe_float(retry_cfg.get("backoff"), defaults.retry.backoff),
        ),
        timeout_s=_safe_float(cfg.get("timeout_s"), defaults.timeout_s),
        llm_url=os.environ.get(ENV_LLM_URL) or cfg.get("llm_url"),
        llm_key=os.environ.get(ENV_LLM_KEY) or None,
        wiki_url=os.environ.get(ENV_WIKI_URL) or cfg.get("wiki_url"),
    )


def _condition(cfg: Mapping[str, Any]) -> ConditionSettings:
    defaults = ConditionSettings()
    return ConditionSettings(
        meta_dim=_safe_int(cfg.get("meta_dim"), defaults.meta_dim),
        meta_base=_safe_float(cfg.get("meta_base"), defaults.meta_base),
        time_dim=_safe_int(cfg.get("time_dim"), defaults.time_dim),
        time_base=_safe_float(cfg.get("time_base"), defaults.time_base),
        text_dim=_safe_int(cfg.get("text_dim"), defaults.text_dim),
        cond_width=_safe_int(cfg.get("cond_width"), defaults.cond_width),
    )


def _model(cfg: Mapping[str, Any]) -> ModelSettings:
    defaults = ModelSettings()
    channels = cfg.get("channels")
    return ModelSettings(
        channels=tuple(int(c) for c in channels) if isinstance(channels, list) else defaults.channels,
        zero_init_output=_safe_bool(cfg.get("zero_init_output"), defaults.zero_init_output),
    )


def _schedule(cfg: Mapping[str, Any]) -> ScheduleSettings:
    defaults = ScheduleSettings()
    return ScheduleSettings(
        kind=str(cfg.get("kind", defaults.kind)),
        T=_safe_int(cfg.get("T"), defaults.T),
        beta_start=_safe_float(cfg.get("beta_start"), defaults.beta_start),
        beta_end=_safe_float(cfg.get("beta_end"), defaults.beta_end),
    )


def _train(cfg: Mapping[str, Any]) -> TrainSettings:
    defaults = TrainSettings()
    betas = cfg.get("betas")
    return TrainSettings(
        lr=_safe_float(cfg.get("lr"), defaults.lr),
        betas=_betas(betas) if isinstance(betas, list) else defaults.betas,
        batch_size=_safe_int(cfg.get("batch_size"), defaults.batch_size),
        steps=_safe_int(cfg.get("steps"), defaults.steps),
        seed=_safe_int(cfg.get("seed"), defaults.seed),
        phases=str(cfg.get("phases", defaults.phases)),
        align_steps=_safe_int(cfg.get("align_steps"), defaults.align_steps),
        num_threads=_safe_int(cfg.get("num_threads"), defaults.num_threads),
        log_every=_safe_int(cfg.get("log_every"), defaults.log_every),
    )


def _betas(values: list[Any]) -> tuple[float, float]:
    if len(values) != 2:
        raise ValueError(f"betas needs two values, got {values}")
    return (float(values[0]), float(values[1]))


def _sample(cfg: Mapping[str, Any]) -> SampleSettings:
    defaults = SampleSettings()
    return SampleSettings(
        ddim_steps=_safe_int(cfg.get("ddim_steps"), defaults.ddim_steps),
        seed=_safe_int(cfg.get("seed"), defaults.seed),
    )


def _vector(cfg: Mapping[str, Any]) -> VectorSettings:
    defaults = VectorSettings()
    return VectorSettings(
        threshold=_safe_int(cfg.get("threshold"), defaults.threshold),
        simplify_tolerance=_safe_float(cfg.get("simplify_tolerance"), defaults.simplify_tolerance),
    )


def _completeness(cfg: Mapping[str, Any]) -> CompletenessSettings:
    defaults = CompletenessSettings()
    return CompletenessSettings(
        mapped_max_ratio=_safe_float(cfg.get("mapped_max_ratio"), defaults.mapped_max_ratio),
        partial_max_ratio=_safe_float(cfg.get("partial_max_ratio"), defaults.partial_max_ratio),
        mapped_fraction=_safe_float(cfg.get("mapped_fraction"), defaults.mapped_fraction),
        partial_fraction=_safe_float(cfg.get("partial_fraction"), defaults.partial_fraction),
        area_weighted=_safe_bool(cfg.get("area_weighted"), defaults.area_weighted),
    )


def _synthetic(cfg: Mapping[str, Any]) -> SyntheticSettings:
    defaults = SyntheticSettings()
    densities = cfg.get("densities")
    return SyntheticSettings(
        style=str(cfg.get("style", defaults.style)),
        seed=_safe_int(cfg.get("seed"), defaults.seed),
        block_min_m=_safe_float(cfg.get("block_min_m"), defaults.block_min_m),
        block_max_m=_safe_float(cfg.get("block_max_m"), defaults.block_max_m),
        densities={str(k): float(v) for k, v in densities.items()} if isinstance(densities, dict) else defaults.densities,
    )


def _logging(cfg: Mapping[str, Any]) -> LoggingSettings:
    defaults = LoggingSettings()
    return LoggingSettings(
        level=str(cfg.get("level", defaults.level)),
        path=str(cfg.get("path", defaults.path)),
        rotate_keep=_safe_int(cfg.get("rotate_keep"), defaults.rotate_keep),
    )
