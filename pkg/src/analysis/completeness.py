"""OSM 建物データの完全性評価。

完全なタイルから建物を間引いて欠損データを作り、生成タイルとの Site Cover 比で
Mapped / Partially Mapped / Unmapped の 3 クラスに分類する。
"""
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from analysis.metrics import site_cover, tile_iou
from domain.errors import app_error
from domain.models import (
    AssessedTile,
    BuildingPolygon,
    ClassificationResult,
    CompletenessReport,
    DegradedTile,
    MappingClass,
    TileId,
)
from domain.settings import CompletenessSettings
from render.raster import rasterize_rings

logger = logging.getLogger(__name__)

_DEFAULTS = CompletenessSettings()
_LABELS = [cls.value for cls in MappingClass.ordered()]

# 合成劣化の除去率の帯 (クラスごと)
_PLAN_BANDS = ((0.0, 0.1), (0.45, 0.6), (0.9, 1.0))


def removal_count(fraction: float, n: int) -> int:
    """⌈f·n⌉。0.3 * 10 のような丸め誤差で 1 件多くならないよう 9 桁で丸める。"""

    if not 0.0 <= fraction <= 1.0:
        raise app_error("E-USAGE", detail=f"removal fraction must be in [0, 1], got {fraction}")
    return min(int(math.ceil(round(fraction * n, 9))), n)


def true_label(mapped_fraction: float, settings: CompletenessSettings = _DEFAULTS) -> MappingClass:
    if mapped_fraction >= settings.mapped_fraction:
        return MappingClass.MAPPED
    if mapped_fraction >= settings.partial_fraction:
        return MappingClass.PARTIALLY_MAPPED
    return MappingClass.UNMAPPED


def degrade(
    gt_polys: Sequence[BuildingPolygon],
    fraction: float,
    seed: int,
    *,
    size: int,
    tile: TileId,
    area_weighted: bool = False,
    settings: CompletenessSettings = _DEFAULTS,
) -> DegradedTile:
    """⌈f·n⌉ 個のポリゴンを非復元抽出で除き、残りを再ラスタライズする。"""

    n = len(gt_polys)
    k = removal_count(fraction, n)
    rng = np.random.default_rng(seed)
    removed: set[int] = set()
    if k:
        p = None
        if area_weighted:
            areas = np.array([poly.area_px for poly in gt_polys], dtype=np.float64)
            p = areas / areas.sum()
        removed = {int(i) for i in rng.choice(n, size=k, replace=False, p=p)}
    kept = [poly for i, poly in enumerate(gt_polys) if i not in removed]

    total_area = sum(poly.area_px for poly in gt_polys)
    kept_area = sum(poly.area_px for poly in kept)
    mapped_fraction = 1.0 if n == 0 else (n - k) / n
    return DegradedTile(
        tile=tile,
        removed_fraction=float(fraction),
        mask=rasterize_rings(kept, size),
        true_class=true_label(mapped_fraction, settings),
        kept_polygons=tuple(kept),
        removed_count=k,
        mapped_area_fraction=1.0 if total_area == 0 else kept_area / total_area,
    )


def site_cover_ratio(gen_tile: np.ndarray, degraded_tile: np.ndarray) -> float:
    """cover(生成) / cover(欠損)。欠損側が空なら +∞、両方空なら 1.0。"""

    gen, degraded = np.asarray(gen_tile), np.asarray(degraded_tile)
    if gen.shape[:2] != degraded.shape[:2]:
        raise app_error("E-RASTER-SHAPE", detail=f"generated {gen.shape[:2]} vs degraded {degraded.shape[:2]}")
    cover_gen, cover_degraded = site_cover(gen), site_cover(degraded)
    if cover_degraded == 0.0:
        return 1.0 if cover_gen == 0.0 else math.inf
    return cover_gen / cover_degraded


def classify(ratio: float, settings: CompletenessSettings = _DEFAULTS) -> MappingClass:
    if ratio <= settings.mapped_max_ratio:
        return MappingClass.MAPPED
    if ratio <= settings.partial_max_ratio:
        return MappingClass.PARTIALLY_MAPPED
    return MappingClass.UNMAPPED


def score(predictions: Sequence[MappingClass], truths: Sequence[MappingClass]) -> ClassificationResult:
    """行 = 真のクラス、列 = 予測クラスの混同行列と P/R/F1。"""

    if len(predictions) != len(truths):
        raise app_error("E-USAGE", detail=f"{len(predictions)} predictions vs {len(truths)} truths")
    if not predictions:
        raise app_error("E-ASSESS-EMPTY")
    y_pred = [MappingClass(p).value for p in predictions]
    y_true = [MappingClass(t).value for t in truths]
    matrix = confusion_matrix(y_true, y_pred, labels=_LABELS)
    precision, recall, f1, support = precision_recall_fscore_support(
        y_true, y_pred, labels=_LABELS, zero_division=0
    )
    w_precision, w_recall, w_f1, _ = precision_recall_fscore_support(
        y_true, y_pred, labels=_LABELS, average="weighted", zero_division=0
    )
    classes = MappingClass.ordered()
    never = tuple(cls for cls, column in zip(classes, matrix.sum(axis=0)) if column == 0)
    if never:
        logger.warning("Classes never predicted (precision reported as 0): %s", ", ".join(c.value for c in never))
    return ClassificationResult(
        predictions=tuple(MappingClass(p) for p in predictions),
        confusion=matrix,
        precision={cls: float(v) for cls, v in zip(classes, precision)},
        recall={cls: float(v) for cls, v in zip(classes, recall)},
        f1={cls: float(v) for cls, v in zip(classes, f1)},
        support={cls: int(v) for cls, v in zip(classes, support)},
        weighted={"precision": float(w_precision), "recall": float(w_recall), "f1": float(w_f1)},
        accuracy=float(np.trace(matrix)) / float(matrix.sum()),
        never_predicted=never,
    )


def synthetic_degradation_plan(n_tiles: int, seed: int) -> list[float]:
    """3 クラスすべてが現れるように除去率を割り当てる (タイル順に巡回)。"""

    rng = np.random.default_rng(seed)
    plan = []
    for i in range(n_tiles):
        low, high = _PLAN_BANDS[i % len(_PLAN_BANDS)]
        plan.append(float(rng.uniform(low, high)))
    return plan


def _class_mean(values: Sequence[tuple[MappingClass, float | None]], cls: MappingClass) -> float | None:
    picked = [v for c, v in values if c is cls and v is not None]
    if not picked:
        return None
    # ∞ を含むクラスの平均は ∞ のまま報告する
    return float(np.mean(picked))


def assess(
    gen_tiles: dict[TileId, np.ndarray],
    degraded: dict[TileId, np.ndarray],
    truths: dict[TileId, MappingClass],
    *,
    settings: CompletenessSettings = _DEFAULTS,
    complete: dict[TileId, np.ndarray] | None = None,
) -> CompletenessReport:
    """タイルごとに比を計算して分類し、真のクラスに対して採点する。"""

    tiles = sorted(set(gen_tiles) & set(degraded) & set(truths), key=lambda t: t.row_major_key())
    missing = sorted((set(degraded) | set(truths)) - set(tiles), key=lambda t: t.row_major_key())
    if missing:
        logger.warning("Skipping %d tiles without generated/degraded/truth triple: %s", len(missing), ", ".join(map(str, missing[:5])))
    if not tiles:
        raise app_error("E-ASSESS-EMPTY")

    assessed = []
    for t in tiles:
        ratio = site_cover_ratio(gen_tiles[t], degraded[t])
        iou = tile_iou(degraded[t], complete[t]) if complete is not None and t in complete else None
        assessed.append(AssessedTile(tile=t, ratio=ratio, predicted=classify(ratio, settings), true_class=truths[t], iou=iou))

    result = score([a.predicted for a in assessed], [a.true_class for a in assessed])
    pairs_ratio = [(a.true_class, a.ratio) for a in assessed]
    pairs_iou = [(a.true_class, a.iou) for a in assessed]
    report = CompletenessReport(
        result=result,
        tiles=tuple(assessed),
        mean_ratio={cls: _class_mean(pairs_ratio, cls) for cls in MappingClass.ordered()},
        mean_iou={cls: _class_mean(pairs_iou, cls) for cls in MappingClass.ordered()},
    )
    logger.info(
        "Completeness: %d tiles, accuracy %.3f, %d flagged as unmapped",
        len(assessed),
        result.accuracy,
        len(report.flagged),
    )
    return report


# -- 表示 --------------------------------------------------------------------------
def _fmt(value: float | None, width: int = 10) -> str:
    if value is None:
        return "-".rjust(width)
    if math.isinf(value):
        return "inf".rjust(width)
    return f"{value:{width}.2f}"


def format_report(report: CompletenessReport) -> str:
    """分類表 (precision / recall / f1-score / support) と混同行列のテキスト。"""

    res = report.result
    name_width = max(len(label) for label in _LABELS) + 2
    lines = [" " * name_width + f"{'precision':>10}{'recall':>10}{'f1-score':>10}{'support':>10}"]
    for cls in MappingClass.ordered():
        lines.append(
            cls.value.ljust(name_width)
            + _fmt(res.precision[cls])
            + _fmt(res.recall[cls])
            + _fmt(res.f1[cls])
            + f"{res.support[cls]:>10d}"
        )
    total = int(res.confusion.sum())
    lines.append("")
    lines.append("accuracy".ljust(name_width) + " " * 20 + _fmt(res.accuracy) + f"{total:>10d}")
    w = res.weighted
    lines.append("weighted avg".ljust(name_width) + _fmt(w["precision"]) + _fmt(w["recall"]) + _fmt(w["f1"]) + f"{total:>10d}")

    lines.append("")
    lines.append("confusion matrix (rows = true, columns = predicted)")
    lines.append(" " * name_width + "".join(f"{label:>18}" for label in _LABELS))
    for cls, row in zip(MappingClass.ordered(), res.confusion):
        lines.append(cls.value.ljust(name_width) + "".join(f"{int(v):>18d}" for v in row))

    lines.append("")
    lines.append(" " * name_width + f"{'ratio':>10}{'MIoU':>10}")
    for cls in MappingClass.ordered():
        lines.append(cls.value.ljust(name_width) + _fmt(report.mean_ratio[cls]) + _fmt(report.mean_iou[cls]))
    if res.never_predicted:
        lines.append("")
        lines.append("never predicted: " + ", ".join(cls.value for cls in res.never_predicted))
    flagged = report.flagged
    lines.append("")
    lines.append(f"flagged for community attention: {len(flagged)} tiles")
    lines.extend(f"  {t}" for t in flagged)
    return "\n".join(lines)


def report_dict(report: CompletenessReport) -> dict:
    res = report.result

    def _num(value: float | None) -> float | str | None:
        if value is not None and math.isinf(value):
            return "inf"
        return value

    return {
        "labels": _LABELS,
        "confusion": res.confusion.astype(int).tolist(),
        "per_class": {
            cls.value: {
                "precision": res.precision[cls],
                "recall": res.recall[cls],
                "f1": res.f1[cls],
                "support": res.support[cls],
                "mean_ratio": _num(report.mean_ratio[cls]),
                "mean_iou": report.mean_iou[cls],
            }
            for cls in MappingClass.ordered()
        },
        "weighted": dict(res.weighted),
        "accuracy": res.accuracy,
        "never_predicted": [cls.value for cls in res.never_predicted],
        "flagged": [str(t) for t in report.flagged],
    }
