"""都市形態の評価指標 (IoU・サイトカバー差・建物数比・Fréchet 距離) と領域集計。"""
from __future__ import annotations

import logging
import math
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy import ndimage

from domain.errors import app_error
from domain.models import GaussianStats, RegionReport, TileId, TilePairMetrics
from analysis.vectorize import label_components

logger = logging.getLogger(__name__)

BUILTIN_EXTRACTOR = "builtin"
DENSITY_GRID = 8
EDGE_BINS = 16
FEATURE_DIM = 1 + 1 + DENSITY_GRID * DENSITY_GRID + EDGE_BINS
# 固有値の数値下限 (これより負なら DEBUG で記録する)
_EIG_FLOOR = -1e-10


def _as_mask(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return arr > 0


def _check_pair(gn: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_mask(gn), _as_mask(gt)
    if a.shape != b.shape:
        raise app_error("E-RASTER-SHAPE", detail=f"generated {a.shape} vs ground truth {b.shape}")
    return a, b


# -- タイル単位 ---------------------------------------------------------------------
def tile_iou(gn: np.ndarray, gt: np.ndarray) -> float | None:
    """|gn ∧ gt| / |gn ∨ gt|。和集合が空なら None (平均から除外)。"""

    a, b = _check_pair(gn, gt)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return None
    return int(np.count_nonzero(a & b)) / union


def site_cover(mask: np.ndarray) -> float:
    m = _as_mask(mask)
    return int(np.count_nonzero(m)) / float(m.size)


def delta_site_cover(gn: np.ndarray, gt: np.ndarray) -> float:
    """符号付きのサイトカバー差 (%)。正なら過剰生成。"""

    a, b = _check_pair(gn, gt)
    return (int(np.count_nonzero(a)) - int(np.count_nonzero(b))) * 100.0 / float(a.size)


def gn_count_pct(gn_count: int, gt_count: int) -> float | None:
    if gt_count == 0:
        return None
    return 100.0 * gn_count / gt_count


def tile_metrics(t: TileId, gn: np.ndarray, gt: np.ndarray, *, city: str | None = None) -> TilePairMetrics:
    _check_pair(gn, gt)
    _, gn_count = label_components(_as_mask(gn))
    _, gt_count = label_components(_as_mask(gt))
    return TilePairMetrics(
        tile=t,
        iou=tile_iou(gn, gt),
        delta_site_cover=delta_site_cover(gn, gt),
        gn_count_pct=gn_count_pct(gn_count, gt_count),
        gn_count=gn_count,
        gt_count=gt_count,
        city=city,
    )


# -- 特徴量とガウス統計 ---------------------------------------------------------------
def feature_extract(img: np.ndarray) -> np.ndarray:
    """組み込み特徴: サイトカバー率、建物数、8×8 ブロック密度、16 方位のエッジヒストグラム。"""

    mask = _as_mask(img)
    size = mask.shape[0]
    if mask.shape[0] != mask.shape[1] or size % DENSITY_GRID != 0:
        raise app_error("E-RASTER-SHAPE", detail=f"tile must be square with side divisible by {DENSITY_GRID}, got {mask.shape}")
    _, count = label_components(mask)
    block = size // DENSITY_GRID
    density = mask.reshape(DENSITY_GRID, block, DENSITY_GRID, block).mean(axis=(1, 3)).ravel()

    field = mask.astype(np.float64)
    gx = ndimage.sobel(field, axis=1, mode="constant")
    gy = ndimage.sobel(field, axis=0, mode="constant")
    magnitude = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), 2.0 * math.pi)
    bins = np.minimum((angle / (2.0 * math.pi) * EDGE_BINS).astype(np.int64), EDGE_BINS - 1)
    hist = np.bincount(bins.ravel(), weights=magnitude.ravel(), minlength=EDGE_BINS) / float(mask.size)

    return np.concatenate([[mask.mean(), float(count)], density, hist]).astype(np.float64)


def gaussian_stats(features: np.ndarray | Sequence[np.ndarray]) -> GaussianStats:
    """標本平均と不偏共分散 (2 パス)。共分散は (Σ + Σᵀ)/2 で対称化する。"""

    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise app_error("E-LINALG", detail=f"need at least 2 feature vectors, got shape {x.shape}")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / float(x.shape[0] - 1)
    return GaussianStats(mu=mu, sigma=(sigma + sigma.T) / 2.0, n=int(x.shape[0]))


def _sqrtm_psd(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    try:
        w, v = scipy.linalg.eigh(matrix)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise app_error("E-LINALG", detail=f"eigendecomposition failed: {exc}") from exc
    if not w.size:
        return np.zeros_like(matrix), w
    scale = float(np.abs(w).max())
    if w.min() < _EIG_FLOOR * max(1.0, scale):
        logger.debug("Clamping negative eigenvalue %.3e", w.min())
    # 丸め誤差程度の固有値は 0 とみなす (階数判定と同じ許容幅)
    w = np.where(w > w.size * np.finfo(np.float64).eps * scale, w, 0.0)
    return (v * np.sqrt(w)) @ v.T, w


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """‖μa − μb‖² + Tr(Σa) + Tr(Σb) − 2 Tr(sqrtm(sqrtm(Σa) Σb sqrtm(Σa)))。"""

    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise app_error("E-LINALG", detail=f"dimension mismatch {a.mu.shape} vs {b.mu.shape}")
    if not (np.all(np.isfinite(a.sigma)) and np.all(np.isfinite(b.sigma))):
        raise app_error("E-LINALG", detail="covariance contains non-finite values")
    root_a, _ = _sqrtm_psd(a.sigma)
    inner = root_a @ b.sigma @ root_a
    inner = (inner + inner.T) / 2.0
    _, w = _sqrtm_psd(inner)
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.sum(np.sqrt(w)))
    if value < -1e-8:
        logger.warning("Frechet distance %.3e below zero; clamped", value)
    return max(value, 0.0)


# -- 領域集計 ------------------------------------------------------------------------
def _mean(values: Sequence[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def _gn_mean(rows: Sequence[TilePairMetrics], mode: str) -> float | None:
    if mode == "ratio_of_totals":
        total_gt = sum(r.gt_count for r in rows)
        return None if total_gt == 0 else 100.0 * sum(r.gn_count for r in rows) / total_gt
    return _mean([r.gn_count_pct for r in rows])


def pair_tiles(
    gn_tiles: Mapping[TileId, np.ndarray], gt_tiles: Mapping[TileId, np.ndarray]
) -> list[TileId]:
    missing_gt = sorted(set(gn_tiles) - set(gt_tiles), key=lambda t: t.row_major_key())
    missing_gn = sorted(set(gt_tiles) - set(gn_tiles), key=lambda t: t.row_major_key())
    if missing_gt or missing_gn:
        names = [f"{t} (no ground truth)" for t in missing_gt] + [f"{t} (not generated)" for t in missing_gn]
        raise app_error("E-EVAL-PAIRING", detail=", ".join(names[:10]))
    if not gn_tiles:
        raise app_error("E-EVAL-EMPTY")
    return sorted(gn_tiles, key=lambda t: t.row_major_key())


def region_report(
    gn_tiles: Mapping[TileId, np.ndarray],
    gt_tiles: Mapping[TileId, np.ndarray],
    *,
    cities: Mapping[TileId, str] | None = None,
    gn_count_mode: str = "per_tile",
    rows: Sequence[TilePairMetrics] | None = None,
    features: tuple[np.ndarray, np.ndarray] | None = None,
    feature_extractor: str = BUILTIN_EXTRACTOR,
) -> RegionReport:
    """対応するタイル集合の平均指標と FID。features を渡すと (生成, 正解) の外部特徴で FID を計算する。"""

    order = pair_tiles(gn_tiles, gt_tiles)
    cities = cities or {}
    if rows is None:
        rows = [tile_metrics(t, gn_tiles[t], gt_tiles[t], city=cities.get(t)) for t in order]

    fid: float | None = None
    if features is None:
        gn_feats = np.stack([feature_extract(gn_tiles[t]) for t in order])
        gt_feats = np.stack([feature_extract(gt_tiles[t]) for t in order])
    else:
        gn_feats, gt_feats = features
    if gn_feats.shape[0] >= 2 and gt_feats.shape[0] >= 2:
        fid = frechet_distance(gaussian_stats(gn_feats), gaussian_stats(gt_feats))
    else:
        logger.warning("FID needs at least two tiles per side; skipped")

    per_city: dict[str, dict[str, float | None]] = {}
    for city in sorted({r.city for r in rows if r.city}):
        subset = [r for r in rows if r.city == city]
        per_city[city] = {
            "tiles": float(len(subset)),
            "mean_iou": _mean([r.iou for r in subset]),
            "mean_abs_delta_site_cover": float(np.mean([abs(r.delta_site_cover) for r in subset])),
            "mean_gn_count_pct": _gn_mean(subset, gn_count_mode),
        }

    report = RegionReport(
        mean_iou=_mean([r.iou for r in rows]),
        mean_abs_delta_site_cover=float(np.mean([abs(r.delta_site_cover) for r in rows])),
        mean_gn_count_pct=_gn_mean(rows, gn_count_mode),
        fid=fid,
        feature_extractor=feature_extractor,
        tiles=tuple(rows),
        undefined_iou=sum(1 for r in rows if r.iou is None),
        undefined_gn_count=sum(1 for r in rows if r.gn_count_pct is None),
        per_city=per_city,
    )
    logger.info(
        "Region report: %d tiles, MIoU=%s, |dSC|=%.3f, %%GN=%s, FID=%s (%s)",
        len(rows),
        report.mean_iou,
        report.mean_abs_delta_site_cover,
        report.mean_gn_count_pct,
        report.fid,
        feature_extractor,
    )
    return report
