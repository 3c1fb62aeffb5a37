from __future__ import annotations

import numpy as np
import pytest

from analysis.metrics import (
    FEATURE_DIM,
    delta_site_cover,
    feature_extract,
    frechet_distance,
    gaussian_stats,
    gn_count_pct,
    region_report,
    tile_iou,
    tile_metrics,
)
from domain.errors import AppError
from domain.models import GaussianStats, TileId


def _mask(size: int = 16) -> np.ndarray:
    return np.zeros((size, size), np.uint8)


def _stats(mu, sigma) -> GaussianStats:
    return GaussianStats(mu=np.atleast_1d(np.asarray(mu, float)), sigma=np.atleast_2d(np.asarray(sigma, float)), n=2)


# -- タイル指標 --------------------------------------------------------------------
def test_tile_iou_basic_cases():
    full = _mask() + 255
    left = _mask()
    left[:, :8] = 255
    right = _mask()
    right[:, 8:] = 255
    assert tile_iou(full, full) == 1.0
    assert tile_iou(left, right) == 0.0
    assert tile_iou(left, full) == 0.5
    assert tile_iou(_mask(), _mask()) is None


def test_tile_iou_rejects_shape_mismatch():
    with pytest.raises(AppError) as exc:
        tile_iou(_mask(16), _mask(8))
    assert exc.value.code == "E-RASTER-SHAPE"


def test_delta_site_cover_examples():
    size = 20
    gn = np.zeros((size, size), np.uint8)
    gt = np.zeros((size, size), np.uint8)
    gn.reshape(-1)[:120] = 255  # 30%
    gt.reshape(-1)[:100] = 255  # 25%
    assert delta_site_cover(gn, gt) == pytest.approx(5.0)
    assert delta_site_cover(gt, gt) == 0.0
    assert delta_site_cover(np.zeros_like(gt), gt) == pytest.approx(-25.0)


def test_gn_count_pct_examples():
    assert gn_count_pct(10, 10) == 100.0
    assert gn_count_pct(3, 2) == 150.0
    assert gn_count_pct(0, 5) == 0.0
    assert gn_count_pct(4, 0) is None


def test_tile_metrics_match_brute_force_on_random_pairs():
    rng = np.random.default_rng(0)
    t = TileId(15, 0, 0)
    for _ in range(300):
        gn = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        gt = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        union = int((gn | gt).sum())
        inter = sum(1 for r in range(16) for c in range(16) if gn[r, c] and gt[r, c])
        row = tile_metrics(t, gn.astype(np.uint8) * 255, gt.astype(np.uint8) * 255)
        assert row.iou == (inter / union if union else None)
        assert row.iou == tile_iou(gt, gn)
        assert row.delta_site_cover == (int(gn.sum()) - int(gt.sum())) * 100.0 / 256
        assert row.delta_site_cover == -delta_site_cover(gt, gn)


# -- ガウス統計と Fréchet 距離 ------------------------------------------------------
def test_gaussian_stats_examples():
    same = gaussian_stats(np.ones((5, 3)))
    assert np.array_equal(same.sigma, np.zeros((3, 3)))
    one_d = gaussian_stats(np.array([[-1.0], [1.0]]))
    assert one_d.mu[0] == 0.0
    assert one_d.sigma[0, 0] == pytest.approx(2.0)


def test_gaussian_stats_matches_two_pass_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 8))
    stats = gaussian_stats(x)
    mu = x.sum(axis=0) / len(x)
    oracle = np.zeros((8, 8))
    for row in x:
        d = row - mu
        oracle += np.outer(d, d)
    oracle /= len(x) - 1
    assert np.max(np.abs(stats.sigma - oracle)) <= 1e-12
    assert np.array_equal(stats.sigma, stats.sigma.T)


def test_gaussian_stats_needs_two_samples():
    with pytest.raises(AppError) as exc:
        gaussian_stats(np.ones((1, 4)))
    assert exc.value.code == "E-LINALG"


def test_frechet_examples():
    a = _stats([0.0], [[1.0]])
    assert frechet_distance(a, a) <= 1e-8
    assert frechet_distance(a, _stats([3.0], [[1.0]])) == pytest.approx(9.0)
    assert frechet_distance(_stats([0.0], [[4.0]]), a) == pytest.approx(1.0)


def test_frechet_one_dimensional_closed_form():
    rng = np.random.default_rng(4)
    for _ in range(100):
        mu_a, mu_b = rng.normal(size=2) * 3
        s_a, s_b = rng.uniform(0.1, 3.0, size=2)
        value = frechet_distance(_stats([mu_a], [[s_a**2]]), _stats([mu_b], [[s_b**2]]))
        assert abs(value - ((mu_a - mu_b) ** 2 + (s_a - s_b) ** 2)) <= 1e-10


def test_frechet_commuting_covariances():
    rng = np.random.default_rng(5)
    for _ in range(20):
        da, db = rng.uniform(0.0, 4.0, size=(2, 16))
        mu_a, mu_b = rng.normal(size=(2, 16))
        a, b = _stats(mu_a, np.diag(da)), _stats(mu_b, np.diag(db))
        expected = float(np.sum((mu_a - mu_b) ** 2) + np.sum((np.sqrt(da) - np.sqrt(db)) ** 2))
        assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-8)
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-8)


def test_frechet_rejects_dimension_mismatch():
    with pytest.raises(AppError):
        frechet_distance(_stats([0.0], [[1.0]]), _stats([0.0, 0.0], np.eye(2)))


# -- 特徴量 ------------------------------------------------------------------------
def test_builtin_features():
    empty = feature_extract(_mask(64))
    assert empty.shape == (FEATURE_DIM,)
    assert empty[0] == 0.0 and not empty[2:66].any()

    full = feature_extract(_mask(64) + 255)
    assert full[0] == 1.0 and full[1] == 1.0
    assert np.all(full[2:66] == 1.0)

    rng = np.random.default_rng(6)
    img = (rng.random((64, 64)) < 0.3).astype(np.uint8) * 255
    assert np.array_equal(feature_extract(img), feature_extract(img.copy()))


# -- 領域集計 ----------------------------------------------------------------------
def _tiles(n: int, seed: int = 0) -> dict[TileId, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(n):
        mask = np.zeros((64, 64), np.uint8)
        for _ in range(int(rng.integers(1, 6))):
            r, c = rng.integers(0, 56, size=2)
            h, w = rng.integers(2, 8, size=2)
            mask[r : r + h, c : c + w] = 255
        out[TileId(15, i, 0)] = mask
    return out


def test_region_report_identity():
    tiles = _tiles(6)
    report = region_report(tiles, tiles)
    assert report.mean_iou == 1.0
    assert report.mean_abs_delta_site_cover == 0.0
    assert report.mean_gn_count_pct == 100.0
    assert report.fid == pytest.approx(0.0, abs=1e-6)
    assert report.feature_extractor == "builtin"
    assert len(report.tiles) == 6


def test_region_report_single_tile_equals_tile_metrics():
    gt = _tiles(1, seed=1)
    gn = _tiles(1, seed=2)
    (t,) = gt
    report = region_report(gn, gt)
    row = tile_metrics(t, gn[t], gt[t])
    assert report.mean_iou == row.iou
    assert report.mean_abs_delta_site_cover == abs(row.delta_site_cover)
    assert report.fid is None


def test_region_report_pairing_errors():
    gt = _tiles(3)
    gn = dict(list(gt.items())[:2])
    with pytest.raises(AppError) as exc:
        region_report(gn, gt)
    assert exc.value.code == "E-EVAL-PAIRING"
    assert "15/2/0" in str(exc.value)
    with pytest.raises(AppError) as exc:
        region_report({}, {})
    assert exc.value.code == "E-EVAL-EMPTY"


def test_region_report_undefined_tiles_and_count_modes():
    t1, t2 = TileId(15, 0, 0), TileId(15, 1, 0)
    empty = np.zeros((64, 64), np.uint8)
    one = empty.copy()
    one[0:4, 0:4] = 255
    two = one.copy()
    two[10:14, 10:14] = 255
    gn = {t1: empty, t2: two}
    gt = {t1: empty, t2: one}
    report = region_report(gn, gt, cities={t1: "gridtown", t2: "curville"})
    assert report.undefined_iou == 1
    assert report.undefined_gn_count == 1
    assert report.mean_gn_count_pct == 200.0
    assert set(report.per_city) == {"gridtown", "curville"}
    assert report.per_city["gridtown"]["mean_iou"] is None

    totals = region_report({t1: one, t2: two}, {t1: one, t2: one}, gn_count_mode="ratio_of_totals")
    assert totals.mean_gn_count_pct == pytest.approx(150.0)


def test_region_report_accepts_external_features():
    tiles = _tiles(4)
    rng = np.random.default_rng(9)
    feats = rng.normal(size=(10, 3))
    report = region_report(tiles, tiles, features=(feats, feats + 1.0), feature_extractor="inception.txt")
    assert report.fid == pytest.approx(3.0)
    assert report.feature_extractor == "inception.txt"
