"""`{root}/{z}/{x}/{y}.png` 形式のタイルディレクトリ入出力。"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from domain.errors import app_error
from domain.models import RasterTile, TileId
from geo.tilegrid import tile_path

logger = logging.getLogger(__name__)


def write_png(path: Path, data: np.ndarray) -> Path:
    """uint8 配列を 8bit PNG で保存する。1 チャネルはグレースケール、3 チャネルは RGB。"""

    arr = np.asarray(data)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.dtype != np.uint8:
        raise app_error("E-RASTER-SHAPE", detail=f"expected uint8 pixels, got {arr.dtype}", subject=str(path))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # PNG のメタデータを付けないことで同一画素 → 同一バイト列になる
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG", optimize=False)
    return path


def read_png(path: Path) -> np.ndarray:
    """PNG を (H, W) または (H, W, 3) の uint8 配列で返す。"""

    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if len(img.getbands()) >= 3 else "L")
            return np.asarray(img, dtype=np.uint8).copy()
    except FileNotFoundError as exc:
        raise app_error("E-PATH-NOTFOUND", detail=str(exc), subject=str(path)) from exc


def read_mask(path: Path) -> np.ndarray:
    """単一チャネルのマスク (H, W) を読み込む。RGB の場合は 1 チャネル目を使う。"""

    arr = read_png(path)
    return arr if arr.ndim == 2 else arr[:, :, 0]


def write_tile(root: Path, kind: str, t: TileId, tile: RasterTile) -> Path:
    return write_png(tile_path(root, kind, t), tile.data)


def read_tile(root: Path, kind: str, t: TileId) -> RasterTile:
    return RasterTile(read_png(tile_path(root, kind, t)))


def iter_tile_files(root: Path) -> Iterator[tuple[TileId, Path]]:
    """`{root}/{z}/{x}/{y}.png` を走査する (順序不定)。"""

    root = Path(root)
    for png in root.glob("*/*/*.png"):
        z_dir, x_dir = png.parent.parent.name, png.parent.name
        try:
            yield TileId(int(z_dir), int(x_dir), int(png.stem)), png
        except ValueError:
            logger.debug("Skip non-tile file %s", png)


def list_tiles(root: Path) -> dict[TileId, Path]:
    """タイル → パスの対応を行優先順 (z, y, x) で返す。"""

    root = Path(root)
    if not root.is_dir():
        raise app_error("E-PATH-NOTFOUND", subject=str(root))
    found = dict(iter_tile_files(root))
    return {t: found[t] for t in sorted(found, key=lambda t: t.row_major_key())}
