"""TileSample 群からモデル入力テンソルを組み立てる。アブレーションもここで適用する。"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from domain.errors import app_error
from domain.models import TileSample
from model.condition import embed_caption
from render.raster import to_model_target


@dataclass(frozen=True, slots=True)
class Ablation:
    no_image: bool = False
    no_metadata: bool = False
    no_prompt: bool = False

    @classmethod
    def parse(cls, value: str | None) -> "Ablation":
        """"none" / "no_image" / "no_image,no_prompt" などのカンマ区切り指定。"""

        if not value or value == "none":
            return cls()
        names = {item.strip() for item in value.split(",") if item.strip()}
        unknown = names - {"no_image", "no_metadata", "no_prompt"}
        if unknown:
            raise app_error("E-USAGE", detail=f"unknown ablation mode(s): {sorted(unknown)}")
        return cls(no_image="no_image" in names, no_metadata="no_metadata" in names, no_prompt="no_prompt" in names)

    @property
    def label(self) -> str:
        names = [name for name in ("no_image", "no_metadata", "no_prompt") if getattr(self, name)]
        return ",".join(names) or "none"


@dataclass(slots=True)
class Conditioning:
    lon: torch.Tensor
    lat: torch.Tensor
    c_text: torch.Tensor
    image: torch.Tensor | None

    @property
    def batch_size(self) -> int:
        return int(self.lon.shape[0])


@dataclass(slots=True)
class DiffusionBatch:
    x0: torch.Tensor | None
    cond: Conditioning

    def __len__(self) -> int:
        return self.cond.batch_size


def caption_for(sample: TileSample, ablation: Ablation) -> str:
    return sample.city if ablation.no_prompt else sample.caption


def make_conditioning(
    samples: Sequence[TileSample],
    text_dim: int,
    ablation: Ablation = Ablation(),
    *,
    dtype: torch.dtype = torch.float32,
) -> Conditioning:
    if not samples:
        raise app_error("E-MODEL-SHAPE", detail="empty batch")
    lon = torch.tensor([0.0 if ablation.no_metadata else s.center.lon for s in samples], dtype=dtype)
    lat = torch.tensor([0.0 if ablation.no_metadata else s.center.lat for s in samples], dtype=dtype)
    c_text = torch.from_numpy(np.stack([embed_caption(caption_for(s, ablation), text_dim) for s in samples])).to(dtype)
    images = np.stack([s.condition.data for s in samples]).astype(np.float32)
    if ablation.no_image:
        images = np.zeros_like(images)
    return Conditioning(lon, lat, c_text, torch.from_numpy(images).to(dtype))


def make_batch(
    samples: Sequence[TileSample],
    text_dim: int,
    ablation: Ablation = Ablation(),
    *,
    dtype: torch.dtype = torch.float32,
) -> DiffusionBatch:
    cond = make_conditioning(samples, text_dim, ablation, dtype=dtype)
    targets = [s.target for s in samples]
    if any(t is None for t in targets):
        return DiffusionBatch(None, cond)
    x0 = torch.from_numpy(np.stack([to_model_target(t) for t in targets])).to(dtype)
    return DiffusionBatch(x0, cond)


def index_batch(batch: DiffusionBatch, index: torch.Tensor) -> DiffusionBatch:
    """事前に組み立てた全タイル分のバッチから index の行だけを取り出す。"""

    cond = batch.cond
    image = None if cond.image is None else cond.image[index]
    sub = Conditioning(cond.lon[index], cond.lat[index], cond.c_text[index], image)
    return DiffusionBatch(None if batch.x0 is None else batch.x0[index], sub)
