"""画像以外の条件 (メタデータ・タイムステップ・キャプション) の埋め込み。"""
from __future__ import annotations

import hashlib
import re

import numpy as np
import torch
from torch import nn

from domain.errors import app_error
from domain.settings import ConditionSettings

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


def sinusoidal_embed(m: float | torch.Tensor, d: int, base: float, *, dtype: torch.dtype | None = None) -> torch.Tensor:
    """(sin(m·ω_i), cos(m·ω_i)) を交互に並べた d 次元ベクトル。ω_i = base^(−2i/d)。

    m がテンソル (..., ) の場合は (..., d) を返す。二乗ノルムは常に d/2。
    """

    if d <= 0 or d % 2 != 0:
        raise app_error("E-MODEL-SHAPE", detail=f"embedding dim must be positive and even, got {d}")
    if base <= 1:
        raise app_error("E-MODEL-SHAPE", detail=f"embedding base must be > 1, got {base}")
    if not isinstance(m, torch.Tensor):
        m = torch.tensor(float(m), dtype=dtype or torch.float64)
    elif dtype is not None:
        m = m.to(dtype)
    if not m.is_floating_point():
        m = m.to(torch.float64 if dtype is None else dtype)
    half = d // 2
    i = torch.arange(half, dtype=torch.float64)
    omega = torch.pow(torch.tensor(float(base), dtype=torch.float64), -2.0 * i / d).to(m.dtype)
    angles = m.unsqueeze(-1) * omega
    pairs = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return pairs.reshape(*m.shape, d)


def timestep_embedding(t: int | torch.Tensor, d: int, base: float = 10000.0, *, dtype: torch.dtype | None = None) -> torch.Tensor:
    return sinusoidal_embed(t if isinstance(t, torch.Tensor) else float(t), d, base, dtype=dtype)


def _projection(in_dim: int, width: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, width), nn.SiLU(), nn.Linear(width, width))


class MetadataTimestepFusion(nn.Module):
    """c_mt = MLP_meta(embed(lon)) + MLP_meta(embed(lat)) + MLP_t(embed(t))。

    shared_metadata=False の場合は経度・緯度で別々の射影を持つ。
    """

    def __init__(self, settings: ConditionSettings, *, shared_metadata: bool = True) -> None:
        super().__init__()
        self.meta_dim = settings.meta_dim
        self.meta_base = settings.meta_base
        self.time_dim = settings.time_dim
        self.time_base = settings.time_base
        self.width = settings.cond_width
        self.shared_metadata = shared_metadata
        self.mlp_meta = _projection(self.meta_dim, self.width)
        self.mlp_meta_lat = None if shared_metadata else _projection(self.meta_dim, self.width)
        self.mlp_t = _projection(self.time_dim, self.width)

    def forward(self, lon: torch.Tensor, lat: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp_meta[0].weight.dtype
        e_lon = sinusoidal_embed(lon.to(dtype), self.meta_dim, self.meta_base)
        e_lat = sinusoidal_embed(lat.to(dtype), self.meta_dim, self.meta_base)
        e_t = timestep_embedding(t.to(dtype), self.time_dim, self.time_base)
        lat_proj = self.mlp_meta if self.mlp_meta_lat is None else self.mlp_meta_lat
        return self.mlp_meta(e_lon) + lat_proj(e_lat) + self.mlp_t(e_t)


def fuse_metadata_timestep(
    m_lon: float | torch.Tensor,
    m_lat: float | torch.Tensor,
    t: int | torch.Tensor,
    fusion: MetadataTimestepFusion,
) -> torch.Tensor:
    def as_tensor(value: float | torch.Tensor) -> torch.Tensor:
        tensor = value if isinstance(value, torch.Tensor) else torch.tensor([float(value)])
        return tensor.reshape(-1)

    lon, lat, step = as_tensor(m_lon), as_tensor(m_lat), as_tensor(t)
    if not (lon.shape == lat.shape == step.shape):
        raise app_error("E-MODEL-SHAPE", detail=f"lon {tuple(lon.shape)}, lat {tuple(lat.shape)}, t {tuple(step.shape)}")
    return fusion(lon, lat, step)


def tokenize(text: str) -> list[str]:
    return [token for token in _TOKEN_RE.split(text.lower()) if token]


def _bucket(token: str, d: int) -> tuple[int, float]:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    sign_digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, person=b"geoforge-sign").digest()
    bucket = int.from_bytes(digest[:8], "little") % d
    sign = 1.0 if sign_digest[0] & 1 else -1.0
    return bucket, sign


def embed_caption(text: str, d: int) -> np.ndarray:
    """ハッシュ化 bag-of-tokens。トークン順に依存せず、L2 正規化 (ゼロベクトルはそのまま)。"""

    vec = np.zeros(d, dtype=np.float64)
    for token in tokenize(text):
        bucket, sign = _bucket(token, d)
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


class CaptionEncoder(nn.Module):
    """embed_caption の出力を条件幅へ線形射影する。"""

    def __init__(self, settings: ConditionSettings) -> None:
        super().__init__()
        self.text_dim = settings.text_dim
        self.proj = nn.Linear(settings.text_dim, settings.cond_width)

    def encode(self, captions: list[str]) -> torch.Tensor:
        rows = np.stack([embed_caption(text, self.text_dim) for text in captions]) if captions else np.zeros((0, self.text_dim))
        return torch.from_numpy(rows).to(self.proj.weight.dtype)

    def forward(self, c_text: torch.Tensor) -> torch.Tensor:
        if c_text.shape[-1] != self.text_dim:
            raise app_error("E-MODEL-SHAPE", detail=f"caption vector has {c_text.shape[-1]} dims, expected {self.text_dim}")
        return self.proj(c_text)
