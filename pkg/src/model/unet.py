"""ε 予測ネットワーク (小型 U-Net) とゼロ初期化コントロールブランチ。

正規化層・注意機構は持たない。残差ブロックは (skip + h) / √2 で合成し、
条件ベクトル (c_mt + 射影済み c_text) を各ブロックの隠れ状態へ加算する。
"""
from __future__ import annotations

import logging
import math

import torch
import torch.nn.functional as F
from torch import nn

from domain.errors import app_error
from domain.settings import ConditionSettings, ModelSettings
from model.condition import CaptionEncoder, MetadataTimestepFusion

logger = logging.getLogger(__name__)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
# 3 段のダウンサンプリングで 1/8 になる
SPATIAL_FACTOR = 8
PHASES = ("joint", "align", "control")


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cond_width: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(cond_width, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(x)) + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(h))
        return (self.skip(x) + h) * _INV_SQRT2


class Encoder(nn.Module):
    """3 段のダウンサンプリングと中間ブロック。出力はスキップ 3 本 + 中間特徴。"""

    def __init__(self, in_channels: int, channels: tuple[int, int, int], cond_width: int) -> None:
        super().__init__()
        c0, c1, c2 = channels
        self.in_conv = nn.Conv2d(in_channels, c0, 3, padding=1)
        self.blocks = nn.ModuleList([ResBlock(c0, c0, cond_width), ResBlock(c0, c1, cond_width), ResBlock(c1, c2, cond_width)])
        self.downs = nn.ModuleList([nn.Conv2d(c, c, 3, stride=2, padding=1) for c in (c0, c1, c2)])
        self.middle = ResBlock(c2, c2, cond_width)

    def forward(
        self, x: torch.Tensor, emb: torch.Tensor, hint: torch.Tensor | None = None
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        h = self.in_conv(x)
        if hint is not None:
            h = h + hint
        skips: list[torch.Tensor] = []
        for block, down in zip(self.blocks, self.downs):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        return skips, self.middle(h, emb)


def _zero_conv(channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class Denoiser(nn.Module):
    """ε_θ。エンコーダ → 中間 → スキップ結合付きデコーダ。"""

    def __init__(self, settings: ModelSettings, cond_width: int) -> None:
        super().__init__()
        c0, c1, c2 = settings.channels
        self.encoder = Encoder(settings.image_channels, settings.channels, cond_width)
        self.ups = nn.ModuleList(
            [ResBlock(c2 + c2, c2, cond_width), ResBlock(c2 + c1, c1, cond_width), ResBlock(c1 + c0, c0, cond_width)]
        )
        self.out_conv = nn.Conv2d(c0, settings.image_channels, 3, padding=1)
        if settings.zero_init_output:
            nn.init.zeros_(self.out_conv.weight)
            nn.init.zeros_(self.out_conv.bias)

    def forward(
        self,
        x: torch.Tensor,
        emb: torch.Tensor,
        control: list[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        skips, h = self.encoder(x, emb)
        if control is not None:
            skips = [s + c for s, c in zip(skips, control[:3])]
            h = h + control[3]
        for up, skip in zip(self.ups, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = up(torch.cat([h, skip], dim=1), emb)
        return self.out_conv(F.silu(h))


class ControlBranch(nn.Module):
    """条件画像のヒントヘッド + エンコーダの構造コピー + 注入箇所ごとのゼロ畳み込み。"""

    def __init__(self, settings: ModelSettings, cond_width: int) -> None:
        super().__init__()
        c0, c1, c2 = settings.channels
        hidden = max(c0 // 2, 1)
        self.hint = nn.Sequential(
            nn.Conv2d(settings.condition_channels, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, c0, 3, padding=1),
        )
        self.encoder = Encoder(settings.image_channels, settings.channels, cond_width)
        self.zero_convs = nn.ModuleList([_zero_conv(c) for c in (c0, c1, c2, c2)])

    def forward(self, x: torch.Tensor, condition: torch.Tensor, emb: torch.Tensor) -> list[torch.Tensor]:
        skips, middle = self.encoder(x, emb, hint=self.hint(condition))
        return [conv(feat) for conv, feat in zip(self.zero_convs, [*skips, middle])]


class GeoForgeModel(nn.Module):
    """条件エンコーダ・デノイザ・コントロールブランチをまとめたモデル本体。"""

    def __init__(
        self,
        condition: ConditionSettings | None = None,
        settings: ModelSettings | None = None,
        *,
        shared_metadata: bool = True,
    ) -> None:
        super().__init__()
        self.condition_settings = condition or ConditionSettings()
        self.model_settings = settings or ModelSettings()
        self.shared_metadata = shared_metadata
        width = self.condition_settings.cond_width
        self.fusion = MetadataTimestepFusion(self.condition_settings, shared_metadata=shared_metadata)
        self.caption = CaptionEncoder(self.condition_settings)
        self.denoiser = Denoiser(self.model_settings, width)
        self.control = ControlBranch(self.model_settings, width)
        # ControlNet と同様に、コントロール側エンコーダはデノイザの重みから始める
        self.control.encoder.load_state_dict(self.denoiser.encoder.state_dict())

    def embed(self, t: torch.Tensor, lon: torch.Tensor, lat: torch.Tensor, c_text: torch.Tensor) -> torch.Tensor:
        return self.fusion(lon, lat, t) + self.caption(c_text)

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        lon: torch.Tensor,
        lat: torch.Tensor,
        c_text: torch.Tensor,
        condition: torch.Tensor | None = None,
    ) -> torch.Tensor:
        emb = self.embed(t, lon, lat, c_text)
        control = self.control(x_t, condition, emb) if condition is not None else None
        return self.denoiser(x_t, emb, control)

    # -- 学習フェーズ ------------------------------------------------------------------
    def set_phase(self, phase: str) -> None:
        """align: コントロール以外を学習、control: コントロールのみ学習、joint: 全体。"""

        if phase not in PHASES:
            raise app_error("E-CONFIG-INVALID", detail=f"unknown training phase {phase!r}")
        trainable_control = phase in ("joint", "control")
        trainable_rest = phase in ("joint", "align")
        for p in self.control.parameters():
            p.requires_grad_(trainable_control)
        for module in (self.fusion, self.caption, self.denoiser):
            for p in module.parameters():
                p.requires_grad_(trainable_rest)
        logger.debug("Training phase set to %s", phase)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
