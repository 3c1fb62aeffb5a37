"""ノイズスケジュール・前方拡散・学習ステップ・DDIM サンプリング。"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from domain.errors import app_error
from domain.models import TileId, TileSample
from domain.settings import ScheduleSettings, TrainSettings
from model.batch import Ablation, Conditioning, DiffusionBatch, make_conditioning
from model.unet import GeoForgeModel
from render.raster import from_model_output
from services.ingest import city_token, rewrite_city

logger = logging.getLogger(__name__)

EpsHook = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


# -- スケジュール --------------------------------------------------------------------
@dataclass(slots=True)
class NoiseSchedule:
    """betas[t-1] = β_t、alphas_bar[t] = ᾱ_t (alphas_bar[0] = 1)。"""

    T: int
    beta_start: float
    beta_end: float
    kind: str
    betas: np.ndarray
    alphas_bar: np.ndarray

    def alpha_bar(self, t: int) -> float:
        return float(self.alphas_bar[t])

    def as_dict(self) -> dict[str, object]:
        return {"kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(T: int, beta_start: float, beta_end: float, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise app_error("E-SCHEDULE-INVALID", detail=f"unsupported schedule kind {kind!r}")
    if T < 1 or not (0.0 < beta_start <= beta_end < 1.0):
        raise app_error("E-SCHEDULE-INVALID", detail=f"T={T}, beta_start={beta_start}, beta_end={beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), kind, betas, alphas_bar)


def schedule_from_settings(settings: ScheduleSettings) -> NoiseSchedule:
    return make_schedule(settings.T, settings.beta_start, settings.beta_end, settings.kind)


def _alpha_bar_tensor(sched: NoiseSchedule, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    steps = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if steps.numel() and (int(steps.min()) < 0 or int(steps.max()) > sched.T):
        raise app_error("E-SCHEDULE-INVALID", detail=f"timestep outside [0, {sched.T}]")
    table = torch.from_numpy(sched.alphas_bar).to(like.dtype)
    ab = table[steps]
    if ab.numel() == 1:
        return ab.reshape(())
    return ab.reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε。"""

    if x0.shape != eps.shape:
        raise app_error("E-MODEL-SHAPE", detail=f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    ab = _alpha_bar_tensor(sched, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


# -- 予測 ----------------------------------------------------------------------------
def _check_shapes(model: GeoForgeModel, x_t: torch.Tensor, t: torch.Tensor, cond: Conditioning) -> None:
    settings = model.model_settings
    if x_t.ndim != 4 or x_t.shape[1] != settings.image_channels:
        raise app_error("E-MODEL-SHAPE", detail=f"x_t must be (B, {settings.image_channels}, H, W), got {tuple(x_t.shape)}")
    batch, _, height, width = x_t.shape
    if height != width or height % 8 != 0:
        raise app_error("E-MODEL-SHAPE", detail=f"tile side must be square and a multiple of 8, got {height}x{width}")
    for name, tensor in (("t", t), ("lon", cond.lon), ("lat", cond.lat)):
        if tuple(tensor.shape) != (batch,):
            raise app_error("E-MODEL-SHAPE", detail=f"{name} must have shape ({batch},), got {tuple(tensor.shape)}")
    text_dim = model.condition_settings.text_dim
    if tuple(cond.c_text.shape) != (batch, text_dim):
        raise app_error("E-MODEL-SHAPE", detail=f"c_text must be ({batch}, {text_dim}), got {tuple(cond.c_text.shape)}")
    if cond.image is not None:
        expected = (batch, settings.condition_channels, height, width)
        if tuple(cond.image.shape) != expected:
            raise app_error("E-MODEL-SHAPE", detail=f"condition must be {expected}, got {tuple(cond.image.shape)}")


def predict_eps(model: GeoForgeModel, x_t: torch.Tensor, t: int | torch.Tensor, cond: Conditioning) -> torch.Tensor:
    """ε̂ = ε_θ(x_t, t, c)。cond.image が None ならコントロールブランチを通さない。"""

    steps = torch.as_tensor(t, dtype=torch.long)
    if steps.ndim == 0:
        steps = steps.repeat(x_t.shape[0])
    _check_shapes(model, x_t, steps, cond)
    dtype = x_t.dtype
    return model(
        x_t,
        steps.to(dtype),
        cond.lon.to(dtype),
        cond.lat.to(dtype),
        cond.c_text.to(dtype),
        None if cond.image is None else cond.image.to(dtype),
    )


# -- 学習 ----------------------------------------------------------------------------
@dataclass(slots=True)
class TrainState:
    model: GeoForgeModel
    optimizer: torch.optim.Adam
    generator: torch.Generator
    seed: int = 0
    step: int = 0
    losses: list[float] = field(default_factory=list)


def new_train_state(model: GeoForgeModel, settings: TrainSettings) -> TrainState:
    optimizer = torch.optim.Adam(model.parameters(), lr=settings.lr, betas=tuple(settings.betas), weight_decay=0.0)
    generator = torch.Generator().manual_seed(int(settings.seed))
    return TrainState(model=model, optimizer=optimizer, generator=generator, seed=int(settings.seed))


def train_step(
    state: TrainState,
    batch: DiffusionBatch,
    sched: NoiseSchedule,
    *,
    eps_hook: EpsHook | None = None,
) -> float:
    """1 ステップ分の ε-MSE 最適化。t と ε は state.generator から引く。"""

    if batch.x0 is None or len(batch) == 0:
        raise app_error("E-MODEL-SHAPE", detail="training batch must be non-empty and carry targets")
    x0 = batch.x0
    n = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (n,), generator=state.generator)
    eps = torch.randn(x0.shape, generator=state.generator, dtype=x0.dtype)
    x_t = forward_diffuse(x0, t, eps, sched)

    state.model.train()
    out = predict_eps(state.model, x_t, t, batch.cond)
    if eps_hook is not None:
        out = eps_hook(eps, out)
    loss = torch.mean((eps - out) ** 2)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise app_error(
            "E-TRAIN-NONFINITE",
            detail=f"step {state.step + 1}: loss={value}, t range [{int(t.min())}, {int(t.max())}]",
        )
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    state.losses.append(value)
    return value


# -- サンプリング --------------------------------------------------------------------
def ddim_timesteps(steps: int | Sequence[int], T: int) -> list[int]:
    """整数なら [T, 1] を等間隔に刻む。列なら 1..T の狭義減少で 1 で終わることを検証する。"""

    if isinstance(steps, (int, np.integer)):
        n = int(steps)
        if not 1 <= n <= T:
            raise app_error("E-SAMPLE-STEPS", detail=f"step count {n} outside [1, {T}]")
        if n == 1:
            return [1]
        grid = np.rint(np.linspace(T, 1, n)).astype(int)
        seq = sorted({int(v) for v in grid}, reverse=True)
    else:
        seq = [int(v) for v in steps]
    if not seq or seq[-1] != 1:
        raise app_error("E-SAMPLE-STEPS", detail=f"steps must end at 1: {seq[:5]}...")
    if seq[0] > T or any(a <= b for a, b in zip(seq, seq[1:])):
        raise app_error("E-SAMPLE-STEPS", detail=f"steps must be strictly decreasing within [1, {T}]")
    return seq


@dataclass(slots=True)
class SampleOutput:
    latent: torch.Tensor
    images: list[np.ndarray]


def _initial_noise(shape: tuple[int, ...], seed: int | Sequence[int], dtype: torch.dtype) -> torch.Tensor:
    if isinstance(seed, (int, np.integer)):
        return torch.randn(shape, generator=torch.Generator().manual_seed(int(seed)), dtype=dtype)
    seeds = list(seed)
    if len(seeds) != shape[0]:
        raise app_error("E-MODEL-SHAPE", detail=f"{len(seeds)} seeds for a batch of {shape[0]}")
    rows = [torch.randn((1, *shape[1:]), generator=torch.Generator().manual_seed(int(s)), dtype=dtype) for s in seeds]
    return torch.cat(rows, dim=0)


@torch.no_grad()
def ddim_sample(
    model: GeoForgeModel | None,
    sched: NoiseSchedule,
    cond: Conditioning,
    steps: int | Sequence[int],
    seed: int | Sequence[int],
    *,
    size: int | None = None,
    eps_fn: EpsFn | None = None,
    x_init: torch.Tensor | None = None,
    dtype: torch.dtype = torch.float32,
) -> SampleOutput:
    """決定的 DDIM (η=0)。seed が列ならサンプルごとに独立の乱数列で初期ノイズを引く。"""

    seq = ddim_timesteps(steps, sched.T)
    if size is None:
        if cond.image is None:
            raise app_error("E-MODEL-SHAPE", detail="size is required when sampling without a condition image")
        size = int(cond.image.shape[-1])
    channels = model.model_settings.image_channels if model is not None else 1
    shape = (cond.batch_size, channels, size, size)
    x = x_init.to(dtype) if x_init is not None else _initial_noise(shape, seed, dtype)
    if model is not None:
        model.eval()

    for i, t in enumerate(seq):
        t_prev = seq[i + 1] if i + 1 < len(seq) else 0
        eps = eps_fn(x, t) if eps_fn is not None else predict_eps(model, x, t, cond)
        ab = sched.alpha_bar(t)
        ab_prev = sched.alpha_bar(t_prev)
        x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps

    latent = torch.clamp(x, -1.0, 1.0)
    images = [from_model_output(sample.detach().cpu().numpy()) for sample in latent]
    return SampleOutput(latent=latent, images=images)


def sample_with_style(
    model: GeoForgeModel,
    sched: NoiseSchedule,
    samples: Mapping[TileId, TileSample],
    tiles: Sequence[TileId],
    style_city: str,
    *,
    steps: int | Sequence[int],
    seeds: Sequence[int],
    ablation: Ablation = Ablation(),
) -> SampleOutput:
    """条件画像とメタデータは対象タイル、キャプションの都市トークンだけ style_city にして生成する。"""

    unknown = [str(t) for t in tiles if t not in samples]
    if unknown:
        raise app_error("E-TILE-UNKNOWN", detail=", ".join(unknown[:10]))
    styled = []
    for t in tiles:
        sample = samples[t]
        caption = rewrite_city(sample.caption, sample.city, style_city)
        styled.append(TileSample(sample.tile, sample.center, caption, city_token(style_city), sample.condition, sample.target))
    cond = make_conditioning(styled, model.condition_settings.text_dim, ablation)
    logger.info("Sampling %d tiles in the style of %s (%s)", len(styled), style_city, ablation.label)
    return ddim_sample(model, sched, cond, steps, list(seeds))
