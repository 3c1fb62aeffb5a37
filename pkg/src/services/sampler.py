"""学習済みチェックポイントからタイル画像を生成し、タイルディレクトリへ書き出す。"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from domain.errors import AppError, ensure_app_error
from domain.models import TileId, TileSample
from domain.settings import AppConfig
from geo.tilegrid import tile_path, tile_seed
from io_utils.tile_store import write_png
from model.batch import Ablation, make_conditioning
from model.checkpoint import load_checkpoint
from model.diffusion import NoiseSchedule, ddim_sample, sample_with_style
from model.unet import GeoForgeModel
from services.tile_dataset import load_split

logger = logging.getLogger(__name__)

GENERATED_KIND = "generated"


@dataclass(slots=True)
class SampleResult:
    written: dict[TileId, Path]
    errors: tuple[str, ...] = ()


@dataclass(slots=True)
class Sampler:
    config: AppConfig
    model: GeoForgeModel
    schedule: NoiseSchedule
    jobs: int = 1
    _errors: list[AppError] = field(default_factory=list, init=False, repr=False)

    @classmethod
    def from_checkpoint(cls, config: AppConfig, checkpoint: Path, *, jobs: int = 1) -> "Sampler":
        state, schedule = load_checkpoint(checkpoint)
        return cls(config=config, model=state.model, schedule=schedule, jobs=jobs)

    def _record_error(self, err: AppError) -> None:
        self._errors.append(err)
        logger.warning("Sampling failed: %s", err.for_log())

    # ------------------------------------------------------------------
    def generate_tile(
        self,
        sample: TileSample,
        *,
        steps: int | Sequence[int],
        seed: int,
        style_city: str | None = None,
        ablation: Ablation = Ablation(),
    ) -> np.ndarray:
        seeds = [tile_seed(seed, sample.tile)]
        if style_city is not None:
            return sample_with_style(
                self.model, self.schedule, {sample.tile: sample}, [sample.tile], style_city, steps=steps, seeds=seeds, ablation=ablation
            ).images[0]
        cond = make_conditioning([sample], self.model.condition_settings.text_dim, ablation)
        return ddim_sample(self.model, self.schedule, cond, steps, seeds).images[0]

    def generate(
        self,
        manifest: Path,
        out_dir: Path,
        *,
        split: str | None = "eval",
        tiles: Sequence[TileId] | None = None,
        style_city: str | None = None,
        ablation: Ablation = Ablation(),
        steps: int | Sequence[int] | None = None,
        seed: int | None = None,
        progress_callback: Callable[[int, int], None] | None = None,
    ) -> SampleResult:
        """split (または tiles) のタイルを 1 枚ずつ生成し ``{out_dir}/generated/z/x/y.png`` に保存する。"""

        steps = self.config.sample.ddim_steps if steps is None else steps
        seed = self.config.sample.seed if seed is None else int(seed)
        samples = load_split(manifest, split, jobs=self.jobs, with_target=False, tiles=tiles)
        self._errors.clear()
        out_dir = Path(out_dir)
        total = len(samples)
        logger.info(
            "Sampling %d tiles with %s DDIM steps, seed %d, style=%s, ablation=%s",
            total,
            steps if isinstance(steps, int) else len(steps),
            seed,
            style_city or "-",
            ablation.label,
        )

        written: dict[TileId, Path] = {}
        with ThreadPoolExecutor(max_workers=max(self.jobs, 1)) as exe:
            future_map = {
                exe.submit(self.generate_tile, s, steps=steps, seed=seed, style_city=style_city, ablation=ablation): s
                for s in samples
            }
            completed = 0
            for future in as_completed(future_map):
                sample = future_map[future]
                try:
                    image = future.result()
                    written[sample.tile] = write_png(tile_path(out_dir, GENERATED_KIND, sample.tile), image)
                except Exception as exc:
                    self._record_error(
                        ensure_app_error(exc, code="E-UNEXPECTED", message="タイルの生成に失敗しました").with_subject(str(sample.tile))
                    )
                completed += 1
                if progress_callback:
                    progress_callback(completed, total)

        ordered = {t: written[t] for t in sorted(written, key=lambda item: item.row_major_key())}
        logger.info("Sampling finished: %d written, %d errors", len(ordered), len(self._errors))
        return SampleResult(ordered, tuple(str(err) for err in self._errors))
