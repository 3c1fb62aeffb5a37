"""デノイザ + コントロールブランチの学習サービス (単一プロセス・決定的)。"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import pandas as pd
import torch
from matplotlib.figure import Figure

from domain.errors import AppError
from domain.settings import AppConfig
from model.batch import Ablation, index_batch, make_batch
from model.checkpoint import load_checkpoint, save_checkpoint
from model.diffusion import NoiseSchedule, TrainState, new_train_state, schedule_from_settings, train_step
from model.unet import GeoForgeModel
from services.tile_dataset import load_split

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
LOSS_CSV = "loss_curve.csv"
LOSS_PNG = "loss_curve.png"


@dataclass(slots=True)
class TrainResult:
    state: TrainState
    schedule: NoiseSchedule
    checkpoint_path: Path
    loss_csv: Path
    loss_png: Path

    @property
    def losses(self) -> list[float]:
        return self.state.losses


def phase_for_step(phases: str, align_steps: int, step: int) -> str:
    """step は 0 始まり。two_phase では align_steps までが align、以降が control。"""

    if phases == "two_phase":
        return "align" if step < align_steps else "control"
    return "joint"


def configure_torch(num_threads: int) -> None:
    torch.set_num_threads(max(int(num_threads), 1))
    torch.use_deterministic_algorithms(True)


@dataclass(slots=True)
class Trainer:
    config: AppConfig
    jobs: int = 1

    def build_state(self) -> tuple[TrainState, NoiseSchedule]:
        torch.manual_seed(self.config.train.seed)
        model = GeoForgeModel(self.config.condition, self.config.model)
        logger.info("Initialized model with %d parameters", model.parameter_count())
        return new_train_state(model, self.config.train), schedule_from_settings(self.config.schedule)

    # ------------------------------------------------------------------
    def train(
        self,
        manifest: Path,
        out_dir: Path,
        *,
        ablation: Ablation = Ablation(),
        resume: Path | None = None,
        steps: int | None = None,
        progress_callback: Callable[[int, int, float], None] | None = None,
    ) -> TrainResult:
        settings = self.config.train
        total_steps = settings.steps if steps is None else int(steps)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        configure_torch(settings.num_threads)

        if resume is not None:
            state, schedule = load_checkpoint(resume)
            logger.info("Resuming from %s at step %d", resume, state.step)
        else:
            state, schedule = self.build_state()

        samples = load_split(manifest, "train", jobs=self.jobs)
        full = make_batch(samples, state.model.condition_settings.text_dim, ablation)
        n = len(samples)
        batch_size = min(settings.batch_size, n)
        logger.info(
            "Training on %d tiles: steps %d -> %d, batch %d, phases=%s, ablation=%s",
            n,
            state.step,
            total_steps,
            batch_size,
            settings.phases,
            ablation.label,
        )

        checkpoint_path = out_dir / CHECKPOINT_NAME
        phase = None
        try:
            while state.step < total_steps:
                current = phase_for_step(settings.phases, settings.align_steps, state.step)
                if current != phase:
                    state.model.set_phase(current)
                    phase = current
                    logger.info("Phase %s from step %d", phase, state.step + 1)
                index = torch.randint(0, n, (batch_size,), generator=state.generator)
                loss = train_step(state, index_batch(full, index), schedule)
                if state.step == 1 or state.step % max(settings.log_every, 1) == 0:
                    logger.info("step %d/%d loss %.6f", state.step, total_steps, loss)
                if progress_callback:
                    progress_callback(state.step, total_steps, loss)
        except AppError as err:
            logger.error("Training aborted: %s", err.for_log())
            self._write_loss_curve(state, out_dir)
            raise

        save_checkpoint(checkpoint_path, state, schedule)
        loss_csv, loss_png = self._write_loss_curve(state, out_dir)
        return TrainResult(state, schedule, checkpoint_path, loss_csv, loss_png)

    # -- 出力 -----------------------------------------------------------------------
    def _write_loss_curve(self, state: TrainState, out_dir: Path) -> tuple[Path, Path]:
        settings = self.config.train
        frame = pd.DataFrame(
            {
                "step": range(1, len(state.losses) + 1),
                "loss": state.losses,
                "phase": [phase_for_step(settings.phases, settings.align_steps, i) for i in range(len(state.losses))],
            }
        )
        csv_path = out_dir / LOSS_CSV
        frame.to_csv(csv_path, index=False, float_format="%.10g")

        png_path = out_dir / LOSS_PNG
        fig = Figure(figsize=(6, 3.5))
        ax = fig.subplots()
        if not frame.empty:
            ax.plot(frame["step"], frame["loss"], linewidth=0.8, color="#1f77b4", label="loss")
            window = max(len(frame) // 20, 1)
            ax.plot(frame["step"], frame["loss"].rolling(window, min_periods=1).mean(), color="#d62728", label=f"mean({window})")
            ax.set_yscale("log")
            ax.legend(loc="upper right")
        ax.set_xlabel("step")
        ax.set_ylabel("eps MSE")
        fig.tight_layout()
        fig.savefig(png_path, dpi=100)
        return csv_path, png_path

