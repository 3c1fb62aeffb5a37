"""自動微分の勾配を中心差分と突き合わせる。モデルは float64 で渡すこと。"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4
DEFAULT_TOLERANCE = 1e-3
_FLOOR = 1e-6


@dataclass(slots=True)
class GradCheckResult:
    layer_type: str
    checked: int
    max_rel_error: float
    worst: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < DEFAULT_TOLERANCE


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), _FLOOR)


def _parameters_by_layer_type(model: nn.Module) -> dict[str, list[tuple[str, nn.Parameter]]]:
    groups: dict[str, list[tuple[str, nn.Parameter]]] = defaultdict(list)
    for module_name, module in model.named_modules():
        for param_name, param in module.named_parameters(recurse=False):
            if param.requires_grad:
                full = f"{module_name}.{param_name}" if module_name else param_name
                groups[type(module).__name__].append((full, param))
    return dict(groups)


def gradient_check(
    model: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    *,
    per_type: int = 64,
    h: float = DEFAULT_STEP,
    seed: int = 0,
) -> list[GradCheckResult]:
    """層の種類 (モジュールのクラス) ごとに per_type 個の要素を選び、相対誤差の最大値を返す。

    loss_fn は呼び出しごとに同じ入力 (t, ε を含む) で損失を計算すること。
    """

    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    results: list[GradCheckResult] = []
    for layer_type, params in sorted(_parameters_by_layer_type(model).items()):
        sizes = np.array([p.numel() for _, p in params])
        total = int(sizes.sum())
        picks = rng.choice(total, size=min(per_type, total), replace=False)
        bounds = np.cumsum(sizes)
        worst, worst_name = 0.0, ""
        for flat in np.sort(picks):
            which = int(np.searchsorted(bounds, flat, side="right"))
            name, param = params[which]
            index = int(flat - (bounds[which] - sizes[which]))
            grad = param.grad
            analytic = 0.0 if grad is None else float(grad.reshape(-1)[index])
            view = param.data.reshape(-1)
            original = float(view[index])
            with torch.no_grad():
                view[index] = original + h
                plus = float(loss_fn())
                view[index] = original - h
                minus = float(loss_fn())
                view[index] = original
            numeric = (plus - minus) / (2.0 * h)
            err = relative_error(analytic, numeric)
            if err >= worst:
                worst, worst_name = err, f"{name}[{index}]"
        results.append(GradCheckResult(layer_type, len(picks), worst, worst_name))
        logger.info("Gradient check %s: %d entries, max rel error %.3e at %s", layer_type, len(picks), worst, worst_name)
    return results
