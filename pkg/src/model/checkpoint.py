"""学習状態のバイナリコンテナ。

レイアウト (リトルエンディアン):

    b"GEOFORGE"            マジック 8 バイト
    u32                    バージョン
    u64                    ヘッダ長 N
    N バイト               UTF-8 JSON ヘッダ (設定・スケジュール・テンソル目録・ステップ・損失履歴・RNG 位置)
    float64[...]           テンソル本体 (目録の offset / count 順)
    bytes                  torch.Generator の状態

オプティマイザのモーメントは ``optim.<パラメータ名>.exp_avg`` のような名前でテンソル本体に含める。
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from domain.errors import AppError, app_error
from domain.settings import ConditionSettings, ModelSettings
from model.diffusion import NoiseSchedule, TrainState, make_schedule
from model.unet import GeoForgeModel

logger = logging.getLogger(__name__)

MAGIC = b"GEOFORGE"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_OPTIM_KEYS = ("exp_avg", "exp_avg_sq", "step")


def _as_f64_bytes(tensor: torch.Tensor) -> bytes:
    return np.ascontiguousarray(tensor.detach().cpu().to(torch.float64).numpy(), dtype="<f8").tobytes()


def _optimizer_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    names = [name for name, _ in state.model.named_parameters()]
    opt_state = state.optimizer.state_dict()["state"]
    tensors: dict[str, torch.Tensor] = {}
    for index, entry in sorted(opt_state.items()):
        for key in _OPTIM_KEYS:
            if key in entry:
                tensors[f"optim.{names[index]}.{key}"] = torch.as_tensor(entry[key])
    return tensors


def save_checkpoint(path: Path, state: TrainState, schedule: NoiseSchedule) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = state.model
    tensors: dict[str, torch.Tensor] = dict(model.state_dict())
    tensors.update(_optimizer_tensors(state))

    directory = []
    chunks: list[bytes] = []
    offset = 0
    for name, tensor in tensors.items():
        data = _as_f64_bytes(tensor)
        count = int(tensor.numel())
        directory.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": count})
        chunks.append(data)
        offset += count
    rng = state.generator.get_state().numpy().tobytes()

    groups = []
    for group in state.optimizer.state_dict()["param_groups"]:
        groups.append({key: (list(value) if isinstance(value, tuple) else value) for key, value in group.items() if key != "params"})
    header = {
        "config": {
            "condition": asdict(model.condition_settings),
            "model": asdict(model.model_settings),
            "shared_metadata": model.shared_metadata,
            "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        },
        "schedule": schedule.as_dict(),
        "tensors": directory,
        "step": state.step,
        "seed": state.seed,
        "losses": state.losses,
        "optimizer": {"param_groups": groups},
        "rng": {"offset": offset * 8, "length": len(rng)},
    }
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for chunk in chunks:
            fh.write(chunk)
        fh.write(rng)
    logger.info("Saved checkpoint %s at step %d (%d tensors)", path, state.step, len(directory))
    return path


def _settings_from(payload: dict, cls: type) -> object:
    values = dict(payload)
    for key, value in values.items():
        if isinstance(value, list):
            values[key] = tuple(value)
    return cls(**values)


def load_checkpoint(path: Path) -> tuple[TrainState, NoiseSchedule]:
    """save_checkpoint の逆。モデル・Adam の状態・乱数状態・損失履歴まで復元する。"""

    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise app_error("E-PATH-NOTFOUND", detail=str(exc), subject=str(path)) from exc

    def broken(detail: str) -> AppError:
        return app_error("E-CKPT-FORMAT", detail=detail, subject=str(path))

    if len(blob) < _PREFIX.size:
        raise broken("file too short")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise broken(f"bad magic {magic!r}")
    if version != VERSION:
        raise broken(f"unsupported version {version}")
    body_start = _PREFIX.size + header_len
    try:
        header = json.loads(blob[_PREFIX.size : body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise broken(f"unreadable header: {exc}") from exc

    try:
        config = header["config"]
        condition = _settings_from(config["condition"], ConditionSettings)
        settings = _settings_from(config["model"], ModelSettings)
        model = GeoForgeModel(condition, settings, shared_metadata=bool(config["shared_metadata"]))
        if config.get("dtype") == "float64":
            model = model.double()
        sched_info = header["schedule"]
        schedule = make_schedule(int(sched_info["T"]), float(sched_info["beta_start"]), float(sched_info["beta_end"]), sched_info["kind"])
        directory = header["tensors"]
        rng_info = header["rng"]
    except (KeyError, TypeError) as exc:
        raise broken(f"missing header field {exc}") from exc

    total = sum(int(entry["count"]) for entry in directory)
    if len(blob) < body_start + total * 8 + int(rng_info["length"]):
        raise broken("truncated tensor data")
    values = np.frombuffer(blob, dtype="<f8", count=total, offset=body_start)
    tensors: dict[str, torch.Tensor] = {}
    for entry in directory:
        start, count = int(entry["offset"]), int(entry["count"])
        array = values[start : start + count].reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(array)

    param_dtype = next(model.parameters()).dtype
    model_state = {name: tensor.to(param_dtype) for name, tensor in tensors.items() if not name.startswith("optim.")}
    missing = set(model.state_dict()) - set(model_state)
    if missing:
        raise broken(f"missing tensors {sorted(missing)[:5]}")
    try:
        model.load_state_dict(model_state)
    except RuntimeError as exc:
        raise broken(str(exc)) from exc

    groups = header["optimizer"]["param_groups"]
    first = groups[0]
    optimizer = torch.optim.Adam(model.parameters(), lr=float(first["lr"]), betas=tuple(first["betas"]), weight_decay=float(first.get("weight_decay", 0.0)))
    names = [name for name, _ in model.named_parameters()]
    opt_state: dict[int, dict[str, torch.Tensor]] = {}
    for index, name in enumerate(names):
        entry = {key: tensors[f"optim.{name}.{key}"] for key in _OPTIM_KEYS if f"optim.{name}.{key}" in tensors}
        if not entry:
            continue
        if "step" in entry:
            entry["step"] = entry["step"].to(torch.float32).reshape(())
        opt_state[index] = entry
    restored_groups = []
    cursor = 0
    for group, live in zip(groups, optimizer.state_dict()["param_groups"]):
        restored = {key: (tuple(value) if key == "betas" else value) for key, value in group.items()}
        restored["params"] = list(range(cursor, cursor + len(live["params"])))
        cursor += len(live["params"])
        restored_groups.append(restored)
    optimizer.load_state_dict({"state": opt_state, "param_groups": restored_groups})

    rng_start = body_start + int(rng_info["offset"])
    rng_bytes = blob[rng_start : rng_start + int(rng_info["length"])]
    generator = torch.Generator()
    generator.set_state(torch.frombuffer(bytearray(rng_bytes), dtype=torch.uint8).clone())

    state = TrainState(
        model=model,
        optimizer=optimizer,
        generator=generator,
        seed=int(header.get("seed", 0)),
        step=int(header["step"]),
        losses=[float(v) for v in header.get("losses", [])],
    )
    logger.info("Loaded checkpoint %s at step %d", path, state.step)
    return state, schedule
