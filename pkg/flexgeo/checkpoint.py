# input:  [FlexGeoModel state dicts, RunConfig/ModelConfig, BandRegistry, tensor_io container codec]
# output: [Versioned binary checkpoints (named float64 little-endian tensor table) with a key=value config sidecar, plus loaders that rebuild an identical model]
# pos:    [Persistence layer for the training harness and the checkpoint-reload determinism check]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import torch

from errors import FlexGeoError
from geometry import BandGroup, BandRegistry
from model import FlexGeoModel
from schemas import ModelConfig, RunConfig
from tensor_io import (
    ContainerFormatError,
    read_container_header,
    read_records,
    write_container_header,
    write_records,
)

CHECKPOINT_MAGIC = b"FGCK"
CHECKPOINT_VERSION = 1
SIDECAR_SUFFIX = ".cfg"


class CheckpointFormatError(FlexGeoError):
    pass


@dataclass(frozen=True)
class LoadedCheckpoint:
    header: dict[str, Any]
    state: dict[str, torch.Tensor]
    settings: dict[str, str]

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(SIDECAR_SUFFIX)


def _flatten_settings(prefix: str, values: dict[str, Any]) -> list[tuple[str, str]]:
    lines: list[tuple[str, str]] = []
    for key, value in values.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            lines.extend(_flatten_settings(f"{name}.", value))
        elif value is None:
            continue
        elif isinstance(value, (tuple, list)):
            lines.append((name, ",".join(str(item) for item in value)))
        else:
            lines.append((name, str(value)))
    return lines


def write_sidecar(path: Path, cfg: RunConfig, model_cfg: ModelConfig) -> Path:
    data = cfg.model_dump()
    data["model"] = model_cfg.model_dump()
    lines = [f"{key} = {value}" for key, value in _flatten_settings("", data)]
    target = sidecar_path(path)
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return target


def read_sidecar(path: Path) -> dict[str, str]:
    target = sidecar_path(path)
    if not target.exists():
        raise CheckpointFormatError("CHECKPOINT_SIDECAR_MISSING", f"Config sidecar {target} not found.")
    settings: dict[str, str] = {}
    for line_number, raw_line in enumerate(target.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        key, separator, value = line.partition("=")
        if not separator:
            raise CheckpointFormatError("CHECKPOINT_SIDECAR_INVALID", f"{target}:{line_number} is not key = value.")
        settings[key.strip()] = value.strip()
    return settings


def save_checkpoint(path: Path, model: FlexGeoModel, cfg: RunConfig, step: int = 0) -> Path:
    path = Path(path)
    header = {
        "kind": "flexgeo-checkpoint",
        "step": step,
        "dtype": str(model.dtype).replace("torch.", ""),
        "registry": [
            {
                "id": group.group_id,
                "sensor": group.sensor,
                "bands": list(group.bands),
                "gsd_m": group.gsd_m,
                "kind": group.kind,
            }
            for group in model.registry
        ],
    }
    records = [
        (name, tensor.detach().cpu().to(torch.float64).numpy())
        for name, tensor in model.state_dict().items()
    ]
    with path.open("wb") as handle:
        write_container_header(handle, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header)
        write_records(handle, records)
    write_sidecar(path, cfg, model.cfg)
    return path


def load_checkpoint(path: Path) -> LoadedCheckpoint:
    try:
        with Path(path).open("rb") as handle:
            header = read_container_header(handle, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
            records = read_records(handle)
    except ContainerFormatError as exc:
        raise CheckpointFormatError(exc.code.replace("CONTAINER", "CHECKPOINT"), f"{path}: {exc.message}") from exc
    if header.get("kind") != "flexgeo-checkpoint" or "registry" not in header:
        raise CheckpointFormatError("CHECKPOINT_HEADER_INVALID", f"{path}: header does not describe a checkpoint.")
    return LoadedCheckpoint(
        header=header,
        state={name: torch.from_numpy(values) for name, values in records.items()},
        settings=read_sidecar(path),
    )


def restore_model(path: Path, dtype: Optional[torch.dtype] = None) -> FlexGeoModel:
    loaded = load_checkpoint(path)
    try:
        registry = BandRegistry(
            groups=tuple(
                BandGroup(
                    group_id=int(entry["id"]),
                    sensor=str(entry["sensor"]),
                    bands=tuple(entry["bands"]),
                    gsd_m=float(entry["gsd_m"]),
                    kind=entry["kind"],
                )
                for entry in loaded.header["registry"]
            )
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError("CHECKPOINT_HEADER_INVALID", f"{path}: malformed registry table.") from exc
    model_settings = {
        key[len("model."):]: value for key, value in loaded.settings.items() if key.startswith("model.")
    }
    model = FlexGeoModel(ModelConfig(**model_settings), registry)
    target_dtype = dtype or getattr(torch, loaded.header.get("dtype", "float64"))
    model = model.to(target_dtype)
    state = {name: tensor.to(target_dtype) for name, tensor in loaded.state.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointFormatError(
            "CHECKPOINT_TENSORS_MISMATCH",
            f"{path}: missing {sorted(missing)}, unexpected {sorted(unexpected)}.",
        )
    return model
