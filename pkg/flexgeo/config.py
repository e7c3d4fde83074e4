# input:  [Plain-text INI run files, environment variables, optional flexgeo/.env, pydantic RunConfig schemas and model presets]
# output: [Validated RunConfig loading with preset merging, output-directory resolution (CLI > FLEXGEO_OUT_DIR > file), and resolved_config.ini writing]
# pos:    [Configuration bootstrap used by every CLI subcommand before any computation starts]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

import configparser
import os
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from errors import FlexGeoError
from schemas import MODEL_PRESETS, RunConfig

BASE_DIR = Path(__file__).resolve().parent
ENVIRONMENT_VAR = "FLEXGEO_ENV"
OUT_DIR_VAR = "FLEXGEO_OUT_DIR"
SECTIONS = ("run", "model", "budget", "loss_weights", "train")
TUPLE_FIELDS = {("train", "group_ids")}
RESOLVED_CONFIG_NAME = "resolved_config.ini"


class ConfigError(FlexGeoError):
    pass


def load_environment() -> None:
    environment = os.getenv(ENVIRONMENT_VAR, "development")
    # Local .env lets FLEXGEO_OUT_DIR be set without touching run files.
    if environment == "development":
        env_local_path = BASE_DIR / ".env"
        if env_local_path.exists():
            load_dotenv(env_local_path)


def _parse_value(section: str, key: str, raw: str) -> Any:
    value = raw.strip()
    if value.lower() in {"none", ""}:
        return None
    if (section, key) in TUPLE_FIELDS or "," in value:
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


def _read_sections(path: Path) -> dict[str, dict[str, Any]]:
    if not path.exists():
        raise ConfigError("CONFIG_NOT_FOUND", f"Config file {path} does not exist.")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError("CONFIG_SYNTAX_INVALID", f"{path}: {exc}") from exc
    unknown = [name for name in parser.sections() if name not in SECTIONS]
    if unknown:
        raise ConfigError("CONFIG_SECTION_UNKNOWN", f"{path}: unknown sections {unknown}; expected {list(SECTIONS)}.")
    return {
        name: {key: _parse_value(name, key, raw) for key, raw in parser.items(name)}
        for name in parser.sections()
    }


def build_run_config(sections: dict[str, dict[str, Any]]) -> RunConfig:
    data: dict[str, Any] = {key: value for key, value in sections.get("run", {}).items() if value is not None}
    preset_name = str(data.get("model_preset", "desk"))
    if preset_name not in MODEL_PRESETS:
        raise ConfigError("CONFIG_PRESET_UNKNOWN", f"Unknown model_preset '{preset_name}'; choose from {sorted(MODEL_PRESETS)}.")
    model_values = MODEL_PRESETS[preset_name].model.model_dump()
    model_values.update({key: value for key, value in sections.get("model", {}).items() if value is not None})
    data["model"] = model_values
    for name in ("budget", "loss_weights", "train"):
        if name in sections:
            data[name] = {key: value for key, value in sections[name].items() if value is not None}
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError("CONFIG_INVALID", str(exc)) from exc


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    load_environment()
    sections = _read_sections(Path(path)) if path is not None else {}
    return build_run_config(sections)


def resolve_out_dir(cfg: RunConfig, cli_out: Optional[str] = None) -> Path:
    if cli_out:
        return Path(cli_out)
    env_out = os.getenv(OUT_DIR_VAR)
    if env_out:
        return Path(env_out)
    return Path(cfg.out_dir)


def _format_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(item) for item in value)
    return str(value)


def write_resolved_config(cfg: RunConfig, out_dir: Path) -> Path:
    data = cfg.model_dump()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {
        key: _format_value(value)
        for key, value in data.items()
        if key not in SECTIONS and value is not None
    }
    for name in SECTIONS[1:]:
        parser[name] = {key: _format_value(value) for key, value in data[name].items() if value is not None}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / RESOLVED_CONFIG_NAME
    with target.open("w", encoding="utf-8") as handle:
        parser.write(handle)
    return target
