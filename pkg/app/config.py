"""Flat ``dotted.key = value`` configuration files."""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

from pydantic import ValidationError

from tacq.errors import ConfigError

from .schemas import SECTIONS, RunConfig

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "TACQ_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "runs"
_TOP_LEVEL = ("seed", "output_dir")


def parse_value(raw: str) -> object:
    """JSON scalars and lists where possible, plain strings otherwise."""

    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str) -> Dict[str, object]:
    """Parse config text into a flat mapping of dotted keys."""

    values: Dict[str, object] = {}
    lines: Dict[str, int] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError("Zeile ohne '='", line=number)
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if not key or not raw:
            raise ConfigError("Schlüssel oder Wert fehlt", key=key or None, line=number)
        if key in values:
            raise ConfigError(f"Schlüssel doppelt (zuerst in Zeile {lines[key]})", key=key, line=number)
        _check_key(key, number)
        values[key] = parse_value(raw)
        lines[key] = number
    return values


def _check_key(key: str, line: Optional[int] = None) -> None:
    if key in _TOP_LEVEL:
        return
    section, _, name = key.partition(".")
    model = SECTIONS.get(section)
    if model is None or not name or name not in model.__fields__:
        raise ConfigError("Unbekannter Schlüssel", key=key, line=line)


def build_config(values: Mapping[str, object], overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    """Validate flat values (plus overrides) against :class:`RunConfig`."""

    merged = dict(values)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        _check_key(key)
        merged[key] = value
    nested: Dict[str, Dict[str, object]] = {section: {} for section in SECTIONS}
    top: Dict[str, object] = {}
    for key, value in merged.items():
        if key in _TOP_LEVEL:
            top[key] = value
        else:
            section, _, name = key.partition(".")
            nested[section][name] = value
    try:
        return RunConfig(**nested, **top)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"Ungültige Konfiguration: {first['msg']}", key=key) from exc


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, object]] = None,
) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"Konfiguration {path} kann nicht gelesen werden: {exc}") from exc
    config = build_config(parse_config_text(text), overrides)
    logger.debug("Konfiguration geladen: %s", path or "<Standardwerte>")
    return config


def resolve_output_dir(config: RunConfig, cli_out: Optional[Union[str, Path]] = None) -> Path:
    """``--out`` beats the config file, which beats ``TACQ_OUTPUT_DIR``."""

    candidate = cli_out or config.output_dir or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR
    path = Path(candidate)
    path.mkdir(parents=True, exist_ok=True)
    return path


__all__ = [
    "OUTPUT_DIR_ENV",
    "parse_value",
    "parse_config_text",
    "build_config",
    "load_config",
    "resolve_output_dir",
]
