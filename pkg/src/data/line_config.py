#!/usr/bin/env python3
"""
line_config.py
==============

路線設定 JSON の読み書き
---------------------------
* load_line_config()  : JSON -> LineConfig（未知キーは ConfigError）
* save_line_config()  : LineConfig -> JSON（gen コマンドが幾何を書き出す用）

キー名は LineConfig のフィールド名と同一。単位は km, ohm/km, MW, kV。
"_comment" で始まるキーは説明用として読み飛ばす。
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Union

import numpy as np

from src.core.errors import ConfigError
from src.core.topology import LineConfig, LineModel, build_line

from .files import atomic_write_text

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

_FIELDS = {f.name for f in dataclasses.fields(LineConfig)}


def load_line_config(path: Union[str, Path]) -> LineConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"line config not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("<file>", f"{path}: top level must be an object")

    data = {k: v for k, v in raw.items() if not k.startswith("_comment")}
    unknown = sorted(set(data) - _FIELDS)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    if "tss_positions" not in data:
        raise ConfigError("tss_positions", "required key missing")

    cfg = LineConfig(**data)
    logger.info(f"[Config] loaded '{cfg.name}' ({len(cfg.tss_positions)} TSS) from {path}")
    return cfg


def load_line(path: Union[str, Path]) -> LineModel:
    """load_line_config + build_line"""
    return build_line(load_line_config(path))


def _plain(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    return value


def save_line_config(cfg: LineConfig, path: Union[str, Path]) -> Path:
    payload = {k: _plain(v) for k, v in dataclasses.asdict(cfg).items() if v is not None}
    return atomic_write_text(path, json.dumps(payload, indent=2))
