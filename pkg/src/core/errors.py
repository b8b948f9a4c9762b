#!/usr/bin/env python3
"""
errors.py
=========

ソルバ、サイクル実行、CLI で共有する例外。
"""

from __future__ import annotations

from typing import Optional


class ConfigError(ValueError):
    """路線設定の不正。`field` は問題のキー名"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ScenarioError(ValueError):
    """シナリオ入力の不正。`row` は分かれば CSV の行番号（1 始まり）"""

    def __init__(self, message: str, row: Optional[int] = None):
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(prefix + message)
        self.row = row


class PowerFlowDivergence(RuntimeError):
    """定電力反復の発散（回路網が運べる以上の負荷）"""


class InfeasibleSnapshot(RuntimeError):
    """この時刻に運転制約を満たす電圧指令がない"""
