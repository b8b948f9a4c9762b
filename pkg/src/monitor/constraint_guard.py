#!/usr/bin/env python3
"""
ConstraintGuard
===============

検証済みの潮流解について運用制約をチェックする。
- TSS 電力   : p_lower ≤ P_s ≤ p_lim
- TSS 電圧   : u_tss_min ≤ U_s ≤ u_tss_max
- 車両電圧   : u_veh_min ≤ U_v ≤ 0.90 kV（回生中は 0.95 kV）

違反があれば ERROR を出し、件数を積算する。
cycle_engine はサイクル 1 本につき 1 つの guard を使い、その積算値を CycleMetrics に渡す。
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import List

import numpy as np

from src.core.powerflow import PowerFlowSolution
from src.core.topology import LineModel

GUARD_P_TOL_MW = float(os.getenv("GUARD_P_TOL_MW", "1e-6"))
GUARD_V_TOL_KV = float(os.getenv("GUARD_V_TOL_KV", "1e-6"))

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


@dataclass(frozen=True)
class Violation:
    kind: str
    index: int          # TSS 番号 or チェーン順の車両番号（0 始まり）
    value: float
    bound: float

    def __str__(self) -> str:
        return f"{self.kind}@{self.index + 1} {self.value:.6g} vs {self.bound:.6g}"


class ConstraintGuard:
    """制約違反を数える。"""

    def __init__(self, line: LineModel, p_tol: float = GUARD_P_TOL_MW, v_tol: float = GUARD_V_TOL_KV):
        self._line = line
        self._p_tol = p_tol
        self._v_tol = v_tol
        self.n_checked = 0
        self.n_violations = 0

    def check(self, sol: PowerFlowSolution) -> List[Violation]:
        line = self._line
        found: List[Violation] = []

        def _collect(kind: str, values: np.ndarray, bounds, upper: bool, tol: float) -> None:
            bounds = np.broadcast_to(np.asarray(bounds, dtype=float), values.shape)
            bad = values > bounds + tol if upper else values < bounds - tol
            for k in np.flatnonzero(bad):
                found.append(Violation(kind, int(k), float(values[k]), float(bounds[k])))

        p = sol.tss_powers
        _collect("tss_power_max", p, line.p_lim, True, self._p_tol)
        _collect("tss_power_min", p, line.p_lower, False, self._p_tol)
        _collect("tss_voltage_max", sol.u_tss, line.u_tss_max, True, self._v_tol)
        _collect("tss_voltage_min", sol.u_tss, line.u_tss_min, False, self._v_tol)
        if len(sol.u_veh):
            _collect("vehicle_voltage_max", sol.u_veh, sol.vehicle_u_max, True, self._v_tol)
            _collect("vehicle_voltage_min", sol.u_veh, line.u_veh_min, False, self._v_tol)

        self.n_checked += 1
        if found:
            self.n_violations += len(found)
            logger.error(
                f"[Guard] t={sol.net.time}: {len(found)} violation(s): "
                + ", ".join(str(v) for v in found[:5])
            )
        return found

    def tally(self, n_found: int) -> None:
        """別プロセスで check 済みの 1 時刻分を件数だけ積算する。"""
        self.n_checked += 1
        self.n_violations += int(n_found)
