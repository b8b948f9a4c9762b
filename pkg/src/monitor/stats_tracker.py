#!/usr/bin/env python3
"""
CycleStatsTracker
=================

スナップショットごとの記録（dict）を受け取り、1 運転サイクル分の
- 購入電力量 (kWh)
- 回生電力量 / 系統返送量 (kWh)、回生利用率
- 電圧範囲、VSC 最大電力
- 計算時間、外側反復回数のヒストグラム

を pandas で集計する。回生利用率が STATS_WARN_RECUPERATION を下回れば WARN。
失敗したスナップショットは集計から除外し、件数だけ数える。
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from .constraint_guard import ConstraintGuard

# ------------------------  設定  ------------------------ #
STATS_WARN_RECUPERATION = float(os.getenv("STATS_WARN_RECUPERATION", 0.8))
RECUPERATION_DEFINITION = (
    "recuperated = regenerated - exported to AC; transmission losses and "
    "station auxiliary loads count as recuperated"
)
MWS_TO_KWH = 1000.0 / 3600.0

# ------------------------  ログ ------------------------ #
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

RECORD_COLUMNS = [
    "time_s",
    "status",
    "p_cost_mw",
    "loss_mw",
    "regen_mw",
    "exported_mw",
    "curtailment_mw",
    "tss_u_min",
    "tss_u_max",
    "veh_u_min",
    "veh_u_max",
    "max_vsc_mw",
    "solve_time_s",
    "iterations",
    "violations",
    "lam",
    "error",
]


@dataclass(frozen=True)
class CycleMetrics:
    method: str
    n_instants: int
    n_failed: int
    n_violations: int
    energy_cost_kwh: float
    regen_total_kwh: float
    regen_exported_kwh: float
    recuperation_rate: Optional[float]          # None = 回生なし（not applicable）
    loss_kwh: float
    tss_voltage_range: Tuple[float, float]
    vehicle_voltage_range: Tuple[float, float]
    max_vsc_power_mw: float
    mean_solve_time_s: float
    iteration_histogram: Dict[int, int] = field(default_factory=dict)
    n_checked: int = 0                          # guard が検査した時刻数
    recuperation_definition: str = RECUPERATION_DEFINITION

    def to_dict(self) -> dict:
        out = asdict(self)
        out["recuperation_rate"] = "n/a" if self.recuperation_rate is None else self.recuperation_rate
        out["iteration_histogram"] = {str(k): v for k, v in self.iteration_histogram.items()}
        return out


class CycleStatsTracker:
    """サイクル 1 本分の記録を集計します。"""

    def __init__(self, method: str, dt: float) -> None:
        self.method = method
        self.dt = dt
        self._records: List[Dict] = []

    # ------------------------  公開 API ------------------------ #

    def add(self, record: Dict) -> None:
        self._records.append(record)

    def extend(self, records: Iterable[Dict]) -> None:
        for rec in records:
            self.add(rec)

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self._records, columns=RECORD_COLUMNS)
        return df.sort_values("time_s", kind="mergesort").reset_index(drop=True)

    def summary(self, guard: Optional[ConstraintGuard] = None) -> CycleMetrics:
        """guard を渡せば違反件数はその積算値を使う（無ければ records の合計）。"""
        df = self.frame()
        ok = df[df["status"] == "ok"]
        n_failed = int((df["status"] != "ok").sum())

        energy = float(ok["p_cost_mw"].sum() * self.dt * MWS_TO_KWH)
        regen = float(ok["regen_mw"].sum() * self.dt * MWS_TO_KWH)
        exported = float(ok["exported_mw"].sum() * self.dt * MWS_TO_KWH)
        loss = float(ok["loss_mw"].sum() * self.dt * MWS_TO_KWH)
        rate = None
        if regen > 0:
            rate = float(np.clip((regen - exported) / regen, 0.0, 1.0))

        hist = ok["iterations"].astype(int).value_counts().sort_index()
        metrics = CycleMetrics(
            method=self.method,
            n_instants=len(df),
            n_failed=n_failed,
            n_violations=guard.n_violations if guard is not None else int(ok["violations"].sum()),
            energy_cost_kwh=energy,
            regen_total_kwh=regen,
            regen_exported_kwh=exported,
            recuperation_rate=rate,
            loss_kwh=loss,
            tss_voltage_range=_range(ok["tss_u_min"], ok["tss_u_max"]),
            vehicle_voltage_range=_range(ok["veh_u_min"], ok["veh_u_max"]),
            max_vsc_power_mw=float(ok["max_vsc_mw"].max()) if len(ok) else 0.0,
            mean_solve_time_s=float(ok["solve_time_s"].mean()) if len(ok) else 0.0,
            iteration_histogram={int(k): int(v) for k, v in hist.items()},
            n_checked=guard.n_checked if guard is not None else len(ok),
        )
        self._check_warn(metrics)
        return metrics

    # --------------------  内部処理 -------------------- #
    def _check_warn(self, m: CycleMetrics) -> None:
        rate_txt = "n/a" if m.recuperation_rate is None else f"{m.recuperation_rate:.2%}"
        logger.info(
            f"[Stats] {m.method}: {m.n_instants} instants, energy {m.energy_cost_kwh:.1f} kWh, "
            f"recuperation {rate_txt}, failed {m.n_failed}, violations {m.n_violations}"
        )
        if m.recuperation_rate is not None and m.recuperation_rate < STATS_WARN_RECUPERATION:
            logger.warning(f"[WARN] Recuperation rate {m.recuperation_rate:.2%} below {STATS_WARN_RECUPERATION:.0%}")
        if m.n_failed:
            logger.warning(f"[WARN] {m.n_failed} instant(s) excluded from the totals")


def _range(lo: pd.Series, hi: pd.Series) -> Tuple[float, float]:
    lo, hi = lo.dropna(), hi.dropna()
    if lo.empty or hi.empty:
        return (float("nan"), float("nan"))
    return (float(lo.min()), float(hi.max()))
