#!/usr/bin/env python3
"""
運転サイクル再生エンジン

Scenario と LineModel を受け取り、各スナップショットを指定手法で解いて
CycleMetrics と時刻ごとの記録 DataFrame を返す。

    quasi    : quasi_opf
    ref      : solve_opf（縮約空間バリア法）
    baseline : 全 TSS を u_tss_max 一定にした無制御の比較対象

解けなかった時刻は status="failed" として残し、集計からは除外する。
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from src.core.errors import InfeasibleSnapshot, PowerFlowDivergence
from src.core.powerflow import PowerFlowSolution, exported_power, solution_cost, solve_constant_power
from src.core.quasiopf import QuasiOpfOptions, quasi_opf
from src.core.topology import LineModel, Snapshot, StructuralMatrices, assemble_snapshot, structural_matrices
from src.data.scenario import Scenario
from src.monitor.constraint_guard import ConstraintGuard
from src.monitor.stats_tracker import CycleMetrics, CycleStatsTracker

from .refopf import OpfOptions, solve_opf

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

METHODS = ("quasi", "ref", "baseline")


@dataclass(frozen=True)
class InstantResult:
    solution: PowerFlowSolution
    iterations: int
    lam: float = 1.0
    curtailment: float = 0.0


@dataclass(frozen=True)
class CycleResult:
    metrics: CycleMetrics
    records: pd.DataFrame


def solve_instant(
    line: LineModel,
    snap: Snapshot,
    method: str,
    *,
    mats: Optional[StructuralMatrices] = None,
    quasi_opts: Optional[QuasiOpfOptions] = None,
    opf_opts: Optional[OpfOptions] = None,
) -> InstantResult:
    """1 時刻を指定手法で解く。例外はそのまま上げる。"""
    if method == "quasi":
        res = quasi_opf(line, snap, quasi_opts, mats=mats)
        return InstantResult(res.solution, res.iterations, res.lam, float(res.order.curtailment.sum()))
    if method == "ref":
        res = solve_opf(line, snap, opf_opts)
        return InstantResult(res.solution, res.iterations)
    if method == "baseline":
        net = assemble_snapshot(line, snap)
        sol = solve_constant_power(net, np.full(line.n_tss, line.u_tss_max))
        return InstantResult(sol, sol.iterations)
    raise ValueError(f"unknown method '{method}' (expected one of {', '.join(METHODS)})")


def _failed_record(t: float, elapsed: float, exc: Exception) -> Dict:
    return {"time_s": t, "status": "failed", "solve_time_s": elapsed, "error": f"{type(exc).__name__}: {exc}"}


def evaluate_instant(
    line: LineModel,
    snap: Snapshot,
    method: str,
    mats: Optional[StructuralMatrices] = None,
    quasi_opts: Optional[QuasiOpfOptions] = None,
    opf_opts: Optional[OpfOptions] = None,
    guard: Optional[ConstraintGuard] = None,
) -> Dict:
    """
    1 時刻分の記録 dict。InfeasibleSnapshot / PowerFlowDivergence は failed として返す。
    guard を渡せば違反はその guard に積算される。
    """
    t0 = time.perf_counter()
    try:
        out = solve_instant(line, snap, method, mats=mats, quasi_opts=quasi_opts, opf_opts=opf_opts)
    except (InfeasibleSnapshot, PowerFlowDivergence) as exc:
        elapsed = time.perf_counter() - t0
        logger.warning(f"[Cycle] {method} t={snap.time}: {exc}")
        return _failed_record(snap.time, elapsed, exc)
    elapsed = time.perf_counter() - t0

    sol = out.solution
    guard = guard if guard is not None else ConstraintGuard(line)
    violations = guard.check(sol)
    has_veh = sol.net.n_vehicles > 0
    return {
        "time_s": snap.time,
        "status": "ok",
        "p_cost_mw": solution_cost(sol),
        "loss_mw": sol.total_loss,
        "regen_mw": float(np.sum(np.maximum(-sol.vehicle_powers, 0.0))),
        "exported_mw": exported_power(sol),
        "curtailment_mw": out.curtailment,
        "tss_u_min": float(sol.u_tss.min()),
        "tss_u_max": float(sol.u_tss.max()),
        "veh_u_min": float(sol.u_veh.min()) if has_veh else np.nan,
        "veh_u_max": float(sol.u_veh.max()) if has_veh else np.nan,
        "max_vsc_mw": float(sol.tss_powers.max()),
        "solve_time_s": elapsed,
        "iterations": out.iterations,
        "violations": len(violations),
        "lam": out.lam,
        "error": "",
    }


def _worker(args: Tuple) -> Dict:
    line, snap, method, quasi_opts, opf_opts = args
    return evaluate_instant(line, snap, method, None, quasi_opts, opf_opts)


def run_cycle(
    line: LineModel,
    scenario: Scenario,
    method: str = "quasi",
    *,
    workers: int = 1,
    quasi_opts: Optional[QuasiOpfOptions] = None,
    opf_opts: Optional[OpfOptions] = None,
) -> CycleResult:
    """
    Returns
    -------
    CycleResult
        metrics と時刻順の records。workers に依らず同じ結果。
    """
    if method not in METHODS:
        raise ValueError(f"unknown method '{method}' (expected one of {', '.join(METHODS)})")

    tracker = CycleStatsTracker(method, scenario.dt)
    guard = ConstraintGuard(line)
    if workers > 1 and len(scenario) > 1:
        jobs = [(line, snap, method, quasi_opts, opf_opts) for snap in scenario.snapshots]
        chunk = max(1, len(jobs) // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_worker, jobs, chunksize=chunk):
                if rec["status"] == "ok":
                    guard.tally(rec["violations"])
                tracker.add(rec)
    else:
        mats = structural_matrices(line)
        for snap in scenario.snapshots:
            tracker.add(evaluate_instant(line, snap, method, mats, quasi_opts, opf_opts, guard))

    metrics = tracker.summary(guard)
    return CycleResult(metrics=metrics, records=tracker.frame())
