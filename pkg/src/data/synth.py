#!/usr/bin/env python3
"""
synth.py
========

合成シナリオ生成
---------------------------
両終端から交互に発車し、各駅（= TSS 位置）で停車しながら終端間を往復する。
駅間は台形速度パターン（加速 -> 惰行 -> 減速）:

    加速: P = min(m a v, p_tract_max)
    惰行: P ≈ 0
    減速: P = max(−m b v, p_regen_max)（回生）

停車時間は [dwell_min_s, dwell_max_s] の一様乱数。seed 固定で完全に再現する。
mirrored=True では逆方向の車両が相方の時刻表を鏡写しにたどる（方向バランス）。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from src.core.errors import ScenarioError
from src.core.topology import LineModel, Snapshot

from .scenario import Scenario

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

MIN_HEADWAY_S = 120.0      # 2 min


@dataclass(frozen=True)
class SynthesisParams:
    n_vehicles: int = 46
    headway_s: float = 120.0
    duration_s: float = 5439.0
    dt: float = 1.0
    dwell_min_s: float = 30.0
    dwell_max_s: float = 45.0
    mass_t: float = 280.0
    accel: float = 1.0           # m/s²
    decel: float = 1.2           # m/s²
    v_max: float = 22.2          # m/s
    coast_mw: float = 0.0
    p_tract_max: Optional[float] = None
    p_regen_max: Optional[float] = None
    mirrored: bool = False
    seed: int = 1


@dataclass(frozen=True)
class _Run:
    """駅間 1 区間の走行。距離 m、時間 s。"""

    t0: float
    x0: float          # km
    direction: int
    v_peak: float
    t_acc: float
    t_cruise: float
    t_brake: float

    @property
    def t1(self) -> float:
        return self.t0 + self.t_acc + self.t_cruise + self.t_brake


def _run_profile(dist_m: float, p: SynthesisParams) -> Tuple[float, float, float, float]:
    """(v_peak, t_acc, t_cruise, t_brake)。短い区間は三角パターンに落とす。"""
    a, b = p.accel, p.decel
    v = p.v_max
    if v * v / (2 * a) + v * v / (2 * b) > dist_m:
        v = math.sqrt(2.0 * dist_m * a * b / (a + b))
    t_acc, t_brake = v / a, v / b
    cruise_m = dist_m - v * v / (2 * a) - v * v / (2 * b)
    return v, t_acc, max(cruise_m, 0.0) / v, t_brake


def _validate(p: SynthesisParams, line: LineModel) -> None:
    if p.n_vehicles < 1:
        raise ScenarioError("n_vehicles must be at least 1")
    if p.headway_s < MIN_HEADWAY_S:
        raise ScenarioError(f"headway {p.headway_s} s below the {MIN_HEADWAY_S} s minimum")
    if p.headway_s <= p.dwell_max_s:
        raise ScenarioError(f"headway {p.headway_s} s must exceed the longest dwell {p.dwell_max_s} s")
    if not 0 < p.dwell_min_s <= p.dwell_max_s:
        raise ScenarioError("dwell range must satisfy 0 < dwell_min_s <= dwell_max_s")
    if p.dt <= 0 or p.duration_s <= 0:
        raise ScenarioError("dt and duration_s must be positive")
    if min(p.accel, p.decel, p.v_max, p.mass_t) <= 0:
        raise ScenarioError("vehicle kinematics must be positive")
    if p.p_tract_max is not None and p.p_tract_max > line.p_tract_max:
        raise ScenarioError(f"p_tract_max {p.p_tract_max} MW above the line envelope {line.p_tract_max}")
    if p.p_regen_max is not None and p.p_regen_max < line.p_regen_max:
        raise ScenarioError(f"p_regen_max {p.p_regen_max} MW below the line envelope {line.p_regen_max}")


def _timetable(
    stations: np.ndarray, start_end: int, depart: float, dwells: np.ndarray, p: SynthesisParams
) -> List[_Run]:
    """終端 start_end（0 = 左, 1 = 右）から往復する走行区間のリスト"""
    runs: List[_Run] = []
    n = len(stations)
    idx = 0 if start_end == 0 else n - 1
    direction = 1 if start_end == 0 else -1
    t = depart
    k = 0
    while t < p.duration_s:
        nxt = idx + direction
        if nxt < 0 or nxt >= n:
            direction = -direction
            nxt = idx + direction
        dist_m = abs(stations[nxt] - stations[idx]) * 1000.0
        v, ta, tc, tb = _run_profile(dist_m, p)
        run = _Run(t, float(stations[idx]), direction, v, ta, tc, tb)
        runs.append(run)
        t = run.t1 + dwells[k % len(dwells)]
        idx = nxt
        k += 1
    return runs


def _state(
    runs: List[_Run], starts: np.ndarray, t: float, p: SynthesisParams, p_tract: float, p_regen: float
) -> Tuple[float, float]:
    """時刻 t の (位置 km, 電力 MW)。starts は各 run の t0。"""
    i = int(np.searchsorted(starts, t, side="right")) - 1
    run = runs[i]
    tau = t - run.t0
    m_kg = p.mass_t * 1000.0
    if tau >= run.t1 - run.t0:
        # 停車中
        s = run.v_peak**2 / (2 * p.accel) + run.v_peak * run.t_cruise + run.v_peak**2 / (2 * p.decel)
        return run.x0 + run.direction * s / 1000.0, 0.0
    if tau < run.t_acc:
        v = p.accel * tau
        s = 0.5 * p.accel * tau**2
        power = min(m_kg * p.accel * v / 1e6, p_tract)
    elif tau < run.t_acc + run.t_cruise:
        s = run.v_peak**2 / (2 * p.accel) + run.v_peak * (tau - run.t_acc)
        power = p.coast_mw
    else:
        tb = tau - run.t_acc - run.t_cruise
        v = run.v_peak - p.decel * tb
        s = (
            run.v_peak**2 / (2 * p.accel)
            + run.v_peak * run.t_cruise
            + run.v_peak * tb
            - 0.5 * p.decel * tb**2
        )
        power = max(-m_kg * p.decel * v / 1e6, p_regen)
    return run.x0 + run.direction * s / 1000.0, power


def synthesize_scenario(line: LineModel, params: Optional[SynthesisParams] = None) -> Scenario:
    """
    Raises
    ------
    ScenarioError
        headway が最小値未満、または最長停車時間以下。
    """
    p = params or SynthesisParams()
    _validate(p, line)
    rng = np.random.default_rng(p.seed)
    p_tract = line.p_tract_max if p.p_tract_max is None else p.p_tract_max
    p_regen = line.p_regen_max if p.p_regen_max is None else p.p_regen_max

    stations = np.asarray(line.positions, dtype=float)
    n_dwell = int(math.ceil(p.duration_s / p.dwell_min_s)) + 1
    ids = [f"V{k + 1:02d}" for k in range(p.n_vehicles)]

    tables: List[List[_Run]] = []
    mirror: List[bool] = []
    shared = np.empty(0)
    for k in range(p.n_vehicles):
        depart = (k // 2) * p.headway_s
        start_end = k % 2
        if p.mirrored and start_end == 1:
            # 相方（k-1）と同じ停車時間列を鏡写しでたどる
            dwells = shared
            runs = _timetable(stations, 0, depart, dwells, p)
            mirror.append(True)
        else:
            dwells = rng.uniform(p.dwell_min_s, p.dwell_max_s, size=n_dwell)
            shared = dwells
            runs = _timetable(stations, start_end, depart, dwells, p)
            mirror.append(False)
        tables.append(runs)

    late = [vid for vid, runs in zip(ids, tables) if not runs]
    if late:
        logger.info(f"[Synth] {len(late)} vehicles depart after {p.duration_s:.0f} s and are left out")
        kept = [k for k, runs in enumerate(tables) if runs]
        ids = [ids[k] for k in kept]
        tables = [tables[k] for k in kept]
        mirror = [mirror[k] for k in kept]
    starts = [np.array([r.t0 for r in runs]) for runs in tables]

    times = np.arange(0.0, p.duration_s, p.dt)
    lo, hi = stations[0], stations[-1]
    snapshots = []
    for t in times:
        recs = []
        for vid, runs, t0s, flip in zip(ids, tables, starts, mirror):
            if t < runs[0].t0:
                continue
            x, power = _state(runs, t0s, float(t), p, p_tract, p_regen)
            if flip:
                x = lo + hi - x
            recs.append((vid, float(np.clip(round(x, 6), 0.0, line.length)), round(power, 6)))
        snapshots.append(Snapshot.from_records(float(t), recs))

    scn = Scenario(tuple(snapshots), p.dt, tuple(ids), f"synthesized seed={p.seed}", p.seed)
    logger.info(
        f"[Synth] {p.n_vehicles} vehicles, headway {p.headway_s:.0f} s, "
        f"{len(snapshots)} snapshots (seed {p.seed}{', mirrored' if p.mirrored else ''})"
    )
    return scn
