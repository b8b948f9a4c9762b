#!/usr/bin/env python3
"""
oracle.py
=========

小規模インスタンス用の総当たりオラクル
---------------------------------------
[u_tss_min, u_tss_max]^N の格子点を全部評価し、実行可能な中で
購入電力最小の点を返す。同点は辞書順で最小の U_s。

格子候補は K 列ずつまとめて定電力反復する（三重対角ソルバに多右辺で渡す）。
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.core.errors import InfeasibleSnapshot
from src.core.powerflow import (
    PF_MAX_ITER,
    PF_POWER_TOL_MW,
    PowerFlowSolution,
    ac_power,
    solve_constant_power,
    vehicle_voltages,
)
from src.core.topology import ChainNetwork, LineModel, Snapshot, assemble_snapshot

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

MAX_ORACLE_TSS = 4
CHUNK = 8192
FEAS_TOL = 1e-6


@dataclass(frozen=True)
class OracleResult:
    u_s_opt: np.ndarray
    objective: float
    solution: PowerFlowSolution
    n_evaluated: int
    n_feasible: int
    solve_time: float
    step_variation: float = 0.0    # 格子 1 ステップ隣での目的関数の最大変化 [MW]


def lattice(line: LineModel, step_v: float) -> np.ndarray:
    """1 軸分の格子（kV）。step は V 指定。"""
    if step_v <= 0:
        raise ValueError("lattice step must be positive")
    step = step_v / 1000.0
    return np.arange(line.u_tss_min, line.u_tss_max + step / 2, step)


def _interp_weights(net: ChainNetwork):
    tss_pos = net.node_positions[net.tss_nodes]
    seg = np.clip(np.searchsorted(tss_pos, net.vehicle_positions, side="right") - 1, 0, len(tss_pos) - 2)
    w = (net.vehicle_positions - tss_pos[seg]) / (tss_pos[seg + 1] - tss_pos[seg])
    return seg, np.clip(w, 0.0, 1.0)


def evaluate_batch(
    net: ChainNetwork, u_t: np.ndarray, tol: float = PF_POWER_TOL_MW, max_iter: int = PF_MAX_ITER
):
    """
    u_t : (N, K) の候補を一括評価。

    Returns
    -------
    cost : (K,) 購入電力（不可能な列は inf）
    feasible : (K,) bool
    """
    line = net.line
    k_cols = u_t.shape[1]
    alive = np.ones(k_cols, dtype=bool)

    if net.n_vehicles:
        p = net.vehicle_power[:, None]
        seg, w = _interp_weights(net)
        u_v = (1 - w)[:, None] * u_t[seg] + w[:, None] * u_t[seg + 1]
        cap = 2.0 * line.u_veh_max_braking
        done = np.zeros(k_cols, dtype=bool)
        i_v = p / u_v
        for _ in range(max_iter):
            i_v = p / u_v
            u_new = vehicle_voltages(net, u_t, i_v)
            bad = ~np.all(np.isfinite(u_new) & (u_new > 0) & (u_new < cap), axis=0)
            alive &= ~bad
            u_new[:, bad] = u_v[:, bad]
            mismatch = np.max(np.abs(u_new * i_v - p), axis=0)
            u_v = u_new
            done = mismatch < tol
            if np.all(done | ~alive):
                break
        alive &= done
        i_s = net.y_tt @ u_t + net.y_vt.T @ u_v
        v_hi = net.vehicle_u_max[:, None]
        v_ok = np.all((u_v >= line.u_veh_min - FEAS_TOL) & (u_v <= v_hi + FEAS_TOL), axis=0)
    else:
        i_s = net.y_tt @ u_t
        v_ok = np.ones(k_cols, dtype=bool)

    p_s = u_t * i_s
    p_ok = np.all(
        (p_s <= line.p_lim[:, None] + FEAS_TOL) & (p_s >= line.p_lower[:, None] - FEAS_TOL), axis=0
    )
    feasible = alive & v_ok & p_ok
    cost = np.sum(np.maximum(ac_power(p_s, line.vsc_efficiency) + line.p_aux[:, None], 0.0), axis=0)
    return np.where(feasible, cost, np.inf), feasible


def step_variation(net: ChainNetwork, u_opt: np.ndarray, cost_opt: float, step_v: float) -> float:
    """u_opt から 1 軸だけ ±1 ステップ動かした実行可能点での |Δ目的関数| の最大値 [MW]。"""
    line = net.line
    step = step_v / 1000.0
    tol = 1e-9
    neighbours = []
    for k in range(len(u_opt)):
        for sign in (-1.0, 1.0):
            u = u_opt.copy()
            u[k] += sign * step
            if line.u_tss_min - tol <= u[k] <= line.u_tss_max + tol:
                neighbours.append(u)
    if not neighbours:
        return 0.0
    cost, feasible = evaluate_batch(net, np.array(neighbours).T)
    return float(np.max(np.abs(cost[feasible] - cost_opt), initial=0.0))


def grid_search_oracle(
    line: LineModel, snap: Snapshot, step_v: float = 1.0, *, chunk: int = CHUNK
) -> OracleResult:
    """
    Raises
    ------
    ValueError
        N > MAX_ORACLE_TSS
    InfeasibleSnapshot
        実行可能な格子点が無い
    """
    if line.n_tss > MAX_ORACLE_TSS:
        raise ValueError(f"grid search supports at most {MAX_ORACLE_TSS} TSSs, got {line.n_tss}")
    t0 = time.perf_counter()
    net = assemble_snapshot(line, snap)
    axis = lattice(line, step_v)

    best_cost = np.inf
    best_u: Optional[np.ndarray] = None
    n_eval = n_feas = 0
    points = itertools.product(axis, repeat=line.n_tss)   # 辞書順
    while True:
        block = np.array(list(itertools.islice(points, chunk)), dtype=float)
        if block.size == 0:
            break
        cost, feasible = evaluate_batch(net, block.T)
        n_eval += len(block)
        n_feas += int(feasible.sum())
        j = int(np.argmin(cost))
        if cost[j] < best_cost:
            best_cost, best_u = float(cost[j]), block[j].copy()

    if best_u is None:
        raise InfeasibleSnapshot(f"t={snap.time}: no feasible point among {n_eval} lattice candidates")

    variation = step_variation(net, best_u, best_cost, step_v)
    logger.info(
        f"[Oracle] t={snap.time}: {n_feas}/{n_eval} feasible, best {best_cost:.6f} MW at {np.round(best_u, 4)} "
        f"(one-step variation {variation:.4g} MW)"
    )
    return OracleResult(
        u_s_opt=best_u,
        objective=best_cost,
        solution=solve_constant_power(net, best_u),
        n_evaluated=n_eval,
        n_feasible=n_feas,
        solve_time=time.perf_counter() - t0,
        step_variation=variation,
    )
