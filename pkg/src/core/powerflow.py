#!/usr/bin/env python3
"""
powerflow.py
============

スナップショット潮流計算
---------------------------
* solve_fixed()          : TSS 電圧固定 + 車両電流源 -> 全ノード電圧（線形）
* solve_constant_power() : 車両定電力の不動点反復 I = P / U
* objective()            : AC 系統からの購入電力 Σ max(P_AC + P_aux, 0)

符号:
    I_s > 0 : TSS が直流側へ電流を供給
    I_v > 0 : 車両が電流を消費（力行）、< 0 は回生
    branch current > 0 : 左 (km 小) -> 右 へ流れる
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .errors import PowerFlowDivergence
from .topology import ChainNetwork

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

# ─────────────────────────────────────────────
PF_POWER_TOL_MW = float(os.getenv("PF_POWER_TOL_MW", "0.001"))   # 1 kW
PF_MAX_ITER = int(os.getenv("PF_MAX_ITER", 50))
DIVERGE_STREAK = 5       # mismatch がこの回数連続で増えたら発散扱い
# ─────────────────────────────────────────────


@dataclass(frozen=True)
class PowerFlowSolution:
    """1 スナップショットの解。車両配列はチェーン順。"""

    net: ChainNetwork = field(repr=False)
    u_nodes: np.ndarray
    u_tss: np.ndarray
    u_veh: np.ndarray
    tss_currents: np.ndarray
    tss_powers: np.ndarray
    vehicle_currents: np.ndarray
    vehicle_powers: np.ndarray      # 実際に引いた U_v * I_v
    branch_currents: np.ndarray
    total_loss: float
    converged: bool
    iterations: int
    max_power_mismatch: float

    @property
    def vehicle_u_max(self) -> np.ndarray:
        return self.net.vehicle_u_max

    @property
    def energy_residual(self) -> float:
        """Σ P_s − Σ P_v − loss（保存則のチェック用）"""
        return float(self.tss_powers.sum() - self.vehicle_powers.sum() - self.total_loss)


# ------------------------------------------------------------------ #
# 線形コア                                                            #
# ------------------------------------------------------------------ #
def _banded_matvec(ab: np.ndarray, x: np.ndarray) -> np.ndarray:
    y = ab[1] * x
    y[:-1] += ab[0, 1:] * x[1:]
    y[1:] += ab[2, :-1] * x[:-1]
    return y


def vehicle_voltages(net: ChainNetwork, u_tss: np.ndarray, i_veh: np.ndarray) -> np.ndarray:
    """
    Y_VV U_V = −I_v − Y_VT U_s を三重対角で解く。

    u_tss は (N,) か (N, K)、i_veh は (M,) か (M, K)。K 本の右辺をまとめて解ける。
    """
    u_tss = np.asarray(u_tss, dtype=float)
    i_veh = np.asarray(i_veh, dtype=float)
    if net.n_vehicles == 0:
        return np.zeros((0,) + u_tss.shape[1:])
    rhs = -i_veh - net.y_vt @ u_tss
    return solve_banded((1, 1), net.y_vv_banded, rhs, check_finite=False)


def _node_voltages(net: ChainNetwork, u_tss: np.ndarray, u_veh: np.ndarray) -> np.ndarray:
    u = np.empty(net.n_tss + net.n_vehicles)
    u[net.tss_nodes] = u_tss
    u[net.vehicle_nodes] = u_veh
    return u


def _check_tss_vector(net: ChainNetwork, u_tss) -> np.ndarray:
    u_tss = np.asarray(u_tss, dtype=float)
    if u_tss.shape != (net.n_tss,):
        raise ValueError(f"U_s must have length {net.n_tss}, got shape {u_tss.shape}")
    if not np.all(np.isfinite(u_tss)):
        raise ValueError("U_s must be finite")
    return u_tss


def solve_fixed(net: ChainNetwork, u_tss, i_veh) -> np.ndarray:
    """TSS = 電圧源、車両 = 電流源 として全ノード電圧（チェーン順）を返す。"""
    u_tss = _check_tss_vector(net, u_tss)
    i_veh = np.asarray(i_veh, dtype=float)
    if i_veh.shape != (net.n_vehicles,):
        raise ValueError(f"I_v must have length {net.n_vehicles}, got shape {i_veh.shape}")
    return _node_voltages(net, u_tss, vehicle_voltages(net, u_tss, i_veh))


def build_solution(
    net: ChainNetwork,
    u_nodes: np.ndarray,
    i_veh: np.ndarray,
    *,
    converged: bool = True,
    iterations: int = 0,
    mismatch: float = 0.0,
) -> PowerFlowSolution:
    """ノード電圧と車両電流から TSS 電流・枝電流・損失を組み立てる。"""
    u_tss = u_nodes[net.tss_nodes]
    u_veh = u_nodes[net.vehicle_nodes]
    i_s = net.y_tt @ u_tss + net.y_vt.T @ u_veh
    i_b = -np.diff(u_nodes) / net.branch_r
    return PowerFlowSolution(
        net=net,
        u_nodes=u_nodes,
        u_tss=u_tss,
        u_veh=u_veh,
        tss_currents=i_s,
        tss_powers=u_tss * i_s,
        vehicle_currents=np.asarray(i_veh, dtype=float),
        vehicle_powers=u_veh * i_veh,
        branch_currents=i_b,
        total_loss=float(np.sum(net.branch_r * i_b**2)),
        converged=converged,
        iterations=iterations,
        max_power_mismatch=mismatch,
    )


# ------------------------------------------------------------------ #
# 定電力反復                                                          #
# ------------------------------------------------------------------ #
def _newton_polish(net: ChainNetwork, u_tss, u_veh, p_veh) -> Optional[np.ndarray]:
    """F(U) = Y_VV U + Y_VT U_s + P/U = 0 に Newton 1 ステップ。失敗なら None。"""
    f = _banded_matvec(net.y_vv_banded, u_veh) + net.y_vt @ u_tss + p_veh / u_veh
    jac = net.y_vv_banded.copy()
    jac[1] -= p_veh / u_veh**2
    try:
        step = solve_banded((1, 1), jac, -f, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    u_new = u_veh + step
    if not np.all(np.isfinite(u_new)) or np.any(u_new <= 0):
        return None
    return u_new


def solve_constant_power(
    net: ChainNetwork,
    u_tss,
    p_veh=None,
    *,
    tol: float = PF_POWER_TOL_MW,
    max_iter: int = PF_MAX_ITER,
    polish: bool = True,
    u_init=None,
) -> PowerFlowSolution:
    """
    車両定電力の不動点反復。

    I^(k) = P / U^(k)、U^(k+1) = solve(I^(k))、初期値は u_init（車両電圧、チェーン順）か
    TSS 電圧の位置補間。
    max |U^(k+1) I^(k) − P| < tol で収束。収束後は Newton 1 ステップで仕上げ、
    電流を P/U に揃えて線形解をもう一度取る（KCL は常に厳密）。

    Raises
    ------
    PowerFlowDivergence
        車両電圧が (0, 2·u_veh_max_braking) を外れた、または mismatch が
        DIVERGE_STREAK 回連続で増加した。
    """
    u_tss = _check_tss_vector(net, u_tss)
    p = net.vehicle_power if p_veh is None else np.asarray(p_veh, dtype=float)
    if p.shape != (net.n_vehicles,):
        raise ValueError(f"P_v must have length {net.n_vehicles}, got shape {p.shape}")

    if net.n_vehicles == 0:
        return build_solution(net, _node_voltages(net, u_tss, np.zeros(0)), np.zeros(0), iterations=1)

    u_cap = 2.0 * net.line.u_veh_max_braking
    tss_pos = net.node_positions[net.tss_nodes]
    u_v = np.interp(net.vehicle_positions, tss_pos, u_tss)
    if u_init is not None:
        u_init = np.asarray(u_init, dtype=float)
        if u_init.shape == u_v.shape and np.all(u_init > 0) and np.all(u_init < u_cap):
            u_v = u_init.copy()

    prev_mismatch = np.inf
    streak = 0
    converged = False
    mismatch = np.inf
    i_v = p / u_v
    k = 0
    for k in range(1, max_iter + 1):
        i_v = p / u_v
        u_new = vehicle_voltages(net, u_tss, i_v)
        if not np.all(np.isfinite(u_new)) or np.any(u_new <= 0) or np.any(u_new >= u_cap):
            raise PowerFlowDivergence(
                f"t={net.time}: vehicle voltage collapsed at iteration {k} "
                f"(min {np.nanmin(u_new):.4f} kV, max {np.nanmax(u_new):.4f} kV)"
            )
        mismatch = float(np.max(np.abs(u_new * i_v - p)))
        u_v = u_new
        if mismatch < tol:
            converged = True
            break
        streak = streak + 1 if mismatch > prev_mismatch else 0
        if streak >= DIVERGE_STREAK:
            raise PowerFlowDivergence(
                f"t={net.time}: power mismatch grew {DIVERGE_STREAK} times in a row "
                f"({mismatch:.4g} MW at iteration {k})"
            )
        prev_mismatch = mismatch

    if converged and polish:
        u_pol = _newton_polish(net, u_tss, u_v, p)
        if u_pol is not None and np.all(u_pol < u_cap):
            i_v = p / u_pol
            u_v = vehicle_voltages(net, u_tss, i_v)
            mismatch = float(np.max(np.abs(u_v * i_v - p)))

    if not converged:
        logger.warning(
            f"[PowerFlow] t={net.time}: no convergence in {max_iter} iterations "
            f"(mismatch {mismatch:.4g} MW)"
        )
    return build_solution(
        net,
        _node_voltages(net, u_tss, u_v),
        i_v,
        converged=converged,
        iterations=k,
        mismatch=mismatch,
    )


# ------------------------------------------------------------------ #
# 目的関数                                                            #
# ------------------------------------------------------------------ #
def ac_power(p_tss, efficiency: float = 1.0) -> np.ndarray:
    """VSC 損失込みの AC 側電力。供給時 P/η、回生返送時 P·η。"""
    p_tss = np.asarray(p_tss, dtype=float)
    return np.where(p_tss > 0, p_tss / efficiency, p_tss * efficiency)


def objective(p_tss, p_aux, efficiency: float = 1.0) -> float:
    """P_cost = Σ max(P_AC + P_aux, 0) [MW]。系統への返送は課金上クレジットされない。"""
    p_tss = np.asarray(p_tss, dtype=float)
    p_aux = np.asarray(p_aux, dtype=float)
    if p_tss.shape != p_aux.shape:
        raise ValueError(f"length mismatch: P_s {p_tss.shape} vs P_aux {p_aux.shape}")
    return float(np.sum(np.maximum(ac_power(p_tss, efficiency) + p_aux, 0.0)))


def solution_cost(sol: PowerFlowSolution) -> float:
    line = sol.net.line
    return objective(sol.tss_powers, line.p_aux, line.vsc_efficiency)


def exported_power(sol: PowerFlowSolution) -> float:
    """系統へ返送される電力 Σ max(−(P_AC + P_aux), 0) [MW]"""
    line = sol.net.line
    net_ac = ac_power(sol.tss_powers, line.vsc_efficiency) + line.p_aux
    return float(np.sum(np.maximum(-net_ac, 0.0)))
