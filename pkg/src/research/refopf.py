#!/usr/bin/env python3
"""
refopf.py
=========

比較用の従来型 OPF（縮約空間 + バリア法）
---------------------------------------------
* 変数は TSS 電圧のみ。潮流等式は solve_constant_power を入れ子にして消去する
* max(x, 0) は (x + √(x² + ε²)) / 2 で平滑化し、ε を段階的に下げる
* 不等式制約は拡張対数バリア（s < δ では 2 次で延長）、重み μ も段階的に下げる
* 各段は L-BFGS-B（x ∈ [0, 1]^N の箱制約 = TSS 電圧窓）

勾配は随伴で求める:
    J_V      = Y_VV − diag(P / U_v²)
    dU_V/dU_T = −J_V⁻¹ Y_VT
    dI_s     = Y_TT + Y_TV dU_V
    dP_s     = diag(I_s) + diag(U_T) dI_s
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import minimize

from src.core.errors import InfeasibleSnapshot, PowerFlowDivergence
from src.core.powerflow import (
    PF_MAX_ITER,
    PF_POWER_TOL_MW,
    PowerFlowSolution,
    ac_power,
    solution_cost,
    solve_constant_power,
)
from src.core.topology import ChainNetwork, LineModel, Snapshot, assemble_snapshot

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

# ─────────────────────────────────────────────
OPF_MAX_ITER = int(os.getenv("OPF_MAX_ITER", 200))
OPF_GTOL = float(os.getenv("OPF_GTOL", "1e-6"))
EPS_SCHEDULE = (10.0, 1.0, 0.1, 0.001)      # MW
MU_SCHEDULE = (1e-2, 1e-3, 1e-5, 1e-7)
DIVERGED_PENALTY = 1e6
FEAS_TOL = 1e-6
# ─────────────────────────────────────────────


@dataclass(frozen=True)
class OpfOptions:
    max_iter: int = OPF_MAX_ITER
    gtol: float = OPF_GTOL
    eps_schedule: Tuple[float, ...] = EPS_SCHEDULE
    mu_schedule: Tuple[float, ...] = MU_SCHEDULE
    pf_tol: float = PF_POWER_TOL_MW
    pf_max_iter: int = PF_MAX_ITER


@dataclass(frozen=True)
class OpfResult:
    u_s_opt: np.ndarray
    solution: PowerFlowSolution
    objective: float
    stationarity_residual: float
    solve_time: float
    iterations: int
    converged: bool = True


def smooth_plus(x, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """max(x, 0) の平滑近似とその導関数"""
    x = np.asarray(x, dtype=float)
    root = np.sqrt(x * x + eps * eps)
    return 0.5 * (x + root), 0.5 * (1.0 + x / root)


def extended_log_barrier(s, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """−log s（s ≥ δ）、s < δ は C² で 2 次延長。値と導関数を返す。"""
    s = np.asarray(s, dtype=float)
    inside = s >= delta
    safe = np.where(inside, s, delta)
    d = s - delta
    val = np.where(inside, -np.log(safe), -np.log(delta) - d / delta + 0.5 * (d / delta) ** 2)
    der = np.where(inside, -1.0 / safe, -1.0 / delta + d / delta**2)
    return val, der


class ReducedOpfProblem:
    """TSS 電圧だけを変数にした縮約 OPF。x ∈ [0, 1]^N にスケーリング。"""

    def __init__(self, net: ChainNetwork, pf_tol: float = PF_POWER_TOL_MW, pf_max_iter: int = PF_MAX_ITER):
        self.net = net
        self.line: LineModel = net.line
        self.u_lo = self.line.u_tss_min
        self.span = self.line.u_tss_max - self.line.u_tss_min
        self.pf_tol = pf_tol
        self.pf_max_iter = pf_max_iter
        self.n_evals = 0

        self.p_veh = np.asarray(net.vehicle_power, dtype=float)
        self.v_hi = net.vehicle_u_max
        self.v_width = self.v_hi - self.line.u_veh_min

    # ─────────────── public ─────────────── #

    def voltages(self, x) -> np.ndarray:
        return self.u_lo + np.asarray(x, dtype=float) * self.span

    def solve(self, u_tss) -> PowerFlowSolution:
        self.n_evals += 1
        return solve_constant_power(self.net, u_tss, tol=self.pf_tol, max_iter=self.pf_max_iter)

    def constraints(self, sol: PowerFlowSolution) -> np.ndarray:
        """スケール済み制約値 g ≥ 0 を連結して返す。"""
        line = self.line
        p = sol.tss_powers
        parts = [(line.p_lim - p) / line.p_lim, (p - line.p_lower) / line.p_lim]
        if self.net.n_vehicles:
            parts += [
                (sol.u_veh - line.u_veh_min) / self.v_width,
                (self.v_hi - sol.u_veh) / self.v_width,
            ]
        return np.concatenate(parts)

    def sensitivities(self, sol: PowerFlowSolution) -> Tuple[np.ndarray, np.ndarray]:
        """(dP_s/dU_T, dU_V/dU_T)"""
        net = self.net
        u_t = sol.u_tss
        if net.n_vehicles:
            jac = net.y_vv_banded.copy()
            jac[1] -= self.p_veh / sol.u_veh**2
            du_v = solve_banded((1, 1), jac, -net.y_vt, check_finite=False)
            di_s = net.y_tt + net.y_vt.T @ du_v
        else:
            du_v = np.zeros((0, net.n_tss))
            di_s = net.y_tt.copy()
        dp_s = np.diag(sol.tss_currents) + u_t[:, None] * di_s
        return dp_s, du_v

    def value_and_grad(self, x, eps: float, mu: float) -> Tuple[float, np.ndarray]:
        u_t = self.voltages(x)
        try:
            sol = self.solve(u_t)
        except PowerFlowDivergence:
            return DIVERGED_PENALTY, np.zeros_like(u_t)

        line = self.line
        eta = line.vsc_efficiency
        p = sol.tss_powers
        net_ac = ac_power(p, eta) + line.p_aux
        f_val, f_der = smooth_plus(net_ac, eps)
        ac_der = np.where(p > 0, 1.0 / eta, eta)

        dp_s, du_v = self.sensitivities(sol)
        grad = dp_s.T @ (f_der * ac_der)

        delta = mu / 1000.0
        b_val, b_der = extended_log_barrier(self.constraints(sol), delta)
        n = line.n_tss
        w = mu * b_der
        grad += dp_s.T @ ((-w[:n] + w[n : 2 * n]) / line.p_lim)
        if self.net.n_vehicles:
            m = self.net.n_vehicles
            wv = (w[2 * n : 2 * n + m] - w[2 * n + m :]) / self.v_width
            grad += du_v.T @ wv

        value = float(f_val.sum() + mu * b_val.sum())
        return value, grad * self.span

    def projected_gradient(self, x, eps: float, mu: float) -> float:
        _, g = self.value_and_grad(x, eps, mu)
        x = np.asarray(x, dtype=float)
        return float(np.max(np.abs(x - np.clip(x - g, 0.0, 1.0)), initial=0.0))

    def violation(self, sol: PowerFlowSolution) -> float:
        """制約違反の最大量（MW / kV の生単位）"""
        line = self.line
        worst = max(
            float(np.max(sol.tss_powers - line.p_lim)),
            float(np.max(line.p_lower - sol.tss_powers)),
        )
        if self.net.n_vehicles:
            worst = max(
                worst,
                float(np.max(line.u_veh_min - sol.u_veh)),
                float(np.max(sol.u_veh - self.v_hi)),
            )
        return worst


def check_gradient(
    problem: ReducedOpfProblem, x, eps: float, mu: float, h: float = 1e-6
) -> float:
    """中心差分との最大相対誤差"""
    x = np.asarray(x, dtype=float)
    _, g = problem.value_and_grad(x, eps, mu)
    fd = np.zeros_like(x)
    for j in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fd[j] = (problem.value_and_grad(xp, eps, mu)[0] - problem.value_and_grad(xm, eps, mu)[0]) / (2 * h)
    scale = max(float(np.max(np.abs(fd))), 1e-8)
    return float(np.max(np.abs(g - fd)) / scale)


def solve_opf(
    line: LineModel,
    snap: Snapshot,
    options: Optional[OpfOptions] = None,
    *,
    x0: Optional[Sequence[float]] = None,
) -> OpfResult:
    """
    Raises
    ------
    InfeasibleSnapshot
        最終点が制約を FEAS_TOL 以上破る。
    """
    opts = options or OpfOptions()
    t0 = time.perf_counter()
    net = assemble_snapshot(line, snap)
    problem = ReducedOpfProblem(net, opts.pf_tol, opts.pf_max_iter)

    n = line.n_tss
    x = np.full(n, 0.5) if x0 is None else np.clip(np.asarray(x0, dtype=float), 0.0, 1.0)
    bounds = [(0.0, 1.0)] * n
    iters = 0
    success = True
    eps = mu = None
    for eps, mu in zip(opts.eps_schedule, opts.mu_schedule):
        remaining = opts.max_iter - iters
        if remaining <= 0:
            success = False
            break
        res = minimize(
            problem.value_and_grad,
            x,
            args=(eps, mu),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": remaining, "gtol": opts.gtol, "ftol": 1e-12},
        )
        x = np.clip(res.x, 0.0, 1.0)
        iters += int(res.nit)
        success = bool(res.success)
        logger.debug(
            f"[RefOPF] t={snap.time} eps={eps:g} mu={mu:g}: f={res.fun:.6f} nit={res.nit} ({res.message})"
        )

    u_opt = problem.voltages(x)
    sol = problem.solve(u_opt)
    worst = problem.violation(sol)
    if worst > FEAS_TOL:
        raise InfeasibleSnapshot(f"t={snap.time}: reference OPF ended {worst:.3g} beyond a limit")

    stationarity = problem.projected_gradient(x, eps, mu)
    converged = success and iters <= opts.max_iter
    if not converged:
        logger.warning(
            f"[RefOPF] t={snap.time}: iteration cap {opts.max_iter} reached "
            f"(projected gradient {stationarity:.3g})"
        )
    return OpfResult(
        u_s_opt=u_opt,
        solution=sol,
        objective=solution_cost(sol),
        stationarity_residual=stationarity,
        solve_time=time.perf_counter() - t0,
        iterations=iters,
        converged=converged,
    )
