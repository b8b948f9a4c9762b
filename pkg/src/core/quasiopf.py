#!/usr/bin/env python3
"""
quasiopf.py
===========

準最適潮流（quasi-OPF）
---------------------------
負荷情報から VSC 電圧指令を直接写像する。

    1. 現在の U_s で潮流計算（初回は一様 u_tss_max）
    2. 重ね合わせで I_s_nd / I_s_cc に分解
    3. TSS を分類 -> 近接原理で支援電流を配分 -> 飽和処理
    4. 電圧指令 U*_s を作り、潮流で検証
    5. 指令の変化が QOPF_TOL_V 未満になるまで 1 へ戻る

窓や車両電圧に収まらない場合は、まず common mode を下げ、それでも駄目なら
回生目標を縮めて（残りは AC 側へ返送）実行可能にする。この探索中は車両電流を
直前の潮流解で固定し、車両電圧を U_s の線形写像として評価する。
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import InfeasibleSnapshot
from .powerflow import (
    PF_MAX_ITER,
    PF_POWER_TOL_MW,
    PowerFlowSolution,
    solution_cost,
    solve_constant_power,
    vehicle_voltages,
)
from .superposition import Decomposition, decompose
from .topology import (
    ChainNetwork,
    LineModel,
    Snapshot,
    StructuralMatrices,
    assemble_snapshot,
    structural_matrices,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

# ─────────────────────────────────────────────
QOPF_TOL_V = float(os.getenv("QOPF_TOL_V", "0.1"))            # V
QOPF_MAX_OUTER = int(os.getenv("QOPF_MAX_OUTER", 10))
QOPF_LAMBDA_TOL = float(os.getenv("QOPF_LAMBDA_TOL", "1e-3"))
QOPF_P_MARGIN_MW = float(os.getenv("QOPF_P_MARGIN_MW", "5e-4"))   # 電流制限を内側に取る量
QOPF_VEH_MARGIN_V = float(os.getenv("QOPF_VEH_MARGIN_V", "0.5"))  # 車両電圧上下限の内側マージン
P_LIMIT_TOL_MW = 1e-6
V_LIMIT_TOL_KV = 1e-6
SUM_TOL_KA = 1e-9
SECANT_STEPS = 3
# ─────────────────────────────────────────────


class TssClass(str, enum.Enum):
    TRACTION_LIMITED = "traction_limited"
    REGEN_LIMITED = "regen_limited"
    NEUTRAL = "neutral"
    SATURATED = "saturated"     # 支援側が自身の上限に達したもの


@dataclass(frozen=True)
class TssTarget:
    index: int
    cls: TssClass
    i_nd: float
    i_lim: float
    i_aux: float
    target: float               # 協調制御電流の目標 i_s_cc（neutral は 0）
    u_ref: float                # 分類に使った電圧
    export_allowed: bool = False

    @property
    def needy(self) -> bool:
        return self.cls is not TssClass.NEUTRAL


@dataclass(frozen=True)
class QuasiOpfOptions:
    tol_v: float = QOPF_TOL_V
    max_outer: int = QOPF_MAX_OUTER
    lambda_tol: float = QOPF_LAMBDA_TOL
    pf_tol: float = PF_POWER_TOL_MW
    pf_max_iter: int = PF_MAX_ITER
    fit_common_mode: bool = True
    per_group_curtailment: bool = True
    p_margin: float = QOPF_P_MARGIN_MW
    veh_margin_v: float = QOPF_VEH_MARGIN_V


@dataclass(frozen=True)
class ControlOrder:
    """電圧指令。電圧 kV、電流 kA、curtailment は TSS ごとの返送許容量 MW。"""

    i_s_cc_star: np.ndarray
    i_c_cc_star: np.ndarray
    u_b_cc_star: np.ndarray
    u_dm_star: np.ndarray
    u_cm_star: float
    u_s_star: np.ndarray
    curtailment: np.ndarray
    outer_iterations: int = 0
    lam: float = 1.0
    cm_shift: float = 0.0

    def within_window(self, line: LineModel, tol: float = V_LIMIT_TOL_KV) -> bool:
        return bool(
            np.all(self.u_s_star >= line.u_tss_min - tol)
            and np.all(self.u_s_star <= line.u_tss_max + tol)
        )


@dataclass(frozen=True)
class QuasiOpfResult:
    order: ControlOrder
    solution: PowerFlowSolution
    objective: float
    loss: float
    iterations: int
    decomposition: Decomposition
    targets: List[TssTarget] = field(repr=False)
    solve_time: float = 0.0
    lam: float = 1.0
    converged: bool = True


# ------------------------------------------------------------------ #
# 分類                                                               #
# ------------------------------------------------------------------ #
def classify_targets(i_s_nd, u_s, line: LineModel, *, p_margin: float = 0.0) -> List[TssTarget]:
    """
    i_lim = (p_lim − p_margin) / U、i_aux = p_aux / (η U)。

    i_aux は返送電力 P·η がちょうど補機負荷を打ち消す電流（P_AC + p_aux = 0）。
    η = 1 なら p_aux / U と同じ。

    i_nd > i_lim      -> traction_limited、目標 i_lim − i_nd (< 0)
    i_nd < −i_aux     -> regen_limited、   目標 −i_aux − i_nd (> 0)
    """
    i_s_nd = np.asarray(i_s_nd, dtype=float)
    u_s = np.asarray(u_s, dtype=float)
    if u_s.shape != (line.n_tss,) or i_s_nd.shape != (line.n_tss,):
        raise ValueError(f"expected vectors of length {line.n_tss}")
    if np.any(u_s <= 0):
        raise ValueError("TSS voltages must be positive to classify targets")

    i_lim = (line.p_lim - p_margin) / u_s
    i_aux = line.p_aux / (line.vsc_efficiency * u_s)
    out: List[TssTarget] = []
    for k in range(line.n_tss):
        if i_s_nd[k] > i_lim[k]:
            cls, target = TssClass.TRACTION_LIMITED, i_lim[k] - i_s_nd[k]
        elif i_s_nd[k] < -i_aux[k]:
            cls, target = TssClass.REGEN_LIMITED, -i_aux[k] - i_s_nd[k]
        else:
            cls, target = TssClass.NEUTRAL, 0.0
        out.append(
            TssTarget(
                index=k,
                cls=cls,
                i_nd=float(i_s_nd[k]),
                i_lim=float(i_lim[k]),
                i_aux=float(i_aux[k]),
                target=float(target),
                u_ref=float(u_s[k]),
            )
        )
    return out


def needy_blocks(targets: Sequence[TssTarget]) -> List[Tuple[int, int]]:
    """連続する needy TSS の極大ブロック [start, end]（両端含む）"""
    blocks: List[Tuple[int, int]] = []
    start = None
    for k, t in enumerate(targets):
        if t.needy and start is None:
            start = k
        elif not t.needy and start is not None:
            blocks.append((start, k - 1))
            start = None
    if start is not None:
        blocks.append((start, len(targets) - 1))
    return blocks


# ------------------------------------------------------------------ #
# 支援配分                                                            #
# ------------------------------------------------------------------ #
def allocate_support(targets: Sequence[TssTarget], mats: StructuralMatrices) -> np.ndarray:
    """
    近接原理による i_s_cc* の配分。

    needy ブロックは両隣の neutral TSS だけが支援する。左側の分担は
    −Σ_j t_j R(j→q) / R(p→q)（R は区間抵抗の和）、右側は Σ = 0 から決まる。
    線路端に接するブロックは片側だけで全量を負担する。
    """
    n = len(targets)
    out = np.zeros(n)
    blocks = needy_blocks(targets)
    if not blocks:
        return out
    if blocks == [(0, n - 1)]:
        raise InfeasibleSnapshot("every TSS needs coordinated support; no supporter available")

    # cum[k] = TSS 0 から TSS k までの抵抗
    cum = np.concatenate([[0.0], np.cumsum(mats.r)])
    for m, e in blocks:
        t = np.array([targets[j].target for j in range(m, e + 1)])
        out[m : e + 1] += t
        total = float(t.sum())
        p = m - 1 if m > 0 else None
        q = e + 1 if e < n - 1 else None
        if p is not None and q is not None:
            r_jq = cum[q] - cum[m : e + 1]
            left = -float(np.dot(t, r_jq)) / (cum[q] - cum[p])
            out[p] += left
            out[q] += -total - left
        elif p is not None:
            out[p] += -total
        else:
            out[q] += -total
    return out


def resolve_saturation(
    i_s_cc_star: np.ndarray,
    targets: Sequence[TssTarget],
    mats: StructuralMatrices,
    line: LineModel,
    eps: float = 1e-12,
) -> Tuple[np.ndarray, List[TssTarget]]:
    """
    支援後の電流が自分の上限を越えた supporter を飽和させて needy 扱いにし、
    配分をやり直す（最大 N 回）。export_allowed の TSS は下限側を見ない。
    """
    targets = list(targets)
    for _ in range(line.n_tss):
        changed = False
        for k, t in enumerate(targets):
            if t.needy:
                continue
            post = t.i_nd + i_s_cc_star[k]
            if post > t.i_lim + eps:
                targets[k] = dataclasses.replace(t, cls=TssClass.SATURATED, target=t.i_lim - t.i_nd)
                changed = True
            elif post < -t.i_aux - eps and not t.export_allowed:
                targets[k] = dataclasses.replace(t, cls=TssClass.SATURATED, target=-t.i_aux - t.i_nd)
                changed = True
        if not changed:
            return i_s_cc_star, targets
        logger.debug(
            f"[QuasiOPF] saturated supporters: "
            f"{[t.index for t in targets if t.cls is TssClass.SATURATED]}"
        )
        i_s_cc_star = allocate_support(targets, mats)
    raise InfeasibleSnapshot(f"saturation did not settle within {line.n_tss} rounds")


# ------------------------------------------------------------------ #
# 電圧指令                                                            #
# ------------------------------------------------------------------ #
def voltage_references(
    i_s_cc_star, mats: StructuralMatrices, line: LineModel, *, cm_shift: float = 0.0
) -> ControlOrder:
    """
    I*_c = A I*_s、U*_b = R I*_c、U*_dm = S U*_b、
    U*_cm = u_tss_max − max(U*_dm) − cm_shift、U*_s = U*_cm + U*_dm
    """
    i_s = np.asarray(i_s_cc_star, dtype=float)
    if abs(i_s.sum()) > SUM_TOL_KA * max(1.0, np.abs(i_s).max(initial=0.0)):
        raise ValueError(f"coordinated currents must sum to zero (sum = {i_s.sum():.3g} kA)")
    i_c = mats.A @ i_s
    u_b = mats.R @ i_c
    u_dm = mats.S @ u_b
    u_cm = line.u_tss_max - float(u_dm.max()) - cm_shift
    return ControlOrder(
        i_s_cc_star=i_s,
        i_c_cc_star=i_c,
        u_b_cc_star=u_b,
        u_dm_star=u_dm,
        u_cm_star=u_cm,
        u_s_star=u_cm + u_dm,
        curtailment=np.zeros(line.n_tss),
        cm_shift=cm_shift,
    )


@dataclass(frozen=True)
class VehicleLoad:
    """指令の評価中は固定しておく車両電流（チェーン順）と車両電圧の上下限 [kV]。"""

    net: ChainNetwork
    i_veh: np.ndarray
    u_max: np.ndarray
    u_min: float

    @classmethod
    def from_solution(cls, sol: PowerFlowSolution, margin_v: float = QOPF_VEH_MARGIN_V) -> "VehicleLoad":
        margin = margin_v / 1000.0
        return cls(
            net=sol.net,
            i_veh=np.asarray(sol.vehicle_currents, dtype=float),
            u_max=sol.vehicle_u_max - margin,
            u_min=sol.net.line.u_veh_min + margin,
        )

    def voltages(self, u_s: np.ndarray) -> np.ndarray:
        return vehicle_voltages(self.net, u_s, self.i_veh)


def fit_common_mode(
    order: ControlOrder, line: LineModel, load: Optional[VehicleLoad] = None
) -> Tuple[ControlOrder, float]:
    """
    車両電圧が上限を越える分だけ common mode を下げる。

    車両電流を固定すると車両電圧は U_s に対して線形で、一様シフトは
    そのまま 1:1 で乗る。潮流は解かない。

    Returns
    -------
    (シフト後の指令, 余裕 [kV])。余裕が負なら窓下限か車両下限を割る。
    """
    room = float(order.u_s_star.min() - line.u_tss_min)
    if load is None or load.net.n_vehicles == 0:
        return order, room
    u_v = load.voltages(order.u_s_star)
    shift = max(0.0, float(np.max(u_v - load.u_max)))
    margin = min(room - shift, float(np.min(u_v - load.u_min)) - shift)
    if shift > 0.0:
        order = dataclasses.replace(
            order,
            u_cm_star=order.u_cm_star - shift,
            u_s_star=order.u_s_star - shift,
            cm_shift=order.cm_shift + shift,
        )
    return order, margin


class _Attempt(NamedTuple):
    order: ControlOrder
    targets: List[TssTarget]
    margin: float

    @property
    def feasible(self) -> bool:
        return self.margin >= -V_LIMIT_TOL_KV


def _build_order(
    targets: Sequence[TssTarget],
    mats: StructuralMatrices,
    line: LineModel,
    load: Optional[VehicleLoad],
) -> Optional[_Attempt]:
    """配分 -> 飽和 -> 指令 -> common mode 調整。配分できなければ None。"""
    try:
        i_s = allocate_support(targets, mats)
        i_s, settled = resolve_saturation(i_s, targets, mats, line)
    except InfeasibleSnapshot:
        return None
    order, margin = fit_common_mode(voltage_references(i_s, mats, line), line, load)
    return _Attempt(order, settled, margin)


# ------------------------------------------------------------------ #
# 回生の絞り込み                                                      #
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class RegenGroup:
    """
    regen_limited を含む needy ブロック 1 つ分。

    members は supporter に電気的に近い順。fill s ∈ [0, total] を近い順に
    詰める（proportional なら全員を s/total 倍）。
    """

    members: Tuple[int, ...]
    totals: Tuple[float, ...]
    fillable: bool
    proportional: bool = False

    @property
    def total(self) -> float:
        return float(sum(self.totals))


def regen_groups(targets: Sequence[TssTarget], mats: StructuralMatrices) -> List[RegenGroup]:
    """
    近さは両隣の supporter p, q への合成抵抗 R(p,j)·R(j,q)/R(p,q)。
    片側しか無ければ R(p,j) か R(j,q)。supporter が無いブロックは fillable=False。
    """
    n = len(targets)
    cum = np.concatenate([[0.0], np.cumsum(mats.r)])
    groups: List[RegenGroup] = []
    for m, e in needy_blocks(targets):
        members = [j for j in range(m, e + 1) if targets[j].cls is TssClass.REGEN_LIMITED]
        if not members:
            continue
        p = m - 1 if m > 0 else None
        q = e + 1 if e < n - 1 else None

        def reach(j: int) -> float:
            if p is not None and q is not None:
                return (cum[j] - cum[p]) * (cum[q] - cum[j]) / (cum[q] - cum[p])
            if p is not None:
                return cum[j] - cum[p]
            if q is not None:
                return cum[q] - cum[j]
            return np.inf

        members.sort(key=lambda j: (reach(j), j))
        groups.append(
            RegenGroup(
                members=tuple(members),
                totals=tuple(targets[j].target for j in members),
                fillable=p is not None or q is not None,
            )
        )
    return groups


def _merged_group(groups: Sequence[RegenGroup]) -> List[RegenGroup]:
    """全 regen_limited を一律 λ 倍する 1 グループにまとめる。"""
    if not groups:
        return []
    return [
        RegenGroup(
            members=tuple(j for g in groups for j in g.members),
            totals=tuple(t for g in groups for t in g.totals),
            fillable=any(g.fillable for g in groups),
            proportional=True,
        )
    ]


def _apply_fills(
    raw: Sequence[TssTarget], groups: Sequence[RegenGroup], fills: Sequence[float]
) -> List[TssTarget]:
    """
    fill 0 のグループは neutral（返送可）に戻す。途中まで埋めたグループの
    残りは regen_limited のまま目標を縮める（0 なら支援もしない）。
    """
    out = list(raw)
    for g, s in zip(groups, fills):
        if s >= g.total:
            continue
        if s <= 0.0:
            for j in g.members:
                out[j] = dataclasses.replace(raw[j], cls=TssClass.NEUTRAL, target=0.0, export_allowed=True)
            continue
        left = s
        for j, total in zip(g.members, g.totals):
            if g.proportional:
                kept = total * s / g.total
            else:
                kept = min(max(left, 0.0), total)
                left -= kept
            out[j] = dataclasses.replace(raw[j], target=kept, export_allowed=True)
    return out


def _max_fill(
    attempt: Callable[[float], Optional[_Attempt]],
    total: float,
    base: _Attempt,
    tol: float,
) -> Tuple[float, _Attempt]:
    """
    実行可能な最大の fill。二分法で [lo, hi] を tol まで詰め、両端の余裕が
    分かっていれば割線で境界まで寄せる（余裕は fill に対して区分線形）。
    """
    top = attempt(total)
    if top is not None and top.feasible:
        return total, top
    lo, hi = 0.0, total
    lo_try, hi_try = base, top
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        trial = attempt(mid)
        if trial is not None and trial.feasible:
            lo, lo_try = mid, trial
        else:
            hi, hi_try = mid, trial

    for _ in range(SECANT_STEPS):
        if hi_try is None or lo_try.margin <= V_LIMIT_TOL_KV or lo_try.margin <= hi_try.margin:
            break
        s = lo + (hi - lo) * lo_try.margin / (lo_try.margin - hi_try.margin)
        if not lo < s < hi:
            break
        trial = attempt(s)
        if trial is not None and trial.feasible:
            lo, lo_try = s, trial
        else:
            hi, hi_try = s, trial
    return lo, lo_try


def relax_regeneration(
    targets: Sequence[TssTarget],
    mats: StructuralMatrices,
    line: LineModel,
    load: Optional[VehicleLoad] = None,
    lambda_tol: float = QOPF_LAMBDA_TOL,
    *,
    per_group: bool = True,
) -> Tuple[ControlOrder, List[TssTarget]]:
    """
    電圧制約を満たすまで回生目標を縮める。

    per_group=True（既定）: regen グループごとに、supporter に近い TSS から
    順に目標を詰め、実行可能な最大量を探す。グループは左から順に決める。
    per_group=False: 全 regen_limited を一律 λ 倍。

    lam = 残した目標 / 元の目標（全体）、curtailment_j = (target_j − 残り_j)·U [MW]。

    Raises
    ------
    InfeasibleSnapshot
        回生が無いのに窓を満たせない、または回生を全部返送しても満たせない。
    """
    raw = list(targets)
    full = _build_order(raw, mats, line, load)
    if full is not None and full.feasible:
        return full.order, full.targets

    groups = regen_groups(raw, mats)
    if not groups:
        raise InfeasibleSnapshot("voltage window violated and no regeneration to curtail")
    if not per_group:
        groups = _merged_group(groups)

    fills = [0.0] * len(groups)
    best = _build_order(_apply_fills(raw, groups, fills), mats, line, load)
    if best is None or not best.feasible:
        raise InfeasibleSnapshot("infeasible even with all regeneration returned to the AC side")

    for k, g in enumerate(groups):
        if not g.fillable or g.total <= 0.0:
            continue

        def attempt(s: float, k: int = k) -> Optional[_Attempt]:
            trial = list(fills)
            trial[k] = s
            return _build_order(_apply_fills(raw, groups, trial), mats, line, load)

        fills[k], best = _max_fill(attempt, g.total, best, lambda_tol * g.total)

    applied = _apply_fills(raw, groups, fills)
    curtail = np.zeros(line.n_tss)
    kept_sum = total_sum = 0.0
    for g in groups:
        for j, total in zip(g.members, g.totals):
            kept = applied[j].target if applied[j].cls is TssClass.REGEN_LIMITED else 0.0
            curtail[j] = (total - kept) * raw[j].u_ref
            kept_sum += kept
            total_sum += total
    lam = kept_sum / total_sum if total_sum > 0 else 1.0

    logger.debug(
        f"[QuasiOPF] regeneration kept {lam:.3f}, curtailed {curtail.sum():.3f} MW "
        f"at TSS {[k + 1 for k in np.flatnonzero(curtail > 0)]}"
    )
    return dataclasses.replace(best.order, curtailment=curtail, lam=lam), best.targets


# ------------------------------------------------------------------ #
# 外側ループ                                                          #
# ------------------------------------------------------------------ #
def quasi_opf(
    line: LineModel,
    snap: Snapshot,
    options: Optional[QuasiOpfOptions] = None,
    *,
    mats: Optional[StructuralMatrices] = None,
) -> QuasiOpfResult:
    """
    外側 1 反復あたり潮流は 1 回（指令の検証）。次の反復はその解から始める。

    Raises
    ------
    InfeasibleSnapshot
        電流制限・電圧窓を同時に満たす指令が無い。
    PowerFlowDivergence
        指令電圧で潮流が発散した。
    """
    opts = options or QuasiOpfOptions()
    t0 = time.perf_counter()
    net = assemble_snapshot(line, snap)
    mats = mats or structural_matrices(line)
    tol_kv = opts.tol_v / 1000.0

    u = np.full(line.n_tss, line.u_tss_max)
    sol = solve_constant_power(net, u, tol=opts.pf_tol, max_iter=opts.pf_max_iter)
    converged = False
    order: Optional[ControlOrder] = None
    targets: List[TssTarget] = []
    dec = decompose(mats, sol.u_tss, sol.tss_currents)

    it = 0
    for it in range(1, opts.max_outer + 1):
        dec = decompose(mats, sol.u_tss, sol.tss_currents)
        raw = classify_targets(dec.i_s_nd, sol.u_tss, line, p_margin=opts.p_margin)
        load = VehicleLoad.from_solution(sol, opts.veh_margin_v) if opts.fit_common_mode else None
        order, targets = relax_regeneration(
            raw, mats, line, load, opts.lambda_tol, per_group=opts.per_group_curtailment
        )
        guess = vehicle_voltages(net, order.u_s_star, sol.vehicle_currents)
        new_sol = solve_constant_power(
            net, order.u_s_star, tol=opts.pf_tol, max_iter=opts.pf_max_iter, u_init=guess
        )

        delta = float(np.max(np.abs(order.u_s_star - u)))
        p_excess = float(np.max(new_sol.tss_powers - line.p_lim))
        logger.debug(
            f"[QuasiOPF] t={snap.time} iter {it}: dU={delta * 1000:.4f} V, "
            f"P_s excess={p_excess:.3g} MW, lambda={order.lam:.3f}"
        )
        u, sol = order.u_s_star, new_sol
        if delta < tol_kv and p_excess <= P_LIMIT_TOL_MW:
            converged = True
            break

    if not converged:
        logger.warning(f"[QuasiOPF] t={snap.time}: not settled after {opts.max_outer} outer iterations")

    order = dataclasses.replace(order, outer_iterations=it)
    return QuasiOpfResult(
        order=order,
        solution=sol,
        objective=solution_cost(sol),
        loss=sol.total_loss,
        iterations=it,
        decomposition=dec,
        targets=targets,
        solve_time=time.perf_counter() - t0,
        lam=order.lam,
        converged=converged,
    )
