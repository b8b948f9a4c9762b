#!/usr/bin/env python3
"""
superposition.py
================

重ね合わせによる分解
---------------------------
解いたスナップショットを

    自然分配系 (nd) : 一様電圧 u_cm + 車両電流源
    協調制御系 (cc) : 差動電圧 u_dm のみ（車両電流源オフ）

の和に分ける。common mode は N 番目の TSS の電圧（u_dm[-1] = 0）。
別の基準を取っても u_dm が定数ずれるだけで u_b_cc, i_c_cc は変わらない。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .powerflow import PowerFlowSolution, solve_fixed
from .topology import ChainNetwork, StructuralMatrices

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

CC_LOSS_RTOL = 1e-9


@dataclass(frozen=True)
class Decomposition:
    """電圧は kV、電流は kA。枝 i は TSS i と i+1 の間。"""

    u_s: np.ndarray
    i_s: np.ndarray
    u_cm: float
    u_dm: np.ndarray
    u_b_cc: np.ndarray
    i_c_cc: np.ndarray
    i_s_cc: np.ndarray
    i_s_nd: np.ndarray
    u_c_cc: Optional[np.ndarray] = None
    u_r_cc: Optional[np.ndarray] = None


def decompose(mats: StructuralMatrices, u_s, i_s, *, split: bool = True) -> Decomposition:
    u_s = np.asarray(u_s, dtype=float)
    i_s = np.asarray(i_s, dtype=float)
    n = mats.n_tss
    if u_s.shape != (n,) or i_s.shape != (n,):
        raise ValueError(f"expected U_s, I_s of length {n}, got {u_s.shape} and {i_s.shape}")

    u_cm = float(u_s[-1])
    u_dm = u_s - u_cm
    u_dm[-1] = 0.0
    u_b = mats.D @ u_dm
    i_c = mats.G @ u_b
    i_s_cc = mats.B @ i_c

    u_c = u_r = None
    if split:
        # U_b = U_c + U_r を r_c : r_r で按分
        u_c = u_b * (mats.r_c / mats.r)
        u_r = u_b - u_c

    return Decomposition(
        u_s=u_s,
        i_s=i_s,
        u_cm=u_cm,
        u_dm=u_dm,
        u_b_cc=u_b,
        i_c_cc=i_c,
        i_s_cc=i_s_cc,
        i_s_nd=i_s - i_s_cc,
        u_c_cc=u_c,
        u_r_cc=u_r,
    )


def cc_loss(dec: Decomposition, mats: StructuralMatrices) -> float:
    """協調制御系の損失 I_c^T R I_c [MW]。R̃ 形式 I_s^T R̃ I_s と一致を確認する。"""
    branch_form = float(dec.i_c_cc @ mats.R @ dec.i_c_cc)
    tss_form = float(dec.i_s_cc @ mats.R_tilde @ dec.i_s_cc)
    if abs(branch_form - tss_form) > CC_LOSS_RTOL * max(abs(branch_form), 1e-12):
        raise ArithmeticError(
            f"cc loss forms disagree: branch {branch_form:.12g} vs R_tilde {tss_form:.12g}"
        )
    return branch_form


def solve_subsystems(net: ChainNetwork, u_s, i_veh) -> Tuple[np.ndarray, np.ndarray]:
    """
    電流源を固定したまま 2 つの部分回路を別々に解く。

    Returns
    -------
    (nd, cc) : ノード電圧（チェーン順）。nd + cc が元の解に一致する。
    """
    u_s = np.asarray(u_s, dtype=float)
    u_cm = u_s[-1]
    nd = solve_fixed(net, np.full_like(u_s, u_cm), i_veh)
    cc = solve_fixed(net, u_s - u_cm, np.zeros(net.n_vehicles))
    return nd, cc


# ------------------------------------------------------------------ #
# 電流分布                                                            #
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class LossBreakdown:
    total: float
    nd: float
    cc: float
    cross: float

    @property
    def residual(self) -> float:
        return self.total - (self.nd + self.cc + self.cross)


@dataclass(frozen=True)
class CurrentProfile:
    """
    架線電流の区分一定分布。edges はノード位置（km）、各区間に 1 値。
    total = nd + cc が全区間で成立する。
    """

    time: float
    edges: np.ndarray
    branch_r: np.ndarray
    total: np.ndarray
    nd: np.ndarray
    cc: np.ndarray
    tss_positions: np.ndarray

    def interval_at(self, dis) -> np.ndarray:
        idx = np.searchsorted(self.edges, np.asarray(dis, dtype=float), side="right") - 1
        return np.clip(idx, 0, len(self.total) - 1)

    def sample(self, dis) -> pd.DataFrame:
        idx = self.interval_at(dis)
        return pd.DataFrame(
            {"dis_km": np.atleast_1d(dis), "total": self.total[idx], "nd": self.nd[idx], "cc": self.cc[idx]}
        )

    def losses(self) -> LossBreakdown:
        r = self.branch_r
        return LossBreakdown(
            total=float(np.sum(r * self.total**2)),
            nd=float(np.sum(r * self.nd**2)),
            cc=float(np.sum(r * self.cc**2)),
            cross=float(2.0 * np.sum(r * self.nd * self.cc)),
        )


def current_profile(sol: PowerFlowSolution, dec: Decomposition) -> CurrentProfile:
    net = sol.net
    n_branch = len(net.branch_r)
    tss_nodes = net.tss_nodes
    k = np.arange(n_branch)

    # 協調制御系の電流は TSS 区間内で一定、端の TSS より外側は 0
    seg = np.searchsorted(tss_nodes, k, side="right") - 1
    inside = (k >= tss_nodes[0]) & (k < tss_nodes[-1])
    cc = np.zeros(n_branch)
    cc[inside] = dec.i_c_cc[seg[inside]]

    total = np.asarray(sol.branch_currents, dtype=float)
    return CurrentProfile(
        time=net.time,
        edges=np.asarray(net.node_positions, dtype=float),
        branch_r=np.asarray(net.branch_r, dtype=float),
        total=total,
        nd=total - cc,
        cc=cc,
        tss_positions=np.asarray(net.line.positions, dtype=float),
    )


def loss_breakdown(sol: PowerFlowSolution, dec: Decomposition) -> LossBreakdown:
    """total = nd + cc + cross（cross = 2 Σ r I_nd I_cc）"""
    return current_profile(sol, dec).losses()


@dataclass(frozen=True)
class NdProfileStats:
    table: pd.DataFrame
    mean_total_loss: float
    mean_nd_loss: float
    mean_cc_loss: float
    mean_cross_loss: float
    n_snapshots: int


def nd_profile_statistics(
    profiles: Sequence[CurrentProfile], locations: Optional[Sequence[float]] = None
) -> NdProfileStats:
    """
    自然分配電流の時間平均と RMS を地点ごとに集計する。

    locations 省略時は各 TSS 区間の中点。balance = |mean| / RMS。
    """
    profiles = list(profiles)
    if not profiles:
        raise ValueError("nd_profile_statistics needs at least one profile")

    if locations is None:
        tss = profiles[0].tss_positions
        locations = 0.5 * (tss[:-1] + tss[1:])
    locations = np.asarray(locations, dtype=float)

    samples = np.vstack([p.nd[p.interval_at(locations)] for p in profiles])
    totals = np.vstack([p.total[p.interval_at(locations)] for p in profiles])
    mean = samples.mean(axis=0)
    rms = np.sqrt(np.mean(samples**2, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        balance = np.where(rms > 0, np.abs(mean) / rms, np.nan)

    table = pd.DataFrame(
        {
            "dis_km": locations,
            "nd_mean_ka": mean,
            "nd_rms_ka": rms,
            "total_mean_ka": totals.mean(axis=0),
            "balance": balance,
        }
    )
    losses = [p.losses() for p in profiles]
    stats = NdProfileStats(
        table=table,
        mean_total_loss=float(np.mean([l.total for l in losses])),
        mean_nd_loss=float(np.mean([l.nd for l in losses])),
        mean_cc_loss=float(np.mean([l.cc for l in losses])),
        mean_cross_loss=float(np.mean([l.cross for l in losses])),
        n_snapshots=len(profiles),
    )
    logger.info(
        f"[Superposition] {stats.n_snapshots} snapshots: loss {stats.mean_total_loss:.4f} MW "
        f"vs nd+cc {stats.mean_nd_loss + stats.mean_cc_loss:.4f} MW"
    )
    return stats


def decomposition_frame(dec: Decomposition, tss_positions: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """TSS ごとの表。枝量（u_b_cc, i_c_cc）は TSS i -> i+1 の行に置き、最後の行は NaN。"""
    n = len(dec.u_s)
    pad = lambda x: np.append(np.asarray(x, dtype=float), np.nan)  # noqa: E731
    frame = pd.DataFrame(
        {
            "tss": np.arange(1, n + 1),
            "u_s_kv": dec.u_s,
            "u_dm_kv": dec.u_dm,
            "i_s_ka": dec.i_s,
            "i_s_nd_ka": dec.i_s_nd,
            "i_s_cc_ka": dec.i_s_cc,
            "u_b_cc_kv": pad(dec.u_b_cc),
            "i_c_cc_ka": pad(dec.i_c_cc),
        }
    )
    if tss_positions is not None:
        frame.insert(1, "position_km", np.asarray(tss_positions, dtype=float))
    frame.attrs["u_cm_kv"] = dec.u_cm
    return frame
