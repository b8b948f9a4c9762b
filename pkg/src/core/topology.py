#!/usr/bin/env python3
"""
topology.py
===========

路線の静的定義と時刻ごとのチェーン回路網
--------------------------------------
* build_line()          : LineConfig を検証して LineModel を返す
* assemble_snapshot()   : 車両と TSS を位置順に並べ、コンダクタンス行列を組む
* structural_matrices() : TSS 単位の D / G / R / A / B / S / R_tilde

単位は km, ohm/km, ohm, MW, kV。架線とレールは枝ごとに 1 本の直列抵抗にまとめ、
内訳は表示用にだけ残す。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .errors import ConfigError, ScenarioError

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

# ─────────────────────────────────────────────
R_FLOOR = 1e-6          # ohm, 同一位置ノード間の枝
MERGE_TOL_KM = 1e-4     # これより近いノードは同一位置とみなす
# ─────────────────────────────────────────────

FloatOrSeq = Union[float, Sequence[float]]


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


# ------------------------------------------------------------------ #
# 路線                                                               #
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class LineConfig:
    """路線の生の記述。キー名は JSON 設定ファイルと同じ"""

    tss_positions: Sequence[float]
    rho_catenary: FloatOrSeq = 0.0078
    rho_rail: FloatOrSeq = 0.02
    p_lim: FloatOrSeq = 11.0
    p_aux: FloatOrSeq = 0.0
    u_tss_max: float = 0.88
    u_tss_min: float = 0.65
    u_veh_max_braking: float = 0.95
    u_veh_max: float = 0.90
    u_veh_min: float = 0.50
    vsc_efficiency: float = 1.0
    line_length: Optional[float] = None
    p_tract_max: float = 6.04
    p_regen_max: float = -9.58
    p_lower: Optional[FloatOrSeq] = None
    name: str = "line"
    synthetic: bool = False


@dataclass(frozen=True)
class LineModel:
    """検証済みの路線。区間配列は長さ N-1、TSS 配列は長さ N"""

    positions: np.ndarray
    length: float
    rho_c: np.ndarray
    rho_r: np.ndarray
    seg_r_c: np.ndarray
    seg_r_r: np.ndarray
    p_lim: np.ndarray
    p_aux: np.ndarray
    p_lower: np.ndarray
    u_tss_max: float
    u_tss_min: float
    u_veh_max_braking: float
    u_veh_max: float
    u_veh_min: float
    vsc_efficiency: float
    p_tract_max: float
    p_regen_max: float
    name: str = "line"
    synthetic: bool = False

    @property
    def n_tss(self) -> int:
        return len(self.positions)

    @property
    def rho(self) -> np.ndarray:
        """区間ごとの架線 + レール抵抗率 (ohm/km)"""
        return self.rho_c + self.rho_r

    @property
    def seg_r(self) -> np.ndarray:
        """TSS i と i+1 の間の枝抵抗 r_ci + r_ri (ohm)"""
        return self.seg_r_c + self.seg_r_r

    def segment_of(self, x) -> np.ndarray:
        """x を含む TSS 間区間の番号（両端の区間は終端まで延長する）"""
        idx = np.searchsorted(self.positions, np.asarray(x, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.n_tss - 2)

    def rho_at(self, x) -> np.ndarray:
        return self.rho[self.segment_of(x)]


def _per_item(name: str, value, n: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        return np.full(n, float(arr[0]))
    if arr.size != n:
        raise ConfigError(name, f"expected a scalar or {n} values, got {arr.size}")
    return arr


def build_line(config: LineConfig) -> LineModel:
    """
    LineConfig を検証し、不変の LineModel を返す。

    Raises
    ------
    ConfigError
        最初に不正だったキーを `field` に入れて送出する。
    """
    pos = np.asarray(config.tss_positions, dtype=float)
    if pos.ndim != 1 or pos.size < 2:
        raise ConfigError("tss_positions", "at least 2 TSSs are required")
    if not np.all(np.isfinite(pos)):
        raise ConfigError("tss_positions", "positions must be finite")
    if np.any(np.diff(pos) <= 0):
        raise ConfigError("tss_positions", "positions not strictly increasing")

    length = float(config.line_length) if config.line_length is not None else float(pos[-1])
    if pos[0] < 0 or pos[-1] > length:
        raise ConfigError("tss_positions", f"positions must lie within [0, {length}] km")

    n = pos.size
    rho_c = _per_item("rho_catenary", config.rho_catenary, n - 1)
    rho_r = _per_item("rho_rail", config.rho_rail, n - 1)
    if np.any(rho_c <= 0):
        raise ConfigError("rho_catenary", "resistivity must be positive")
    if np.any(rho_r <= 0):
        raise ConfigError("rho_rail", "resistivity must be positive")

    p_lim = _per_item("p_lim", config.p_lim, n)
    if np.any(p_lim <= 0):
        raise ConfigError("p_lim", "power limits must be positive")
    p_aux = _per_item("p_aux", config.p_aux, n)
    if np.any(p_aux < 0):
        raise ConfigError("p_aux", "auxiliary loads must be non-negative")
    p_lower = -p_lim if config.p_lower is None else _per_item("p_lower", config.p_lower, n)
    if np.any(p_lower >= p_lim):
        raise ConfigError("p_lower", "lower power bound must be below p_lim")

    window = [
        ("u_veh_min", config.u_veh_min, config.u_tss_min, False),
        ("u_tss_min", config.u_tss_min, config.u_tss_max, True),
        ("u_tss_max", config.u_tss_max, config.u_veh_max, False),
        ("u_veh_max", config.u_veh_max, config.u_veh_max_braking, True),
    ]
    if config.u_veh_min <= 0:
        raise ConfigError("u_veh_min", "voltages must be positive")
    for key, low, high, allow_equal in window:
        if low > high or (low == high and not allow_equal):
            raise ConfigError(key, f"inverted voltage window ({low} vs {high} kV)")

    if not 0 < config.vsc_efficiency <= 1:
        raise ConfigError("vsc_efficiency", "efficiency must lie in (0, 1]")
    if config.p_tract_max <= 0:
        raise ConfigError("p_tract_max", "tractive power envelope must be positive")
    if config.p_regen_max > 0:
        raise ConfigError("p_regen_max", "regenerative power envelope must be non-positive")

    gaps = np.diff(pos)
    model = LineModel(
        positions=_frozen(pos),
        length=length,
        rho_c=_frozen(rho_c),
        rho_r=_frozen(rho_r),
        seg_r_c=_frozen(rho_c * gaps),
        seg_r_r=_frozen(rho_r * gaps),
        p_lim=_frozen(p_lim),
        p_aux=_frozen(p_aux),
        p_lower=_frozen(p_lower),
        u_tss_max=float(config.u_tss_max),
        u_tss_min=float(config.u_tss_min),
        u_veh_max_braking=float(config.u_veh_max_braking),
        u_veh_max=float(config.u_veh_max),
        u_veh_min=float(config.u_veh_min),
        vsc_efficiency=float(config.vsc_efficiency),
        p_tract_max=float(config.p_tract_max),
        p_regen_max=float(config.p_regen_max),
        name=config.name,
        synthetic=bool(config.synthetic),
    )
    logger.debug(f"[Topology] line '{model.name}': N={n}, L={length:.3f} km")
    return model


def equal_spacing_config(n_tss: int, spacing_km: float, **overrides) -> LineConfig:
    """合成路線: n_tss 箇所の TSS を等間隔に置き、先頭は 0 km"""
    positions = [round(i * spacing_km, 9) for i in range(n_tss)]
    overrides.setdefault("synthetic", True)
    overrides.setdefault("name", f"synthetic-{n_tss}tss")
    return LineConfig(tss_positions=positions, **overrides)


# ------------------------------------------------------------------ #
# スナップショット                                                   #
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class Snapshot:
    """ある時刻の車両。power > 0 が力行、power < 0 が回生 (MW)"""

    time: float
    vehicle_ids: Tuple[str, ...]
    positions: np.ndarray
    powers: np.ndarray

    @classmethod
    def from_records(cls, time: float, records: Iterable[Tuple[str, float, float]]) -> "Snapshot":
        rows = list(records)
        ids = tuple(str(r[0]) for r in rows)
        return cls(
            time=float(time),
            vehicle_ids=ids,
            positions=_frozen([r[1] for r in rows]),
            powers=_frozen([r[2] for r in rows]),
        )

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicle_ids)

    def validate(self, line: LineModel) -> None:
        if len(set(self.vehicle_ids)) != len(self.vehicle_ids):
            raise ScenarioError(f"t={self.time}: duplicate vehicle ids")
        for vid, x, p in zip(self.vehicle_ids, self.positions, self.powers):
            if not (0.0 <= x <= line.length):
                raise ScenarioError(
                    f"t={self.time}: vehicle {vid} position {x} km outside [0, {line.length}]"
                )
            if not (line.p_regen_max - 1e-9 <= p <= line.p_tract_max + 1e-9):
                raise ScenarioError(
                    f"t={self.time}: vehicle {vid} power {p} MW outside "
                    f"[{line.p_regen_max}, {line.p_tract_max}]"
                )


# ------------------------------------------------------------------ #
# チェーン回路網                                                     #
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class ChainNetwork:
    """
    1 時刻のノードを位置順に並べたもの。車両配列はスナップショット順ではなく
    チェーン順（左から右）。
    """

    line: LineModel
    time: float
    node_positions: np.ndarray
    node_is_tss: np.ndarray
    node_ref: np.ndarray            # TSS 番号またはチェーン順の車両番号
    branch_r: np.ndarray            # ohm, ノード k と k+1 の間
    conductance: sparse.csr_matrix  # S, (N+M)x(N+M) Laplacian
    tss_nodes: np.ndarray
    vehicle_nodes: np.ndarray
    vehicle_ids: Tuple[str, ...]
    vehicle_positions: np.ndarray
    vehicle_power: np.ndarray
    y_tt: np.ndarray = field(repr=False)
    y_vt: np.ndarray = field(repr=False)
    y_vv_banded: np.ndarray = field(repr=False)

    @property
    def n_tss(self) -> int:
        return len(self.tss_nodes)

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicle_nodes)

    @property
    def vehicle_u_max(self) -> np.ndarray:
        """車両ごとの電圧上限。回生中の車両は u_veh_max_braking まで許す"""
        return np.where(
            self.vehicle_power < 0, self.line.u_veh_max_braking, self.line.u_veh_max
        )


def _branch_resistances(line: LineModel, pos: np.ndarray, tss_nodes: np.ndarray) -> np.ndarray:
    gaps = np.diff(pos)
    r = line.rho_at(0.5 * (pos[:-1] + pos[1:])) * gaps
    degenerate = gaps < MERGE_TOL_KM
    r[degenerate] = R_FLOOR
    r = np.maximum(r, R_FLOOR)

    # 下限で底上げした分は区間内で最長の枝から差し引く
    seg_r = line.seg_r
    for k in range(line.n_tss - 1):
        lo, hi = tss_nodes[k], tss_nodes[k + 1]
        part = r[lo:hi]
        free = ~degenerate[lo:hi]
        if not free.any() or free.all():
            continue
        excess = part.sum() - seg_r[k]
        j = lo + int(np.argmax(np.where(free, part, -np.inf)))
        r[j] = max(r[j] - excess, R_FLOOR)
    return r


def assemble_snapshot(line: LineModel, snap: Snapshot) -> ChainNetwork:
    """
    TSS と車両のノードを位置順に並べ、コンダクタンス行列を組む。

    TSS と同じ位置の車両も自分のノードを持ち、R_FLOOR の枝でつなぐ。
    """
    snap.validate(line)
    n, m = line.n_tss, snap.n_vehicles

    pos = np.concatenate([line.positions, snap.positions])
    is_tss = np.concatenate([np.ones(n, dtype=bool), np.zeros(m, dtype=bool)])
    ref = np.concatenate([np.arange(n), np.arange(m)])
    order = np.lexsort((ref, ~is_tss, pos))

    pos, is_tss, ref = pos[order], is_tss[order], ref[order]
    tss_nodes = np.flatnonzero(is_tss)
    vehicle_nodes = np.flatnonzero(~is_tss)
    snap_idx = ref[vehicle_nodes]
    ref = ref.copy()
    ref[vehicle_nodes] = np.arange(m)

    r = _branch_resistances(line, pos, tss_nodes)
    g = 1.0 / r
    diag = np.zeros(n + m)
    diag[:-1] += g
    diag[1:] += g
    y = sparse.diags([-g, diag, -g], [-1, 0, 1], format="csr")

    dense = y.toarray()
    y_tt = dense[np.ix_(tss_nodes, tss_nodes)]
    y_vt = dense[np.ix_(vehicle_nodes, tss_nodes)]
    banded = np.zeros((3, m))
    if m:
        banded[1] = dense[vehicle_nodes, vehicle_nodes]
        off = dense[vehicle_nodes[:-1], vehicle_nodes[1:]]
        banded[0, 1:] = off
        banded[2, :-1] = off

    return ChainNetwork(
        line=line,
        time=snap.time,
        node_positions=_frozen(pos),
        node_is_tss=is_tss,
        node_ref=ref,
        branch_r=_frozen(r),
        conductance=y,
        tss_nodes=tss_nodes,
        vehicle_nodes=vehicle_nodes,
        vehicle_ids=tuple(snap.vehicle_ids[i] for i in snap_idx),
        vehicle_positions=_frozen(snap.positions[snap_idx]),
        vehicle_power=_frozen(snap.powers[snap_idx]),
        y_tt=y_tt,
        y_vt=y_vt,
        y_vv_banded=banded,
    )


# ------------------------------------------------------------------ #
# TSS 単位の構造行列                                                 #
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class StructuralMatrices:
    """協調制御サブシステムの行列（枝 i は TSS i と i+1 をつなぐ）"""

    r: np.ndarray          # r_ci + r_ri, ohm
    r_c: np.ndarray
    r_r: np.ndarray
    D: np.ndarray          # (N-1)xN, KVL difference
    G: np.ndarray          # (N-1)x(N-1), diag branch conductance
    R: np.ndarray          # (N-1)x(N-1), diag branch resistance
    A: np.ndarray          # (N-1)xN, lower ones, I_c = A I_s
    B: np.ndarray          # Nx(N-1), incidence, I_s = B I_c
    S: np.ndarray          # Nx(N-1), upper ones, U_dm = S U_b
    R_tilde: np.ndarray    # A^T R A
    laplacian: np.ndarray  # D^T G D

    @property
    def n_tss(self) -> int:
        return self.D.shape[1]


def structural_matrices(line: LineModel) -> StructuralMatrices:
    n = line.n_tss
    r = np.asarray(line.seg_r, dtype=float)
    D = np.eye(n - 1, n) - np.eye(n - 1, n, k=1)
    G = np.diag(1.0 / r)
    R = np.diag(r)
    A = np.tril(np.ones((n - 1, n)))
    S = np.triu(np.ones((n, n - 1)))
    return StructuralMatrices(
        r=r,
        r_c=np.asarray(line.seg_r_c, dtype=float),
        r_r=np.asarray(line.seg_r_r, dtype=float),
        D=D,
        G=G,
        R=R,
        A=A,
        B=D.T.copy(),
        S=S,
        R_tilde=A.T @ R @ A,
        laplacian=D.T @ G @ D,
    )
