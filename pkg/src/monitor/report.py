#!/usr/bin/env python3
"""
report.py
=========

CSV / JSON / SVG 出力
---------------------------
* write_csv()      : 先頭に "# schema: <name> v1" を付け、src.data.files で置き換え書き込み
* write_json()     : 同じく原子的に書く
* snapshot_frame() : TSS ごとの指令・電流・電力の表
* plot_snapshot()  : 棒（I_s_nd, I*_s_cc）+ 折れ線（U*_s）の SVG
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from src.core.powerflow import PowerFlowSolution  # noqa: E402
from src.core.superposition import Decomposition  # noqa: E402
from src.data.files import atomic_path, atomic_write_text  # noqa: E402

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.6f"

PathLike = Union[str, Path]


def write_csv(frame: pd.DataFrame, path: PathLike, schema: str) -> Path:
    body = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return atomic_write_text(Path(path), f"# schema: {schema} v{SCHEMA_VERSION}\n" + body)


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_json(payload: dict, path: PathLike) -> Path:
    return atomic_write_text(Path(path), json.dumps(payload, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def snapshot_frame(
    sol: PowerFlowSolution,
    dec: Decomposition,
    *,
    u_s_star: Optional[np.ndarray] = None,
    i_s_cc_star: Optional[np.ndarray] = None,
    curtailment: Optional[np.ndarray] = None,
) -> pd.DataFrame:
    """
    TSS ごとの u_s_star, i_s_nd, i_s_cc_star, p_s, curtailment。
    指令が無い手法（ref / baseline）は検証解の分解値で埋める。
    """
    line = sol.net.line
    n = line.n_tss
    return pd.DataFrame(
        {
            "tss": np.arange(1, n + 1),
            "position_km": line.positions,
            "u_s_star_kv": sol.u_tss if u_s_star is None else u_s_star,
            "u_s_kv": sol.u_tss,
            "i_s_ka": sol.tss_currents,
            "i_s_nd_ka": dec.i_s_nd,
            "i_s_cc_star_ka": dec.i_s_cc if i_s_cc_star is None else i_s_cc_star,
            "p_s_mw": sol.tss_powers,
            "p_aux_mw": line.p_aux,
            "curtailment_mw": np.zeros(n) if curtailment is None else curtailment,
        }
    )


def plot_snapshot(frame: pd.DataFrame, path: PathLike, title: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = frame["tss"].to_numpy()
    fig, ax = plt.subplots(figsize=(10, 4.5))
    width = 0.4
    ax.bar(x - width / 2, frame["i_s_nd_ka"], width, label="I_s_nd (kA)", color="#8da0cb")
    ax.bar(x + width / 2, frame["i_s_cc_star_ka"], width, label="I*_s_cc (kA)", color="#fc8d62")
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.set_xlabel("TSS")
    ax.set_ylabel("current (kA)")
    ax.set_xticks(x)

    ax2 = ax.twinx()
    ax2.plot(x, frame["u_s_star_kv"], marker="o", color="#1b9e77", label="U*_s (kV)")
    ax2.set_ylabel("voltage order (kV)")

    handles = ax.get_legend_handles_labels()
    handles2 = ax2.get_legend_handles_labels()
    ax.legend(handles[0] + handles2[0], handles[1] + handles2[1], loc="upper right", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    with atomic_path(path) as tmp:
        fig.savefig(tmp, format="svg")
    plt.close(fig)
    return path
