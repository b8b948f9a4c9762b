#!/usr/bin/env python3
"""
scenario.py  ―  走行シナリオ CSV の読み書き
----------------------------------------------------------------
* load_scenario()  : CSV -> Scenario（行番号つきで検証）
* write_scenario() : Scenario -> CSV（固定小数で書くので再生成はバイト一致）

列: time_s, vehicle_id, position_km, power_mw
その時刻に行が無い車両は運休扱い（ネットワークから外す）。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.core.errors import ScenarioError
from src.core.topology import LineModel, Snapshot

from .files import atomic_write_text

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

# ─────────────────────────────────────────────
COLUMNS = ["time_s", "vehicle_id", "position_km", "power_mw"]
SCHEMA_LINE = "# schema: scenario v1"
DEFAULT_DT = 1.0          # s
DT_RTOL = 1e-9
FLOAT_FORMAT = "%.6f"
# ─────────────────────────────────────────────


@dataclass(frozen=True)
class Scenario:
    snapshots: Tuple[Snapshot, ...]
    dt: float = DEFAULT_DT
    roster: Tuple[str, ...] = ()
    provenance: str = "loaded"
    seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.snapshots)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.snapshots], dtype=float)

    def at(self, time_s: float) -> Snapshot:
        """time_s ちょうどのスナップショット（無ければ ScenarioError）"""
        times = self.times
        hit = np.flatnonzero(np.isclose(times, time_s, rtol=0.0, atol=1e-9))
        if hit.size == 0:
            raise ScenarioError(f"no snapshot at t={time_s} s")
        return self.snapshots[int(hit[0])]

    def head(self, n: int) -> "Scenario":
        return Scenario(self.snapshots[:n], self.dt, self.roster, self.provenance, self.seed)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (s.time, vid, x, p)
            for s in self.snapshots
            for vid, x, p in zip(s.vehicle_ids, s.positions, s.powers)
        ]
        return pd.DataFrame(rows, columns=COLUMNS)

    def validate(self, line: LineModel) -> None:
        times = self.times
        if np.any(np.diff(times) <= 0):
            raise ScenarioError("snapshot times not strictly increasing")
        for snap in self.snapshots:
            snap.validate(line)


def _leading_comments(path: Path) -> int:
    n = 0
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            if not line.startswith("#"):
                break
            n += 1
    return n


def scenario_from_frame(
    df: pd.DataFrame,
    line: LineModel,
    *,
    dt: Optional[float] = None,
    provenance: str = "loaded",
    seed: Optional[int] = None,
    row_offset: int = 2,
) -> Scenario:
    """DataFrame -> Scenario。row_offset は index 0 に対応する CSV の行番号。"""
    missing = [c for c in COLUMNS if c not in df.columns]
    if missing:
        raise ScenarioError(f"missing columns: {', '.join(missing)}")

    df = df[COLUMNS].copy()
    df["vehicle_id"] = df["vehicle_id"].astype(str).str.strip()
    for col in ("time_s", "position_km", "power_mw"):
        df[col] = pd.to_numeric(df[col], errors="coerce")
    bad = df[["time_s", "position_km", "power_mw"]].isna().any(axis=1) | (df["vehicle_id"] == "")
    if bad.any():
        raise ScenarioError("malformed row", row=int(bad.idxmax()) + row_offset)

    out_of_line = (df["position_km"] < 0) | (df["position_km"] > line.length)
    if out_of_line.any():
        i = int(out_of_line.idxmax())
        raise ScenarioError(
            f"position {df.at[i, 'position_km']} km outside [0, {line.length}]", row=i + row_offset
        )
    envelope = (df["power_mw"] < line.p_regen_max - 1e-9) | (df["power_mw"] > line.p_tract_max + 1e-9)
    if envelope.any():
        i = int(envelope.idxmax())
        raise ScenarioError(
            f"power {df.at[i, 'power_mw']} MW outside [{line.p_regen_max}, {line.p_tract_max}]",
            row=i + row_offset,
        )
    dup = df.duplicated(subset=["time_s", "vehicle_id"])
    if dup.any():
        raise ScenarioError("duplicate vehicle at the same time", row=int(dup.idxmax()) + row_offset)

    times = np.unique(df["time_s"].to_numpy())
    if times.size >= 2:
        steps = np.diff(times)
        if not np.allclose(steps, steps[0], rtol=DT_RTOL, atol=1e-9):
            raise ScenarioError(f"non-uniform time step ({steps.min()} .. {steps.max()} s)")
        step = float(steps[0])
        if dt is not None and not np.isclose(step, dt):
            raise ScenarioError(f"time step {step} s does not match dt={dt} s")
    else:
        step = DEFAULT_DT if dt is None else float(dt)

    snapshots = []
    for t, grp in df.groupby("time_s", sort=True):
        snapshots.append(
            Snapshot.from_records(
                float(t), zip(grp["vehicle_id"], grp["position_km"], grp["power_mw"])
            )
        )
    roster = tuple(dict.fromkeys(df["vehicle_id"]))
    scn = Scenario(tuple(snapshots), step, roster, provenance, seed)
    scn.validate(line)
    return scn


def load_scenario(path: Union[str, Path], line: LineModel) -> Scenario:
    """
    Raises
    ------
    FileNotFoundError
    ScenarioError
        row は CSV の 1 始まり行番号（ヘッダ = 1 行目）。
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scenario not found: {path}")
    skip = _leading_comments(path)
    try:
        df = pd.read_csv(path, skiprows=skip, dtype={"vehicle_id": str}, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ScenarioError(f"{path}: unreadable CSV ({exc})") from exc
    scn = scenario_from_frame(df, line, row_offset=skip + 2)
    logger.info(f"[Scenario] {path.name}: {len(scn)} snapshots, {len(scn.roster)} vehicles, dt={scn.dt} s")
    return scn


def write_scenario(scn: Scenario, path: Union[str, Path]) -> Path:
    body = scn.to_frame().to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return atomic_write_text(path, SCHEMA_LINE + "\n" + body)
