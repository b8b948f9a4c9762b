#!/usr/bin/env python3
"""
benchmark.py
============

手法ごとの 1 時刻あたり計算時間を計測する（I/O を除く warm 計測）。
mean / median / p95、手法間の速度比、外側反復回数のヒストグラムを返す。
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.core.errors import InfeasibleSnapshot, PowerFlowDivergence
from src.core.quasiopf import QuasiOpfOptions
from src.core.topology import LineModel, Snapshot, StructuralMatrices, structural_matrices
from src.data.scenario import Scenario

from .cycle_engine import solve_instant
from .refopf import OpfOptions

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


@dataclass(frozen=True)
class BenchmarkReport:
    timings: pd.DataFrame          # label, method, time_s, seconds, iterations, status
    summary: pd.DataFrame          # label ごとの n, mean, median, p95, failed
    speedups: Dict[str, float]     # "a_vs_b" = mean_b / mean_a
    histograms: Dict[str, Dict[int, int]]


def unique_labels(methods: Sequence[str]) -> List[str]:
    """同じ手法が複数回あれば 2 回目以降を "quasi#2" のように区別する。"""
    seen: Dict[str, int] = {}
    out = []
    for m in methods:
        seen[m] = seen.get(m, 0) + 1
        out.append(m if seen[m] == 1 else f"{m}#{seen[m]}")
    return out


def _time_instant(
    line: LineModel,
    snap: Snapshot,
    method: str,
    mats: Optional[StructuralMatrices],
    quasi_opts: Optional[QuasiOpfOptions],
    opf_opts: Optional[OpfOptions],
) -> Dict:
    t0 = time.perf_counter()
    status, iters = "ok", np.nan
    try:
        out = solve_instant(line, snap, method, mats=mats, quasi_opts=quasi_opts, opf_opts=opf_opts)
        iters = out.iterations
    except (InfeasibleSnapshot, PowerFlowDivergence):
        status = "failed"
    return {
        "method": method,
        "time_s": snap.time,
        "seconds": time.perf_counter() - t0,
        "iterations": iters,
        "status": status,
    }


def _worker(args: Tuple) -> Dict:
    line, snap, method, quasi_opts, opf_opts = args
    return _time_instant(line, snap, method, None, quasi_opts, opf_opts)


def benchmark(
    line: LineModel,
    scenario: Scenario,
    methods: Sequence[str],
    *,
    warmup: int = 1,
    workers: int = 1,
    quasi_opts: Optional[QuasiOpfOptions] = None,
    opf_opts: Optional[OpfOptions] = None,
) -> BenchmarkReport:
    """
    workers > 1 なら時刻をプロセスに振り分ける。各時刻の計測はそのプロセス内の
    1 回分なので、平均の比較は同じ workers 同士で行うこと。
    """
    methods = list(methods)
    if not methods:
        raise ValueError("benchmark needs at least one method")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    labels = unique_labels(methods)
    mats = structural_matrices(line)

    rows = []
    for label, method in zip(labels, methods):
        for snap in scenario.snapshots[:warmup]:
            try:
                solve_instant(line, snap, method, mats=mats, quasi_opts=quasi_opts, opf_opts=opf_opts)
            except (InfeasibleSnapshot, PowerFlowDivergence):
                pass
        if workers > 1 and len(scenario) > 1:
            jobs = [(line, snap, method, quasi_opts, opf_opts) for snap in scenario.snapshots]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                timed = list(pool.map(_worker, jobs, chunksize=max(1, len(jobs) // (workers * 8))))
        else:
            timed = [_time_instant(line, snap, method, mats, quasi_opts, opf_opts) for snap in scenario.snapshots]
        rows.extend({"label": label, **row} for row in timed)

    timings = pd.DataFrame(rows, columns=["label", "method", "time_s", "seconds", "iterations", "status"])
    summary_rows = []
    histograms: Dict[str, Dict[int, int]] = {}
    for label in labels:
        sec = timings.loc[timings["label"] == label, "seconds"].to_numpy()
        part = timings[(timings["label"] == label) & (timings["status"] == "ok")]
        summary_rows.append(
            {
                "label": label,
                "n": len(sec),
                "mean_s": float(sec.mean()) if len(sec) else np.nan,
                "median_s": float(np.median(sec)) if len(sec) else np.nan,
                "p95_s": float(np.percentile(sec, 95)) if len(sec) else np.nan,
                "failed": int(len(sec) - len(part)),
            }
        )
        counts = part["iterations"].astype(int).value_counts().sort_index()
        histograms[label] = {int(k): int(v) for k, v in counts.items()}
    summary = pd.DataFrame(summary_rows)

    means = dict(zip(summary["label"], summary["mean_s"]))
    speedups = {
        f"{a}_vs_{b}": float(means[b] / means[a])
        for a in labels
        for b in labels
        if a != b and means[a] > 0
    }
    for _, row in summary.iterrows():
        logger.info(
            f"[Bench] {row['label']}: mean {row['mean_s'] * 1000:.2f} ms, "
            f"median {row['median_s'] * 1000:.2f} ms, p95 {row['p95_s'] * 1000:.2f} ms"
        )
    return BenchmarkReport(timings, summary, speedups, histograms)
