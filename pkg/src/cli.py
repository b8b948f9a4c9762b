#!/usr/bin/env python3
"""
cli.py
======

コマンドライン
---------------------------
$ python -m src.cli gen --tsses 23 --vehicles 46 --seed 7 --out out/
$ python -m src.cli snapshot --config config/metro_line.json --scenario out/scenario.csv --time 600 --method quasi,ref
$ python -m src.cli cycle --config config/metro_line.json --scenario out/scenario.csv --method quasi --workers 4
$ python -m src.cli bench --config config/metro_line.json --scenario out/scenario.csv --methods quasi,ref --limit 100 --workers 4
$ python -m src.cli decompose --config config/metro_line.json --scenario out/scenario.csv --time 600

終了コード: 0 = 成功、1 = 入力エラー（設定・シナリオ・引数、ファイルの読み書き）、
2 = 実行不可能なスナップショット / 潮流発散
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.core.errors import ConfigError, InfeasibleSnapshot, PowerFlowDivergence, ScenarioError
from src.core.powerflow import PF_POWER_TOL_MW, solution_cost, solve_constant_power
from src.core.quasiopf import QuasiOpfOptions, quasi_opf
from src.core.superposition import decompose, decomposition_frame
from src.core.topology import LineModel, Snapshot, assemble_snapshot, build_line, equal_spacing_config, structural_matrices
from src.data.line_config import load_line, save_line_config
from src.data.scenario import Scenario, load_scenario, write_scenario
from src.data.synth import SynthesisParams, synthesize_scenario
from src.monitor.report import plot_snapshot, snapshot_frame, write_csv, write_json
from src.research.benchmark import benchmark
from src.research.cycle_engine import METHODS, run_cycle
from src.research.refopf import OpfOptions, solve_opf

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

EXIT_OK = 0
EXIT_BAD_INPUT = 1
EXIT_INFEASIBLE = 2


class UsageError(ValueError):
    """引数エラー（argparse の SystemExit を終了コード 1 に揃える）"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: Optional[Path] = None
    scenario: Optional[Path] = None
    synth: Optional[SynthesisParams] = None
    methods: Tuple[str, ...] = ("quasi",)
    out: Path = Path("output")
    seed: int = 1
    workers: int = 1
    time: Optional[float] = None
    limit: Optional[int] = None
    quasi_opts: QuasiOpfOptions = field(default_factory=QuasiOpfOptions)
    opf_opts: OpfOptions = field(default_factory=OpfOptions)

    def validate(self) -> None:
        if self.config is not None and not self.config.exists():
            raise FileNotFoundError(f"config not found: {self.config}")
        if self.scenario is not None and not self.scenario.exists():
            raise FileNotFoundError(f"scenario not found: {self.scenario}")
        if self.command != "gen" and (self.scenario is None) == (self.synth is None):
            raise UsageError("exactly one scenario source is required (--scenario or --synthesize)")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise UsageError(f"unknown method(s): {', '.join(unknown)}")
        if self.workers < 1:
            raise UsageError("--workers must be at least 1")


# ------------------------------------------------------------------ #
# 引数                                                                #
# ------------------------------------------------------------------ #
def _methods(text: str) -> Tuple[str, ...]:
    return tuple(m.strip() for m in text.split(",") if m.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tps", description="DC traction power flow toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, scenario: bool = True) -> None:
        p.add_argument("--config", type=Path, help="line JSON (default: config/metro_line.json)")
        p.add_argument("--out", type=Path, default=Path("output"))
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--pf-tol", type=float, default=PF_POWER_TOL_MW, help="power mismatch tolerance (MW)")
        p.add_argument("--qopf-tol-v", type=float, default=QuasiOpfOptions.tol_v, help="voltage order tolerance (V)")
        p.add_argument("--qopf-max-outer", type=int, default=QuasiOpfOptions.max_outer)
        p.add_argument("--opf-max-iter", type=int, default=OpfOptions.max_iter)
        if scenario:
            p.add_argument("--scenario", type=Path)
            p.add_argument("--synthesize", action="store_true", help="synthesize the scenario instead of loading one")
        p.add_argument("--vehicles", type=int, default=46)
        p.add_argument("--headway", type=float, default=120.0)
        p.add_argument("--duration", type=float, default=5439.0)
        p.add_argument("--mirrored", action="store_true")

    g = sub.add_parser("gen", help="synthesize a scenario CSV")
    common(g, scenario=False)
    g.add_argument("--tsses", type=int, default=23)
    g.add_argument("--spacing", type=float, default=1.8, help="TSS spacing (km)")

    s = sub.add_parser("snapshot", help="solve one instant and write per-TSS reports")
    common(s)
    s.add_argument("--time", type=float)
    s.add_argument("--method", type=_methods, default=("quasi",))

    c = sub.add_parser("cycle", help="replay a whole cycle")
    common(c)
    c.add_argument("--method", type=_methods, default=("quasi",))
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--limit", type=int, help="first N instants only")

    b = sub.add_parser("bench", help="time methods per instant")
    common(b)
    b.add_argument("--methods", type=_methods, default=("quasi", "ref"))
    b.add_argument("--limit", type=int, help="first N instants only")
    b.add_argument("--workers", type=int, default=1)

    d = sub.add_parser("decompose", help="write the superposition decomposition of one instant")
    common(d)
    d.add_argument("--time", type=float)
    d.add_argument("--method", type=_methods, default=("baseline",))
    return parser


def manifest_from_args(args: argparse.Namespace) -> RunManifest:
    synth = None
    if args.command == "gen" or getattr(args, "synthesize", False):
        synth = SynthesisParams(
            n_vehicles=args.vehicles,
            headway_s=args.headway,
            duration_s=args.duration,
            mirrored=args.mirrored,
            seed=args.seed,
        )
    methods = getattr(args, "methods", None) or getattr(args, "method", ("quasi",))
    return RunManifest(
        command=args.command,
        config=args.config,
        scenario=getattr(args, "scenario", None),
        synth=synth,
        methods=tuple(methods),
        out=args.out,
        seed=args.seed,
        workers=getattr(args, "workers", 1),
        time=getattr(args, "time", None),
        limit=getattr(args, "limit", None),
        quasi_opts=QuasiOpfOptions(
            tol_v=args.qopf_tol_v, max_outer=args.qopf_max_outer, pf_tol=args.pf_tol
        ),
        opf_opts=OpfOptions(max_iter=args.opf_max_iter, pf_tol=args.pf_tol),
    )


# ------------------------------------------------------------------ #
# 共通処理                                                            #
# ------------------------------------------------------------------ #
DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "config" / "metro_line.json"


def _line(m: RunManifest) -> LineModel:
    return load_line(m.config or DEFAULT_CONFIG)


def _scenario(m: RunManifest, line: LineModel) -> Scenario:
    scn = load_scenario(m.scenario, line) if m.scenario is not None else synthesize_scenario(line, m.synth)
    if m.limit is not None:
        scn = scn.head(m.limit)
    return scn


def _pick(scn: Scenario, time_s: Optional[float]) -> Snapshot:
    if time_s is not None:
        return scn.at(time_s)
    if len(scn) != 1:
        raise UsageError(f"scenario has {len(scn)} instants; choose one with --time")
    return scn.snapshots[0]


# ------------------------------------------------------------------ #
# コマンド                                                            #
# ------------------------------------------------------------------ #
def cmd_gen(m: RunManifest, tsses: int = 23, spacing: float = 1.8) -> List[Path]:
    written = []
    if m.config is not None:
        line = _line(m)
    else:
        cfg = equal_spacing_config(tsses, spacing)
        line = build_line(cfg)
        written.append(save_line_config(cfg, m.out / "line.json"))
    scn = synthesize_scenario(line, m.synth)
    written.append(write_scenario(scn, m.out / "scenario.csv"))
    logger.info(f"[CLI] gen: wrote {', '.join(str(p) for p in written)}")
    return written


def _solve_for_report(line: LineModel, snap: Snapshot, method: str, m: RunManifest) -> Tuple[pd.DataFrame, float]:
    mats = structural_matrices(line)
    if method == "quasi":
        res = quasi_opf(line, snap, m.quasi_opts, mats=mats)
        sol = res.solution
        dec = decompose(mats, sol.u_tss, sol.tss_currents)
        frame = snapshot_frame(
            sol,
            dec,
            u_s_star=res.order.u_s_star,
            i_s_cc_star=res.order.i_s_cc_star,
            curtailment=res.order.curtailment,
        )
        return frame, res.objective
    if method == "ref":
        sol = solve_opf(line, snap, m.opf_opts).solution
    else:
        sol = solve_constant_power(assemble_snapshot(line, snap), np.full(line.n_tss, line.u_tss_max))
    dec = decompose(mats, sol.u_tss, sol.tss_currents)
    return snapshot_frame(sol, dec), solution_cost(sol)


def cmd_snapshot(m: RunManifest) -> List[Path]:
    line = _line(m)
    snap = _pick(_scenario(m, line), m.time)
    written: List[Path] = []
    frames = {}
    summary = {"time_s": snap.time, "line": line.name, "synthetic_geometry": line.synthetic, "objective_mw": {}}
    for method in m.methods:
        frame, cost = _solve_for_report(line, snap, method, m)
        frames[method] = frame
        summary["objective_mw"][method] = cost
        written.append(write_csv(frame, m.out / f"snapshot_{method}.csv", "snapshot"))
        written.append(plot_snapshot(frame, m.out / f"snapshot_{method}.svg", f"{method} t={snap.time:g} s"))

    if len(frames) > 1:
        base_name, base = next(iter(frames.items()))
        diffs = []
        for name, frame in list(frames.items())[1:]:
            diffs.append(
                pd.DataFrame(
                    {
                        "tss": frame["tss"],
                        "method": name,
                        "vs": base_name,
                        "du_s_star_kv": frame["u_s_star_kv"] - base["u_s_star_kv"],
                        "dp_s_mw": frame["p_s_mw"] - base["p_s_mw"],
                    }
                )
            )
        written.append(write_csv(pd.concat(diffs, ignore_index=True), m.out / "snapshot_diff.csv", "snapshot_diff"))
    written.append(write_json(summary, m.out / "snapshot_summary.json"))
    return written


def cmd_cycle(m: RunManifest) -> List[Path]:
    line = _line(m)
    scn = _scenario(m, line)
    written: List[Path] = []
    rows = []
    for method in m.methods:
        res = run_cycle(line, scn, method, workers=m.workers, quasi_opts=m.quasi_opts, opf_opts=m.opf_opts)
        written.append(write_csv(res.records, m.out / f"cycle_{method}.csv", "cycle_records"))
        payload = res.metrics.to_dict()
        payload.update({"provenance": scn.provenance, "synthetic_geometry": line.synthetic, "dt_s": scn.dt})
        written.append(write_json(payload, m.out / f"metrics_{method}.json"))
        row = {k: v for k, v in payload.items() if not isinstance(v, (dict, list, tuple))}
        row["tss_u_min"], row["tss_u_max"] = res.metrics.tss_voltage_range
        row["veh_u_min"], row["veh_u_max"] = res.metrics.vehicle_voltage_range
        rows.append(row)
    written.append(write_csv(pd.DataFrame(rows), m.out / "metrics.csv", "cycle_metrics"))
    return written


def cmd_bench(m: RunManifest) -> List[Path]:
    line = _line(m)
    scn = _scenario(m, line)
    rep = benchmark(line, scn, m.methods, workers=m.workers, quasi_opts=m.quasi_opts, opf_opts=m.opf_opts)
    return [
        write_csv(rep.timings, m.out / "bench_timings.csv", "bench_timings"),
        write_csv(rep.summary, m.out / "bench_summary.csv", "bench_summary"),
        write_json({"speedups": rep.speedups, "iteration_histograms": rep.histograms}, m.out / "bench.json"),
    ]


def cmd_decompose(m: RunManifest) -> List[Path]:
    line = _line(m)
    snap = _pick(_scenario(m, line), m.time)
    mats = structural_matrices(line)
    method = m.methods[0]
    if method == "quasi":
        sol = quasi_opf(line, snap, m.quasi_opts, mats=mats).solution
    elif method == "ref":
        sol = solve_opf(line, snap, m.opf_opts).solution
    else:
        sol = solve_constant_power(assemble_snapshot(line, snap), np.full(line.n_tss, line.u_tss_max))
    dec = decompose(mats, sol.u_tss, sol.tss_currents)
    return [write_csv(decomposition_frame(dec, line.positions), m.out / "decomposition.csv", "decomposition")]


COMMANDS = {
    "snapshot": cmd_snapshot,
    "cycle": cmd_cycle,
    "bench": cmd_bench,
    "decompose": cmd_decompose,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        manifest = manifest_from_args(args)
        manifest.validate()
        if manifest.command == "gen":
            cmd_gen(manifest, args.tsses, args.spacing)
        else:
            COMMANDS[manifest.command](manifest)
    except (InfeasibleSnapshot, PowerFlowDivergence) as exc:
        logger.error(f"[CLI] {type(exc).__name__}: {exc}")
        return EXIT_INFEASIBLE
    except (ConfigError, ScenarioError, OSError, ValueError) as exc:
        logger.error(f"[CLI] {type(exc).__name__}: {exc}")
        return EXIT_BAD_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
