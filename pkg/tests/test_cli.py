#!/usr/bin/env python3
"""
pytest tests/test_cli.py
"""

import json
import logging

import numpy as np
import pytest

from src.cli import EXIT_BAD_INPUT, EXIT_INFEASIBLE, EXIT_OK, main
from src.monitor.report import read_csv


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    code = main(
        ["gen", "--tsses", "3", "--spacing", "2", "--vehicles", "2", "--duration", "60", "--out", str(out)]
    )
    assert code == EXIT_OK
    return out


def _inputs(generated):
    return ["--config", str(generated / "line.json"), "--scenario", str(generated / "scenario.csv")]


def test_gen_writes_line_and_scenario(generated):
    line = json.loads((generated / "line.json").read_text(encoding="utf-8"))
    assert line["tss_positions"] == [0.0, 2.0, 4.0]
    assert line["synthetic"] is True
    first = (generated / "scenario.csv").read_text(encoding="utf-8").splitlines()[0]
    assert first == "# schema: scenario v1"


def test_cycle_writes_metrics(generated, tmp_path):
    code = main(["cycle", *_inputs(generated), "--method", "quasi,baseline", "--out", str(tmp_path)])
    assert code == EXIT_OK
    metrics = json.loads((tmp_path / "metrics_quasi.json").read_text(encoding="utf-8"))
    assert metrics["n_instants"] == 60
    assert metrics["synthetic_geometry"] is True
    assert "recuperation_definition" in metrics
    table = read_csv(tmp_path / "metrics.csv")
    assert list(table["method"]) == ["quasi", "baseline"]
    assert (tmp_path / "cycle_baseline.csv").exists()


def test_snapshot_reports(generated, tmp_path):
    code = main(["snapshot", *_inputs(generated), "--time", "30", "--method", "quasi,baseline", "--out", str(tmp_path)])
    assert code == EXIT_OK
    for name in ("snapshot_quasi.csv", "snapshot_baseline.csv", "snapshot_diff.csv", "snapshot_quasi.svg"):
        assert (tmp_path / name).exists()
    first = (tmp_path / "snapshot_quasi.csv").read_text(encoding="utf-8").splitlines()[0]
    assert first == "# schema: snapshot v1"
    summary = json.loads((tmp_path / "snapshot_summary.json").read_text(encoding="utf-8"))
    assert set(summary["objective_mw"]) == {"quasi", "baseline"}


def test_decompose_baseline_has_no_cc_current(generated, tmp_path):
    code = main(["decompose", *_inputs(generated), "--time", "30", "--out", str(tmp_path)])
    assert code == EXIT_OK
    frame = read_csv(tmp_path / "decomposition.csv")
    np.testing.assert_allclose(frame["i_s_cc_ka"], 0.0, atol=1e-6)
    np.testing.assert_allclose(frame["i_s_nd_ka"], frame["i_s_ka"], atol=1e-6)


def test_bench(generated, tmp_path):
    code = main(["bench", *_inputs(generated), "--methods", "quasi,baseline", "--limit", "3", "--out", str(tmp_path)])
    assert code == EXIT_OK
    summary = read_csv(tmp_path / "bench_summary.csv")
    assert list(summary["n"]) == [3, 3]


def test_missing_config(generated, tmp_path, caplog):
    absent = tmp_path / "absent.json"
    with caplog.at_level(logging.ERROR):
        code = main(["snapshot", "--config", str(absent), "--scenario", str(generated / "scenario.csv")])
    assert code == EXIT_BAD_INPUT
    assert str(absent) in caplog.text


@pytest.mark.parametrize(
    "extra",
    [
        ["--method", "magic"],
        ["--synthesize"],
        ["--bogus-flag"],
    ],
)
def test_bad_arguments(generated, tmp_path, extra):
    assert main(["cycle", *_inputs(generated), "--out", str(tmp_path), *extra]) == EXIT_BAD_INPUT


def test_infeasible_snapshot_exit_code(tmp_path):
    (tmp_path / "line.json").write_text('{"tss_positions": [0.0, 1.0], "p_lim": 0.5}', encoding="utf-8")
    (tmp_path / "scn.csv").write_text("time_s,vehicle_id,position_km,power_mw\n0,A,0.5,6.0\n", encoding="utf-8")
    code = main(
        [
            "snapshot",
            "--config", str(tmp_path / "line.json"),
            "--scenario", str(tmp_path / "scn.csv"),
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == EXIT_INFEASIBLE


# ------------------------------------------------------------------ #
# 3 TSS の基準例                                                      #
# ------------------------------------------------------------------ #
SNAPSHOT_COLUMNS = [
    "tss",
    "position_km",
    "u_s_star_kv",
    "u_s_kv",
    "i_s_ka",
    "i_s_nd_ka",
    "i_s_cc_star_ka",
    "p_s_mw",
    "p_aux_mw",
    "curtailment_mw",
]


@pytest.fixture(scope="module")
def heavy_example(tmp_path_factory):
    """2 km 間隔 3 TSS、p_lim 3 MW、中央付近に 6 MW の力行車"""
    root = tmp_path_factory.mktemp("heavy")
    (root / "line.json").write_text('{"tss_positions": [0.0, 2.0, 4.0], "p_lim": 3.0}', encoding="utf-8")
    (root / "scn.csv").write_text("time_s,vehicle_id,position_km,power_mw\n0,A,2.2,6.0\n", encoding="utf-8")
    out = root / "out"
    code = main(
        [
            "snapshot",
            "--config", str(root / "line.json"),
            "--scenario", str(root / "scn.csv"),
            "--method", "quasi",
            "--out", str(out),
        ]
    )
    assert code == EXIT_OK
    return out


def test_snapshot_quasi_golden_file(heavy_example):
    lines = (heavy_example / "snapshot_quasi.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# schema: snapshot v1"
    assert lines[1] == ",".join(SNAPSHOT_COLUMNS)
    assert len(lines) == 2 + 3

    frame = read_csv(heavy_example / "snapshot_quasi.csv")
    assert list(frame["tss"]) == [1, 2, 3]
    np.testing.assert_allclose(frame["position_km"], [0.0, 2.0, 4.0])
    # 中央 TSS は p_lim に張り付き、その分だけ電圧指令がくぼむ
    assert frame["p_s_mw"][1] == pytest.approx(3.0, abs=1e-3)
    assert (frame["p_s_mw"] <= 3.0 + 1e-6).all()
    assert frame["u_s_star_kv"].max() == pytest.approx(0.88, abs=1e-6)
    assert frame["u_s_star_kv"].idxmin() == 1
    assert frame["i_s_cc_star_ka"][1] < 0
    assert frame["i_s_cc_star_ka"].sum() == pytest.approx(0.0, abs=1e-5)
    np.testing.assert_allclose(frame["u_s_kv"], frame["u_s_star_kv"], atol=2e-6)
    np.testing.assert_allclose(frame["curtailment_mw"], 0.0)

    summary = json.loads((heavy_example / "snapshot_summary.json").read_text(encoding="utf-8"))
    assert summary["objective_mw"]["quasi"] == pytest.approx(frame["p_s_mw"].sum(), abs=1e-5)


def test_bench_same_method_twice_is_even(generated, tmp_path):
    code = main(
        [
            "bench", *_inputs(generated),
            "--methods", "quasi,quasi",
            "--limit", "20",
            "--workers", "1",
            "--out", str(tmp_path),
        ]
    )
    assert code == EXIT_OK
    speedups = json.loads((tmp_path / "bench.json").read_text(encoding="utf-8"))["speedups"]
    assert set(speedups) == {"quasi_vs_quasi#2", "quasi#2_vs_quasi"}
    assert 0.25 <= speedups["quasi_vs_quasi#2"] <= 4.0
    assert speedups["quasi_vs_quasi#2"] * speedups["quasi#2_vs_quasi"] == pytest.approx(1.0)


def test_bench_with_workers(generated, tmp_path):
    code = main(
        ["bench", *_inputs(generated), "--methods", "baseline", "--limit", "4", "--workers", "2", "--out", str(tmp_path)]
    )
    assert code == EXIT_OK
    assert list(read_csv(tmp_path / "bench_summary.csv")["n"]) == [4]


def test_unwritable_output_is_bad_input(generated, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory", encoding="utf-8")
    code = main(["decompose", *_inputs(generated), "--time", "30", "--out", str(blocker / "out")])
    assert code == EXIT_BAD_INPUT


def test_gen_short_cycle_with_full_fleet(tmp_path):
    code = main(["gen", "--vehicles", "46", "--duration", "600", "--out", str(tmp_path)])
    assert code == EXIT_OK
    table = read_csv(tmp_path / "scenario.csv")
    assert table["time_s"].max() == 599
    assert table["vehicle_id"].nunique() == 10
