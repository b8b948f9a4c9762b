#!/usr/bin/env python3
"""
pytest tests/test_scenario.py
"""

import numpy as np
import pytest

from src.core.errors import ConfigError, ScenarioError
from src.core.topology import LineConfig
from src.data.files import atomic_path, atomic_write_text
from src.data.line_config import load_line_config, save_line_config
from src.data.scenario import SCHEMA_LINE, load_scenario, write_scenario
from src.data.synth import SynthesisParams, synthesize_scenario

HEADER = "time_s,vehicle_id,position_km,power_mw\n"


def _csv(tmp_path, body, name="scn.csv", header=HEADER):
    path = tmp_path / name
    path.write_text(header + body, encoding="utf-8")
    return path


# ------------------------------------------------------------------ #
# load_scenario                                                      #
# ------------------------------------------------------------------ #
def test_load_groups_rows_by_time(tmp_path, three_tss_line):
    path = _csv(tmp_path, "0,A,0.5,1.0\n0,B,1.2,-0.5\n1,A,0.6,1.1\n")
    scn = load_scenario(path, three_tss_line)
    assert len(scn) == 2
    assert scn.dt == 1.0
    assert scn.roster == ("A", "B")
    # 時刻 1 に行の無い B は運休扱い
    assert scn.at(1.0).vehicle_ids == ("A",)
    np.testing.assert_allclose(scn.at(0.0).powers, [1.0, -0.5])


def test_single_row_is_one_snapshot(tmp_path, three_tss_line):
    scn = load_scenario(_csv(tmp_path, "5,A,0.5,1.0\n"), three_tss_line)
    assert len(scn) == 1
    assert scn.times[0] == 5.0


def test_position_beyond_line_reports_row(tmp_path, three_tss_line):
    path = _csv(tmp_path, "0,A,0.5,1.0\n0,B,2.5,1.0\n")
    with pytest.raises(ScenarioError) as err:
        load_scenario(path, three_tss_line)
    assert err.value.row == 3
    assert "row 3" in str(err.value)


def test_row_numbers_count_comment_lines(tmp_path, three_tss_line):
    path = _csv(tmp_path, "0,A,0.5,1.0\n0,B,2.5,1.0\n", header=SCHEMA_LINE + "\n" + HEADER)
    with pytest.raises(ScenarioError) as err:
        load_scenario(path, three_tss_line)
    assert err.value.row == 4


def test_malformed_value(tmp_path, three_tss_line):
    with pytest.raises(ScenarioError) as err:
        load_scenario(_csv(tmp_path, "0,A,0.5,abc\n"), three_tss_line)
    assert err.value.row == 2


def test_power_outside_envelope(tmp_path, three_tss_line):
    with pytest.raises(ScenarioError):
        load_scenario(_csv(tmp_path, "0,A,0.5,12.0\n"), three_tss_line)


def test_duplicate_vehicle(tmp_path, three_tss_line):
    with pytest.raises(ScenarioError):
        load_scenario(_csv(tmp_path, "0,A,0.5,1.0\n0,A,0.7,1.0\n"), three_tss_line)


def test_non_uniform_time_step(tmp_path, three_tss_line):
    with pytest.raises(ScenarioError, match="non-uniform"):
        load_scenario(_csv(tmp_path, "0,A,0.5,1.0\n1,A,0.6,1.0\n3,A,0.7,1.0\n"), three_tss_line)


def test_missing_scenario_file(tmp_path, three_tss_line):
    with pytest.raises(FileNotFoundError):
        load_scenario(tmp_path / "nope.csv", three_tss_line)


def test_missing_instant_lookup(tmp_path, three_tss_line):
    scn = load_scenario(_csv(tmp_path, "0,A,0.5,1.0\n"), three_tss_line)
    with pytest.raises(ScenarioError):
        scn.at(7.0)


def test_written_scenario_reloads_byte_identical(tmp_path, metro_line):
    scn = synthesize_scenario(metro_line, SynthesisParams(n_vehicles=4, duration_s=200.0, seed=3))
    first = write_scenario(scn, tmp_path / "a.csv")
    again = write_scenario(load_scenario(first, metro_line), tmp_path / "b.csv")
    assert first.read_text(encoding="utf-8").splitlines()[0] == SCHEMA_LINE
    assert first.read_bytes() == again.read_bytes()


# ------------------------------------------------------------------ #
# line config                                                        #
# ------------------------------------------------------------------ #
def test_line_config_round_trip(tmp_path):
    cfg = LineConfig(tss_positions=[0.0, 1.5, 3.0], p_aux=[0.1, 0.2, 0.3], name="test")
    loaded = load_line_config(save_line_config(cfg, tmp_path / "line.json"))
    assert list(loaded.tss_positions) == [0.0, 1.5, 3.0]
    assert list(loaded.p_aux) == [0.1, 0.2, 0.3]
    assert loaded.name == "test"


def test_unknown_config_key(tmp_path):
    path = tmp_path / "line.json"
    path.write_text('{"tss_positions": [0, 1], "colour": "red"}', encoding="utf-8")
    with pytest.raises(ConfigError) as err:
        load_line_config(path)
    assert err.value.field == "colour"


def test_comment_keys_are_skipped(tmp_path):
    path = tmp_path / "line.json"
    path.write_text('{"_comment": "x", "tss_positions": [0, 1]}', encoding="utf-8")
    assert list(load_line_config(path).tss_positions) == [0, 1]


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_line_config(tmp_path / "absent.json")


# ------------------------------------------------------------------ #
# 置き換え書き込み                                                    #
# ------------------------------------------------------------------ #
def test_failed_write_keeps_previous_file(tmp_path):
    target = atomic_write_text(tmp_path / "sub" / "a.csv", "old\n")
    with pytest.raises(RuntimeError):
        with atomic_path(target) as tmp:
            tmp.write_text("half", encoding="utf-8")
            raise RuntimeError("disk full")
    assert target.read_text(encoding="utf-8") == "old\n"
    assert sorted(p.name for p in target.parent.iterdir()) == ["a.csv"]


def test_writers_leave_no_temporary_files(tmp_path, metro_line):
    scn = synthesize_scenario(metro_line, SynthesisParams(n_vehicles=2, duration_s=5.0))
    write_scenario(scn, tmp_path / "scenario.csv")
    save_line_config(LineConfig(tss_positions=[0.0, 1.0]), tmp_path / "line.json")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["line.json", "scenario.csv"]
