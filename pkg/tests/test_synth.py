#!/usr/bin/env python3
"""
pytest tests/test_synth.py
"""

import numpy as np
import pytest

from src.core.errors import ScenarioError
from src.data.scenario import write_scenario
from src.data.synth import SynthesisParams, synthesize_scenario


def _series(scn, vid):
    out = []
    for snap in scn.snapshots:
        if vid in snap.vehicle_ids:
            k = snap.vehicle_ids.index(vid)
            out.append((snap.time, snap.positions[k], snap.powers[k]))
    return np.array(out)


def test_single_trip_phases(metro_line):
    scn = synthesize_scenario(metro_line, SynthesisParams(n_vehicles=1, duration_s=120.0))
    s = _series(scn, "V01")
    power = dict(zip(s[:, 0], s[:, 2]))
    assert power[5.0] > 0            # 加速
    assert power[50.0] == 0.0        # 惰行
    assert power[90.0] < 0           # 回生ブレーキ
    assert power[110.0] == 0.0       # 停車
    pos = dict(zip(s[:, 0], s[:, 1]))
    assert pos[110.0] == pytest.approx(1.8, abs=1e-6)
    assert np.all(np.diff(s[:, 1]) >= -1e-9)


def test_envelope_and_bounds(metro_line):
    scn = synthesize_scenario(metro_line, SynthesisParams(n_vehicles=6, duration_s=600.0))
    df = scn.to_frame()
    assert df["power_mw"].max() <= metro_line.p_tract_max + 1e-9
    assert df["power_mw"].min() >= metro_line.p_regen_max - 1e-9
    assert df["position_km"].between(0.0, metro_line.length).all()
    assert len(scn) == 600
    assert scn.provenance == "synthesized seed=1"


def test_departures_follow_headway(metro_line):
    scn = synthesize_scenario(metro_line, SynthesisParams(n_vehicles=4, duration_s=300.0))
    assert set(scn.at(0.0).vehicle_ids) == {"V01", "V02"}
    assert set(scn.at(119.0).vehicle_ids) == {"V01", "V02"}
    assert set(scn.at(120.0).vehicle_ids) == {"V01", "V02", "V03", "V04"}
    # 偶数番号は右端から
    assert scn.at(0.0).positions[1] == pytest.approx(metro_line.length)


def test_same_seed_same_bytes(tmp_path, metro_line):
    params = SynthesisParams(n_vehicles=4, duration_s=300.0, seed=7)
    a = write_scenario(synthesize_scenario(metro_line, params), tmp_path / "a.csv")
    b = write_scenario(synthesize_scenario(metro_line, params), tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()


def test_mirrored_pairs_are_symmetric(metro_line):
    scn = synthesize_scenario(metro_line, SynthesisParams(n_vehicles=2, duration_s=900.0, mirrored=True))
    a, b = _series(scn, "V01"), _series(scn, "V02")
    np.testing.assert_array_equal(a[:, 0], b[:, 0])
    np.testing.assert_allclose(a[:, 1] + b[:, 1], metro_line.length, atol=2e-6)
    np.testing.assert_array_equal(a[:, 2], b[:, 2])


@pytest.mark.parametrize(
    "params",
    [
        SynthesisParams(headway_s=60.0),
        SynthesisParams(headway_s=120.0, dwell_max_s=130.0),
        SynthesisParams(n_vehicles=0),
        SynthesisParams(p_tract_max=8.0),
    ],
)
def test_invalid_parameters(metro_line, params):
    with pytest.raises(ScenarioError):
        synthesize_scenario(metro_line, params)


def test_short_cycle_leaves_out_late_departures(metro_line):
    # 46 両・120 s 間隔だと最後の組は 2640 s 発、600 s の周期には入らない
    scn = synthesize_scenario(metro_line, SynthesisParams(duration_s=600.0))
    assert len(scn) == 600
    seen = set()
    for snap in scn.snapshots:
        seen.update(snap.vehicle_ids)
    assert seen == {f"V{k + 1:02d}" for k in range(10)}
    assert set(scn.roster) == seen
    assert scn.at(599.0).n_vehicles == 10
