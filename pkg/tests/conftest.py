#!/usr/bin/env python3
"""
共通フィクスチャ
"""

from pathlib import Path

import numpy as np
import pytest

from src.core.topology import LineConfig, Snapshot, build_line, structural_matrices
from src.data.line_config import load_line

ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture(scope="module")
def two_tss_line():
    # rho = 0.0078 + 0.02 = 0.0278 ohm/km
    return build_line(LineConfig(tss_positions=[0.0, 1.0]))


@pytest.fixture(scope="module")
def three_tss_line():
    # 1 km 間隔、r = 0.02 ohm / 区間
    return build_line(LineConfig(tss_positions=[0.0, 1.0, 2.0], rho_catenary=0.005, rho_rail=0.015))


@pytest.fixture(scope="module")
def metro_line():
    return load_line(ROOT / "config" / "metro_line.json")


@pytest.fixture(scope="module")
def metro_mats(metro_line):
    return structural_matrices(metro_line)


def random_snapshot(line, rng, m_max=46, p_lo=-4.0, p_hi=4.0, time=0.0):
    m = int(rng.integers(0, m_max + 1))
    pos = rng.uniform(0.0, line.length, size=m)
    pw = rng.uniform(p_lo, p_hi, size=m)
    return Snapshot.from_records(time, [(f"V{k:02d}", x, p) for k, (x, p) in enumerate(zip(pos, pw))])


def snapshot(time, *records):
    return Snapshot.from_records(time, records)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
