#!/usr/bin/env python3
"""
pytest tests/test_benchmark.py
"""

import pytest

from src.data.scenario import Scenario
from src.research.benchmark import benchmark, unique_labels

from .conftest import snapshot


def test_unique_labels():
    assert unique_labels(["quasi", "ref", "quasi", "quasi"]) == ["quasi", "ref", "quasi#2", "quasi#3"]


def test_single_instant_single_sample(metro_line):
    scn = Scenario((snapshot(0.0, ("A", 5.0, 2.0), ("B", 20.0, -1.0)),))
    rep = benchmark(metro_line, scn, ["quasi", "quasi", "baseline"], warmup=0)
    assert list(rep.summary["label"]) == ["quasi", "quasi#2", "baseline"]
    assert list(rep.summary["n"]) == [1, 1, 1]
    assert (rep.summary["failed"] == 0).all()
    assert len(rep.timings) == 3
    assert "quasi_vs_baseline" in rep.speedups
    assert sum(rep.histograms["quasi"].values()) == 1


def test_no_methods(metro_line):
    with pytest.raises(ValueError):
        benchmark(metro_line, Scenario(()), [])
