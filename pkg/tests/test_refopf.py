#!/usr/bin/env python3
"""
pytest tests/test_refopf.py
"""

import numpy as np
import pytest

from src.core.powerflow import solution_cost
from src.core.quasiopf import QuasiOpfOptions, quasi_opf
from src.core.topology import LineConfig, assemble_snapshot, build_line
from src.research.refopf import (
    ReducedOpfProblem,
    check_gradient,
    extended_log_barrier,
    smooth_plus,
    solve_opf,
)

from .conftest import snapshot


@pytest.fixture(scope="module")
def small_line():
    return build_line(LineConfig(tss_positions=[0.0, 2.0, 4.0], p_lim=3.0, p_aux=0.2))


def test_smooth_plus_error_bound():
    x = np.linspace(-5.0, 5.0, 2001)
    for eps in (10.0, 1.0, 0.1, 0.001):
        val, der = smooth_plus(x, eps)
        assert np.all(np.abs(val - np.maximum(x, 0.0)) <= eps / 2 + 1e-15)
        assert np.all((der >= 0) & (der <= 1))


def test_barrier_is_smooth_at_switch():
    delta = 1e-3
    lo, dlo = extended_log_barrier(np.array([delta - 1e-12]), delta)
    hi, dhi = extended_log_barrier(np.array([delta]), delta)
    assert lo[0] == pytest.approx(hi[0], abs=1e-8)
    assert dlo[0] == pytest.approx(dhi[0], rel=1e-6)
    val, _ = extended_log_barrier(np.array([-1.0]), delta)
    assert np.isfinite(val[0])


def test_gradient_matches_central_differences(small_line, rng):
    net = assemble_snapshot(small_line, snapshot(0.0, ("A", 1.3, 2.5), ("B", 3.1, -1.2)))
    problem = ReducedOpfProblem(net, pf_tol=1e-10)
    for _ in range(5):
        x = rng.uniform(0.2, 0.8, small_line.n_tss)
        assert check_gradient(problem, x, eps=0.1, mu=1e-3) < 1e-4


def test_no_vehicles_costs_auxiliary_load(small_line):
    res = solve_opf(small_line, snapshot(0.0))
    assert res.objective == pytest.approx(float(small_line.p_aux.sum()), rel=1e-9)
    np.testing.assert_allclose(res.solution.tss_powers, 0.0, atol=1e-12)


def test_symmetric_instance_gives_symmetric_voltages(two_tss_line):
    res = solve_opf(two_tss_line, snapshot(0.0, ("A", 0.5, 1.0)))
    assert res.u_s_opt[0] == pytest.approx(res.u_s_opt[1], abs=1e-3)
    assert res.objective == pytest.approx(solution_cost(res.solution), rel=1e-12)


def test_reference_is_at_least_as_good_as_quasi(small_line):
    snap = snapshot(0.0, ("A", 2.2, 4.0))
    ref = solve_opf(small_line, snap)
    quasi = quasi_opf(small_line, snap, QuasiOpfOptions(max_outer=30))
    assert ref.objective <= quasi.objective * (1 + 1e-3)
    assert np.all(ref.solution.tss_powers <= small_line.p_lim + 1e-6)
    assert np.all(ref.u_s_opt >= small_line.u_tss_min - 1e-12)
    assert np.all(ref.u_s_opt <= small_line.u_tss_max + 1e-12)
