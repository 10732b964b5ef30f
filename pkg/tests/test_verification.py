import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dhnet.exceptions import LatticeMismatch, OutOfHorizon
from dhnet.integrator import IntegratorConfig
from dhnet.verification import (
    ManufacturedCase,
    convergence_study,
    error_norms,
    observed_order,
    study_table,
    trajectory_difference,
)

E = math.e


def test_exact_values():
    case = ManufacturedCase()
    assert case.velocity("1", 0.0) == 0.5
    assert case.temperature("1", 0.0, 0.0) == pytest.approx(2.0, rel=1e-15)


def test_literal_t6_value():
    shifted = (2 + math.exp(1.5)) * math.exp(2.5) * 2 / 6 + 5
    case = ManufacturedCase(literal_t6=True)
    assert case.temperature("6", 0.0, 0.0) == pytest.approx(shifted, rel=1e-14)
    assert ManufacturedCase().temperature("6", 0.0, 0.0) == pytest.approx(shifted - 5, rel=1e-14)


@pytest.mark.parametrize("t", np.linspace(0.0, 1.0, 5))
def test_mass_balances(t):
    case = ManufacturedCase()
    v = {p: case.velocity(p, t) for p in "123456"}
    assert v["2"] + v["3"] == pytest.approx(v["6"], rel=1e-15)
    assert v["4"] + v["5"] == pytest.approx(v["1"], rel=1e-15)
    assert v["2"] == pytest.approx(2 / (6 - 3 * t), rel=1e-15)


@settings(max_examples=5, deadline=None)
@given(st.floats(0.0, 1.0))
def test_coupling_identities_at_random_times(t):
    case = ManufacturedCase()
    # mixing at node 4 and energy balance at both junctions
    assert case.temperature("4", t, 0.0) == pytest.approx(case.temperature("5", t, 0.0), rel=1e-14)
    assert case.temperature("4", t, 0.0) == pytest.approx(case.temperature("1", t, 1.0), rel=1e-14)
    flux = lambda p, x: case.velocity(p, t) * case.temperature(p, t, x)  # noqa: E731
    assert flux("6", 0.0) == pytest.approx(flux("2", 1.0) + flux("3", 1.0), rel=1e-13)
    for variant in ("index1", "index2"):
        c = ManufacturedCase(variant)
        assert c.pressure("1", t, 1) == pytest.approx(c.pressure("4", t, 0), rel=1e-14, abs=1e-14)
        assert c.pressure("1", t, 1) == pytest.approx(c.pressure("5", t, 0), rel=1e-14, abs=1e-14)
        assert c.pressure("2", t, 1) == pytest.approx(c.pressure("6", t, 0), rel=1e-14, abs=1e-14)


def test_demand_identity():
    case = ManufacturedCase()
    assert case.demand(0, 0.0) == pytest.approx(math.pi / 3 * E * (2 * E**1.5 - 1), rel=1e-14)


def test_rates_match_finite_differences():
    case = ManufacturedCase()
    h = 1e-6
    for p in "123456":
        fd = (case.temperature(p, 0.5 + h, 0.3) - case.temperature(p, 0.5 - h, 0.3)) / (2 * h)
        assert case.temperature_rate(p, 0.5, 0.3) == pytest.approx(fd, rel=1e-7)
        fd = (case.velocity(p, 0.5 + h) - case.velocity(p, 0.5 - h)) / (2 * h)
        assert case.velocity_rate(p, 0.5) == pytest.approx(fd, rel=1e-7)


def test_out_of_horizon():
    case = ManufacturedCase()
    with pytest.raises(OutOfHorizon):
        case.velocity("1", 1.5)
    with pytest.raises(OutOfHorizon):
        case.exact_state(case.operators(), -0.1)


def test_unknown_variant():
    with pytest.raises(ValueError):
        ManufacturedCase(variant="index3")


# ------------------------------------------------------------------ norms
@pytest.fixture(scope="module")
def lattice():
    case = ManufacturedCase(n_seg=4)
    ops = case.operators()
    times = np.linspace(0.0, 1.0, 11)
    exact = np.array([case.exact_state(ops, t)[0] for t in times])
    return ops, times, exact


def test_identical_trajectories_have_zero_error(lattice):
    ops, times, exact = lattice
    r = error_norms(times, exact, exact, ops)
    assert (r.L1, r.L2, r.Linf) == (0.0, 0.0, 0.0)


def test_velocity_offset_l1(lattice):
    ops, times, exact = lattice
    numeric = exact.copy()
    numeric[:, ops.layout.x2.start] += 1.0
    r = error_norms(times, numeric, exact, ops)
    n_t = times.size - 1
    assert r.L1 == pytest.approx((1.0 / n_t) * (n_t + 1), rel=1e-14)
    assert r.Linf == pytest.approx(1.0 / n_t, rel=1e-14)


def test_time_refinement_of_l2(lattice):
    ops, _, _ = lattice
    lay = ops.layout

    def field(times):
        err = np.zeros((times.size, lay.size))
        err[:, lay.x2] = np.sin(np.pi * times)[:, None]
        return err

    coarse = np.linspace(0.0, 1.0, 21)
    fine = np.linspace(0.0, 1.0, 41)
    zero = lambda t: np.zeros((t.size, lay.size))  # noqa: E731
    l2c = error_norms(coarse, field(coarse), zero(coarse), ops).L2
    l2f = error_norms(fine, field(fine), zero(fine), ops).L2
    # both approximate sqrt(N * int sin^2) = sqrt(N / 2)
    expected = math.sqrt(lay.N / 2)
    assert abs(l2f - expected) < abs(l2c - expected) + 1e-12
    assert l2c == pytest.approx(expected, rel=0.05)


def test_lattice_mismatch(lattice):
    ops, times, exact = lattice
    with pytest.raises(LatticeMismatch):
        error_norms(times[:-1], exact, exact, ops)
    with pytest.raises(LatticeMismatch):
        error_norms(times, exact[:, :-1], exact[:, :-1], ops)
    uneven = times.copy()
    uneven[3] += 0.01
    with pytest.raises(LatticeMismatch):
        error_norms(uneven, exact, exact, ops)


def test_observed_order():
    assert observed_order(4e-2, 1e-2, 0.2, 0.1) == pytest.approx(2.0)


# --------------------------------------------------------------- studies
def test_single_row_study():
    rows = convergence_study("index1", [1], [8], IntegratorConfig(rtol=1e-6, atol=1e-8), n_times=4)
    assert len(rows) == 1 and rows[0].observed_order is None and not rows[0].stagnated
    table = study_table(rows)
    assert set(table[0]) == {"order", "segments", "L1", "L2", "Linf", "observed_order", "stagnated", "cpu_time"}
    assert table[0]["L2"] > 0 and rows[0].report.meta["variant"] == "index1"


@pytest.mark.slow
def test_order1_study():
    rows = convergence_study("index2", [1], [10, 20, 40], n_times=10)
    orders = [r.observed_order for r in rows[1:]]
    assert all(abs(p - 1) < 0.4 for p in orders), orders


# -------------------------------------------------- trajectory comparison
traj_values = arrays(np.float64, (6, 2), elements=st.floats(-1e3, 1e3))


@settings(max_examples=50, deadline=None)
@given(traj_values, traj_values, traj_values)
def test_comparison_is_a_metric(a, b, c):
    ta = np.linspace(0.0, 1.0, 6)
    tb = np.array([0.0, 0.1, 0.35, 0.5, 0.8, 1.0])
    ab = trajectory_difference(ta, a, tb, b)
    ba = trajectory_difference(tb, b, ta, a)
    for norm in ("L1", "L2", "Linf"):
        assert ab[norm] >= 0
        assert ab[norm] == pytest.approx(ba[norm], rel=1e-12, abs=1e-9)
    ac = trajectory_difference(ta, a, ta, c)
    cb = trajectory_difference(ta, c, tb, b)
    for norm in ("L1", "L2", "Linf"):
        assert ab[norm] <= ac[norm] + cb[norm] + 1e-9 * (1 + ab[norm])


def test_comparison_of_identical_trajectories():
    t = np.linspace(0.0, 2.0, 5)
    a = np.random.default_rng(0).normal(size=(5, 3))
    d = trajectory_difference(t, a, t, a)
    assert (d["L1"], d["L2"], d["Linf"]) == (0.0, 0.0, 0.0)
    np.testing.assert_array_equal(d["relative_L2"], 0.0)


def test_comparison_exact_integrals():
    t = np.array([0.0, 1.0])
    a = np.array([[1.0], [-1.0]])
    d = trajectory_difference(t, a, t, np.zeros((2, 1)))
    # |1 - 2t| integrates to 1/2, (1 - 2t)^2 to 1/3
    assert d["L1"] == pytest.approx(0.5)
    assert d["L2"] == pytest.approx(math.sqrt(1 / 3))
    assert d["Linf"] == 1.0


def test_comparison_mismatch():
    t = np.linspace(0.0, 1.0, 3)
    with pytest.raises(LatticeMismatch):
        trajectory_difference(t, np.zeros((3, 2)), t, np.zeros((3, 3)))
    with pytest.raises(LatticeMismatch):
        trajectory_difference(t, np.zeros((3, 2)), t * 2, np.zeros((3, 2)))
