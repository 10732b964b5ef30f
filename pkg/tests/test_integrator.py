import math

import numpy as np
import pytest
import scipy.sparse as sp

from dhnet.assembly import assemble
from dhnet.exceptions import InconsistentStart, NewtonDivergence, SingularMatrixError, StepUnderflow
from dhnet.initialization import InitProblem, consistent_init, default_anchor
from dhnet.integrator import BdfStepper, GenericDae, IntegratorConfig, advance_one_step, integrate
from dhnet.verification import ManufacturedCase


def decoupled():
    """x' = -x, 0 = y - x with x(0) = y(0) = 1."""

    def residual(t, z, zdot):
        return np.array([zdot[0] + z[0], z[1] - z[0]])

    def jacobian(t, z, zdot):
        return sp.csc_matrix([[1.0, 0.0], [-1.0, 1.0]]), sp.csc_matrix([[1.0, 0.0], [0.0, 0.0]])

    return GenericDae(residual, 2, [True, False], jacobian)


START = (np.array([1.0, 1.0]), np.array([-1.0, 0.0]))


@pytest.mark.parametrize("rtol", [1e-3, 1e-4])
def test_decoupled_endpoint(rtol):
    traj = integrate(decoupled(), *START, (0.0, 1.0), IntegratorConfig(rtol=rtol, atol=rtol * 1e-2))
    assert traj.times[0] == 0.0 and traj.times[-1] == 1.0
    assert np.all(np.diff(traj.times) > 0)
    err = np.abs(traj.states[-1] - math.exp(-1)).max()
    assert err <= 10 * rtol
    assert traj.states[-1][1] == pytest.approx(traj.states[-1][0], abs=1e-12)


@pytest.mark.parametrize("order", [1, 2])
def test_fixed_step_order(order):
    errs, steps = [], [0.05, 0.025, 0.0125, 0.00625]
    for h in steps:
        cfg = IntegratorConfig(fixed_step=h, max_order=order)
        traj = integrate(decoupled(), *START, (0.0, 1.0), cfg)
        errs.append(abs(traj.states[-1][0] - math.exp(-1)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - order) < 0.3), rates


def test_linear_dae_needs_one_newton_iteration():
    stepper = BdfStepper(decoupled(), 0.0, *START, 0.01, IntegratorConfig())
    for _ in range(5):
        out = advance_one_step(stepper)
        assert out.accepted and out.newton_iters == 1


def test_knot_is_a_step_endpoint():
    # the forcing bends at t = 10
    def forcing(t):
        return min(t, 10.0)

    def residual(t, z, zdot):
        return np.array([zdot[0] + z[0] - forcing(t), z[1] - 2.0 * z[0]])

    system = GenericDae(residual, 2, [True, False], knots=[10.0])
    z0 = np.zeros(2)
    traj = integrate(system, z0, np.zeros(2), (0.0, 20.0), IntegratorConfig(rtol=1e-6, atol=1e-8))
    assert 10.0 in traj.times
    assert 10.0 in [traj.times[i] for i in traj.restarts]
    # x = t - 1 + e^{-t} up to the knot
    k = int(np.flatnonzero(traj.times == 10.0)[0])
    assert traj.states[k][0] == pytest.approx(9.0 + math.exp(-10.0), rel=1e-4)


def test_singular_iteration_matrix():
    # duplicated algebraic equation: y1 + y2 = x twice
    def residual(t, z, zdot):
        return np.array([zdot[0] + z[0], z[1] + z[2] - z[0], z[1] + z[2] - z[0]])

    system = GenericDae(residual, 3, [True, False, False])
    z0 = np.array([1.0, 0.5, 0.5])
    with pytest.raises((SingularMatrixError, NewtonDivergence)):
        integrate(system, z0, np.array([-1.0, 0.0, 0.0]), (0.0, 1.0))


def test_inconsistent_start():
    with pytest.raises(InconsistentStart):
        integrate(decoupled(), np.array([1.0, 2.0]), np.array([-1.0, 0.0]), (0.0, 1.0))


def test_step_limit():
    with pytest.raises(StepUnderflow):
        integrate(decoupled(), *START, (0.0, 1.0), IntegratorConfig(rtol=1e-10, atol=1e-12, max_steps=5))


def test_bad_config():
    with pytest.raises(ValueError):
        IntegratorConfig(rtol=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(max_order=3)
    with pytest.raises(ValueError):
        integrate(decoupled(), *START, (1.0, 0.0))


def test_dense_output():
    traj = integrate(decoupled(), *START, (0.0, 1.0), IntegratorConfig(rtol=1e-6, atol=1e-8))
    np.testing.assert_allclose(traj.sol(traj.times[3]), traj.states[3], rtol=1e-12)
    ts = np.linspace(0.0, 1.0, 11)
    np.testing.assert_allclose(traj.sol(ts)[:, 0], np.exp(-ts), rtol=1e-4)
    with pytest.raises(ValueError):
        traj.sol(1.5)


def test_callback_sees_every_accepted_step():
    seen = []
    traj = integrate(decoupled(), *START, (0.0, 1.0), callback=lambda t, z, zdot: seen.append(t))
    assert seen == list(traj.times[1:])


def test_self_convergence_on_manufactured_case():
    case = ManufacturedCase(n_seg=10)
    ops = case.operators(1)
    z0, zdot0 = case.exact_state(ops, 0.0)
    start = consistent_init(InitProblem(ops, z0, zdot0))
    loose = integrate(ops, start.z, start.zdot, (0.0, 1.0), IntegratorConfig(rtol=1e-4, atol=1e-6))
    tight = integrate(ops, start.z, start.zdot, (0.0, 1.0), IntegratorConfig(rtol=1e-10, atol=1e-12))
    ts = np.linspace(0.0, 1.0, 21)
    a, b = loose.sol(ts), tight.sol(ts)
    # deviation in units of the loose run's error weights 1 / (atol + rtol |z|)
    mask = ops.differential
    weighted = (a - b)[:, mask] / (1e-6 + 1e-4 * np.abs(b[:, mask]))
    rms = np.sqrt(np.mean(weighted**2, axis=1))
    assert rms.max() <= 100


def test_fixture_feasibility_along_trajectory(two_consumer):
    ops = assemble(two_consumer, 1, "full")
    start = consistent_init(InitProblem(ops, *default_anchor(ops)))
    cfg = IntegratorConfig()
    traj = integrate(ops, start.z, start.zdot, (0.0, 600.0), cfg)
    tol = 10 * max(cfg.rtol, cfg.atol)
    for t, z, zdot in zip(traj.times, traj.states, traj.derivatives):
        g1, g2 = ops.eval_g(t, z)
        assert np.abs(g1).max() <= tol * max(1.0, np.abs(z).max())
        mass, mass_flux, _, _ = ops.junction_balances(t, z)
        assert np.abs(mass / mass_flux).max() <= tol
        assert np.abs(ops.hidden_constraint(t, z, zdot)).max() <= 1e-3 * np.abs(ops.demand(t)).max()
