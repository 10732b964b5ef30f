import numpy as np
import pytest
import scipy.sparse as sp

from dhnet.assembly import assemble
from dhnet.exceptions import DimensionError, NoConvergence, SingularKKT
from dhnet.initialization import (
    InitProblem,
    TrustRegionOptions,
    consistent_init,
    constraint_norms,
    default_anchor,
    init_constraints,
    project_onto_constraints,
)
from dhnet.verification import ManufacturedCase


def _discrete_guess(case, n_seg=10, order=3):
    """Exact state with rates taken from the discrete right-hand side."""
    case = ManufacturedCase(variant=case, n_seg=n_seg)
    ops = case.operators(order)
    lay = ops.layout
    z, zdot = case.exact_state(ops, 0.0)
    f1, f2 = ops.eval_f(0.0, z)
    zdot[lay.x1] = f1
    zdot[lay.y] = 0.0
    if ops.variant == "full":
        zdot[lay.x2] = f2
    return ops, z, zdot


def _stationarity_gap(ops, res, z_guess, zdot_guess):
    """Distance of the weighted gradient from the range of the constraint Jacobian."""
    n_x = ops.layout.n_x
    fun, jac = init_constraints(ops, 0.0, ops.variant)
    w = np.concatenate([res.zdot[:n_x], res.z])
    wg = np.concatenate([zdot_guess[:n_x], z_guess])
    sigma = np.exp2(np.round(np.log2(np.maximum(1.0, np.abs(wg)))))
    grad = (w - wg) / sigma**2
    J = jac(w).toarray()
    mu, *_ = np.linalg.lstsq(J.T, grad, rcond=None)
    return np.abs(J.T @ mu - grad).max() / max(np.abs(grad).max(), 1e-300)


def test_reduced_exact_guess_is_returned_unchanged():
    ops, z, zdot = _discrete_guess("index1")
    res = consistent_init(InitProblem(ops, z, zdot))
    assert res.iterations == 0 and res.converged
    np.testing.assert_array_equal(res.z, z)
    assert res.max_residual <= 1e-12


def test_full_exact_guess_moves_with_the_truncation_error():
    moves = []
    for n_seg in (10, 40):
        ops, z, zdot = _discrete_guess("index2", n_seg)
        res = consistent_init(InitProblem(ops, z, zdot))
        assert res.iterations <= 2 and res.max_residual <= 1e-10
        moves.append(np.abs(res.z - z).max())
    assert moves[1] < moves[0] / 4


@pytest.mark.parametrize("variant", ["index1", "index2"])
def test_perturbed_velocities(variant):
    ops, z, zdot = _discrete_guess(variant)
    lay = ops.layout
    guess = z.copy()
    guess[lay.x2] += 0.01
    res = consistent_init(InitProblem(ops, guess, zdot))
    assert res.converged
    assert res.max_residual <= 1e-10
    assert res.kkt_residual <= 1e-8
    assert np.abs(res.z - guess).max() <= 0.1
    # independent feasibility check
    norms = constraint_norms(ops, 0.0, res.z, res.zdot)
    assert max(norms.values()) <= 1e-10
    assert _stationarity_gap(ops, res, guess, zdot) <= 1e-6


@pytest.mark.parametrize("variant", ["index1", "index2"])
def test_idempotent(variant):
    ops, z, zdot = _discrete_guess(variant)
    z = z.copy()
    z[ops.layout.x2] *= 1.02
    first = consistent_init(InitProblem(ops, z, zdot))
    again = consistent_init(InitProblem(ops, first.z, first.zdot))
    assert np.abs(again.z - first.z).max() <= 1e-12 * max(1.0, np.abs(first.z).max())
    assert np.abs(again.zdot - first.zdot).max() <= 1e-12 * max(1.0, np.abs(first.zdot).max())


@pytest.mark.parametrize("variant", ["full", "reduced"])
def test_fixture_from_anchor(two_consumer, variant):
    ops = assemble(two_consumer, 2, variant)
    z, zdot = default_anchor(ops)
    res = consistent_init(InitProblem(ops, z, zdot))
    assert res.converged and res.max_residual <= 1e-10 and res.kkt_residual <= 1e-8
    assert np.all(res.z[ops.layout.x2] > 0)


def test_full_result_against_reduced_constraints(two_consumer):
    # the reduced model drops the velocity rate, so only the f2 block can
    # differ, and by exactly that rate
    ops = assemble(two_consumer, 1, "full")
    res = consistent_init(InitProblem(ops, *default_anchor(ops)))
    reduced = constraint_norms(ops, 0.0, res.z, res.zdot, "reduced")
    vdot = np.abs(res.zdot[ops.layout.x2]).max()
    assert max(v for k, v in reduced.items() if k != "f2") <= 1e-10
    assert reduced["f2"] == pytest.approx(vdot, rel=1e-6, abs=1e-12)
    assert vdot < 1e-5


def test_anchor_shape(two_consumer):
    ops = assemble(two_consumer)
    z, zdot = default_anchor(ops)
    lay = ops.layout
    assert z.shape == zdot.shape == (lay.size,)
    assert not zdot.any()
    mass, *_ = ops.junction_balances(0.0, z)
    assert np.abs(mass).max() <= 1e-12


def test_wrong_guess_size(two_consumer):
    ops = assemble(two_consumer)
    with pytest.raises(DimensionError):
        InitProblem(ops, np.zeros(3))


def test_iteration_cap(two_consumer):
    ops = assemble(two_consumer, 1, "full")
    z, zdot = default_anchor(ops)
    z = z * 1.3
    with pytest.raises(NoConvergence):
        consistent_init(InitProblem(ops, z, zdot), TrustRegionOptions(max_iter=1))


def test_contradictory_constraints_are_not_silently_accepted():
    # x = 1 and x = 2 at once: rank deficient and infeasible
    def fun(w):
        return np.array([w[0] - 1.0, w[0] - 2.0])

    def jac(w):
        return sp.csr_matrix(np.array([[1.0, 0.0], [1.0, 0.0]]))

    with pytest.raises((SingularKKT, NoConvergence)):
        project_onto_constraints(fun, jac, np.zeros(2), blocks=[("a", slice(0, 1)), ("b", slice(1, 2))])


def test_rank_deficiency_names_the_block():
    def fun(w):
        return np.array([w[0] - 1.0, w[1] + w[2], 2 * w[1] + 2 * w[2]])

    def jac(w):
        return sp.csr_matrix(np.array([[1.0, 0, 0], [0, 1, 1], [0, 2, 2]]))

    with pytest.raises(SingularKKT, match="'pair'"):
        project_onto_constraints(fun, jac, np.zeros(3), blocks=[("single", slice(0, 1)), ("pair", slice(1, 3))])


def test_projection_on_a_circle():
    # closest point on the unit circle to (2, 2) is (1, 1) / sqrt(2)
    def fun(w):
        return np.array([w @ w - 1.0])

    def jac(w):
        return sp.csr_matrix(2.0 * w[None, :])

    res = project_onto_constraints(fun, jac, np.array([2.0, 2.0]))
    np.testing.assert_allclose(res.w, np.full(2, np.sqrt(0.5)), atol=1e-10)
    assert res.converged and res.kkt_residual <= 1e-8
